"""Deterministic synthetic scenes, their language, and the stand-in featurizers.

A scene is a handful of colored shapes placed on a coarse grid inside one
global setting ("snow", "forest", ...). Referring queries and a caption are
generated from a small template grammar, so noun phrases can be recovered
exactly without an NLP toolkit.

The detector is not learned. :func:`featurize_instance` turns an object into a
raw embedding built from attribute one-hot blocks, box geometry and
scene-context statistics, plus Gaussian noise. Distractor hypotheses carry no
attributes and should end up with low objectness.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import TextSequence
from .config import WorldConfig
from .geometry import pairwise_iou, to_ccwh

CORPUS_SCHEMA_VERSION = 1
BOS, EOS = "<s>", "</s>"
FUNCTION_WORDS = ("a", "the", "and", "in", "leftmost", "rightmost")


class UnsatisfiableConfigError(ValueError):
    pass


class UnknownTokenError(KeyError):
    pass


class SchemaError(ValueError):
    pass


# --------------------------------------------------------------------------- vocabulary


class Vocabulary:
    """Closed vocabulary; ids 0 and 1 are the start/end boundary tokens."""

    def __init__(self, words):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    @classmethod
    def from_world(cls, cfg: WorldConfig) -> "Vocabulary":
        return cls([BOS, EOS, *FUNCTION_WORDS, *cfg.sizes, *cfg.colors, *cfg.shapes, *cfg.settings])

    def __len__(self) -> int:
        return len(self.words)

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def encode(self, words, boundary: bool = True) -> np.ndarray:
        try:
            ids = [self.index[w] for w in words]
        except KeyError as exc:
            raise UnknownTokenError(f"word {exc.args[0]!r} is not in the vocabulary") from None
        if boundary:
            ids = [self.bos, *ids, self.eos]
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.words[int(i)] for i in ids]


def tokenize(text: str) -> list[str]:
    return text.lower().replace(",", " ").split()


# --------------------------------------------------------------------------- scenes


@dataclass(frozen=True)
class SceneObject:
    category: str
    color: str
    size: str
    box: tuple  # (x1, y1, x2, y2)

    @property
    def triple(self) -> tuple:
        return (self.size, self.color, self.category)


@dataclass
class Query:
    words: tuple
    targets: tuple
    extra: dict = field(default_factory=dict)


@dataclass
class Phrase:
    start: int  # word positions in the caption (no boundary tokens)
    end: int
    targets: tuple


@dataclass
class Caption:
    words: tuple
    phrases: list = field(default_factory=list)


@dataclass
class Scene:
    scene_id: int
    seed: int
    setting: str
    objects: list
    queries: list
    caption: Caption

    def boxes(self) -> np.ndarray:
        return np.asarray([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)


def _draw_box(rng, cfg: WorldConfig, cell: int, size: str):
    lo, hi = cfg.small_extent if size == "small" else cfg.large_extent
    w, h = rng.uniform(lo, hi, size=2)
    cs = 1.0 / cfg.grid
    row, col = divmod(int(cell), cfg.grid)
    cx = (col + 0.5) * cs + rng.uniform(-1, 1) * (cs - w) / 2
    cy = (row + 0.5) * cs + rng.uniform(-1, 1) * (cs - h) / 2
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _draw_objects(rng, cfg: WorldConfig):
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    cells = rng.choice(cfg.grid * cfg.grid, size=n, replace=False)
    objects = []
    for k in range(n):
        if k > 0 and rng.random() < cfg.duplicate_prob:
            src = objects[int(rng.integers(k))]
            shape, color, size = src.category, src.color, src.size
        else:
            shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
            color = cfg.colors[int(rng.integers(len(cfg.colors)))]
            size = cfg.sizes[int(rng.integers(len(cfg.sizes)))]
        for _ in range(100):
            box = _draw_box(rng, cfg, cells[k], size)
            if not objects:
                break
            ious = pairwise_iou(np.asarray([box]), np.asarray([o.box for o in objects]))
            if ious.max() <= cfg.overlap_cap:
                break
        else:
            raise UnsatisfiableConfigError("could not place objects under the overlap cap")
        objects.append(SceneObject(shape, color, size, tuple(float(x) for x in box)))
    return objects


def _mentionable(obj: SceneObject, held_out: set, split: str) -> bool:
    return split != "train" or (obj.color, obj.category) not in held_out


def _query_candidates(objects, setting, cfg: WorldConfig, held_out, split):
    groups: dict[tuple, list[int]] = {}
    for i, o in enumerate(objects):
        groups.setdefault(o.triple, []).append(i)
    out = []
    tail = ("in", "the", setting)
    for triple, members in groups.items():
        if not _mentionable(objects[members[0]], held_out, split):
            continue
        if len(members) == 1 and "type" in cfg.templates:
            out.append(Query(("the", *triple, *tail), (members[0],)))
        elif len(members) > 1 and "relation" in cfg.templates:
            cx = [objects[i].box[0] + objects[i].box[2] for i in members]
            left = members[int(np.argmin(cx))]
            right = members[int(np.argmax(cx))]
            out.append(Query(("the", "leftmost", *triple, *tail), (left,)))
            out.append(Query(("the", "rightmost", *triple, *tail), (right,)))
    return out


def _caption(objects, setting, rng, cfg: WorldConfig, held_out, split) -> Caption | None:
    triples = []
    for o in objects:
        if _mentionable(o, held_out, split) and o.triple not in triples:
            triples.append(o.triple)
    if not triples:
        return None
    order = rng.permutation(len(triples))[: cfg.caption_max_objects]
    words: list[str] = []
    phrases = []
    for n, t in enumerate(order):
        if n:
            words.append("and")
        triple = triples[int(t)]
        start = len(words)
        words.extend(("a", *triple))
        targets = tuple(i for i, o in enumerate(objects) if o.triple == triple)
        phrases.append(Phrase(start, len(words), targets))
    words.extend(("in", "the", setting))
    return Caption(tuple(words), phrases)


def gen_scene(seed: int, config: WorldConfig, scene_id: int = 0, split: str = "train") -> Scene:
    """Generate one scene; identical ``(seed, config, scene_id, split)`` gives an identical scene.

    ``split='train'`` keeps held-out color/shape pairs out of every query and
    caption. ``split='caption'`` drops queries and phrase annotations.
    """
    if split not in ("train", "eval", "caption"):
        raise ValueError(f"unknown split {split!r}")
    config.validate()
    rng = np.random.default_rng([seed, scene_id])
    held_out = {tuple(p) for p in config.held_out}
    text_split = "eval" if split == "eval" else "train"
    for _ in range(1000):
        setting = config.settings[int(rng.integers(len(config.settings)))]
        objects = _draw_objects(rng, config)
        caption = _caption(objects, setting, rng, config, held_out, text_split)
        if caption is not None:
            break
    else:
        raise UnsatisfiableConfigError("no scene with a mentionable object could be drawn")

    queries: list[Query] = []
    if split != "caption":
        cands = _query_candidates(objects, setting, config, held_out, text_split)
        q = config.queries_per_scene
        if cands and q:
            picks = list(rng.permutation(len(cands))[:q])
            if len(picks) < q:
                picks += list(rng.integers(len(cands), size=q - len(picks)))
            queries = [cands[int(i)] for i in picks]
    else:
        caption = Caption(caption.words, [])
    return Scene(scene_id, int(seed), setting, objects, queries, caption)


def gen_corpus(seed: int, config: WorldConfig, n: int, split: str = "train", start_id: int = 0) -> list[Scene]:
    return [gen_scene(seed, config, start_id + i, split) for i in range(n)]


# Scene-id offsets keep train / eval / caption-only corpora disjoint.
SPLIT_OFFSETS = {"train": 0, "eval": 10_000_000, "caption": 20_000_000}


def default_corpus(seed: int, config: WorldConfig, split: str, n: int | None = None) -> list[Scene]:
    size = {"train": config.n_train, "eval": config.n_eval, "caption": config.n_caption}[split]
    return gen_corpus(seed, config, size if n is None else n, split, SPLIT_OFFSETS[split])


# --------------------------------------------------------------------------- serialization


def scene_to_record(scene: Scene) -> dict:
    return {
        "schema_version": CORPUS_SCHEMA_VERSION,
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "setting": scene.setting,
        "objects": [
            {"category": o.category, "color": o.color, "size": o.size, "box": list(o.box)}
            for o in scene.objects
        ],
        "queries": [{"tokens": list(q.words), "targets": list(q.targets), **q.extra} for q in scene.queries],
        "caption": {
            "tokens": list(scene.caption.words),
            "phrases": [{"span": [p.start, p.end], "targets": list(p.targets)} for p in scene.caption.phrases],
        },
    }


_QUERY_EXTRA = {"score", "accepted", "box"}


def scene_from_record(rec: dict) -> Scene:
    if rec.get("schema_version") != CORPUS_SCHEMA_VERSION:
        raise SchemaError(f"scene schema_version {rec.get('schema_version')!r} != {CORPUS_SCHEMA_VERSION}")
    try:
        objects = [
            SceneObject(o["category"], o["color"], o["size"], tuple(float(x) for x in o["box"]))
            for o in rec["objects"]
        ]
        queries = []
        for q in rec["queries"]:
            unknown = set(q) - {"tokens", "targets"} - _QUERY_EXTRA
            if unknown:
                raise SchemaError(f"unknown query fields {sorted(unknown)}")
            extra = {k: q[k] for k in _QUERY_EXTRA if k in q}
            queries.append(Query(tuple(q["tokens"]), tuple(int(t) for t in q["targets"]), extra))
        cap = rec["caption"]
        phrases = [Phrase(int(p["span"][0]), int(p["span"][1]), tuple(p["targets"])) for p in cap.get("phrases", [])]
        scene = Scene(int(rec["scene_id"]), int(rec["seed"]), rec["setting"], objects, queries,
                      Caption(tuple(cap["tokens"]), phrases))
    except (KeyError, TypeError, IndexError) as exc:
        raise SchemaError(f"malformed scene record: {exc!r}") from exc
    n = len(objects)
    for q in queries:
        if not q.targets or any(not 0 <= t < n for t in q.targets):
            raise SchemaError(f"scene {scene.scene_id}: query targets out of range")
    for p in phrases:
        if not (0 <= p.start < p.end <= len(scene.caption.words)):
            raise SchemaError(f"scene {scene.scene_id}: caption span out of range")
    return scene


def corpus_lines(scenes) -> list[str]:
    return [json.dumps(scene_to_record(s), sort_keys=True, separators=(",", ":")) for s in scenes]


def write_corpus(path, scenes) -> str:
    """Write line-delimited JSON; returns the sha256 of the bytes written."""
    data = ("\n".join(corpus_lines(scenes)) + "\n").encode("utf-8") if scenes else b""
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_corpus(path) -> list[Scene]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON") from exc
            scenes.append(scene_from_record(rec))
    return scenes


def corpus_hash(scenes) -> str:
    h = hashlib.sha256()
    for line in corpus_lines(scenes):
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


# --------------------------------------------------------------------------- featurizers


@dataclass
class InstanceHypothesis:
    embed: np.ndarray
    objectness_logit: float  # detector prior; trained heads replace it
    box_pred: np.ndarray  # center form


class FeatureLayout:
    """Column ranges of the raw instance embedding."""

    def __init__(self, cfg: WorldConfig):
        blocks = [
            ("shape", len(cfg.shapes)),
            ("color", len(cfg.colors)),
            ("size", len(cfg.sizes)),
            ("setting", len(cfg.settings)),
            ("geometry", 4),
            ("x_rank", 1),
            ("group_left", 1),
            ("group_right", 1),
            ("group_count", 1),
            ("shape_counts", len(cfg.shapes)),
            ("color_counts", len(cfg.colors)),
        ]
        self.slices = {}
        start = 0
        for name, width in blocks:
            self.slices[name] = slice(start, start + width)
            start += width
        self.dim = start

    def __getitem__(self, name) -> slice:
        return self.slices[name]


class _CallCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0

    def bump(self, n: int = 1):
        with self._lock:
            self.calls += n

    def reset(self):
        with self._lock:
            self.calls = 0


featurize_counter = _CallCounter()


def _scene_context(scene: Scene, cfg: WorldConfig):
    n = len(scene.objects)
    cx = np.array([(o.box[0] + o.box[2]) / 2 for o in scene.objects])
    order = np.lexsort((np.arange(n), cx))
    rank = np.empty(n)
    rank[order] = np.arange(n)
    shape_counts = np.array([sum(o.category == s for o in scene.objects) for s in cfg.shapes]) / n
    color_counts = np.array([sum(o.color == c for o in scene.objects) for c in cfg.colors]) / n
    return cx, rank / max(n - 1, 1), shape_counts, color_counts


def _noise(rng, layout: FeatureLayout, cfg: WorldConfig):
    eps = rng.normal(0.0, 1.0, size=layout.dim)
    scale = np.full(layout.dim, cfg.feature_noise)
    scale[layout["geometry"]] = cfg.box_noise
    return eps * scale


def featurize_instance(obj: SceneObject, scene: Scene, noise_seed: int, config: WorldConfig,
                       obj_index: int | None = None) -> InstanceHypothesis:
    """Raw instance embedding of a real object (stand-in for a detector output)."""
    featurize_counter.bump()
    if obj_index is None:
        obj_index = next(i for i, o in enumerate(scene.objects) if o is obj or o == obj)
    layout = FeatureLayout(config)
    v = np.zeros(layout.dim)
    v[layout["shape"].start + config.shapes.index(obj.category)] = 1.0
    v[layout["color"].start + config.colors.index(obj.color)] = 1.0
    v[layout["size"].start + config.sizes.index(obj.size)] = 1.0
    v[layout["setting"].start + config.settings.index(scene.setting)] = 1.0
    geom = to_ccwh(np.asarray(obj.box))
    v[layout["geometry"]] = geom
    cx, rank, shape_counts, color_counts = _scene_context(scene, config)
    v[layout["x_rank"]] = rank[obj_index]
    group = [i for i, o in enumerate(scene.objects) if o.triple == obj.triple]
    gcx = cx[group]
    v[layout["group_left"]] = float(cx[obj_index] == gcx.min())
    v[layout["group_right"]] = float(cx[obj_index] == gcx.max())
    v[layout["group_count"]] = len(group) / len(scene.objects)
    v[layout["shape_counts"]] = shape_counts
    v[layout["color_counts"]] = color_counts
    rng = np.random.default_rng([noise_seed, scene.scene_id, obj_index])
    v = v + _noise(rng, layout, config)
    return InstanceHypothesis(v, 4.0, v[layout["geometry"]].copy())


def featurize_distractor(scene: Scene, k: int, noise_seed: int, config: WorldConfig) -> InstanceHypothesis:
    """A background hypothesis: random box, no object attributes."""
    featurize_counter.bump()
    layout = FeatureLayout(config)
    rng = np.random.default_rng([noise_seed, scene.scene_id, 1_000_000 + k])
    w, h = rng.uniform(config.small_extent[0], config.large_extent[1], size=2)
    cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
    v = np.zeros(layout.dim)
    v[layout["setting"].start + config.settings.index(scene.setting)] = 1.0
    v[layout["geometry"]] = (cx, cy, w, h)
    _, _, shape_counts, color_counts = _scene_context(scene, config)
    v[layout["shape_counts"]] = shape_counts
    v[layout["color_counts"]] = color_counts
    v = v + _noise(rng, layout, config)
    return InstanceHypothesis(v, -4.0, v[layout["geometry"]].copy())


@dataclass
class SceneFeatures:
    hypotheses: list
    embeds: np.ndarray  # (n_hyp, d_raw)
    source: np.ndarray  # object index per hypothesis, -1 for distractors

    def __len__(self) -> int:
        return len(self.hypotheses)


def featurize_scene(scene: Scene, config: WorldConfig, noise_seed: int | None = None) -> SceneFeatures:
    """All hypotheses of a scene (objects plus distractors) in a shuffled, seeded order."""
    if noise_seed is None:
        noise_seed = scene.seed + 7919
    hyps = [featurize_instance(o, scene, noise_seed, config, i) for i, o in enumerate(scene.objects)]
    hyps += [featurize_distractor(scene, k, noise_seed, config) for k in range(config.distractors)]
    source = np.r_[np.arange(len(scene.objects)), -np.ones(config.distractors, dtype=np.int64)]
    perm = np.random.default_rng([noise_seed, scene.scene_id, 7]).permutation(len(hyps))
    hyps = [hyps[i] for i in perm]
    return SceneFeatures(hyps, np.stack([h.embed for h in hyps]), source[perm].astype(np.int64))


def featurize_tokens(token_ids, table, boundary_ids=(0, 1), spans=()) -> TextSequence:
    """Look up per-token embeddings; no mixing across positions."""
    ids = np.asarray(token_ids, dtype=np.int64)
    table = np.asarray(table)
    if ids.size and (ids.min() < 0 or ids.max() >= len(table)):
        raise UnknownTokenError(f"token id outside vocabulary of size {len(table)}")
    has_boundary = len(ids) >= 2 and ids[0] == boundary_ids[0] and ids[-1] == boundary_ids[1]
    return TextSequence(ids, table[ids].copy(), list(spans), bool(has_boundary))
