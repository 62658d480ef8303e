"""Pseudo object-phrase pairs for caption-only scenes, by grounding each noun phrase."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import pairwise_iou
from .synthworld import Caption, Phrase, Query, Scene, featurize_scene, write_corpus


class CaptionParseError(ValueError):
    pass


@dataclass(frozen=True)
class PseudoPair:
    scene_id: int
    span: tuple  # (start, end) word positions in the caption
    box: tuple  # xyxy
    score: float  # cosine similarity, before temperature scaling
    hypothesis: int
    accepted: bool


def extract_phrases(words, world) -> list[tuple]:
    """Spans of ``a SIZE COLOR SHAPE`` chunks in ``NP (and NP)* in the SETTING``."""
    words = list(words)
    slots = (("a",), world.sizes, world.colors, world.shapes)
    spans = []
    pos = 0
    while True:
        for i, allowed in enumerate(slots):
            if pos + i >= len(words) or words[pos + i] not in allowed:
                raise CaptionParseError(f"expected one of {list(allowed)[:4]} at word {pos + i}: {' '.join(words)!r}")
        spans.append((pos, pos + len(slots)))
        pos += len(slots)
        if pos < len(words) and words[pos] == "and":
            pos += 1
            continue
        break
    tail = words[pos:]
    if len(tail) != 3 or tail[:2] != ["in", "the"] or tail[2] not in world.settings:
        raise CaptionParseError(f"caption does not end with 'in the SETTING': {' '.join(words)!r}")
    return spans


def pseudo_ground(model, scene: Scene, span, threshold: float, detections=None) -> PseudoPair:
    """Best-aligned hypothesis for one caption span; lowest index wins ties."""
    det = model.detect_scene(scene) if detections is None else detections
    if len(det.embeds) == 0:
        raise ValueError(f"scene {scene.scene_id} has no instance hypotheses")
    start, end = span
    text = model.embed_text(list(scene.caption.words), span=(start + 1, end + 1))
    scores = det.embeds @ text
    best = int(np.argmax(scores))
    score = float(scores[best])
    return PseudoPair(scene.scene_id, (int(start), int(end)), tuple(float(x) for x in det.boxes_xyxy[best]),
                      score, best, bool(score >= threshold))


def pseudo_label_scene(model, scene: Scene, threshold: float) -> list[PseudoPair]:
    det = model.detect(featurize_scene(scene, model.config.world).embeds)
    spans = extract_phrases(scene.caption.words, model.config.world)
    return [pseudo_ground(model, scene, s, threshold, det) for s in spans]


def apply_pairs(scene: Scene, pairs: list[PseudoPair]) -> Scene:
    """Scene whose queries and caption phrases are the accepted pairs.

    Each pair targets the annotated object overlapping its box the most; pairs
    overlapping no object are dropped.
    """
    queries, phrases = [], []
    gt = scene.boxes()
    words = scene.caption.words
    for p in pairs:
        if not p.accepted or len(gt) == 0:
            continue
        ious = pairwise_iou(np.asarray([p.box]), gt)[0]
        j = int(np.argmax(ious))
        if ious[j] <= 0:
            continue
        s, e = p.span
        queries.append(Query(tuple(words[s:e]), (j,), {"score": p.score, "accepted": True, "box": list(p.box)}))
        phrases.append(Phrase(s, e, (j,)))
    return replace(scene, queries=queries, caption=Caption(words, phrases))


def emit_pseudo_corpus(model, scenes, threshold: float, path=None):
    """Pseudo-label every caption; returns (scenes, stats) and writes JSONL when ``path`` is given."""
    out, n_pairs, n_acc = [], 0, 0
    for scene in sorted(scenes, key=lambda s: s.scene_id):
        pairs = pseudo_label_scene(model, scene, threshold)
        n_pairs += len(pairs)
        n_acc += sum(p.accepted for p in pairs)
        out.append(apply_pairs(scene, pairs))
    stats = {"scenes": len(out), "pairs": n_pairs, "accepted": n_acc,
             "queries": sum(len(s.queries) for s in out)}
    if path is not None:
        stats["sha256"] = write_corpus(path, out)
    return out, stats


def pseudo_accuracy(model, scenes, threshold: float = -np.inf, iou_thr: float = 0.5,
                    seen_only: bool = True) -> float:
    """Fraction of annotated phrases whose grounded box overlaps one of the phrase targets."""
    held = set(map(tuple, model.config.world.held_out))
    hits = []
    for scene in scenes:
        det = model.detect(featurize_scene(scene, model.config.world).embeds)
        for ph in scene.caption.phrases:
            o = scene.objects[ph.targets[0]]
            if seen_only and (o.color, o.category) in held:
                continue
            p = pseudo_ground(model, scene, (ph.start, ph.end), threshold, det)
            tgt = scene.boxes()[list(ph.targets)]
            hits.append(bool((pairwise_iou(np.asarray([p.box]), tgt) >= iou_thr).any()))
    return float(np.mean(hits)) if hits else float("nan")
