"""Exact top-k instance retrieval over stored joint-space embeddings.

Embeddings are stored as float32; scores are always computed in float64 from
that storage so the blocked, sharded and full-sort paths agree exactly.
Equal scores are ordered by (scene_id, instance_index).
"""

from __future__ import annotations

import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import sigmoid, softmax

INDEX_MAGIC = b"IALNINDX"
INDEX_VERSION = 1

META_DTYPE = np.dtype(
    [("scene_id", "<u8"), ("instance_index", "<u4"), ("box", "<f4", (4,)), ("objectness", "<f4")]
)


class IndexFormatError(ValueError):
    pass


@dataclass(frozen=True)
class IndexEntry:
    scene_id: int
    instance_index: int
    box: tuple
    embed: np.ndarray
    objectness: float


@dataclass
class Index:
    embeds: np.ndarray  # (n, d) float32, unit rows
    meta: np.ndarray  # (n,) META_DTYPE

    def __post_init__(self):
        self.embeds = np.ascontiguousarray(self.embeds, dtype=np.float32)
        if self.embeds.ndim != 2 or len(self.embeds) != len(self.meta):
            raise ValueError("index embeddings must be a matrix with one row per entry")

    def __len__(self) -> int:
        return len(self.meta)

    @property
    def d(self) -> int:
        return self.embeds.shape[1]

    def entry(self, i: int) -> IndexEntry:
        m = self.meta[i]
        return IndexEntry(int(m["scene_id"]), int(m["instance_index"]), tuple(float(x) for x in m["box"]),
                          self.embeds[i], float(m["objectness"]))

    @classmethod
    def empty(cls, d: int) -> "Index":
        return cls(np.zeros((0, d), dtype=np.float32), np.zeros(0, dtype=META_DTYPE))


def make_index(embeds, scene_ids, instance_indices, boxes, objectness) -> Index:
    embeds = np.asarray(embeds, dtype=np.float32)
    meta = np.zeros(len(embeds), dtype=META_DTYPE)
    meta["scene_id"] = scene_ids
    meta["instance_index"] = instance_indices
    meta["box"] = boxes
    meta["objectness"] = objectness
    return Index(embeds, meta)


def build_index(scenes, model, objectness_floor: float = 0.0) -> Index:
    """One entry per hypothesis with objectness >= floor, in (scene_id, instance_index) order."""
    parts = []
    for scene in sorted(scenes, key=lambda s: s.scene_id):
        det = model.detect_scene(scene)
        if det.embeds.shape[1] != model.d_joint:
            raise ValueError("detection embedding dimension does not match the model")
        obj = det.objectness
        keep = np.flatnonzero(obj >= objectness_floor)
        parts.append((det.embeds[keep], np.full(len(keep), scene.scene_id), keep,
                      det.boxes_xyxy[keep], obj[keep]))
    if not parts:
        return Index.empty(model.d_joint)
    cols = [np.concatenate([p[i] for p in parts]) for i in range(5)]
    return make_index(*cols)


# --------------------------------------------------------------------------- query


@dataclass
class RankedRetrieval:
    query_id: int
    rows: np.ndarray  # index rows, best first
    scores: np.ndarray
    scene_ids: np.ndarray
    instance_indices: np.ndarray
    boxes: np.ndarray  # (k, 4) xyxy

    def __len__(self) -> int:
        return len(self.rows)

    def records(self) -> list[dict]:
        return [
            {"rank": r, "score": float(self.scores[r]), "scene_id": int(self.scene_ids[r]),
             "instance_index": int(self.instance_indices[r]), "box": [float(x) for x in self.boxes[r]]}
            for r in range(len(self.rows))
        ]


def _block_scores(index: Index, lo: int, hi: int, q: np.ndarray, with_objectness: bool):
    # row-wise reduction rather than a matvec: identical rows must score identically
    # wherever they sit, or exact ties would be broken by rounding
    s = (index.embeds[lo:hi].astype(np.float64) * q).sum(axis=1)
    if with_objectness:
        s = s * index.meta["objectness"][lo:hi].astype(np.float64)
    return s


def _prune(rows, scores, k):
    """Keep every candidate scoring at least the k-th best (ties are kept)."""
    if len(rows) <= k:
        return rows, scores
    kth = np.partition(scores, len(scores) - k)[len(scores) - k]
    keep = scores >= kth
    return rows[keep], scores[keep]


def _scan(index, q, k, lo, hi, block_rows, with_objectness):
    rows = np.zeros(0, dtype=np.int64)
    scores = np.zeros(0)
    for b in range(lo, hi, block_rows):
        e = min(b + block_rows, hi)
        s = _block_scores(index, b, e, q, with_objectness)
        r, s = _prune(np.arange(b, e, dtype=np.int64), s, k)
        rows, scores = _prune(np.concatenate([rows, r]), np.concatenate([scores, s]), k)
    return rows, scores


def _finalize(index, rows, scores, k, query_id):
    m = index.meta[rows]
    order = np.lexsort((m["instance_index"], m["scene_id"], -scores))[:k]
    rows, scores, m = rows[order], scores[order], m[order]
    return RankedRetrieval(query_id, rows, scores, m["scene_id"].astype(np.int64),
                           m["instance_index"].astype(np.int64), m["box"].astype(np.float64))


def query(index: Index, text_embed, k: int, block_rows: int = 16384, shards: int = 1,
          threads: int = 1, with_objectness: bool = False, query_id: int = 0) -> RankedRetrieval:
    """Exact top-k by dot product (optionally times objectness) via a blocked scan."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(text_embed, dtype=np.float64)
    if q.shape != (index.d,):
        raise ValueError(f"query dimension {q.shape} does not match index dimension {index.d}")
    n = len(index)
    shards = max(1, min(shards, n or 1))
    bounds = np.linspace(0, n, shards + 1).astype(int)
    work = [(int(bounds[i]), int(bounds[i + 1])) for i in range(shards)]
    run = lambda lh: _scan(index, q, k, lh[0], lh[1], block_rows, with_objectness)  # noqa: E731
    if threads > 1 and shards > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, work))
    else:
        parts = [run(w) for w in work]
    rows = np.concatenate([p[0] for p in parts])
    scores = np.concatenate([p[1] for p in parts])
    return _finalize(index, rows, scores, k, query_id)


def full_sort_query(index: Index, text_embed, k: int, with_objectness: bool = False) -> RankedRetrieval:
    """Reference: score everything, sort everything."""
    q = np.asarray(text_embed, dtype=np.float64)
    s = _block_scores(index, 0, len(index), q, with_objectness)
    return _finalize(index, np.arange(len(index)), s, k, 0)


# --------------------------------------------------------------------------- persistence


def index_bytes(index: Index) -> bytes:
    body = bytearray(INDEX_MAGIC)
    body += struct.pack("<IQI", INDEX_VERSION, len(index), index.d)
    body += index.embeds.astype("<f4").tobytes()
    body += index.meta.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def save_index(index: Index, path) -> None:
    Path(path).write_bytes(index_bytes(index))


def load_index(path) -> Index:
    data = Path(path).read_bytes()
    head = len(INDEX_MAGIC) + 16
    if len(data) < head + 4 or data[: len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise IndexFormatError(f"{path}: not an index file")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise IndexFormatError(f"{path}: checksum mismatch (corrupt or truncated)")
    version, n, d = struct.unpack("<IQI", data[len(INDEX_MAGIC) : head])
    if version != INDEX_VERSION:
        raise IndexFormatError(f"{path}: index version {version} != {INDEX_VERSION}")
    emb_end = head + 4 * n * d
    if emb_end + n * META_DTYPE.itemsize != len(data) - 4:
        raise IndexFormatError(f"{path}: payload size does not match header")
    embeds = np.frombuffer(data, dtype="<f4", count=n * d, offset=head).reshape(n, d).copy()
    meta = np.frombuffer(data, dtype=META_DTYPE, count=n, offset=emb_end).copy()
    return Index(embeds, meta)


# --------------------------------------------------------------------------- joint-attention baseline


class FlopCounter:
    def __init__(self):
        self.flops = 0

    def add(self, n: int):
        self.flops += int(n)


@dataclass
class CrossAttentionWeights:
    wq: np.ndarray  # (d, d)
    wk: np.ndarray
    wv: np.ndarray
    w_out: np.ndarray  # (d,)

    @classmethod
    def random(cls, d: int, seed: int = 0) -> "CrossAttentionWeights":
        rng = np.random.default_rng([seed, 0xA77])
        s = 1.0 / np.sqrt(d)
        return cls(*(rng.normal(0, s, size=(d, d)) for _ in range(3)), rng.normal(0, s, size=d))


def cross_attention_flops(T: int, d: int) -> int:
    """Analytic multiply-add count of one (query, instance) joint-attention score."""
    return T * d + 3 * 2 * T * d * d + 2 * T * T * d + 3 * T * T + 2 * T * T * d + T * d + 2 * d


def dot_flops(d: int) -> int:
    return 2 * d


def cross_attention_score(tokens, instance, weights: CrossAttentionWeights,
                          counter: FlopCounter | None = None) -> float:
    """Single attention layer over tokens fused with one instance, then a linear scorer."""
    x = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    T, d = x.shape
    z = x + np.asarray(instance, dtype=np.float64)
    q, k, v = z @ weights.wq, z @ weights.wk, z @ weights.wv
    a = softmax(q @ k.T / np.sqrt(d), axis=-1)
    pooled = (a @ v).mean(axis=0)
    if counter is not None:
        counter.add(cross_attention_flops(T, d))
    return float(pooled @ weights.w_out)


def cross_attention_batch(tokens, instances, weights: CrossAttentionWeights, chunk: int = 4096,
                          counter: FlopCounter | None = None) -> np.ndarray:
    """``cross_attention_score`` for every instance row, vectorized in chunks."""
    x = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    T, d = x.shape
    inst = np.asarray(instances, dtype=np.float64)
    out = np.empty(len(inst))
    for lo in range(0, len(inst), chunk):
        z = x[None, :, :] + inst[lo : lo + chunk, None, :]
        q, k, v = z @ weights.wq, z @ weights.wk, z @ weights.wv
        a = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(d), axis=-1)
        out[lo : lo + chunk] = (a @ v).mean(axis=1) @ weights.w_out
    if counter is not None:
        counter.add(cross_attention_flops(T, d) * len(inst))
    return out


# --------------------------------------------------------------------------- bench


def _median_time(fn, reps, min_sample: float = 0.02):
    """Median seconds per call; each sample loops ``fn`` long enough to swamp timer noise."""
    for _ in range(3):
        fn()
    t0 = time.perf_counter()
    fn()
    once = max(time.perf_counter() - t0, 1e-7)
    inner = max(1, int(min_sample / once))
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        times.append((time.perf_counter() - t0) / inner)
    return float(np.median(times))


def _linear_fit(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def random_index(n: int, d: int, seed: int = 0) -> Index:
    rng = np.random.default_rng([seed, n, d])
    e = rng.normal(size=(n, d))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    xy = rng.uniform(0, 0.5, size=(n, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(0.05, 0.5, size=(n, 2))], axis=1)
    return make_index(e, np.arange(n) // 10, np.arange(n) % 10, boxes, sigmoid(rng.normal(size=n)))


def bench(sizes=(1_000, 10_000, 100_000), k: int = 10, repetitions: int = 5, T: int = 8, d: int = 64,
          seed: int = 0, cross_attention: bool = True) -> dict:
    """Time the dot-product scan and per-entry joint-attention re-scoring at each index size."""
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    rng = np.random.default_rng([seed, 0xBE])
    q = rng.normal(size=d)
    q /= np.linalg.norm(q)
    tokens = rng.normal(size=(T, d)) / np.sqrt(d)
    weights = CrossAttentionWeights.random(d, seed)
    indices = [random_index(n, d, seed) for n in sizes]
    # one scan at the largest size first, so allocator first-touch costs are not
    # billed to the small sizes
    query(indices[-1], q, k)
    rows = []
    for n, index in zip(sizes, indices):
        row = {
            "n": int(n),
            "dot_seconds": _median_time(lambda: query(index, q, k), repetitions),
            "dot_flops": dot_flops(d) * int(n),
        }
        if cross_attention:
            counter = FlopCounter()
            row["cross_seconds"] = _median_time(
                lambda: cross_attention_batch(tokens, index.embeds, weights), 1, min_sample=0.0
            )
            cross_attention_batch(tokens, index.embeds[:1], weights, counter=counter)
            row["cross_flops"] = counter.flops * int(n)
            row["speedup"] = row["cross_seconds"] / row["dot_seconds"]
            row["flop_ratio"] = row["cross_flops"] / row["dot_flops"]
        rows.append(row)
    slope, intercept, r2 = _linear_fit([r["n"] for r in rows], [r["dot_seconds"] for r in rows])
    report = {"k": k, "T": T, "d": d, "rows": rows,
              "dot_fit": {"slope": slope, "intercept": intercept, "r2": r2}}
    if cross_attention and len(rows) > 1:
        s2, i2, r22 = _linear_fit([r["n"] for r in rows], [r["cross_seconds"] for r in rows])
        report["cross_fit"] = {"slope": s2, "intercept": i2, "r2": r22}
    return report
