"""Detection AP, grounding Recall@k and whole-database instance-search Recall@k."""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import comb

import numpy as np

from .alignment import ovod_score
from .geometry import pairwise_iou
from .mmis_index import build_index, query

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class Detection:
    scene_id: int
    box: tuple
    category_id: int
    score: float


@dataclass(frozen=True)
class GroundTruth:
    scene_id: int
    box: tuple
    category_id: int


# --------------------------------------------------------------------------- AP


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from TP flags already in ranked order."""
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def _greedy_tp(det_boxes, gt_boxes, thr):
    """Detections (already score-sorted) against one scene's GTs; each GT used once."""
    tp = np.zeros(len(det_boxes), dtype=bool)
    if len(gt_boxes) == 0:
        return tp
    ious = pairwise_iou(det_boxes, gt_boxes)
    used = np.zeros(len(gt_boxes), dtype=bool)
    for i in range(len(det_boxes)):
        cand = np.where(used, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= thr:
            used[j] = True
            tp[i] = True
    return tp


def _category_ap(dets: list[Detection], gts: list[GroundTruth], thresholds) -> np.ndarray:
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    d_scene = np.array([dets[i].scene_id for i in order], dtype=np.int64)
    d_box = np.array([dets[i].box for i in order], dtype=np.float64).reshape(-1, 4)
    by_scene: dict[int, list] = {}
    for g in gts:
        by_scene.setdefault(g.scene_id, []).append(g.box)
    out = np.zeros(len(thresholds))
    for t, thr in enumerate(thresholds):
        tp = np.zeros(len(order), dtype=bool)
        for sid, boxes in by_scene.items():
            pos = np.flatnonzero(d_scene == sid)
            tp[pos] = _greedy_tp(d_box[pos], np.asarray(boxes, dtype=np.float64), thr)
        out[t] = _interpolated_ap(tp, len(gts))
    return out


def ap_eval(dets, gts, iou_thresholds=COCO_THRESHOLDS) -> dict:
    """COCO-style AP averaged over thresholds and over categories that have ground truth."""
    thresholds = tuple(float(t) for t in iou_thresholds)
    gt_by_cat: dict[int, list] = {}
    for g in gts:
        gt_by_cat.setdefault(g.category_id, []).append(g)
    det_by_cat: dict[int, list] = {}
    for d in dets:
        det_by_cat.setdefault(d.category_id, []).append(d)
    per_cat = {}
    for cat in sorted(gt_by_cat):
        per_cat[cat] = _category_ap(det_by_cat.get(cat, []), gt_by_cat[cat], thresholds)
    if not per_cat:
        return {"AP": float("nan"), "AP50": float("nan"), "per_threshold": {}, "per_category": {}}
    table = np.stack(list(per_cat.values()))  # (n_cat, n_thr)
    per_thr = table.mean(axis=0)
    out = {
        "AP": float(per_thr.mean()),
        "per_threshold": {f"{t:.2f}": float(v) for t, v in zip(thresholds, per_thr)},
        "per_category": {int(c): float(v.mean()) for c, v in per_cat.items()},
    }
    if 0.5 in thresholds:
        out["AP50"] = float(per_thr[thresholds.index(0.5)])
    return out


# --------------------------------------------------------------------------- recall


def recall_at_k(ranked_boxes, ranked_scene_ids, gt_boxes, gt_scene_id, ks, iou_thr: float = 0.5) -> dict:
    """Hit flag per k: any of the top-k boxes from the query's scene overlaps a GT box."""
    if list(ks) != sorted(ks):
        raise ValueError("ks must be ascending")
    boxes = np.asarray(ranked_boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    same = np.asarray(ranked_scene_ids) == gt_scene_id
    if len(boxes) and len(gt):
        hit = same & (pairwise_iou(boxes, gt) >= iou_thr).any(axis=1)
    else:
        hit = np.zeros(len(boxes), dtype=bool)
    if not hit.any():
        return {int(k): False for k in ks}
    first = int(np.argmax(hit))
    return {int(k): first < k for k in ks}


def chance_recall(n: int, g: int, k: int) -> float:
    """P(at least one of g good items among k drawn without replacement from n)."""
    if n <= 0:
        return 0.0
    k = min(k, n)
    return 1.0 - comb(n - g, k) / comb(n, k)


def query_split(scene, q, world) -> str:
    held = set(map(tuple, world.held_out))
    objs = [scene.objects[t] for t in q.targets]
    return "held_out" if any((o.color, o.category) in held for o in objs) else "seen"


@dataclass
class QueryOutcome:
    scene_id: int
    query_index: int
    split: str
    hits: dict
    chance: dict


def _summarize(outcomes: list[QueryOutcome], ks, prefix: str) -> dict:
    out = {}
    for split in ("all", "seen", "held_out"):
        sel = [o for o in outcomes if split == "all" or o.split == split]
        out[f"{split}/n"] = len(sel)
        for k in ks:
            out[f"{split}/{prefix}R@{k}"] = float(np.mean([o.hits[k] for o in sel])) if sel else float("nan")
            out[f"{split}/chance_R@{k}"] = float(np.mean([o.chance[k] for o in sel])) if sel else float("nan")
    return out


def _run_queries(index, scenes, model, ks, iou_thr, with_objectness=False, block_rows=16384):
    n_db = len(index)
    outcomes = []
    world = model.config.world
    for scene in scenes:
        for qi, q in enumerate(scene.queries):
            t = model.embed_text(q.words)
            res = query(index, t, max(ks), block_rows=block_rows, with_objectness=with_objectness)
            gt = [scene.objects[j].box for j in q.targets]
            hits = recall_at_k(res.boxes, res.scene_ids, gt, scene.scene_id, ks, iou_thr)
            good = _count_good(index, scene.scene_id, gt, iou_thr)
            chance = {k: chance_recall(n_db, good, k) for k in ks}
            outcomes.append(QueryOutcome(scene.scene_id, qi, query_split(scene, q, world), hits, chance))
    return outcomes


def _count_good(index, scene_id, gt, iou_thr):
    rows = np.flatnonzero(index.meta["scene_id"] == scene_id)
    if len(rows) == 0:
        return 0
    boxes = index.meta["box"][rows].astype(np.float64)
    return int((pairwise_iou(boxes, np.asarray(gt, dtype=np.float64)) >= iou_thr).any(axis=1).sum())


def grounding_protocol(model, scenes, ks=(1, 5, 10), iou_thr: float = 0.5, return_outcomes: bool = False):
    """Per-scene retrieval: each query ranks only its own scene's hypotheses."""
    outcomes = []
    for scene in scenes:
        index = build_index([scene], model)
        outcomes += _run_queries(index, [scene], model, ks, iou_thr)
    summary = _summarize(outcomes, ks, "")
    return (summary, outcomes) if return_outcomes else summary


def mmis_protocol(model, scenes, ks=(5, 10, 30), iou_thr: float = 0.5, index=None,
                  with_objectness: bool = False, return_outcomes: bool = False):
    """Whole-database retrieval: each query ranks every instance of every scene."""
    if index is None:
        index = build_index(scenes, model)
    if len(index) == 0:
        raise ValueError("instance search needs a non-empty database")
    outcomes = _run_queries(index, scenes, model, ks, iou_thr, with_objectness)
    summary = _summarize(outcomes, ks, "")
    return (summary, outcomes) if return_outcomes else summary


# --------------------------------------------------------------------------- open-vocabulary detection


def category_table(world) -> list[tuple]:
    return [(c, s) for c in world.colors for s in world.shapes]


def ovod_detections(model, scenes):
    """Score every hypothesis against every color-shape category prompt."""
    cats = category_table(model.config.world)
    text = model.embed_texts([[c, s] for c, s in cats])
    dets, gts = [], []
    for scene in scenes:
        det = model.detect_scene(scene)
        sims = det.embeds @ text.T / model.tau
        boxes = det.boxes_xyxy
        for h in range(len(boxes)):
            scores = ovod_score(det.logits[h], sims[h])
            box = tuple(boxes[h])
            dets += [Detection(scene.scene_id, box, c, float(scores[c])) for c in range(len(cats))]
        for o in scene.objects:
            gts.append(GroundTruth(scene.scene_id, tuple(o.box), cats.index((o.color, o.category))))
    return dets, gts, cats


def ovod_eval(model, scenes, iou_thresholds=COCO_THRESHOLDS) -> dict:
    dets, gts, cats = ovod_detections(model, scenes)
    held = set(map(tuple, model.config.world.held_out))
    out = {}
    for split in ("seen", "held_out"):
        keep = {i for i, c in enumerate(cats) if (c in held) == (split == "held_out")}
        r = ap_eval([d for d in dets if d.category_id in keep], [g for g in gts if g.category_id in keep],
                    iou_thresholds)
        out[f"{split}/AP"] = r["AP"]
        out[f"{split}/AP50"] = r.get("AP50", float("nan"))
    return out


# --------------------------------------------------------------------------- reports


def to_json(metrics: dict) -> str:
    return json.dumps(metrics, indent=2, sort_keys=True)


def to_table(metrics: dict) -> str:
    width = max((len(k) for k in metrics), default=0)
    lines = []
    for k in sorted(metrics):
        v = metrics[k]
        lines.append(f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}")
    return "\n".join(lines)
