"""Optimal bipartite matching of predicted hypotheses to ground-truth objects.

The solver is the shortest-augmenting-path form of Kuhn-Munkres with dual
potentials (O(n^3)). Among equal-cost optima it returns the one whose
prediction indices, read in ground-truth order, are lexicographically
smallest.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import giou, to_xyxy


class AssignmentSizeError(ValueError):
    """Raised when there are fewer predictions than ground-truth objects."""


@dataclass(frozen=True)
class CostWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0

    def __post_init__(self):
        if min(self.cls, self.l1, self.giou) < 0:
            raise ValueError("cost weights must be non-negative")


@dataclass
class MatchResult:
    # (pred_index, gt_index) in ascending gt order
    pairs: list[tuple[int, int]]
    unmatched_preds: list[int] = field(default_factory=list)
    total_cost: float = 0.0

    def pred_for_gt(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    def gt_for_pred(self, n_pred: int) -> np.ndarray:
        """Array of length ``n_pred`` holding the matched gt index or -1."""
        out = np.full(n_pred, -1, dtype=np.int64)
        for p, g in self.pairs:
            out[p] = g
        return out


def _shortest_augmenting_path(c: np.ndarray):
    """Square Kuhn-Munkres. Returns (row->col assignment, row duals, col duals)."""
    n = c.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j] = row (1-based) holding column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    row_to_col[owner[1:] - 1] = np.arange(n)
    return row_to_col, u[1:], v[1:]


def _lexicographic_refine(c, row_to_col, u, v, n_real):
    """Move each real row, in order, to the smallest column among optimal matchings.

    Optimal perfect matchings of the square problem are exactly the perfect
    matchings inside the tight (zero reduced cost) subgraph of any optimal
    dual, so each candidate swap is an alternating-path search there.
    """
    n = c.shape[0]
    scale = max(1.0, float(np.max(np.abs(c)))) if c.size else 1.0
    tight = (c - u[:, None] - v[None, :]) <= 1e-9 * scale
    col_owner = np.empty(n, dtype=np.int64)
    col_owner[row_to_col] = np.arange(n)
    fixed_cols = np.zeros(n, dtype=bool)
    fixed_rows = np.zeros(n, dtype=bool)
    for j in range(n_real):
        cur = row_to_col[j]
        for cand in np.flatnonzero(tight[j, :cur]):
            if fixed_cols[cand]:
                continue
            path = _alternating_path(tight, col_owner, fixed_rows, fixed_cols, j, cand, cur)
            if path is None:
                continue
            # path: [(row, new_col), ...] starting at the displaced owner of cand
            for r, col in path:
                row_to_col[r] = col
                col_owner[col] = r
            row_to_col[j] = cand
            col_owner[cand] = j
            break
        fixed_rows[j] = True
        fixed_cols[row_to_col[j]] = True
    return row_to_col


def _alternating_path(tight, col_owner, fixed_rows, fixed_cols, j, cand, target):
    start = col_owner[cand]
    prev = {start: None}  # row -> (prev_row, col taken by prev_row)
    queue = deque([start])
    seen_cols = {cand}
    while queue:
        r = queue.popleft()
        for col in np.flatnonzero(tight[r]):
            col = int(col)
            if col in seen_cols or fixed_cols[col]:
                continue
            seen_cols.add(col)
            if col == target:
                path = [(r, col)]
                node = r
                while prev[node] is not None:
                    pr, pc = prev[node]
                    path.append((pr, pc))
                    node = pr
                return path
            nxt = int(col_owner[col])
            if nxt == j or fixed_rows[nxt] or nxt in prev:
                continue
            prev[nxt] = (r, col)
            queue.append(nxt)
    return None


def solve_assignment(cost) -> MatchResult:
    """Minimum-cost injective assignment of every gt (column) to a distinct pred (row).

    ``cost`` has shape ``(n_pred, n_gt)`` with ``n_pred >= n_gt``.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    n_pred, n_gt = c.shape
    if n_pred < 1:
        raise AssignmentSizeError("need at least one prediction")
    if n_pred < n_gt:
        raise AssignmentSizeError(f"{n_pred} predictions cannot cover {n_gt} ground-truth objects")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    if n_gt == 0:
        return MatchResult(pairs=[], unmatched_preds=list(range(n_pred)), total_cost=0.0)

    # rows = gt (padded with zero-cost dummies), columns = preds
    square = np.zeros((n_pred, n_pred))
    square[:n_gt] = c.T
    row_to_col, u, v = _shortest_augmenting_path(square)
    row_to_col = _lexicographic_refine(square, row_to_col, u, v, n_gt)

    pairs = [(int(row_to_col[g]), g) for g in range(n_gt)]
    matched = {p for p, _ in pairs}
    total = float(sum(c[p, g] for p, g in pairs))
    return MatchResult(
        pairs=pairs,
        unmatched_preds=[i for i in range(n_pred) if i not in matched],
        total_cost=total,
    )


def match_cost(pred_logits, pred_boxes, gt_boxes, weights: CostWeights = CostWeights()):
    """Composite matching cost, shape ``(n_pred, n_gt)``.

    Boxes are in center form. Entry (i, j) is
    ``w_cls * (1 - sigmoid(logit_i)) + w_l1 * |box_i - gt_j|_1 + w_giou * (1 - giou)``.
    """
    logits = np.asarray(pred_logits, dtype=np.float64).reshape(-1)
    pb = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gb = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(logits) != len(pb):
        raise ValueError("one logit per predicted box is required")
    prob = 0.5 * (1.0 + np.tanh(0.5 * logits))
    cls_cost = (1.0 - prob)[:, None]
    l1 = np.abs(pb[:, None, :] - gb[None, :, :]).sum(-1)
    pxy = to_xyxy(_nonneg_extent(pb))
    gxy = to_xyxy(gb)
    g = giou(pxy[:, None, :], gxy[None, :, :]).reshape(len(pb), len(gb))
    return weights.cls * cls_cost + weights.l1 * l1 + weights.giou * (1.0 - g)


def _nonneg_extent(b):
    b = np.array(b, dtype=np.float64)
    b[..., 2:] = np.clip(b[..., 2:], 0, None)
    return b
