"""Axis-aligned box helpers in normalized image coordinates.

Boxes are plain numpy arrays with a trailing axis of 4, either corner form
``(x1, y1, x2, y2)`` or center form ``(cx, cy, w, h)``. Every function
broadcasts over leading axes.
"""

from __future__ import annotations

import numpy as np


def to_xyxy(b):
    """Center form -> corner form."""
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def to_ccwh(b):
    """Corner form -> center form."""
    b = np.asarray(b, dtype=np.float64)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def area(b):
    b = np.asarray(b, dtype=np.float64)
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def clamp01(b):
    return np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)


def is_valid(b) -> bool:
    b = np.asarray(b, dtype=np.float64)
    return bool(
        np.all(np.isfinite(b))
        and np.all(b[..., 0] <= b[..., 2])
        and np.all(b[..., 1] <= b[..., 3])
    )


def _inter_union(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area(a) + area(b) - inter
    return inter, union


def iou(a, b):
    """Intersection over union; 0 when the union is empty."""
    inter, union = _inter_union(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out[()] if out.ndim == 0 else out


def giou(a, b):
    """Generalized IoU in [-1, 1].

    Returns 0 when the smallest enclosing box has zero area (both boxes are
    the same degenerate point/segment arrangement).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter, union = _inter_union(a, b)
    cw = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    ch = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclose = cw * ch
    safe_u = np.where(union > 0, union, 1.0)
    safe_c = np.where(enclose > 0, enclose, 1.0)
    ratio = np.where(union > 0, inter / safe_u, 0.0)
    # rounding can leave the enclosing area a hair below the union
    out = np.where(enclose > 0, ratio - np.maximum(enclose - union, 0.0) / safe_c, 0.0)
    return out[()] if out.ndim == 0 else out


def pairwise_iou(a, b):
    """(n, 4) x (m, 4) -> (n, m)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return iou(a[:, None, :], b[None, :, :]).reshape(len(a), len(b))


def pairwise_giou(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return giou(a[:, None, :], b[None, :, :]).reshape(len(a), len(b))


def expand_box(b, ratio: float):
    """Move every edge outward by ``ratio`` times the extent on that axis, then clamp.

    With ``ratio=0.5`` width and height double around a fixed center before
    clamping to the unit square.
    """
    if ratio < 0:
        raise ValueError(f"expansion ratio must be >= 0, got {ratio}")
    b = np.asarray(b, dtype=np.float64)
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    out = np.stack(
        [b[..., 0] - ratio * w, b[..., 1] - ratio * h, b[..., 2] + ratio * w, b[..., 3] + ratio * h],
        axis=-1,
    )
    return clamp01(out)
