"""Training losses with closed-form gradients.

Every loss returns a :class:`LossValue` whose ``grads`` map an input name to
the gradient with respect to that input (same shape as the input).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .alignment import sigmoid
from .geometry import to_xyxy


@dataclass
class LossValue:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def flat_grads(self, order=None) -> np.ndarray:
        keys = list(self.grads) if order is None else list(order)
        if not keys:
            return np.zeros(0)
        return np.concatenate([np.ravel(self.grads[k]) for k in keys])


def bce_objectness(logits, labels) -> LossValue:
    """Mean binary cross-entropy on objectness logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} and labels {y.shape} differ in shape")
    n = max(z.size, 1)
    per = np.logaddexp(0.0, z) - y * z
    return LossValue(float(per.sum() / n), {"logits": (sigmoid(z) - y) / n})


def l1_box(pred, gt) -> LossValue:
    """Sum of absolute center-form coordinate differences (over all boxes)."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    d = p - g
    return LossValue(float(np.abs(d).sum()), {"pred": np.sign(d)})


def giou_loss(pred, gt) -> LossValue:
    """Sum over boxes of ``1 - giou`` with the gradient w.r.t. the predicted center-form box.

    Negative predicted extents are treated as zero (zero gradient there).
    Where a min/max inside the overlap or enclosing box is tied, the
    predicted box is taken as the active argument (one-sided subgradient).
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    shape = p.shape
    p = p.reshape(-1, 4)
    g = g.reshape(-1, 4)
    w_pos = p[:, 2] > 0
    h_pos = p[:, 3] > 0
    pc = p.copy()
    pc[:, 2] = np.where(w_pos, p[:, 2], 0.0)
    pc[:, 3] = np.where(h_pos, p[:, 3], 0.0)
    a = to_xyxy(pc)
    b = to_xyxy(g)

    ax1, ay1, ax2, ay2 = a.T
    bx1, by1, bx2, by2 = b.T
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)

    ix1_pred = ax1 >= bx1
    iy1_pred = ay1 >= by1
    ix2_pred = ax2 <= bx2
    iy2_pred = ay2 <= by2
    iw_raw = np.where(ix2_pred, ax2, bx2) - np.where(ix1_pred, ax1, bx1)
    ih_raw = np.where(iy2_pred, ay2, by2) - np.where(iy1_pred, ay1, by1)
    iw_on = iw_raw > 0
    ih_on = ih_raw > 0
    iw = np.where(iw_on, iw_raw, 0.0)
    ih = np.where(ih_on, ih_raw, 0.0)
    inter = iw * ih
    union = area_a + area_b - inter

    cx1_pred = ax1 <= bx1
    cy1_pred = ay1 <= by1
    cx2_pred = ax2 >= bx2
    cy2_pred = ay2 >= by2
    cw = np.where(cx2_pred, ax2, bx2) - np.where(cx1_pred, ax1, bx1)
    ch = np.where(cy2_pred, ay2, by2) - np.where(cy1_pred, ay1, by1)
    enclose = cw * ch

    u_ok = union > 0
    c_ok = enclose > 0
    safe_u = np.where(u_ok, union, 1.0)
    safe_c = np.where(c_ok, enclose, 1.0)
    iou_term = np.where(u_ok, inter / safe_u, 0.0)
    gval = np.where(c_ok, iou_term - (enclose - union) / safe_c, 0.0)
    loss = float(np.sum(1.0 - gval))

    # giou = I/U + U/C - 1 with U = A + B - I
    d_inter = np.where(u_ok, (union + inter) / safe_u**2, 0.0) - np.where(c_ok, 1.0 / safe_c, 0.0)
    d_area = np.where(u_ok, -inter / safe_u**2, 0.0) + np.where(c_ok, 1.0 / safe_c, 0.0)
    d_enc = np.where(c_ok, -union / safe_c**2, 0.0)
    d_inter = np.where(c_ok, d_inter, 0.0)
    d_area = np.where(c_ok, d_area, 0.0)

    d_iw = d_inter * ih * iw_on
    d_ih = d_inter * iw * ih_on
    d_cw = d_enc * ch
    d_ch = d_enc * cw

    wa = ax2 - ax1
    ha = ay2 - ay1
    gx1 = -d_area * ha - d_iw * ix1_pred - d_cw * cx1_pred
    gx2 = d_area * ha + d_iw * ix2_pred + d_cw * cx2_pred
    gy1 = -d_area * wa - d_ih * iy1_pred - d_ch * cy1_pred
    gy2 = d_area * wa + d_ih * iy2_pred + d_ch * cy2_pred

    # loss = 1 - giou, and x1 = cx - w/2, x2 = cx + w/2
    grad = -np.stack(
        [
            gx1 + gx2,
            gy1 + gy2,
            np.where(w_pos, 0.5 * (gx2 - gx1), 0.0),
            np.where(h_pos, 0.5 * (gy2 - gy1), 0.0),
        ],
        axis=-1,
    )
    return LossValue(loss, {"pred": grad.reshape(shape)})


def _logsumexp(x, where, axis):
    xm = np.where(where, x, -np.inf)
    m = np.max(xm, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.where(where, np.exp(xm - m), 0.0), axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        return np.squeeze(np.log(s) + m, axis=axis)


def infonce_terms(scores, mask):
    """Per-row and per-column multi-positive InfoNCE terms.

    Returns ``(row_losses, col_losses)``; rows/columns without positives are NaN.
    """
    s = np.asarray(scores, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if s.shape != m.shape:
        raise ValueError(f"mask {m.shape} does not match scores {s.shape}")
    everything = np.ones_like(m)
    rows_ok = m.any(axis=1)
    cols_ok = m.any(axis=0)
    row = _logsumexp(s, everything, 1) - _logsumexp(s, m, 1)
    col = _logsumexp(s, everything, 0) - _logsumexp(s, m, 0)
    return np.where(rows_ok, row, np.nan), np.where(cols_ok, col, np.nan)


def _direction_grad(s, m, axis):
    p_all = np.exp(s - np.max(s, axis=axis, keepdims=True))
    p_all /= p_all.sum(axis=axis, keepdims=True)
    sm = np.where(m, s, -np.inf)
    mx = np.max(sm, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    p_pos = np.where(m, np.exp(sm - mx), 0.0)
    tot = p_pos.sum(axis=axis, keepdims=True)
    p_pos = np.divide(p_pos, tot, out=np.zeros_like(p_pos), where=tot > 0)
    return p_all - p_pos


def infonce_rowcol(scores, mask) -> LossValue:
    """Row-wise plus column-wise InfoNCE, averaged over the two directions.

    Each row (column) with at least one positive contributes
    ``-log(sum of softmax probabilities over its positives)``; rows
    (columns) with no positives are skipped.
    """
    s = np.asarray(scores, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if s.ndim != 2:
        raise ValueError("scores must be a 2-D matrix")
    if not m.any():
        raise ValueError("InfoNCE needs at least one positive pair")
    row, col = infonce_terms(s, m)
    rows_ok = m.any(axis=1)
    cols_ok = m.any(axis=0)
    n_r = int(rows_ok.sum())
    n_c = int(cols_ok.sum())
    value = 0.5 * (np.nansum(row) / n_r + np.nansum(col) / n_c)

    g_row = _direction_grad(s, m, axis=1) * rows_ok[:, None] / n_r
    g_col = _direction_grad(s, m, axis=0) * cols_ok[None, :] / n_c
    return LossValue(float(value), {"scores": 0.5 * (g_row + g_col)})


def _pairwise_contrastive(a, b, mask, tau, names) -> LossValue:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    inner = infonce_rowcol((a @ b.T) / tau, mask)
    ds = inner.grads["scores"] / tau
    return LossValue(inner.value, {names[0]: ds @ b, names[1]: ds.T @ a})


def sentence_contrastive(inst_embeds, sentence_embeds, pairing, tau: float = 0.07) -> LossValue:
    """InfoNCE between instances (rows) and whole-sentence embeddings (columns)."""
    return _pairwise_contrastive(inst_embeds, sentence_embeds, pairing, tau, ("inst", "text"))


def caption_contrastive(image_embeds, caption_embeds, tau: float = 0.07) -> LossValue:
    """Symmetric image/caption InfoNCE with positives on the batch diagonal."""
    img = np.atleast_2d(np.asarray(image_embeds, dtype=np.float64))
    cap = np.atleast_2d(np.asarray(caption_embeds, dtype=np.float64))
    if img.shape != cap.shape:
        raise ValueError("image and caption batches must align one-to-one")
    if len(img) < 2:
        warnings.warn("caption contrastive with batch < 2 has no negatives", RuntimeWarning, stacklevel=2)
    return _pairwise_contrastive(img, cap, np.eye(len(img), dtype=bool), tau, ("image", "caption"))


def total_loss(parts: dict[str, LossValue], weights: dict[str, float]) -> LossValue:
    """Weighted sum of named losses; gradients under the same key are summed."""
    unknown = set(weights) - set(parts)
    if unknown:
        raise KeyError(f"weights given for unknown parts: {sorted(unknown)}")
    missing = set(parts) - set(weights)
    if missing:
        raise KeyError(f"no weight for parts: {sorted(missing)}")
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, part in parts.items():
        w = float(weights[name])
        if w < 0:
            raise ValueError(f"weight for {name!r} is negative")
        value += w * part.value
        for key, g in part.grads.items():
            grads[key] = grads[key] + w * g if key in grads else w * np.asarray(g, dtype=np.float64)
    return LossValue(float(value), grads)


def grad_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params,
    h: float = 1e-5,
    seed: int = 0,
    n_coords: int | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` maps a flat parameter vector to ``(value, flat_grad)``. With
    ``n_coords`` set, that many coordinates are sampled (without replacement)
    using ``seed``; otherwise every coordinate is probed.
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    theta = np.array(params, dtype=np.float64).ravel()
    value, analytic = loss_fn(theta.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if not np.isfinite(value):
        raise FloatingPointError("loss is not finite at the base point")
    coords = np.arange(theta.size)
    if n_coords is not None and n_coords < theta.size:
        coords = np.sort(np.random.default_rng(seed).choice(theta.size, n_coords, replace=False))
    worst = 0.0
    for k in coords:
        up = theta.copy()
        up[k] += h
        down = theta.copy()
        down[k] -= h
        f_up = loss_fn(up)[0]
        f_down = loss_fn(down)[0]
        if not (np.isfinite(f_up) and np.isfinite(f_down)):
            raise FloatingPointError(f"loss is not finite when probing coordinate {k}")
        numeric = (f_up - f_down) / (2 * h)
        a = analytic[k]
        worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
    return float(worst)
