"""Multi-task training: matching, losses, SGD with momentum, EMA, checkpoints.

All queries of a scene are scored in one pass against a single set of
projected instance embeddings, so featurization cost does not grow with the
number of queries.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .alignment import SimilarityMatrix, normalize_backward
from .assignment import CostWeights, MatchResult, match_cost, solve_assignment
from .config import RunConfig
from .geometry import to_ccwh
from .losses import (
    LossValue,
    bce_objectness,
    caption_contrastive,
    giou_loss,
    infonce_rowcol,
    infonce_terms,
    l1_box,
    sentence_contrastive,
    total_loss,
)
from .model import PARAM_ORDER, Model, init_params
from .synthworld import FeatureLayout, Scene, SceneFeatures, Vocabulary, featurize_scene

log = logging.getLogger(__name__)

CKPT_MAGIC = b"IALNCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------- state


@dataclass
class TrainState:
    params: dict
    ema: dict
    momentum: dict
    step: int = 0
    seed: int = 0

    @classmethod
    def initial(cls, config: RunConfig) -> "TrainState":
        vocab = Vocabulary.from_world(config.world)
        layout = FeatureLayout(config.world)
        params = init_params(layout.dim, len(vocab), config.model.d_tok, config.model.d_joint, config.seed,
                             layout["geometry"])
        return cls(
            params=params,
            ema={k: v.copy() for k, v in params.items()},
            momentum={k: np.zeros_like(v) for k, v in params.items()},
            step=0,
            seed=config.seed,
        )

    def copy(self) -> "TrainState":
        dup = lambda d: {k: v.copy() for k, v in d.items()}  # noqa: E731
        return TrainState(dup(self.params), dup(self.ema), dup(self.momentum), self.step, self.seed)


def ema_update(state: TrainState, decay: float) -> TrainState:
    """``ema <- decay * ema + (1 - decay) * params``, elementwise."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {decay}")
    new = {k: decay * state.ema[k] + (1.0 - decay) * state.params[k] for k in state.ema}
    return TrainState(state.params, new, state.momentum, state.step, state.seed)


# --------------------------------------------------------------------------- data prep


@dataclass
class PreparedScene:
    """Numeric view of one training scene."""

    scene_id: int
    embeds: np.ndarray  # (n_hyp, d_raw)
    gt_ccwh: np.ndarray  # (n_obj, 4)
    query_pool: np.ndarray  # (n_q, V) averaging weights over vocabulary rows
    query_targets: np.ndarray  # (n_obj, n_q) bool
    phrase_pool: np.ndarray  # (n_ph, V) averaging weights of each caption phrase span
    phrase_targets: np.ndarray  # (n_obj, n_ph) bool
    caption_pool: np.ndarray  # (V,)


def _pool_row(ids, vocab_size):
    row = np.zeros(vocab_size)
    np.add.at(row, ids, 1.0 / len(ids))
    return row


def prepare_scene(scene: Scene, vocab: Vocabulary, features: SceneFeatures) -> PreparedScene:
    n_obj = len(scene.objects)
    V = len(vocab)
    q_pool = np.zeros((len(scene.queries), V))
    q_tgt = np.zeros((n_obj, len(scene.queries)), dtype=bool)
    for j, q in enumerate(scene.queries):
        q_pool[j] = _pool_row(vocab.encode(q.words, boundary=False), V)
        q_tgt[list(q.targets), j] = True
    cap_ids = vocab.encode(scene.caption.words, boundary=False)
    phrases = scene.caption.phrases
    p_pool = np.zeros((len(phrases), V))
    p_tgt = np.zeros((n_obj, len(phrases)), dtype=bool)
    for j, p in enumerate(phrases):
        p_pool[j] = _pool_row(cap_ids[p.start : p.end], V)
        p_tgt[list(p.targets), j] = True
    return PreparedScene(
        scene.scene_id,
        features.embeds,
        to_ccwh(scene.boxes()),
        q_pool,
        q_tgt,
        p_pool,
        p_tgt,
        _pool_row(cap_ids, V),
    )


def prepare_corpus(scenes, config: RunConfig) -> list[PreparedScene]:
    vocab = Vocabulary.from_world(config.world)
    return [prepare_scene(s, vocab, featurize_scene(s, config.world)) for s in scenes]


# --------------------------------------------------------------------------- forward / backward


@dataclass
class BatchResult:
    loss: LossValue  # grads keyed by parameter name
    parts: dict  # part name -> value
    matches: list  # MatchResult per scene
    query_losses: np.ndarray  # text->instance InfoNCE term per query
    sentence_sim: SimilarityMatrix | None
    phrase_sim: SimilarityMatrix | None
    image_embeds: np.ndarray
    detections: list  # (embeds, logits, boxes) per scene


def _normalize_rows(z):
    n = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise FloatingPointError("zero-norm embedding in forward pass")
    return z / n, n


def batch_loss(params: dict, batch: list[PreparedScene], config: RunConfig) -> BatchResult:
    """Forward pass, matching, all losses and analytic parameter gradients for a batch."""
    tau = config.model.temperature
    lw = config.train.loss_weights
    cw = CostWeights(*config.train.cost_weights)
    p = params

    zg = p["token_table"] @ p["g_weight"].T + p["g_bias"]
    U, ng = _normalize_rows(zg)

    O = np.concatenate([b.embeds for b in batch])
    zf = O @ p["f_weight"].T + p["f_bias"]
    Vt, nf = _normalize_rows(zf)
    logits = O @ p["obj_weight"] + p["obj_bias"][0]
    boxes = O @ p["box_weight"].T + p["box_bias"]

    sizes = [len(b.embeds) for b in batch]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    matches: list[MatchResult] = []
    labels = np.zeros(len(O))
    pred_idx, gt_rows = [], []
    hyp_to_gt = []  # one-hot (n_hyp_s, n_obj_s) per scene
    for s, b in enumerate(batch):
        lo, hi = offs[s], offs[s + 1]
        n_obj = len(b.gt_ccwh)
        m = solve_assignment(match_cost(logits[lo:hi], boxes[lo:hi], b.gt_ccwh, cw))
        matches.append(m)
        onehot = np.zeros((hi - lo, n_obj), dtype=bool)
        for pi, gi in m.pairs:
            labels[lo + pi] = 1.0
            pred_idx.append(lo + pi)
            gt_rows.append(b.gt_ccwh[gi])
            onehot[pi, gi] = True
        hyp_to_gt.append(onehot)
    n_gt = max(len(pred_idx), 1)
    pred_idx = np.asarray(pred_idx, dtype=np.int64)

    parts: dict[str, LossValue] = {}
    bce = bce_objectness(logits, labels)
    parts["bce"] = LossValue(bce.value, {"logits": bce.grads["logits"]})
    if len(pred_idx):
        gt_arr = np.asarray(gt_rows)
        l1 = l1_box(boxes[pred_idx], gt_arr)
        gl = giou_loss(boxes[pred_idx], gt_arr)
        parts["l1"] = LossValue(l1.value / n_gt, {"boxes": l1.grads["pred"] / n_gt})
        parts["giou"] = LossValue(gl.value / n_gt, {"boxes": gl.grads["pred"] / n_gt})
    else:
        parts["l1"] = LossValue(0.0, {})
        parts["giou"] = LossValue(0.0, {})

    def block_mask(targets_attr):
        cols = [getattr(b, targets_attr).shape[1] for b in batch]
        coffs = np.concatenate([[0], np.cumsum(cols)])
        mask = np.zeros((len(O), coffs[-1]), dtype=bool)
        for s, b in enumerate(batch):
            mask[offs[s] : offs[s + 1], coffs[s] : coffs[s + 1]] = (
                hyp_to_gt[s].astype(np.int64) @ getattr(b, targets_attr).astype(np.int64)
            ) > 0
        return mask

    # object-phrase: hypotheses x pooled caption phrases
    Ppool = np.concatenate([b.phrase_pool for b in batch])
    phrase_mask = block_mask("phrase_targets")
    phrase_sim = None
    if phrase_mask.any():
        Ph, nph = _normalize_rows(Ppool @ U)
        phrase_sim = SimilarityMatrix(Vt @ Ph.T / tau, tau)
        ph = infonce_rowcol(phrase_sim.scores, phrase_mask)
        parts["phrase"] = LossValue(ph.value, {"phrase_scores": ph.grads["scores"]})
    else:
        parts["phrase"] = LossValue(0.0, {})

    # object-sentence: hypotheses x pooled queries
    Qpool = np.concatenate([b.query_pool for b in batch])
    sentence_sim = None
    query_losses = np.zeros(len(Qpool))
    if len(Qpool):
        Pm, npool = _normalize_rows(Qpool @ U)
        sent_mask = block_mask("query_targets")
        sentence_sim = SimilarityMatrix(Vt @ Pm.T / tau, tau)
        if sent_mask.any():
            se = sentence_contrastive(Vt, Pm, sent_mask, tau)
            _, query_losses = infonce_terms(sentence_sim.scores, sent_mask)
            parts["sentence"] = LossValue(se.value, {"inst_s": se.grads["inst"], "text_s": se.grads["text"]})
        else:
            query_losses[:] = np.nan
            parts["sentence"] = LossValue(0.0, {})
    else:
        parts["sentence"] = LossValue(0.0, {})

    # image-caption across the batch
    img_mean = np.stack([Vt[offs[s] : offs[s + 1]].mean(axis=0) for s in range(len(batch))])
    Img, nimg = _normalize_rows(img_mean)
    Cpool_w = np.stack([b.caption_pool for b in batch])
    if len(batch) >= 2:
        Cm, ncap = _normalize_rows(Cpool_w @ U)
        cc = caption_contrastive(Img, Cm, tau)
        parts["caption"] = LossValue(cc.value, {"image": cc.grads["image"], "caption": cc.grads["caption"]})
    else:
        parts["caption"] = LossValue(0.0, {})

    tot = total_loss(parts, {k: lw[k] for k in parts})
    g = tot.grads

    # ---- backward into parameters
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dV = np.zeros_like(Vt)
    dU = np.zeros_like(U)
    if "logits" in g:
        grads["obj_weight"] += O.T @ g["logits"]
        grads["obj_bias"][0] += g["logits"].sum()
    if "boxes" in g:
        dB = np.zeros_like(boxes)
        dB[pred_idx] = g["boxes"]
        grads["box_weight"] += dB.T @ O
        grads["box_bias"] += dB.sum(axis=0)
    if "phrase_scores" in g:
        dS = g["phrase_scores"] / tau
        dV += dS @ Ph
        dU += Ppool.T @ normalize_backward(Ph, nph, dS.T @ Vt)
    if "inst_s" in g:
        dV += g["inst_s"]
        dPm = normalize_backward(Pm, npool, g["text_s"])
        dU += Qpool.T @ dPm
    if "image" in g:
        dmean = normalize_backward(Img, nimg, g["image"])
        for s in range(len(batch)):
            dV[offs[s] : offs[s + 1]] += dmean[s] / sizes[s]
        dCm = normalize_backward(Cm, ncap, g["caption"])
        dU += Cpool_w.T @ dCm
    dzf = normalize_backward(Vt, nf, dV)
    grads["f_weight"] += dzf.T @ O
    grads["f_bias"] += dzf.sum(axis=0)
    dzg = normalize_backward(U, ng, dU)
    grads["g_weight"] += dzg.T @ p["token_table"]
    grads["g_bias"] += dzg.sum(axis=0)
    grads["token_table"] += dzg @ p["g_weight"]

    dets = [(Vt[offs[s] : offs[s + 1]], logits[offs[s] : offs[s + 1]], boxes[offs[s] : offs[s + 1]])
            for s in range(len(batch))]
    return BatchResult(
        loss=LossValue(tot.value, grads),
        parts={k: v.value for k, v in parts.items()},
        matches=matches,
        query_losses=query_losses,
        sentence_sim=sentence_sim,
        phrase_sim=phrase_sim,
        image_embeds=Img,
        detections=dets,
    )


@dataclass
class ForwardResult:
    features: SceneFeatures
    result: BatchResult

    @property
    def query_losses(self) -> np.ndarray:
        return self.result.query_losses

    @property
    def detection_losses(self) -> dict:
        return {k: self.result.parts[k] for k in ("bce", "l1", "giou")}


def forward_scene(state: TrainState, scene: Scene, config: RunConfig) -> ForwardResult:
    """Featurize a scene once and score every one of its queries in the same pass."""
    feats = featurize_scene(scene, config.world)
    prepared = prepare_scene(scene, Vocabulary.from_world(config.world), feats)
    return ForwardResult(feats, batch_loss(state.params, [prepared], config))


# --------------------------------------------------------------------------- optimization

LossFn = Callable[[dict, list], LossValue]


def _model_loss(config: RunConfig) -> LossFn:
    return lambda params, batch: batch_loss(params, batch, config).loss


def lr_at(step: int, total_steps: int, config: RunConfig) -> float:
    tc = config.train
    return tc.lr * (tc.lr_drop_factor if step >= tc.lr_drop * total_steps else 1.0)


def train_step(state: TrainState, batch, config: RunConfig, loss_fn: LossFn | None = None,
               lr: float | None = None):
    """One SGD-with-momentum update followed by an EMA update.

    ``lr`` defaults to ``config.train.lr``. Returns ``(new_state, loss_value)``.
    """
    fn = loss_fn or _model_loss(config)
    loss = fn(state.params, batch)
    if not np.isfinite(loss.value):
        raise FloatingPointError(f"non-finite loss {loss.value} at step {state.step}")
    for k, g in loss.grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k} at step {state.step}")
    tc = config.train
    lr = tc.lr if lr is None else lr
    momentum = {k: tc.momentum * state.momentum[k] + loss.grads.get(k, 0.0) for k in state.params}
    params = {k: state.params[k] - lr * momentum[k] for k in state.params}
    new = TrainState(params, state.ema, momentum, state.step + 1, state.seed)
    return ema_update(new, tc.ema_decay), loss.value


def steps_per_epoch(n_scenes: int, batch_size: int) -> int:
    return -(-n_scenes // batch_size)


def batch_indices(step: int, n_scenes: int, batch_size: int, seed: int) -> np.ndarray:
    """Scene indices for a global step; depends only on (step, n, batch, seed) so runs can resume."""
    per = steps_per_epoch(n_scenes, batch_size)
    epoch, b = divmod(step, per)
    perm = np.random.default_rng([seed, 0x5EED, epoch]).permutation(n_scenes)
    return perm[b * batch_size : (b + 1) * batch_size]


def train(
    state: TrainState,
    prepared: list[PreparedScene],
    config: RunConfig,
    n_steps: int | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainState:
    """Run until ``n_steps`` (default: the configured epochs over the corpus).

    The learning-rate drop is placed relative to the full configured run, so
    stopping early and resuming later follows the same trajectory.
    """
    tc = config.train
    total = tc.epochs * steps_per_epoch(len(prepared), tc.batch_size)
    if n_steps is None:
        n_steps = total
    while state.step < n_steps:
        idx = batch_indices(state.step, len(prepared), tc.batch_size, config.seed)
        lr = lr_at(state.step, total, config)
        state, value = train_step(state, [prepared[i] for i in idx], config, lr=lr)
        if on_step is not None:
            on_step(state.step, value)
        if state.step % 1000 == 0:
            log.info("step %d loss %.4f", state.step, value)
    return state


def train_model(scenes, config: RunConfig, on_step=None) -> TrainState:
    return train(TrainState.initial(config), prepare_corpus(scenes, config), config, on_step=on_step)


def inference_model(state: TrainState, config: RunConfig, use_ema: bool = True) -> Model:
    return Model(state.ema if use_ema else state.params, config)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(state: TrainState, path) -> None:
    """Little-endian binary: magic, version, JSON manifest, raw f64 arrays, CRC32 footer."""
    groups = ("params", "ema", "momentum")
    manifest = {
        "step": int(state.step),
        "seed": int(state.seed),
        "arrays": [[g, k, list(getattr(state, g)[k].shape)] for g in groups for k in PARAM_ORDER],
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += CKPT_MAGIC
    body += struct.pack("<II", CKPT_VERSION, len(mbytes))
    body += mbytes
    for g in groups:
        for k in PARAM_ORDER:
            body += np.ascontiguousarray(getattr(state, g)[k], dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> TrainState:
    data = Path(path).read_bytes()
    if len(data) < len(CKPT_MAGIC) + 12 or data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    pos = len(CKPT_MAGIC)
    version, mlen = struct.unpack("<II", data[pos : pos + 8])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} != {CKPT_VERSION}")
    pos += 8
    manifest = json.loads(data[pos : pos + mlen].decode("utf-8"))
    pos += mlen
    out = {"params": {}, "ema": {}, "momentum": {}}
    for group, name, shape in manifest["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        out[group][name] = arr
        pos += 8 * n
    if pos != len(data) - 4:
        raise CheckpointError(f"{path}: payload size does not match manifest")
    return TrainState(out["params"], out["ema"], out["momentum"], int(manifest["step"]), int(manifest["seed"]))
