"""Trainable parameters and inference-time encoders.

Parameters live in a plain ``dict[str, ndarray]`` keyed in ``PARAM_ORDER``:
the token table (text encoder), the vision head f, the text head g, and the
linear objectness and box heads applied to raw instance embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import ProjectionHead, TextSequence, l2_normalize, pool_span, project, sigmoid
from .config import RunConfig
from .geometry import clamp01, to_xyxy
from .synthworld import FeatureLayout, Vocabulary, featurize_scene, featurize_tokens, tokenize

PARAM_ORDER = (
    "token_table",
    "f_weight",
    "f_bias",
    "g_weight",
    "g_bias",
    "obj_weight",
    "obj_bias",
    "box_weight",
    "box_bias",
)


def init_params(d_raw: int, vocab_size: int, d_tok: int, d_joint: int, seed: int,
                geometry: slice | None = None) -> dict[str, np.ndarray]:
    """Random heads; the box head starts as a copy of the raw ``geometry`` block when given."""
    rng = np.random.default_rng([seed, 0xC0FFEE])
    f = ProjectionHead.init(d_joint, d_raw, rng)
    g = ProjectionHead.init(d_joint, d_tok, rng)
    b_raw = 1.0 / np.sqrt(d_raw)
    box_weight = rng.uniform(-b_raw, b_raw, size=(4, d_raw)) * 0.1
    box_bias = np.array([0.5, 0.5, 0.15, 0.15])
    if geometry is not None:
        box_weight[:] = 0.0
        box_weight[:, geometry] = np.eye(4)
        box_bias[:] = 0.0
    return {
        "token_table": rng.normal(0.0, 1.0 / np.sqrt(d_tok), size=(vocab_size, d_tok)),
        "f_weight": f.weight,
        "f_bias": f.bias,
        "g_weight": g.weight,
        "g_bias": g.bias,
        "obj_weight": rng.uniform(-b_raw, b_raw, size=d_raw),
        "obj_bias": np.zeros(1),
        "box_weight": box_weight,
        "box_bias": box_bias,
    }


def flatten(params) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in PARAM_ORDER])


def unflatten(theta, like) -> dict[str, np.ndarray]:
    out = {}
    pos = 0
    for k in PARAM_ORDER:
        n = like[k].size
        out[k] = np.asarray(theta[pos : pos + n], dtype=np.float64).reshape(like[k].shape)
        pos += n
    if pos != len(theta):
        raise ValueError("flat vector length does not match the parameter layout")
    return out


@dataclass
class Detections:
    embeds: np.ndarray  # (n, d_joint), unit rows
    logits: np.ndarray  # (n,)
    boxes_ccwh: np.ndarray  # (n, 4), raw head output

    @property
    def boxes_xyxy(self) -> np.ndarray:
        b = self.boxes_ccwh.copy()
        b[:, 2:] = np.clip(b[:, 2:], 0, None)
        return clamp01(to_xyxy(b))

    @property
    def objectness(self) -> np.ndarray:
        return sigmoid(self.logits)


class Model:
    """Read-only view of a parameter set for inference."""

    def __init__(self, params: dict, config: RunConfig):
        self.params = params
        self.config = config
        self.vocab = Vocabulary.from_world(config.world)
        self.layout = FeatureLayout(config.world)
        self.tau = config.model.temperature

    @classmethod
    def fresh(cls, config: RunConfig, seed: int | None = None) -> "Model":
        vocab = Vocabulary.from_world(config.world)
        layout = FeatureLayout(config.world)
        p = init_params(layout.dim, len(vocab), config.model.d_tok, config.model.d_joint,
                        config.seed if seed is None else seed, layout["geometry"])
        return cls(p, config)

    @property
    def f(self) -> ProjectionHead:
        return ProjectionHead(self.params["f_weight"], self.params["f_bias"])

    @property
    def g(self) -> ProjectionHead:
        return ProjectionHead(self.params["g_weight"], self.params["g_bias"])

    @property
    def d_joint(self) -> int:
        return self.params["f_weight"].shape[0]

    def detect(self, raw_embeds) -> Detections:
        o = np.atleast_2d(np.asarray(raw_embeds, dtype=np.float64))
        if o.shape[1] != self.params["f_weight"].shape[1]:
            raise ValueError(f"raw embedding dimension {o.shape[1]} does not match the model")
        p = self.params
        return Detections(
            project(self.f, o),
            o @ p["obj_weight"] + p["obj_bias"][0],
            o @ p["box_weight"].T + p["box_bias"],
        )

    def detect_scene(self, scene) -> Detections:
        return self.detect(featurize_scene(scene, self.config.world).embeds)

    def encode_tokens(self, words) -> TextSequence:
        """Token sequence whose embeddings are already projected into the joint space."""
        ids = self.vocab.encode(words)
        seq = featurize_tokens(ids, self.params["token_table"], (self.vocab.bos, self.vocab.eos))
        seq.token_embeds = project(self.g, seq.token_embeds)
        return seq

    def embed_text(self, words, span=None) -> np.ndarray:
        """Normalized joint embedding of a span (default: the whole text minus boundaries)."""
        if isinstance(words, str):
            words = tokenize(words)
        seq = self.encode_tokens(words)
        return pool_span(seq, seq.inner_span() if span is None else span)

    def embed_texts(self, texts) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.d_joint))
        return np.stack([self.embed_text(t) for t in texts])

    def image_embed(self, det: Detections) -> np.ndarray:
        return l2_normalize(det.embeds.mean(axis=0))
