"""Projection heads, span pooling and dot-product similarity in the joint space."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateEmbeddingError(ValueError):
    """An embedding collapsed to the zero vector and cannot be normalized."""


def l2_normalize(x, axis: int = -1):
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateEmbeddingError("cannot normalize a zero vector")
    return x / norm


def normalize_backward(y, norm, dy):
    """Gradient through ``y = z / |z|`` given the output ``y``, ``|z|`` and ``dL/dy``."""
    dot = np.sum(y * dy, axis=-1, keepdims=True)
    return (dy - y * dot) / norm


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis: int = -1):
    x = np.asarray(x, dtype=np.float64)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class ProjectionHead:
    """Affine map into the joint space: ``weight @ v + bias``."""

    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)

    @classmethod
    def init(cls, d_out: int, d_in: int, rng: np.random.Generator) -> "ProjectionHead":
        bound = 1.0 / np.sqrt(d_in)
        return cls(rng.uniform(-bound, bound, size=(d_out, d_in)), np.zeros(d_out))

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]


def project(head: ProjectionHead, v):
    """Apply the head and L2-normalize. Accepts a single vector or a batch of rows."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != head.d_in:
        raise ValueError(f"expected input dimension {head.d_in}, got {v.shape[-1]}")
    return l2_normalize(v @ head.weight.T + head.bias)


@dataclass
class TextSequence:
    """Token ids and per-token embeddings of one piece of text.

    ``spans`` hold half-open ``(start, end)`` token ranges; when
    ``has_boundary_tokens`` is set, positions 0 and ``len - 1`` are the start
    and end markers and are never pooled.
    """

    token_ids: np.ndarray
    token_embeds: np.ndarray
    spans: list[tuple[int, int]] = field(default_factory=list)
    has_boundary_tokens: bool = True

    def __len__(self) -> int:
        return len(self.token_ids)

    def inner_span(self) -> tuple[int, int]:
        """Span covering every token except the boundary markers."""
        if self.has_boundary_tokens:
            return (1, len(self) - 1)
        return (0, len(self))


def pool_span(t: TextSequence, span) -> np.ndarray:
    """Mean of the token embeddings in ``span``, L2-normalized."""
    start, end = int(span[0]), int(span[1])
    lo, hi = t.inner_span()
    if end <= start:
        raise ValueError(f"empty span {span}")
    if start < lo or end > hi:
        raise ValueError(f"span {span} reaches outside the pooled region [{lo}, {hi})")
    mean = np.mean(np.asarray(t.token_embeds[start:end], dtype=np.float64), axis=0)
    return l2_normalize(mean)


@dataclass
class SimilarityMatrix:
    scores: np.ndarray  # (n_inst, n_text), already divided by temperature
    temperature: float


def similarity(insts, texts, tau: float) -> SimilarityMatrix:
    """Temperature-scaled dot products between normalized instance and text embeddings."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    a = np.atleast_2d(np.asarray(insts, dtype=np.float64))
    b = np.atleast_2d(np.asarray(texts, dtype=np.float64))
    return SimilarityMatrix(scores=(a @ b.T) / tau, temperature=float(tau))


def ovod_score(objectness_logit: float, category_scores) -> np.ndarray:
    """Objectness probability times the softmax over the categories of interest."""
    s = np.asarray(category_scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise ValueError("need at least one category score")
    return sigmoid(objectness_logit) * softmax(s)
