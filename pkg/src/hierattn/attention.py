"""Attention weight transforms and attention pooling.

Three interchangeable maps from scores to a probability vector are provided:
``softmax``, ``sparsemax`` (Euclidean projection onto the simplex) and
``prune_renormalize`` (softmax weights below a threshold zeroed, survivors
rescaled).  All of them operate along the last axis and accept a boolean mask
of valid positions; masked positions always receive weight exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ContractError
from .layers import linear
from .tensor import Tensor

PRUNE_EPS = 1e-12


@dataclass(frozen=True)
class AttentionKind:
    """Which transform an attention layer uses.

    ``variant`` is one of ``"softmax"``, ``"sparsemax"`` or ``"pruned"``;
    ``alpha_min`` is only meaningful (and required) for ``"pruned"``.
    """

    variant: str = "softmax"
    alpha_min: float | None = None

    def __post_init__(self):
        if self.variant not in ("softmax", "sparsemax", "pruned"):
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.variant == "pruned":
            if self.alpha_min is None or not 0.0 < self.alpha_min < 1.0:
                raise ValueError(f"pruned attention needs alpha_min in (0, 1), got {self.alpha_min}")
        elif self.alpha_min is not None:
            raise ValueError(f"alpha_min only applies to pruned attention, not {self.variant}")

    @classmethod
    def softmax(cls) -> "AttentionKind":
        return cls("softmax")

    @classmethod
    def sparsemax(cls) -> "AttentionKind":
        return cls("sparsemax")

    @classmethod
    def pruned(cls, alpha_min: float = 0.05) -> "AttentionKind":
        return cls("pruned", alpha_min)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "alpha_min": self.alpha_min}

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionKind":
        return cls(d["variant"], d.get("alpha_min"))


class SparsemaxResult(NamedTuple):
    p: Tensor
    tau: np.ndarray
    support_size: np.ndarray


class AttentionOutput(NamedTuple):
    weights: Tensor
    pooled: Tensor
    support: np.ndarray
    scores: np.ndarray


def _valid_mask(z: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        valid = np.ones(z.shape, dtype=bool)
    else:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    if z.ndim == 0:
        raise ContractError("attention transforms need at least one position")
    if not valid.any(axis=-1).all():
        raise ContractError("every row needs at least one unmasked position")
    return valid


# ------------------------------------------------------------------ softmax


def softmax(z, mask=None) -> Tensor:
    """Masked softmax with max-subtraction."""
    z = T.as_tensor(z)
    valid = _valid_mask(z.data, mask)
    x = np.where(valid, z.data, -np.inf)
    e = np.where(valid, np.exp(x - x.max(axis=-1, keepdims=True)), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return T.custom_op(p, (z,), backward, "softmax")


# ---------------------------------------------------------------- sparsemax


def sparsemax_forward(z: np.ndarray, mask=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sorted-threshold projection of each row of ``z`` onto the simplex.

    Returns ``(p, tau, k)`` where ``p = max(z - tau, 0)`` and ``k`` is the
    support size.
    """
    z = np.asarray(z, dtype=np.float64)
    valid = _valid_mask(z, mask)
    n_valid = valid.sum(axis=-1, keepdims=True)
    # shifting by the row max is exact (shift invariance) and keeps k >= 1 for huge |z|
    top = np.max(np.where(valid, z, -np.inf), axis=-1, keepdims=True)
    zs = np.where(valid, z - top, -np.inf)
    # masked entries sort to the end and are excluded by the k <= n_valid guard
    z_sorted = -np.sort(-zs, axis=-1)
    ks = np.arange(1, z.shape[-1] + 1)
    in_range = ks <= n_valid
    z_sorted = np.where(in_range, z_sorted, 0.0)
    cumsum = np.cumsum(z_sorted, axis=-1)
    cond = in_range & (1.0 + ks * z_sorted > cumsum)
    k = np.max(np.where(cond, ks, 1), axis=-1, keepdims=True)
    tau_shifted = (np.take_along_axis(cumsum, k - 1, axis=-1) - 1.0) / k
    p = np.where(valid, np.maximum(zs - tau_shifted, 0.0), 0.0)
    return p, (tau_shifted + top)[..., 0], k[..., 0]


def sparsemax_backward(res: SparsemaxResult, upstream) -> np.ndarray:
    """Jacobian-vector product of sparsemax: on the support, subtract the mean."""
    p = res.p.data if isinstance(res.p, Tensor) else np.asarray(res.p)
    g = np.asarray(upstream, dtype=np.float64)
    support = p > 0
    count = np.maximum(support.sum(axis=-1, keepdims=True), 1)
    mean = np.where(support, g, 0.0).sum(axis=-1, keepdims=True) / count
    return np.where(support, g - mean, 0.0)


def sparsemax(z, mask=None) -> SparsemaxResult:
    z = T.as_tensor(z)
    p, tau, k = sparsemax_forward(z.data, mask)
    out = T.custom_op(p, (z,), lambda g: (sparsemax_backward(SparsemaxResult(p, tau, k), g),), "sparsemax")
    return SparsemaxResult(out, tau, k)


# ------------------------------------------------------------------ pruning


def _prune_plan(alpha: np.ndarray, alpha_min: float, mask):
    keep = alpha >= alpha_min
    if mask is not None:
        keep &= np.broadcast_to(np.asarray(mask, dtype=bool), alpha.shape)
    fallback = ~keep.any(axis=-1, keepdims=True)
    total = np.maximum(np.where(keep, alpha, 0.0).sum(axis=-1, keepdims=True), PRUNE_EPS)
    return keep, fallback, total


def prune_renormalize_forward(alpha, alpha_min: float, mask=None) -> np.ndarray:
    """Zero weights strictly below ``alpha_min`` and renormalise the rest.

    A row whose entries are all below the threshold keeps only its first
    largest (unmasked) entry, with weight 1.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    keep, fallback, total = _prune_plan(alpha, alpha_min, mask)
    out = np.where(keep, alpha, 0.0) / total
    if fallback.any():
        scores = alpha if mask is None else np.where(mask, alpha, -np.inf)
        one_hot = np.zeros_like(alpha)
        np.put_along_axis(one_hot, np.argmax(scores, axis=-1)[..., None], 1.0, axis=-1)
        out = np.where(fallback, one_hot, out)
    return out


def prune_backward(alpha, alpha_min: float, upstream, mask=None) -> np.ndarray:
    """Gradient of the renormalisation with the survivor set held fixed."""
    alpha = np.asarray(alpha, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    keep, fallback, total = _prune_plan(alpha, alpha_min, mask)
    dot = np.where(keep, g * alpha, 0.0).sum(axis=-1, keepdims=True)
    grad = np.where(keep, (g * total - dot) / (total * total), 0.0)
    return np.where(fallback, 0.0, grad)


def prune_renormalize(alpha, alpha_min: float, mask=None) -> Tensor:
    alpha = T.as_tensor(alpha)
    if not 0.0 < alpha_min < 1.0:
        raise ValueError(f"alpha_min must lie in (0, 1), got {alpha_min}")
    a = alpha.data
    out = prune_renormalize_forward(a, alpha_min, mask)
    return T.custom_op(out, (alpha,), lambda g: (prune_backward(a, alpha_min, g, mask),), "prune")


# ---------------------------------------------------------------- attention


def transform(scores, kind: AttentionKind, mask=None) -> Tensor:
    if kind.variant == "softmax":
        return softmax(scores, mask)
    if kind.variant == "sparsemax":
        return sparsemax(scores, mask).p
    return prune_renormalize(softmax(scores, mask), kind.alpha_min, mask)


def attend(h, context: Tensor, W: Tensor, b: Tensor, kind: AttentionKind, mask=None) -> AttentionOutput:
    """Score each row of ``h`` against ``context`` and pool by the weights.

    ``h`` is (T, D) or a batch (N, T, D); scores are
    ``tanh(W h_t + b) . context`` and the pooled vector is ``sum_t a_t h_t``.
    """
    h = T.as_tensor(h)
    if h.ndim not in (2, 3):
        raise ContractError(f"attend expects (T, D) or (N, T, D), got {h.shape}")
    u = T.tanh(linear(h, W, b))
    A = context.shape[0]
    scores = T.reshape(T.matmul(T.reshape(u, (-1, A)), T.reshape(context, (A, 1))), h.shape[:-1])
    weights = transform(scores, kind, mask)
    pooled = T.weighted_sum(weights, h)
    return AttentionOutput(weights, pooled, weights.data > 0, scores.data)
