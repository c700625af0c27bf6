"""Embedding lookup, GRU encoders, affine maps, dropout and the loss."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, VocabularyError
from .tensor import Tensor

PAD_ID = 0
UNK_ID = 1


@dataclass
class GruParams:
    """Weights of one GRU direction.

    ``W_*`` map the input (H x I), ``U_*`` the previous state (H x H); gates are
    update (z), reset (r) and candidate (n).
    """

    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_n: Tensor
    U_n: Tensor
    b_n: Tensor

    @property
    def hidden_size(self) -> int:
        return self.W_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]

    def validate(self) -> None:
        H, I = self.hidden_size, self.input_size
        for gate in "zrn":
            W, U, b = (getattr(self, f"{k}_{gate}") for k in "WUb")
            if W.shape != (H, I) or U.shape != (H, H) or b.shape != (H,):
                raise DimensionError(
                    f"GRU gate {gate}: W{W.shape} U{U.shape} b{b.shape} inconsistent with H={H}, I={I}")

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "GruParams":
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
        parts = {}
        for gate in "zrn":
            parts[f"W_{gate}"] = Tensor(uniform_init(rng, (hidden_size, input_size)), requires_grad=True)
            parts[f"U_{gate}"] = Tensor(uniform_init(rng, (hidden_size, hidden_size)), requires_grad=True)
            parts[f"b_{gate}"] = Tensor(np.zeros(hidden_size), requires_grad=True)
        return cls(**parts)


def uniform_init(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    bound = 1.0 / np.sqrt(shape[1])
    return rng.uniform(-bound, bound, size=shape)


def embed(table: Tensor, ids) -> Tensor:
    """Look up embedding rows; the padding row never receives gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = ids[(ids < 0) | (ids >= V)][0]
        raise VocabularyError(f"token id {bad} outside vocabulary of size {V}")
    rows = T.take_rows(table, ids)
    if not rows.requires_grad:
        return rows
    inner = rows._backward

    def backward(g):
        (gt,) = inner(g)
        gt[PAD_ID] = 0.0
        return (gt,)

    rows._backward = backward
    return rows


def linear(x, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ W.T + b``."""
    x = T.as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    return _affine(x, T.transpose(W), b)


def _affine(x: Tensor, W_t: Tensor, b: Tensor | None) -> Tensor:
    lead = x.shape[:-1]
    flat = x if x.ndim == 2 else T.reshape(x, (-1, x.shape[-1]))
    y = T.matmul(flat, W_t)
    if b is not None:
        y = T.add(y, b)
    return y if x.ndim == 2 else T.reshape(y, lead + (W_t.shape[1],))


def _gru_cell(xz, xr, xn, h_prev, Uz_t, Ur_t, Un_t) -> Tensor:
    # x-side projections (bias included) are precomputed by the caller
    z = T.sigmoid(T.add(xz, T.matmul(h_prev, Uz_t)))
    r = T.sigmoid(T.add(xr, T.matmul(h_prev, Ur_t)))
    n = T.tanh(T.add(xn, T.mul(r, T.matmul(h_prev, Un_t))))
    # (1 - z) * n + z * h_prev
    return T.add(n, T.mul(z, T.sub(h_prev, n)))


def gru_step(x_t, h_prev, p: GruParams) -> Tensor:
    """One GRU update for a vector ``x_t`` (I,) or a batch of rows (N, I)."""
    x_t, h_prev = T.as_tensor(x_t), T.as_tensor(h_prev)
    if x_t.shape[-1] != p.input_size or h_prev.shape[-1] != p.hidden_size:
        raise DimensionError(
            f"gru_step: x {x_t.shape}, h {h_prev.shape} vs I={p.input_size}, H={p.hidden_size}")
    vector = x_t.ndim == 1
    if vector:
        x_t = T.reshape(x_t, (1, -1))
        h_prev = T.reshape(h_prev, (1, -1))
    xz = _affine(x_t, T.transpose(p.W_z), p.b_z)
    xr = _affine(x_t, T.transpose(p.W_r), p.b_r)
    xn = _affine(x_t, T.transpose(p.W_n), p.b_n)
    h = _gru_cell(xz, xr, xn, h_prev, T.transpose(p.U_z), T.transpose(p.U_r), T.transpose(p.U_n))
    return T.reshape(h, (p.hidden_size,)) if vector else h


def _scan(xs: Tensor, p: GruParams, mask: np.ndarray | None, reverse: bool) -> list[Tensor]:
    N, L, _ = xs.shape
    H = p.hidden_size
    proj = [T.reshape(_affine(xs, T.transpose(W), b), (N, L, H))
            for W, b in ((p.W_z, p.b_z), (p.W_r, p.b_r), (p.W_n, p.b_n))]
    U_t = [T.transpose(U) for U in (p.U_z, p.U_r, p.U_n)]
    h = Tensor(np.zeros((N, H)))
    out: list[Tensor] = [None] * L  # type: ignore[list-item]
    steps = range(L - 1, -1, -1) if reverse else range(L)
    for t in steps:
        h_new = _gru_cell(proj[0][:, t], proj[1][:, t], proj[2][:, t], h, *U_t)
        if mask is not None and not mask[:, t].all():
            # masked steps carry the previous state through unchanged
            h_new = T.where(mask[:, t, None], h_new, h)
        h = h_new
        out[t] = h
    return out


def bigru(xs, fwd: GruParams, bwd: GruParams, mask=None) -> Tensor:
    """Bidirectional GRU from zero initial states.

    ``xs`` is (T, I) or a batch of sequences (N, T, I); the result concatenates
    the left-to-right and right-to-left states, giving (..., T, 2H).  Positions
    where ``mask`` is false leave the running state untouched so padding never
    leaks into real positions.
    """
    xs = T.as_tensor(xs)
    single = xs.ndim == 2
    if single:
        xs = T.reshape(xs, (1,) + xs.shape)
    if xs.ndim != 3:
        raise DimensionError(f"bigru expects (T, I) or (N, T, I), got {xs.shape}")
    if xs.shape[1] < 1:
        raise ContractError("bigru needs at least one timestep")
    if xs.shape[2] != fwd.input_size or xs.shape[2] != bwd.input_size:
        raise DimensionError(f"bigru: input size {xs.shape[2]} vs GRU input {fwd.input_size}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(xs.shape[:2])
    forward = T.stack(_scan(xs, fwd, mask, reverse=False), axis=1)
    backward = T.stack(_scan(xs, bwd, mask, reverse=True), axis=1)
    out = T.concat([forward, backward], axis=2)
    if single:
        out = T.reshape(out, out.shape[1:])
    return out


def dropout(x, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = T.as_tensor(x)
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return T.mul(x, Tensor(keep))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    Accepts a single logit vector (C,) with an int label, or a batch (B, C)
    with B labels.
    """
    logits = T.as_tensor(logits)
    z = logits.data.reshape(1, -1) if logits.ndim == 1 else logits.data
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, C = z.shape
    if C < 2:
        raise ContractError(f"cross_entropy needs at least 2 classes, got {C}")
    if labels.shape != (B,):
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {B} rows")
    if labels.min() < 0 or labels.max() >= C:
        raise ContractError(f"label out of range for {C} classes: {labels.tolist()}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    nll = log_norm - shifted[np.arange(B), labels]
    probs = np.exp(shifted - log_norm[:, None])
    shape = logits.shape

    def backward(g):
        d = probs.copy()
        d[np.arange(B), labels] -= 1.0
        return ((g / B) * d.reshape(shape),)

    return T.custom_op(np.array(nll.mean()), (logits,), backward, "cross_entropy")
