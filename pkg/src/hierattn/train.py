"""Adam training loop, evaluation and the binary checkpoint container."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import DataConfig, Document, Vocabulary, make_batches
from .errors import CheckpointError, ConfigError, ContractError, NumericError
from .layers import PAD_ID, cross_entropy
from .model import (AttentionStats, ModelConfig, Parameters, encodings_stats, forward_detailed,
                    parameter_shapes, predict)
from .rng import rng_stream
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HANC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    lr: float = 0.001
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    grad_clip: float | None = 5.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or None")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: Parameters) -> "AdamState":
        return cls({k: np.zeros(p.shape) for k, p in params.items()},
                   {k: np.zeros(p.shape) for k, p in params.items()})


def _trainable(params: Parameters):
    return [(name, p) for name, p in params.items() if p.requires_grad]


def check_finite_grads(params: Parameters) -> None:
    for name, p in _trainable(params):
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name}", parameter=name)


def adam_step(params: Parameters, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update using the grads stored on ``params``."""
    check_finite_grads(params)
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in _trainable(params):
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if name == "embedding":
            data[PAD_ID] = 0.0
        p.data = data


def clip_grad_norm(params: Parameters, max_norm: float) -> float:
    """Rescale all grads so their joint L2 norm is at most ``max_norm``."""
    grads = [p.grad for _, p in _trainable(params) if p.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total > max_norm:
        factor = max_norm / total
        for _, p in _trainable(params):
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    validation_accuracy: float
    validation_stats: AttentionStats = field(default_factory=AttentionStats)
    test_accuracy: float | None = None
    wall_time: float = 0.0


def train_epoch(params: Parameters, docs: Sequence[Document], model_config: ModelConfig,
                train_config: TrainConfig, data_config: DataConfig, state: AdamState,
                shuffle_rng: np.random.Generator, dropout_rng: np.random.Generator) -> float:
    """One pass over ``docs``; returns the mean per-document training loss."""
    total, count = 0.0, 0
    for batch in make_batches(docs, train_config.batch_size, data_config.s_cap, data_config.l_cap,
                              rng=shuffle_rng, shuffle=True):
        params.zero_grad()
        logits, _ = forward_detailed(batch, params, model_config, "train", dropout_rng)
        loss = cross_entropy(logits, batch.labels)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite training loss {value}")
        loss.backward()
        check_finite_grads(params)
        if train_config.grad_clip is not None:
            clip_grad_norm(params, train_config.grad_clip)
        adam_step(params, state, train_config.lr, train_config.beta1, train_config.beta2, train_config.eps)
        total += value * len(batch)
        count += len(batch)
    params.zero_grad()
    return total / count


def evaluate_with_stats(params: Parameters, docs: Sequence[Document], model_config: ModelConfig,
                        data_config: DataConfig, batch_size: int = 64) -> tuple[float, AttentionStats]:
    if not docs:
        raise ContractError("cannot evaluate on an empty split")
    correct = 0
    stats = AttentionStats()
    with no_grad():
        for batch in make_batches(docs, batch_size, data_config.s_cap, data_config.l_cap):
            logits, encodings = forward_detailed(batch, params, model_config, "eval")
            classes, _ = predict(logits)
            correct += int((classes == batch.labels).sum())
            stats = stats.merge(encodings_stats(encodings))
    return correct / len(docs), stats


def evaluate(params: Parameters, docs: Sequence[Document], model_config: ModelConfig,
             data_config: DataConfig, batch_size: int = 64) -> float:
    """Fraction of documents whose predicted class equals the label (eval mode)."""
    return evaluate_with_stats(params, docs, model_config, data_config, batch_size)[0]


def fit(params: Parameters, train_docs: Sequence[Document], validation_docs: Sequence[Document],
        test_docs: Sequence[Document] | None, model_config: ModelConfig, train_config: TrainConfig,
        data_config: DataConfig,
        on_epoch: Callable[[MetricsRecord], None] | None = None) -> list[MetricsRecord]:
    """Train for ``train_config.epochs`` epochs, validating after each; test once at the end."""
    state = AdamState.init(params)
    shuffle_rng = rng_stream(train_config.seed, "shuffle")
    dropout_rng = rng_stream(train_config.seed, "dropout")
    records = []
    for epoch in range(1, train_config.epochs + 1):
        start = time.perf_counter()
        loss = train_epoch(params, train_docs, model_config, train_config, data_config, state,
                           shuffle_rng, dropout_rng)
        val_acc, stats = evaluate_with_stats(params, validation_docs, model_config, data_config,
                                             train_config.batch_size)
        record = MetricsRecord(epoch, loss, val_acc, stats)
        if epoch == train_config.epochs and test_docs:
            record.test_accuracy = evaluate(params, test_docs, model_config, data_config,
                                            train_config.batch_size)
        record.wall_time = time.perf_counter() - start
        logger.info("epoch %d loss %.4f val %.4f", epoch, loss, val_acc)
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return records


# --------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    params: Parameters
    model_config: ModelConfig
    train_config: TrainConfig
    data_config: DataConfig
    vocab: Vocabulary


def save_checkpoint(path, params: Parameters, model_config: ModelConfig, train_config: TrainConfig,
                    data_config: DataConfig, vocab: Vocabulary) -> None:
    """Write the ``HANC`` container.

    Layout (little-endian): magic, u32 version, u32 header length, UTF-8 JSON
    header (configs + vocabulary), u32 tensor count, then per tensor: u32 name
    length, name, u32 rank, u32 extents, float64 payload.
    """
    header = json.dumps({
        "model_config": model_config.to_dict(),
        "train_config": asdict(train_config),
        "data_config": asdict(data_config),
        "vocab": {"itos": vocab.itos, "min_frequency": vocab.min_frequency},
    }, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header,
              struct.pack("<I", len(params))]
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{tensor.ndim}I", tensor.ndim, *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint, validating every tensor against the stored config."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
        model_config = ModelConfig.from_dict(header["model_config"])
        train_config = TrainConfig(**header["train_config"])
        data_config = DataConfig(**header["data_config"])
        vocab = Vocabulary(header["vocab"]["itos"][2:], header["vocab"]["min_frequency"])
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        payload = np.frombuffer(r.take(8 * int(np.prod(shape, dtype=np.int64))), dtype="<f8")
        tensors[name] = payload.astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after the last tensor")
    if len(vocab) != model_config.vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} entries, config declares {model_config.vocab_size}")
    expected = parameter_shapes(model_config)
    for name, shape in expected.items():
        if name not in tensors:
            raise ConfigError(f"checkpoint lacks parameter {name}")
        if tensors[name].shape != shape:
            raise ConfigError(f"{name} stored with shape {tensors[name].shape}, config implies {shape}")
    if set(tensors) != set(expected):
        raise ConfigError(f"unexpected parameters {sorted(set(tensors) - set(expected))}")
    params = Parameters({
        name: Tensor(tensors[name],
                     requires_grad=name != "embedding" or model_config.fine_tune_embeddings)
        for name in expected
    })
    return Checkpoint(params, model_config, train_config, data_config, vocab)
