"""Hierarchical attention classifier (words -> sentences -> document).

A document is encoded independently of any batch it travels in: it is first
cropped to its own real extent, so padding introduced by batching never
touches the arithmetic.
"""

from __future__ import annotations

from dataclasses import asdict, astuple, dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionKind, attend, softmax
from .errors import ConfigError, ContractError, DimensionError
from .layers import PAD_ID, GruParams, bigru, dropout, embed, linear, uniform_init
from .tensor import Tensor

MODEL_NAMES = ("han", "hpan", "hsan")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_classes: int = 2
    embed_dim: int = 200
    gru_hidden: int = 50
    gru_layers: int = 1
    word_attention: AttentionKind = field(default_factory=AttentionKind.softmax)
    sentence_attention: AttentionKind = field(default_factory=AttentionKind.softmax)
    dropout_p: float = 0.1
    fine_tune_embeddings: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "num_classes", "embed_dim", "gru_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError("a classifier needs at least 2 classes")
        if self.gru_layers != 1:
            raise ConfigError("only single-layer GRU encoders are supported")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @property
    def attention_dim(self) -> int:
        return 2 * self.gru_hidden

    @classmethod
    def preset(cls, name: str, vocab_size: int, alpha_min: float | None = None, **overrides) -> "ModelConfig":
        """HAN = softmax at both levels, HPAN = pruned softmax, HSAN = sparsemax."""
        name = name.lower()
        if name not in MODEL_NAMES:
            raise ConfigError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")
        if alpha_min is not None and name != "hpan":
            raise ConfigError("alpha_min only applies to hpan")
        if name == "han":
            kind = AttentionKind.softmax()
        elif name == "hsan":
            kind = AttentionKind.sparsemax()
        else:
            kind = AttentionKind.pruned(0.05 if alpha_min is None else alpha_min)
        return cls(vocab_size=vocab_size, word_attention=kind, sentence_attention=kind, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["word_attention"] = self.word_attention.to_dict()
        d["sentence_attention"] = self.sentence_attention.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["word_attention"] = AttentionKind.from_dict(d["word_attention"])
        d["sentence_attention"] = AttentionKind.from_dict(d["sentence_attention"])
        return cls(**d)


class Parameters:
    """Named trainable tensors of one model."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def gru(self, prefix: str) -> GruParams:
        return GruParams(**{k: self.tensors[f"{prefix}.{k}"] for k in GruParams.__dataclass_fields__})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def with_tensor(self, name: str, tensor: Tensor) -> "Parameters":
        """Shallow copy with one tensor swapped (used by gradient checks)."""
        if name not in self.tensors:
            raise KeyError(name)
        swapped = dict(self.tensors)
        swapped[name] = tensor
        return Parameters(swapped)

    def copy(self) -> "Parameters":
        return Parameters({k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.items()})

    def validate(self, config: ModelConfig) -> None:
        expected = parameter_shapes(config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ConfigError(f"parameter names disagree with config (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ConfigError(f"{name} has shape {self.tensors[name].shape}, config implies {shape}")


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    E, H, A, C = config.embed_dim, config.gru_hidden, config.attention_dim, config.num_classes
    shapes: dict[str, tuple[int, ...]] = {"embedding": (config.vocab_size, E)}
    for prefix, inp in (("word_gru", E), ("sentence_gru", 2 * H)):
        for direction in ("fwd", "bwd"):
            for gate in "zrn":
                shapes[f"{prefix}.{direction}.W_{gate}"] = (H, inp)
                shapes[f"{prefix}.{direction}.U_{gate}"] = (H, H)
                shapes[f"{prefix}.{direction}.b_{gate}"] = (H,)
    for level in ("word_attention", "sentence_attention"):
        shapes[f"{level}.W"] = (A, 2 * H)
        shapes[f"{level}.b"] = (A,)
        shapes[f"{level}.context"] = (A,)
    shapes["classifier.W"] = (C, 2 * H)
    shapes["classifier.b"] = (C,)
    return shapes


def init_parameters(config: ModelConfig, rng: np.random.Generator,
                    embeddings: np.ndarray | None = None) -> Parameters:
    """Fresh parameters; ``embeddings`` (V x E) replaces the random table."""
    V, E = config.vocab_size, config.embed_dim
    if embeddings is None:
        table = rng.uniform(-0.1, 0.1, size=(V, E))
    else:
        table = np.array(embeddings, dtype=np.float64)
        if table.shape != (V, E):
            raise ConfigError(f"embedding table {table.shape} does not match (V={V}, E={E})")
    table[PAD_ID] = 0.0
    tensors = {"embedding": Tensor(table, requires_grad=config.fine_tune_embeddings)}
    for name, shape in parameter_shapes(config).items():
        if name == "embedding":
            continue
        if name.endswith(".context"):
            data = rng.uniform(-0.1, 0.1, size=shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = uniform_init(rng, shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return Parameters(tensors)


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, S, L) int
    word_mask: np.ndarray  # (B, S, L) bool
    sentence_mask: np.ndarray  # (B, S) bool
    labels: np.ndarray  # (B,) int

    def __len__(self) -> int:
        return len(self.labels)

    def document(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.token_ids[i], self.word_mask[i], self.sentence_mask[i]


class DocumentEncoding(NamedTuple):
    vector: Tensor
    word_alphas: np.ndarray  # (S, L), zeros on padding
    sentence_alphas: np.ndarray  # (S,)
    word_mask: np.ndarray
    sentence_mask: np.ndarray
    word_scores: np.ndarray  # pre-transform scores, zeros on padding
    sentence_scores: np.ndarray


def _word_level(ids, mask, params: Parameters, config: ModelConfig, mode: str, rng):
    w = embed(params["embedding"], ids)
    w = dropout(w, config.dropout_p, mode, rng)
    h = bigru(w, params.gru("word_gru.fwd"), params.gru("word_gru.bwd"), mask=mask)
    return attend(h, params["word_attention.context"], params["word_attention.W"],
                  params["word_attention.b"], config.word_attention, mask=mask)


def encode_sentence(word_ids, mask, params: Parameters, config: ModelConfig,
                    mode: str = "eval", rng=None) -> Tensor:
    """Sentence vector (2H,) for one sentence of word ids."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("sentence has no unmasked words")
    end = int(np.flatnonzero(mask)[-1]) + 1
    ids = np.asarray(word_ids)[None, :end]
    out = _word_level(ids, mask[None, :end], params, config, mode, rng)
    return T.reshape(out.pooled, (2 * config.gru_hidden,))


def encode_document(token_ids, word_mask, sentence_mask, params: Parameters, config: ModelConfig,
                    mode: str = "eval", rng=None) -> DocumentEncoding:
    """Document vector (2H,) plus the word and sentence attention maps."""
    token_ids = np.asarray(token_ids)
    word_mask = np.asarray(word_mask, dtype=bool)
    sentence_mask = np.asarray(sentence_mask, dtype=bool)
    if token_ids.ndim != 2 or word_mask.shape != token_ids.shape or sentence_mask.shape != token_ids.shape[:1]:
        raise DimensionError(
            f"document shapes disagree: ids {token_ids.shape}, word mask {word_mask.shape}, "
            f"sentence mask {sentence_mask.shape}")
    rows = np.flatnonzero(sentence_mask)
    if rows.size == 0:
        raise ContractError("document has no unmasked sentences")
    wm = word_mask[rows]
    if not wm.any(axis=1).all():
        raise ContractError("an unmasked sentence has no unmasked words")
    end = int(np.flatnonzero(wm.any(axis=0))[-1]) + 1
    wm = wm[:, :end]
    ids = token_ids[rows, :end]

    words = _word_level(ids, wm, params, config, mode, rng)
    hs = bigru(words.pooled, params.gru("sentence_gru.fwd"), params.gru("sentence_gru.bwd"))
    sents = attend(hs, params["sentence_attention.context"], params["sentence_attention.W"],
                   params["sentence_attention.b"], config.sentence_attention)

    word_alphas = np.zeros(token_ids.shape)
    word_alphas[rows, :end] = words.weights.data
    sentence_alphas = np.zeros(sentence_mask.shape)
    sentence_alphas[rows] = sents.weights.data
    word_scores = np.zeros(token_ids.shape)
    word_scores[rows, :end] = np.where(wm, words.scores, 0.0)
    sentence_scores = np.zeros(sentence_mask.shape)
    sentence_scores[rows] = sents.scores
    return DocumentEncoding(sents.pooled, word_alphas, sentence_alphas, word_mask, sentence_mask,
                            word_scores, sentence_scores)


def forward_detailed(batch: Batch, params: Parameters, config: ModelConfig, mode: str = "eval",
                     rng=None) -> tuple[Tensor, list[DocumentEncoding]]:
    encodings, logits = [], []
    for i in range(len(batch)):
        enc = encode_document(*batch.document(i), params, config, mode, rng)
        v = dropout(enc.vector, config.dropout_p, mode, rng)
        logits.append(linear(v, params["classifier.W"], params["classifier.b"]))
        encodings.append(enc)
    return T.stack(logits, axis=0), encodings


def forward(batch: Batch, params: Parameters, config: ModelConfig, mode: str = "eval", rng=None) -> Tensor:
    """Logits (B, C); each document is its own independent graph."""
    return forward_detailed(batch, params, config, mode, rng)[0]


def predict(logits):
    """Argmax class (lowest index on ties) and softmax probabilities."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    probs = softmax(z).data
    classes = np.argmax(probs, axis=-1)
    if z.ndim == 1:
        return int(classes), probs
    return classes, probs


@dataclass
class AttentionStats:
    """Counts of exact-zero weights over unmasked positions, mergeable across documents."""

    word_zero: int = 0
    word_total: int = 0
    sentence_zero: int = 0
    sentence_total: int = 0
    support_sum: int = 0
    support_rows: int = 0

    @property
    def pruned_word_fraction(self) -> float:
        return self.word_zero / self.word_total if self.word_total else 0.0

    @property
    def pruned_sentence_fraction(self) -> float:
        return self.sentence_zero / self.sentence_total if self.sentence_total else 0.0

    @property
    def mean_support_size(self) -> float:
        return self.support_sum / self.support_rows if self.support_rows else 0.0

    def merge(self, other: "AttentionStats") -> "AttentionStats":
        return AttentionStats(*(a + b for a, b in zip(astuple(self), astuple(other))))

    def as_dict(self) -> dict[str, float]:
        return {
            "pruned_word_fraction": self.pruned_word_fraction,
            "pruned_sentence_fraction": self.pruned_sentence_fraction,
            "mean_support_size": self.mean_support_size,
        }


def attention_stats(word_alphas, sent_alphas, word_mask=None, sentence_mask=None) -> AttentionStats:
    """Fractions of unmasked positions whose weight is exactly zero.

    ``word_alphas`` is (S, L) (a single sentence (L,) is also accepted) and
    ``sent_alphas`` is (S,).  Without masks every position counts as real.
    """
    wa = np.atleast_2d(np.asarray(word_alphas, dtype=np.float64))
    sa = np.atleast_1d(np.asarray(sent_alphas, dtype=np.float64))
    wm = np.ones(wa.shape, bool) if word_mask is None else np.atleast_2d(np.asarray(word_mask, bool))
    sm = np.ones(sa.shape, bool) if sentence_mask is None else np.atleast_1d(np.asarray(sentence_mask, bool))
    wm = wm & sm[:, None] if sm.shape[0] == wm.shape[0] else wm
    rows = wm.any(axis=1)
    return AttentionStats(
        word_zero=int(((wa == 0) & wm).sum()),
        word_total=int(wm.sum()),
        sentence_zero=int(((sa == 0) & sm).sum()),
        sentence_total=int(sm.sum()),
        support_sum=int(((wa > 0) & wm)[rows].sum()),
        support_rows=int(rows.sum()),
    )


def encodings_stats(encodings: Sequence[DocumentEncoding]) -> AttentionStats:
    total = AttentionStats()
    for enc in encodings:
        total = total.merge(attention_stats(enc.word_alphas, enc.sentence_alphas,
                                            enc.word_mask, enc.sentence_mask))
    return total

