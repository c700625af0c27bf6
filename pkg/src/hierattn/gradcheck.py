"""Full-model finite-difference gradient check at a tiny configuration.

Random instances are redrawn until they exercise the variant's sparse path
(HPAN prunes at least one weight, HSAN has a support smaller than its row)
while staying at least ``GUARD`` away from every point where the set of
nonzero weights would change.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import sparsemax_forward, softmax
from .layers import PAD_ID, cross_entropy
from .model import Batch, ModelConfig, Parameters, encodings_stats, forward, forward_detailed, init_parameters
from .tensor import finite_diff_grad, no_grad

TINY = {"vocab_size": 10, "embed_dim": 4, "gru_hidden": 3, "num_classes": 2}
TINY_S, TINY_L = 2, 3
GUARD = 1e-3
TOLERANCE = 1e-3


@dataclass
class GradcheckReport:
    model: str
    errors: dict[str, float] = field(default_factory=dict)
    non_finite: list[str] = field(default_factory=list)
    pruned_word_fraction: float = 0.0
    pruned_sentence_fraction: float = 0.0
    attempts: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst_parameter(self) -> str:
        return max(self.errors, key=self.errors.get)

    def passed(self, tol: float = TOLERANCE) -> bool:
        return not self.non_finite and self.max_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor) for one parameter group."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def random_batch(rng: np.random.Generator, n_docs: int, vocab_size: int = 10,
                 S: int = TINY_S, L: int = TINY_L) -> Batch:
    """Documents of 1..S sentences with 1..L words each, padded to (S, L)."""
    ids = np.full((n_docs, S, L), PAD_ID, dtype=np.int64)
    word_mask = np.zeros((n_docs, S, L), dtype=bool)
    sentence_mask = np.zeros((n_docs, S), dtype=bool)
    for b in range(n_docs):
        # the first document always fills the full (S, L) geometry
        n_sent = S if b == 0 else int(rng.integers(1, S + 1))
        for s in range(n_sent):
            n_words = L if b == 0 else int(rng.integers(1, L + 1))
            ids[b, s, :n_words] = rng.integers(2, vocab_size, size=n_words)
            word_mask[b, s, :n_words] = True
            sentence_mask[b, s] = True
    labels = rng.integers(0, 2, size=n_docs)
    return Batch(ids, word_mask, sentence_mask, labels)


def random_parameters(config: ModelConfig, rng: np.random.Generator, context_scale: float = 3.0) -> Parameters:
    """All entries uniform in [-1, 1]; context vectors scaled to sharpen attention."""
    params = init_parameters(config, rng)
    for name, p in params.items():
        p.data = rng.uniform(-1.0, 1.0, size=p.shape)
        if name.endswith(".context"):
            p.data *= context_scale
    params["embedding"].data[PAD_ID] = 0.0
    return params


def _boundary_distance(config: ModelConfig, encodings) -> float:
    """Smallest distance of any unmasked weight from a support change."""
    closest = np.inf
    levels = (
        (config.word_attention, "word_scores", "word_mask"),
        (config.sentence_attention, "sentence_scores", "sentence_mask"),
    )
    for enc in encodings:
        for kind, score_name, mask_name in levels:
            if kind.variant == "softmax":
                continue
            scores = np.atleast_2d(getattr(enc, score_name))
            mask = np.atleast_2d(getattr(enc, mask_name))
            for z, m in zip(scores, mask):
                if not m.any():
                    continue
                if kind.variant == "pruned":
                    alpha = softmax(z, m).data[m]
                    closest = min(closest, float(np.abs(alpha - kind.alpha_min).min()))
                else:
                    _, tau, _ = sparsemax_forward(z, m)
                    closest = min(closest, float(np.abs(z[m] - tau).min()))
    return closest


def _exercises_sparsity(config: ModelConfig, encodings) -> bool:
    if config.word_attention.variant == "softmax" and config.sentence_attention.variant == "softmax":
        return True
    stats = encodings_stats(encodings)
    return stats.word_zero + stats.sentence_zero > 0


def tiny_problem(model: str, seed: int = 0, n_docs: int = 4, max_attempts: int = 200):
    """Parameters and a batch satisfying the sparsity and boundary requirements."""
    config = ModelConfig.preset(model, TINY["vocab_size"], embed_dim=TINY["embed_dim"],
                                gru_hidden=TINY["gru_hidden"], num_classes=TINY["num_classes"],
                                dropout_p=0.0)
    for attempt in range(1, max_attempts + 1):
        rng = np.random.default_rng([seed, attempt])
        params = random_parameters(config, rng)
        batch = random_batch(rng, n_docs, config.vocab_size)
        with no_grad():
            _, encodings = forward_detailed(batch, params, config)
        if _exercises_sparsity(config, encodings) and _boundary_distance(config, encodings) > GUARD:
            return config, params, batch, encodings, attempt
    raise RuntimeError(f"no admissible {model} instance in {max_attempts} attempts")


def gradcheck(model: str, seed: int = 0, n_docs: int = 4, h: float = 1e-5) -> GradcheckReport:
    """Compare backprop against central differences for every parameter tensor."""
    config, params, batch, encodings, attempts = tiny_problem(model, seed, n_docs)
    stats = encodings_stats(encodings)
    report = GradcheckReport(model, pruned_word_fraction=stats.pruned_word_fraction,
                             pruned_sentence_fraction=stats.pruned_sentence_fraction, attempts=attempts)

    def loss(p: Parameters):
        return cross_entropy(forward(batch, p, config), batch.labels)

    params.zero_grad()
    loss(params).backward()
    for name, tensor in params.items():
        analytic = tensor.grad
        numeric = finite_diff_grad(lambda x: loss(params.with_tensor(name, x)), tensor, h).data
        if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
            report.non_finite.append(name)
            report.errors[name] = float("inf")
            continue
        report.errors[name] = relative_error(analytic, numeric)
    return report
