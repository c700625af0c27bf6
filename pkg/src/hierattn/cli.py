"""Command-line entry point: ``train``, ``eval``, ``gradcheck`` and ``transform``.

Exit codes: 0 success, 1 gradient check failure, 2 bad flags, 3 data or
checkpoint errors, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .attention import prune_renormalize_forward, softmax, sparsemax_forward
from .data import DataConfig, build_vocab, corpus_fingerprint, load_embeddings, load_imdb, subsample
from .errors import (CheckpointError, ConfigError, ContractError, HanError, IngestionError, NumericError,
                     ParseError)
from .gradcheck import TOLERANCE, gradcheck
from .model import MODEL_NAMES, ModelConfig, init_parameters
from .rng import rng_stream
from .train import TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_GRADCHECK, EXIT_FLAGS, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
METRICS_SCHEMA = "# hierattn metrics v1"
METRICS_COLUMNS = ["epoch", "train_loss", "val_accuracy", "pruned_word_frac", "pruned_sent_frac",
                   "test_accuracy"]


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _fmt(x: float) -> str:
    return format(float(x) + 0.0, ".10g")


def _load_splits(data_dir, seed: int, data_config: DataConfig):
    splits = load_imdb(data_dir, seed)
    return subsample(splits, seed, data_config.train_size, data_config.validation_size, data_config.test_size)


# ------------------------------------------------------------------ train


def cmd_train(args) -> int:
    if args.alpha_min is not None and args.model != "hpan":
        raise _Fail(EXIT_FLAGS, "--alpha-min is only meaningful for --model hpan")
    try:
        data_config = DataConfig(s_cap=args.s_cap, l_cap=args.l_cap, min_frequency=args.min_frequency,
                                 train_size=args.train_size, validation_size=args.val_size,
                                 test_size=args.test_size)
        train_config = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                                   seed=args.seed, grad_clip=None if args.no_clip else args.grad_clip)
    except (ConfigError, ValueError) as exc:
        raise _Fail(EXIT_FLAGS, str(exc)) from exc

    out = Path(args.out)
    try:
        splits = _load_splits(args.data, args.seed, data_config)
        vocab = build_vocab(splits.train, data_config.min_frequency)
    except (IngestionError, OSError, ContractError) as exc:
        raise _Fail(EXIT_DATA, str(exc)) from exc
    try:
        model_config = ModelConfig.preset(args.model, len(vocab), alpha_min=args.alpha_min,
                                          embed_dim=args.embed_dim, gru_hidden=args.hidden,
                                          dropout_p=args.dropout,
                                          fine_tune_embeddings=not args.freeze_embeddings)
    except ValueError as exc:
        raise _Fail(EXIT_FLAGS, str(exc)) from exc
    embeddings, coverage = None, None
    if args.embeddings:
        try:
            embeddings, coverage = load_embeddings(args.embeddings, vocab, model_config.embed_dim,
                                                   rng_stream(args.seed, "embeddings"))
        except (ParseError, ConfigError, OSError) as exc:
            raise _Fail(EXIT_DATA, str(exc)) from exc
    train_docs = [vocab.encode(d) for d in splits.train]
    val_docs = [vocab.encode(d) for d in splits.validation]
    test_docs = [vocab.encode(d) for d in splits.test]

    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "seed": args.seed,
        "model": args.model,
        "model_config": model_config.to_dict(),
        "train_config": asdict(train_config),
        "data_config": asdict(data_config),
        "data": str(args.data),
        "embeddings": args.embeddings,
        "embedding_coverage": coverage,
        "corpus_fingerprint": corpus_fingerprint(args.data),
        "split_sizes": {"train": len(train_docs), "validation": len(val_docs), "test": len(test_docs)},
        "outputs": {"metrics": "metrics.csv", "checkpoint": "checkpoint.hanc"},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    params = init_parameters(model_config, rng_stream(args.seed, "init"), embeddings)
    with open(out / "metrics.csv", "w", newline="") as fh:
        fh.write(METRICS_SCHEMA + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)

        def emit(record):
            writer.writerow([
                record.epoch, _fmt(record.train_loss), _fmt(record.validation_accuracy),
                _fmt(record.validation_stats.pruned_word_fraction),
                _fmt(record.validation_stats.pruned_sentence_fraction),
                "" if record.test_accuracy is None else _fmt(record.test_accuracy),
            ])
            fh.flush()
            print(f"epoch {record.epoch}: loss {record.train_loss:.4f} "
                  f"val_acc {record.validation_accuracy:.4f} ({record.wall_time:.1f}s)", file=sys.stderr)

        try:
            records = fit(params, train_docs, val_docs, test_docs, model_config, train_config,
                          data_config, on_epoch=emit)
        except NumericError as exc:
            raise _Fail(EXIT_NUMERIC, f"numeric abort: {exc}") from exc
    save_checkpoint(out / "checkpoint.hanc", params, model_config, train_config, data_config, vocab)
    final = records[-1].test_accuracy
    if final is not None:
        print(f"test_accuracy {final:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (CheckpointError, ConfigError) as exc:
        raise _Fail(EXIT_DATA, f"{args.checkpoint}: {exc}") from exc
    try:
        splits = _load_splits(args.data, ckpt.train_config.seed, ckpt.data_config)
    except (IngestionError, OSError) as exc:
        raise _Fail(EXIT_DATA, str(exc)) from exc
    docs = splits.test if args.split == "test" else splits.validation
    docs = [ckpt.vocab.encode(d) for d in docs]
    acc = evaluate(ckpt.params, docs, ckpt.model_config, ckpt.data_config, ckpt.train_config.batch_size)
    print("split,accuracy")
    print(f"{args.split},{acc:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(f"split,accuracy\n{args.split},{acc:.4f}\n")
    return EXIT_OK


# -------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    report = gradcheck(args.model, seed=args.seed)
    for name, err in report.errors.items():
        print(f"{name:32s} {err:.3e}")
    print(f"max relative error {report.max_error:.3e} "
          f"(pruned words {report.pruned_word_fraction:.3f}, sentences {report.pruned_sentence_fraction:.3f})")
    if not report.passed():
        bad = report.non_finite[0] if report.non_finite else report.worst_parameter
        print(f"FAIL: {bad} exceeds {TOLERANCE:g} or is non-finite", file=sys.stderr)
        return EXIT_GRADCHECK
    print("PASS")
    return EXIT_OK


# -------------------------------------------------------------- transform


def _parse_vector(text: str) -> np.ndarray:
    try:
        values = np.array([float(v) for v in text.split(",") if v.strip()], dtype=np.float64)
    except ValueError as exc:
        raise _Fail(EXIT_FLAGS, f"cannot parse --input {text!r}") from exc
    if values.size == 0 or not np.all(np.isfinite(values)):
        raise _Fail(EXIT_FLAGS, "--input needs at least one finite value")
    return values


def cmd_transform(args) -> int:
    z = _parse_vector(args.input)
    if args.alpha_min is not None and args.fn != "prune":
        raise _Fail(EXIT_FLAGS, "--alpha-min only applies to --fn prune")
    if args.fn == "softmax":
        print(",".join(_fmt(x) for x in softmax(z).data))
    elif args.fn == "sparsemax":
        p, tau, k = sparsemax_forward(z)
        print(",".join(_fmt(x) for x in p) + f"  tau={_fmt(tau)} support={int(k)}")
    else:
        alpha_min = 0.05 if args.alpha_min is None else args.alpha_min
        if not 0.0 < alpha_min < 1.0:
            raise _Fail(EXIT_FLAGS, "--alpha-min must lie in (0, 1)")
        print(",".join(_fmt(x) for x in prune_renormalize_forward(z, alpha_min)))
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierattn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on an IMDB-layout corpus")
    p.add_argument("--model", choices=MODEL_NAMES, required=True)
    p.add_argument("--data", required=True, help="root with train/ and test/ subdirectories")
    p.add_argument("--embeddings", help="text embedding file (token v1 ... vE)")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--alpha-min", type=float, default=None, help="hpan threshold (default 0.05)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--s-cap", type=int, default=20)
    p.add_argument("--l-cap", type=int, default=60)
    p.add_argument("--min-frequency", type=int, default=2)
    p.add_argument("--train-size", type=int, default=None)
    p.add_argument("--val-size", type=int, default=None)
    p.add_argument("--test-size", type=int, default=None)
    p.add_argument("--embed-dim", type=int, default=200)
    p.add_argument("--hidden", type=int, default=50)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--grad-clip", type=float, default=5.0)
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--freeze-embeddings", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("test", "validation"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--model", choices=MODEL_NAMES, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("transform", help="apply one attention transform to a vector")
    p.add_argument("--fn", choices=("softmax", "sparsemax", "prune"), required=True)
    p.add_argument("--input", required=True, help='comma-separated floats, e.g. "2,0"')
    p.add_argument("--alpha-min", type=float, default=None)
    p.set_defaults(func=cmd_transform)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except HanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
