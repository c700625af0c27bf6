"""Corpus ingestion: tokenizer, vocabulary, embeddings, IMDB reader, batching."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, IngestionError, ParseError
from .layers import PAD_ID, UNK_ID
from .model import Batch
from .rng import rng_stream

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
VALIDATION_RATIO = 0.30

_BREAK_TAG = re.compile(r"<\s*br\s*/?\s*>", re.IGNORECASE)
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_PIECES = re.compile(r"[\w']+|[^\w\s]")
_CLITICS = ("'s", "'re", "'ve", "'ll", "'d", "'m")


@dataclass
class Document:
    """A labelled document; ``sentences`` hold token strings or token ids."""

    sentences: list[list]
    label: int
    source_id: str = ""


@dataclass
class CorpusSplits:
    train: list[Document]
    validation: list[Document]
    test: list[Document]


@dataclass
class DataConfig:
    s_cap: int = 20
    l_cap: int = 60
    min_frequency: int = 2
    train_size: int | None = None
    validation_size: int | None = None
    test_size: int | None = None

    def __post_init__(self):
        if self.s_cap < 1 or self.l_cap < 1:
            raise ConfigError(f"caps must be >= 1, got S={self.s_cap}, L={self.l_cap}")
        if self.min_frequency < 1:
            raise ConfigError("min_frequency must be >= 1")


# ---------------------------------------------------------------- tokenizer


def _split_word(piece: str) -> list[str]:
    """Detach surrounding apostrophes and trailing clitics from one word."""
    if "'" not in piece:
        return [piece]
    lead = []
    while len(piece) > 1 and piece.startswith("'") and piece not in _CLITICS:
        lead.append("'")
        piece = piece[1:]
    tail: list[str] = []
    while len(piece) > 1 and piece not in _CLITICS:
        if piece.endswith("'"):
            cut = "'"
        elif len(piece) > 3 and piece.endswith("n't"):
            cut = "n't"
        else:
            cut = next((c for c in _CLITICS if len(piece) > len(c) and piece.endswith(c)), None)
            if cut is None:
                break
        tail.insert(0, cut)
        piece = piece[: -len(cut)]
    return lead + [piece] + tail


def tokenize(text: str) -> list[list[str]]:
    """Split raw text into lowercase sentences of word and punctuation tokens.

    >>> tokenize("Good movie. Loved it!")
    [['good', 'movie', '.'], ['loved', 'it', '!']]
    """
    sentences = []
    for block in _BREAK_TAG.split(text):
        for chunk in _SENTENCE_END.split(block):
            tokens = []
            for piece in _PIECES.findall(chunk.lower()):
                tokens.extend(_split_word(piece))
            if tokens:
                sentences.append(tokens)
    return sentences


# --------------------------------------------------------------- vocabulary


class Vocabulary:
    def __init__(self, tokens: Sequence[str], min_frequency: int = 1):
        self.itos = [PAD_TOKEN, UNK_TOKEN] + [t for t in tokens if t not in (PAD_TOKEN, UNK_TOKEN)]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigError("vocabulary tokens must be unique")
        self.min_frequency = min_frequency

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, doc: Document) -> Document:
        ids = [[self.id(t) for t in sentence] for sentence in doc.sentences]
        return Document(ids, doc.label, doc.source_id)


def build_vocab(docs: Iterable[Document], min_frequency: int = 2) -> Vocabulary:
    """Tokens seen at least ``min_frequency`` times, most frequent first.

    Build this from the training split only.
    """
    counts: Counter[str] = Counter()
    n_docs = 0
    for doc in docs:
        n_docs += 1
        for sentence in doc.sentences:
            counts.update(sentence)
    if n_docs == 0:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_frequency), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_frequency)


def load_embeddings(path, vocab: Vocabulary, dim: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Read a ``token v1 ... vE`` text file into a (V, dim) table.

    Tokens missing from the file get uniform(-0.1, 0.1) rows; the padding row
    is zero.  When a token appears twice the first line wins.  Returns the
    table and the fraction of (non-reserved) vocabulary found in the file.
    """
    table = rng.uniform(-0.1, 0.1, size=(len(vocab), dim))
    table[PAD_ID] = 0.0
    found: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if not parts or parts == [""]:
                continue
            token, values = parts[0], parts[1:]
            try:
                vector = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: malformed embedding line") from exc
            if vector.size != dim:
                raise ConfigError(f"{path}:{lineno}: vector has {vector.size} values, expected {dim}")
            idx = vocab.stoi.get(token)
            if idx is None or idx in (PAD_ID, UNK_ID) or idx in found:
                continue
            table[idx] = vector
            found.add(idx)
    regular = len(vocab) - 2
    coverage = len(found) / regular if regular else 0.0
    logger.info("embeddings cover %.1f%% of the vocabulary", 100 * coverage)
    return table, coverage


# --------------------------------------------------------------------- IMDB


def _read_label_dir(root: Path, split: str) -> list[Document]:
    docs = []
    for name, label in (("neg", 0), ("pos", 1)):
        folder = root / split / name
        if not folder.is_dir():
            raise IngestionError(f"missing IMDB directory: {folder}")
        for path in sorted(folder.glob("*.txt")):
            text = path.read_text(encoding="utf-8")
            docs.append(Document(tokenize(text), label, f"{split}/{name}/{path.name}"))
    return [d for d in docs if d.sentences]


def load_imdb(root_dir, seed: int) -> CorpusSplits:
    """Read ``root/{train,test}/{pos,neg}/*.txt``; hold out 30% of train for validation."""
    root = Path(root_dir)
    if not root.is_dir():
        raise IngestionError(f"IMDB root not found: {root}")
    pool = _read_label_dir(root, "train")
    test = _read_label_dir(root, "test")
    order = rng_stream(seed, "split").permutation(len(pool))
    n_train = int(round(len(pool) * (1.0 - VALIDATION_RATIO)))
    train = [pool[i] for i in order[:n_train]]
    validation = [pool[i] for i in order[n_train:]]
    return CorpusSplits(train, validation, test)


def subsample(splits: CorpusSplits, seed: int, train: int | None = None,
              validation: int | None = None, test: int | None = None) -> CorpusSplits:
    """Seeded subsets of each split (None keeps the split whole)."""
    rng = rng_stream(seed, "subsample")

    def pick(docs, n):
        if n is None or n >= len(docs):
            return list(docs)
        idx = np.sort(rng.choice(len(docs), size=n, replace=False))
        return [docs[i] for i in idx]

    return CorpusSplits(pick(splits.train, train), pick(splits.validation, validation), pick(splits.test, test))


def corpus_fingerprint(root_dir) -> dict[str, int]:
    files = sorted(Path(root_dir).glob("*/*/*.txt"))
    return {"files": len(files), "bytes": sum(f.stat().st_size for f in files)}


# ------------------------------------------------------------------ batching


def pad_documents(docs: Sequence[Document], s_cap: int, l_cap: int) -> Batch:
    """Head-truncate to the caps and pad with PAD; masks mark real tokens."""
    if s_cap < 1 or l_cap < 1:
        raise ContractError("caps must be >= 1")
    cut = [[s[:l_cap] for s in d.sentences[:s_cap] if s] for d in docs]
    S = max((len(d) for d in cut), default=1) or 1
    L = max((len(s) for d in cut for s in d), default=1) or 1
    B = len(docs)
    ids = np.full((B, S, L), PAD_ID, dtype=np.int64)
    word_mask = np.zeros((B, S, L), dtype=bool)
    sentence_mask = np.zeros((B, S), dtype=bool)
    for b, sentences in enumerate(cut):
        for s, sentence in enumerate(sentences):
            ids[b, s, : len(sentence)] = sentence
            word_mask[b, s, : len(sentence)] = True
            sentence_mask[b, s] = True
    labels = np.array([d.label for d in docs], dtype=np.int64)
    return Batch(ids, word_mask, sentence_mask, labels)


def unpad(batch: Batch, i: int) -> list[list[int]]:
    ids, wm, sm = batch.document(i)
    return [ids[s][wm[s]].tolist() for s in range(len(sm)) if sm[s]]


def make_batches(docs: Sequence[Document], batch_size: int = 64, s_cap: int = 20, l_cap: int = 60,
                 rng: np.random.Generator | None = None, shuffle: bool = False) -> list[Batch]:
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = np.arange(len(docs))
    if shuffle:
        if rng is None:
            raise ContractError("shuffling needs an rng")
        order = rng.permutation(len(docs))
    return [pad_documents([docs[i] for i in order[start:start + batch_size]], s_cap, l_cap)
            for start in range(0, len(docs), batch_size)]
