"""Vocabularies, corpus batching and the built-in synthetic tasks."""

from __future__ import annotations

import re
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD = "<pad>"
UNK = "<unk>"

_PUNCT = re.compile(r"[^\w\s]", re.UNICODE)


class DataError(ValueError):
    pass


@dataclass
class Vocabulary:
    tokens: list
    level: str = "word"
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def unk_id(self):
        return self.index.get(UNK)

    @property
    def pad_id(self):
        return self.index.get(PAD)

    def encode_tokens(self, toks) -> list:
        unk = self.unk_id
        out = []
        for t in toks:
            i = self.index.get(t, unk)
            if i is None:
                raise DataError(f"token {t!r} not in vocabulary and no {UNK} entry")
            out.append(i)
        return out

    def encode(self, text: str) -> np.ndarray:
        toks = list(text) if self.level == "char" else tokenize(text)
        return np.asarray(self.encode_tokens(toks), dtype=np.int64)

    def decode(self, ids) -> str:
        toks = [self.tokens[int(i)] for i in ids]
        return "".join(toks) if self.level == "char" else " ".join(toks)

    def dump(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")


def tokenize(text: str) -> list:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


def build_vocab(corpus, level: str = "word", max_size: int | None = None, specials=None) -> Vocabulary:
    """Frequency-ranked vocabulary; ties broken lexicographically.

    ``corpus`` is a string or an iterable of strings.  Word level defaults to
    ``(<pad>, <unk>)`` specials, char level to none.  ``max_size`` counts the
    specials.
    """
    if level not in ("char", "word"):
        raise ValueError(f"unknown level {level!r}")
    texts = [corpus] if isinstance(corpus, str) else list(corpus)
    if specials is None:
        specials = (PAD, UNK) if level == "word" else ()
    counts = Counter()
    for text in texts:
        counts.update(text if level == "char" else tokenize(text))
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((t for t in counts if t not in specials), key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[: max(0, max_size - len(specials))]
    return Vocabulary(list(specials) + ranked, level)


# ------------------------------------------------------------------ LM data


@dataclass
class LMBatchStream:
    """B contiguous lanes over a token array, traversed T tokens at a time."""

    ids: np.ndarray
    batch_size: int
    seq_len: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.size < self.batch_size * (self.seq_len + 1):
            raise DataError(
                f"corpus of {self.ids.size} tokens is too short for batch "
                f"{self.batch_size} x unroll {self.seq_len}"
            )

    @property
    def lane_len(self) -> int:
        return self.ids.size // self.batch_size

    @property
    def n_batches(self) -> int:
        return (self.lane_len - 1) // self.seq_len

    def lanes(self) -> np.ndarray:
        return self.ids[: self.lane_len * self.batch_size].reshape(self.batch_size, self.lane_len)

    def __iter__(self):
        return lm_batches(self)

    def __len__(self):
        return self.n_batches


def lm_batches(stream: LMBatchStream):
    """Yield ``(inputs [B,T], targets [B,T], carry)``; carry is False only for the first batch."""
    lanes = stream.lanes()
    t = stream.seq_len
    for k in range(stream.n_batches):
        s = k * t
        yield lanes[:, s : s + t], lanes[:, s + 1 : s + t + 1], k > 0


def read_text(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"data file not found: {p}")
    return p.read_text(encoding="utf-8")


# --------------------------------------------------------- classification


@dataclass
class ClassificationSet:
    sequences: list
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.sequences) != len(self.labels):
            raise DataError("sequence and label counts differ")

    def __len__(self):
        return len(self.sequences)

    @property
    def max_len(self) -> int:
        return max((len(s) for s in self.sequences), default=0)

    def subset(self, idx, split=None) -> "ClassificationSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ClassificationSet([self.sequences[i] for i in idx], self.labels[idx], split or self.split)

    def padded(self, idx=None, pad_id: int = 0):
        """Right-padded ``ids [B, Tmax]``, ``lengths [B]`` and ``labels [B]``."""
        if idx is None:
            idx = np.arange(len(self))
        seqs = [self.sequences[i] for i in idx]
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        ids = np.full((len(seqs), int(lengths.max()) if len(seqs) else 0), pad_id, dtype=np.int64)
        for r, s in enumerate(seqs):
            ids[r, : len(s)] = s
        return ids, lengths, self.labels[np.asarray(idx, dtype=np.int64)]


def load_classification_tsv(path, vocab: Vocabulary, split: str = "train", max_len: int | None = None) -> ClassificationSet:
    """Read ``label<TAB>text`` lines; labels are integers."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"data file not found: {p}")
    seqs, labels = [], []
    with p.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataError(f"{p}:{lineno}: expected 'label<TAB>text'")
            label, text = line.split("\t", 1)
            try:
                y = int(label)
            except ValueError:
                raise DataError(f"{p}:{lineno}: label {label!r} is not an integer") from None
            if y < 0:
                raise DataError(f"{p}:{lineno}: negative label {y}")
            ids = vocab.encode_tokens(tokenize(text)) or [vocab.unk_id]
            if max_len is not None:
                ids = ids[:max_len]
            seqs.append(np.asarray(ids, dtype=np.int64))
            labels.append(y)
    if not seqs:
        raise DataError(f"{p}: no examples")
    return ClassificationSet(seqs, labels, split)


def read_tsv_texts(path):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"data file not found: {p}")
    with p.open(encoding="utf-8") as fh:
        return [ln.split("\t", 1)[1] for ln in fh if "\t" in ln]


def holdout_mask(n: int, fraction: float) -> np.ndarray:
    """Deterministic validation membership by hashing the example index."""
    keys = np.array([zlib.crc32(str(i).encode()) for i in range(n)], dtype=np.uint64)
    return (keys % np.uint64(10_000)) < np.uint64(round(fraction * 10_000))


def split_validation(data: ClassificationSet, fraction: float):
    mask = holdout_mask(len(data), fraction)
    return data.subset(np.flatnonzero(~mask), "train"), data.subset(np.flatnonzero(mask), "valid")


# ---------------------------------------------------------- synthetic tasks

SPARSE_SIGNAL_TOKENS = (2, 5)


def sparse_signal_label(seq) -> int:
    """1 iff the first token 2 comes before the first token 5."""
    seq = list(seq)
    return int(seq.index(2) < seq.index(5))


def _sparse_signal(n, rng, seq_len=20, vocab_size=32):
    noise = np.array([v for v in range(vocab_size) if v not in SPARSE_SIGNAL_TOKENS])
    seqs = rng.choice(noise, size=(n, seq_len))
    labels = np.empty(n, dtype=np.int64)
    for r in range(n):
        p, q = rng.choice(seq_len, size=2, replace=False)
        seqs[r, p], seqs[r, q] = 2, 5
        labels[r] = int(p < q)
    return [s.astype(np.int64) for s in seqs], labels


def parity_label(seq) -> int:
    return int(np.sum(seq) % 2)


def _parity(n, rng, seq_len=12):
    seqs = rng.integers(0, 2, size=(n, seq_len))
    return [s.astype(np.int64) for s in seqs], np.array([parity_label(s) for s in seqs], dtype=np.int64)


def _copy_memory(n_tokens, rng, lag=5, alphabet=8, noise=0.1):
    out = rng.integers(0, alphabet, size=n_tokens)
    for t in range(lag, n_tokens):
        if rng.random() >= noise:
            out[t] = out[t - lag]
    return out.astype(np.int64)


def synthetic_task(kind: str, rng: np.random.Generator, n_train=1000, n_valid=200, n_test=500, **params):
    """Desk-scale tasks.

    ``sparse_signal`` and ``parity`` return a dict of ClassificationSets
    (train/valid/test) plus ``vocab_size`` and ``n_classes``; ``copy_memory``
    returns token arrays for a language model.
    """
    if kind == "copy_memory":
        total = n_train + n_valid + n_test
        ids = _copy_memory(total, rng, **params)
        return {
            "train": ids[:n_train],
            "valid": ids[n_train : n_train + n_valid],
            "test": ids[n_train + n_valid :],
            "vocab_size": params.get("alphabet", 8),
        }
    if kind == "sparse_signal":
        gen, vocab_size = _sparse_signal, params.get("vocab_size", 32)
    elif kind == "parity":
        gen, vocab_size = _parity, 2
    else:
        raise ValueError(f"unknown synthetic task {kind!r}")
    out = {"vocab_size": vocab_size, "n_classes": 2}
    for split, n in (("train", n_train), ("valid", n_valid), ("test", n_test)):
        seqs, labels = gen(n, rng, **params)
        out[split] = ClassificationSet(seqs, labels, split)
    return out
