"""Flat ``key = value`` run configuration and dataset assembly from it."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    UNK,
    ClassificationSet,
    DataError,
    Vocabulary,
    build_vocab,
    load_classification_tsv,
    read_text,
    read_tsv_texts,
    split_validation,
    synthetic_task,
    tokenize,
)
from .training import ConfigError, TaskData, TrainConfig

EOS = "<eos>"
SYNTHETIC_PREFIX = "synthetic:"

# key -> (parser, default); keys in REQUIRED must be given
KEYS = {
    "task": (str, None),
    "variant": (str, "WGN"),
    "data.train": (str, None),
    "data.valid": (str, ""),
    "data.test": (str, ""),
    "vocab.size": (int, 0),
    "emb.dim": (int, 300),
    "hidden": (int, 128),
    "lr": (float, None),
    "batch": (int, None),
    "epochs": (int, 10),
    "clip": (str, ""),
    "tau": (float, 0.05),
    "seed": (int, 0),
    "kl.warmup_epochs": (int, 0),
    "out.dir": (str, "run"),
    "neuron_rule": (str, "consume"),
    "seq.len": (int, None),
    "noise": (str, "minibatch"),
}
REQUIRED = ("task", "data.train")
VALID_FRACTION = {"classification": 0.15, "char_lm": 0.05, "word_lm": 0.05}


@dataclass
class RunConfig:
    values: dict
    path: Path | None = None

    def __getitem__(self, key):
        return self.values[key]

    @property
    def task(self) -> str:
        return self.values["task"]

    @property
    def out_dir(self) -> Path:
        out = Path(self.values["out.dir"])
        if not out.is_absolute() and self.path is not None:
            out = self.path.parent / out
        return out

    def resolve(self, key: str) -> str:
        """Data path relative to the config file; synthetic specs pass through."""
        raw = self.values[key]
        if not raw or raw.startswith(SYNTHETIC_PREFIX):
            return raw
        p = Path(raw)
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return str(p)

    def train_config(self, **overrides) -> TrainConfig:
        v = self.values
        clip = v["clip"]
        kwargs = dict(
            task=v["task"],
            variant=v["variant"],
            emb_dim=v["emb.dim"],
            hidden=v["hidden"],
            lr=v["lr"],
            batch_size=v["batch"],
            epochs=v["epochs"],
            tau=v["tau"],
            seed=v["seed"],
            kl_warmup_epochs=v["kl.warmup_epochs"],
            seq_len=v["seq.len"],
            noise=v["noise"],
        )
        if clip:
            kwargs["clip"] = None if clip.lower() == "none" else float(clip)
        kwargs.update(overrides)
        return TrainConfig(**kwargs)


def parse_config_text(text: str, path: Path | None = None) -> RunConfig:
    values = {k: d for k, (_, d) in KEYS.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        parser = KEYS[key][0]
        try:
            values[key] = parser(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {value!r}") from None
    for key in REQUIRED:
        if not values[key]:
            raise ConfigError(f"missing required key '{key}'")
    if values["neuron_rule"] not in ("consume", "strict"):
        raise ConfigError("neuron_rule must be 'consume' or 'strict'")
    if values["clip"] and values["clip"].lower() != "none":
        try:
            float(values["clip"])
        except ValueError:
            raise ConfigError(f"bad value for 'clip': {values['clip']!r}") from None
    return RunConfig(values, path)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"), p)


# ------------------------------------------------------------ datasets


@dataclass
class LoadedData:
    task_data: TaskData
    vocab: Vocabulary | None


def _synthetic(kind: str, task: str, seed: int) -> LoadedData:
    rng = np.random.default_rng(seed)
    if task == "classification":
        if kind not in ("sparse_signal", "parity"):
            raise ConfigError(f"synthetic task {kind!r} is not a classification task")
        d = synthetic_task(kind, rng)
        return LoadedData(TaskData(d["train"], d["valid"], d["test"], d["vocab_size"], d["n_classes"]), None)
    if kind != "copy_memory":
        raise ConfigError(f"synthetic task {kind!r} is not a language-modeling task")
    d = synthetic_task("copy_memory", rng, n_train=20000, n_valid=2000, n_test=2000)
    return LoadedData(TaskData(d["train"], d["valid"], d["test"], d["vocab_size"]), None)


def lm_tokens(text: str, level: str) -> list:
    if level == "char":
        return list(text)
    toks = []
    for line in text.splitlines():
        toks.extend(tokenize(line))
        toks.append(EOS)
    return toks


def load_task_data(rc: RunConfig, vocab: Vocabulary | None = None) -> LoadedData:
    """Datasets named by the config; splits without a path are held out from train."""
    task = rc.task
    train_spec = rc.resolve("data.train")
    if train_spec.startswith(SYNTHETIC_PREFIX):
        return _synthetic(train_spec[len(SYNTHETIC_PREFIX) :], task, rc["seed"])
    frac = VALID_FRACTION[task]
    if task == "classification":
        if vocab is None:
            size = rc["vocab.size"] or 20000
            vocab = build_vocab(read_tsv_texts(train_spec), "word", size)
        train = load_classification_tsv(train_spec, vocab, "train")
        if rc["data.valid"]:
            valid = load_classification_tsv(rc.resolve("data.valid"), vocab, "valid")
        else:
            train, valid = split_validation(train, frac)
        test = load_classification_tsv(rc.resolve("data.test"), vocab, "test") if rc["data.test"] else None
        k = int(max(train.labels.max(), valid.labels.max() if len(valid) else 0)) + 1
        return LoadedData(TaskData(train, valid, test, len(vocab), max(k, 2)), vocab)

    level = "char" if task == "char_lm" else "word"
    text = read_text(train_spec)
    toks = lm_tokens(text, level)
    if vocab is None:
        if level == "char":
            vocab = build_vocab(text, "char", specials=(UNK,))
        else:
            vocab = build_vocab([" ".join(t for t in toks if t != EOS)], "word", rc["vocab.size"] or 10000, specials=(UNK, EOS))
    train_ids = np.asarray(vocab.encode_tokens(toks), dtype=np.int64)
    if rc["data.valid"]:
        valid_ids = np.asarray(vocab.encode_tokens(lm_tokens(read_text(rc.resolve("data.valid")), level)), dtype=np.int64)
    else:
        cut = int(round(train_ids.size * (1 - frac)))
        train_ids, valid_ids = train_ids[:cut], train_ids[cut:]
    test_ids = None
    if rc["data.test"]:
        test_ids = np.asarray(vocab.encode_tokens(lm_tokens(read_text(rc.resolve("data.test")), level)), dtype=np.int64)
    return LoadedData(TaskData(train_ids, valid_ids, test_ids, len(vocab)), vocab)


def split_of(loaded: LoadedData, split: str):
    data = getattr(loaded.task_data, split)
    if data is None:
        raise DataError(f"no {split} split configured")
    if isinstance(data, ClassificationSet) and len(data) == 0:
        raise DataError(f"{split} split is empty")
    return data
