"""Command-line entry point: train, prune, eval, bench, sweep.

Exit codes: 0 ok, 2 config/usage, 3 data, 4 divergence, 5 bad checkpoint,
6 checkpoint/data dimension mismatch, 7 checkpoint is not pruned.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .compression import (
    CheckpointError,
    PrunedModel,
    apply_pruning,
    load_checkpoint,
    save_checkpoint,
    structure_report,
    summary_row,
)
import numpy as np

from .config import lm_tokens, load_config, load_task_data, split_of
from .data import DataError, Vocabulary, load_classification_tsv, read_text
from .inference import BENCH_HEADER, benchmark, compile_model
from .numerics import ShapeError
from .training import ConfigError, DivergenceError, evaluate_values, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
EXIT_CHECKPOINT, EXIT_MISMATCH, EXIT_NOT_PRUNED = 5, 6, 7

METRIC_NAMES = {"classification": "accuracy", "char_lm": "bits_per_char", "word_lm": "perplexity"}
METHOD_NAMES = {"baseline": "Original", "W": "SparseVD W", "WN": "SparseVD W+N", "WGN": "SparseVD W+G+N"}

log = logging.getLogger("sparselstm")


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code

    def __reduce__(self):
        # raised inside sweep worker processes
        return CLIError, (self.code, str(self))


def _fail(code, msg):
    raise CLIError(code, msg)


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        _fail(EXIT_CHECKPOINT, f"checkpoint not found: {path}")
    except CheckpointError as exc:
        _fail(EXIT_CHECKPOINT, f"bad checkpoint {path}: {exc}")


def _vocab_extra(vocab: Vocabulary | None) -> dict:
    return {} if vocab is None else {"vocab": {"tokens": vocab.tokens, "level": vocab.level}}


def _vocab_from_extra(extra: dict) -> Vocabulary | None:
    v = extra.get("vocab")
    return None if v is None else Vocabulary(list(v["tokens"]), v["level"])


def _train_one(rc, variant=None, out_dir=None):
    try:
        tc = rc.train_config(**({"variant": variant} if variant else {}))
    except (ConfigError, TypeError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    try:
        loaded = load_task_data(rc)
    except DataError as exc:
        _fail(EXIT_DATA, str(exc))
    except (FileNotFoundError, ConfigError) as exc:
        _fail(EXIT_DATA if isinstance(exc, FileNotFoundError) else EXIT_CONFIG, str(exc))
    out = Path(out_dir or rc.out_dir)
    try:
        result = train(tc, loaded.task_data, out, extra=_vocab_extra(loaded.vocab))
    except DivergenceError as exc:
        _fail(EXIT_DIVERGED, str(exc))
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except DataError as exc:
        _fail(EXIT_DATA, str(exc))
    return result, loaded, tc


def cmd_train(args) -> int:
    try:
        rc = load_config(args.config)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    result, _, _ = _train_one(rc)
    for name in ("metrics", "best", "final"):
        print(f"{name}\t{result.paths[name]}")
    return EXIT_OK


def _evaluate(obj, data, seq_len=100):
    values = obj.values() if isinstance(obj, PrunedModel) else obj.draw(None).values
    try:
        return evaluate_values(obj.config, values, data, seq_len=seq_len)
    except (IndexError, ShapeError) as exc:
        _fail(EXIT_MISMATCH, f"checkpoint and data dimensions disagree: {exc}")


def cmd_prune(args) -> int:
    ck = _load_ckpt(args.ckpt)
    if ck.is_pruned:
        _fail(EXIT_CHECKPOINT, f"{args.ckpt} is already pruned")
    pruned = apply_pruning(ck.obj, args.tau)
    out = Path(args.out)
    metric = None
    if args.config:
        rc = load_config(args.config)
        try:
            loaded = load_task_data(rc, _vocab_from_extra(ck.extra))
            data = split_of(loaded, args.split)
        except DataError as exc:
            _fail(EXIT_DATA, str(exc))
        metric = _evaluate(pruned, data, rc.train_config().seq_len or 100).metric
    save_checkpoint(pruned, out / "pruned.ckpt", extra=ck.extra)
    structure_report(pruned, out, metric=metric, strict=args.strict)
    row = summary_row(pruned, metric, strict=args.strict)
    print("\t".join(f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = _load_ckpt(args.ckpt)
    obj = ck.obj
    task = obj.config.task
    if args.task and args.task != task:
        _fail(EXIT_MISMATCH, f"checkpoint is a {task} model, not {args.task}")
    seq_len = 100
    try:
        if args.config:
            rc = load_config(args.config)
            seq_len = rc.train_config().seq_len or 100
            data = split_of(load_task_data(rc, _vocab_from_extra(ck.extra)), args.split)
        elif args.data:
            vocab = _vocab_from_extra(ck.extra)
            if vocab is None:
                _fail(EXIT_DATA, "checkpoint carries no vocabulary; use --config")
            if task == "classification":
                data = load_classification_tsv(args.data, vocab, "eval")
            else:
                toks = lm_tokens(read_text(args.data), vocab.level)
                data = np.asarray(vocab.encode_tokens(toks), dtype=np.int64)
        else:
            _fail(EXIT_CONFIG, "eval needs --data or --config")
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except DataError as exc:
        _fail(EXIT_DATA, str(exc))
    res = _evaluate(obj, data, seq_len)
    print(f"{METRIC_NAMES[task]}\t{res.metric:.6g}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.repeats < 10:
        _fail(EXIT_CONFIG, "--repeats must be at least 10")
    ck = _load_ckpt(args.ckpt)
    if not ck.is_pruned:
        _fail(EXIT_NOT_PRUNED, f"{args.ckpt} is not pruned; run 'sparselstm prune' first")
    report = benchmark(ck.obj, compile_model(ck.obj), steps=args.seq_len, repeats=args.repeats)
    print(BENCH_HEADER)
    print(report.tsv_row(Path(args.ckpt).stem))
    return EXIT_OK


TABLE_COLUMNS = ("Method", "Quality", "Compression", "Neurons x-h", "Gates")


def _sweep_variant(config_path, variant):
    rc = load_config(config_path)
    out = rc.out_dir / variant
    result, loaded, tc = _train_one(rc, variant, out)
    # baselines are reported with early stopping, sparse models at the end of training
    model = result.best_model if variant == "baseline" else result.model
    pruned = apply_pruning(model, tc.tau)
    split = loaded.task_data.test if loaded.task_data.test is not None else loaded.task_data.valid
    metric = _evaluate(pruned, split, tc.seq_len or 100).metric
    strict = rc["neuron_rule"] == "strict"
    save_checkpoint(pruned, out / "pruned.ckpt", extra=_vocab_extra(loaded.vocab))
    structure_report(pruned, out, metric=metric, strict=strict)
    r = summary_row(pruned, metric, strict=strict)
    return (METHOD_NAMES[variant], r["metric"], r["compression"] + "x", r["neurons_x_h"], r["gates"])


def cmd_sweep(args) -> int:
    try:
        rc = load_config(args.config)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    if args.jobs < 1:
        _fail(EXIT_CONFIG, "--jobs must be at least 1")
    variants = ("baseline", "W", "WN", "WGN")
    if args.jobs == 1:
        rows = [_sweep_variant(args.config, v) for v in variants]
    else:
        # each variant writes only to its own subdirectory
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_variant, [args.config] * len(variants), variants))
    table = rc.out_dir / "table.tsv"
    table.write_text(
        "\t".join(TABLE_COLUMNS) + "\n" + "".join("\t".join(r) + "\n" for r in rows), encoding="utf-8"
    )
    print(table.read_text(encoding="utf-8"), end="")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CLIError(EXIT_CONFIG, message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparselstm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train one model from a config file")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("prune", help="prune a checkpoint by signal-to-noise ratio")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--tau", type=float, default=0.05)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="evaluate the pruned model on this config's data")
    s.add_argument("--split", default="valid", choices=("train", "valid", "test"))
    s.add_argument("--strict", action="store_true", help="strict hidden-neuron rule")
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("eval", help="deterministic evaluation of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", help="TSV (classification) or text file (language model)")
    s.add_argument("--config", help="take the data from this config instead")
    s.add_argument("--split", default="valid", choices=("train", "valid", "test"))
    s.add_argument("--task", choices=("classification", "char_lm", "word_lm"), help="expected task")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time dense vs compiled inference of a pruned checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--seq-len", type=int, default=100)
    s.add_argument("--repeats", type=int, default=20)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="train all four variants and write table.tsv")
    s.add_argument("--config", required=True)
    s.add_argument("--jobs", type=int, default=1, help="worker processes, one variant each")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
