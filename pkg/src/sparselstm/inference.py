"""Forward-only evaluator compiled from a pruned model.

Constant gate rows are evaluated once at compile time, hidden units whose
output is never read are dropped, and the remaining gate rows are stored
either dense (density >= 0.5) or as sorted (column, value) lists.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .compression import (
    PrunedModel,
    bias_activation,
    constant_rows,
    hidden_consumed,
    mac_counts,
)
from .numerics import ShapeError

DENSE_THRESHOLD = 0.5


@dataclass(frozen=True)
class CompiledModel:
    task_is_classification: bool
    hidden_units: np.ndarray  # original indices of the kept hidden units
    n_in: int  # width of the compact input vector
    token_map: np.ndarray  # token id -> compact row (cls) / column (LM), -1 if dropped
    embedding: np.ndarray | None  # [n_vocab_kept, n_in] (classification)
    # gate rows in a permuted layout: dense block, then sparse, then constant
    dense_w: np.ndarray  # [n_dense, n_in + n_hidden]
    sparse_indptr: np.ndarray
    sparse_cols: np.ndarray  # int32
    sparse_vals: np.ndarray
    bias: np.ndarray  # [n_dense + n_sparse]
    const_vals: np.ndarray  # activated constant gates
    scale: np.ndarray  # 1 for sigmoid rows, 2 for tanh rows (tanh x = 2 sigmoid(2x) - 1)
    unpermute: np.ndarray  # gate-major [4, n_hidden] flat index -> layout position
    out_w: np.ndarray  # [K, n_hidden]
    out_b: np.ndarray
    row_gate: np.ndarray  # gate index (0..3) of each layout position

    @property
    def n_hidden(self) -> int:
        return int(self.hidden_units.size)

    @property
    def n_dense(self) -> int:
        return int(self.dense_w.shape[0])

    @property
    def n_sparse(self) -> int:
        return int(self.sparse_indptr.size - 1)

    def macs_per_step(self) -> int:
        """Multiplications the kernel executes per timestep (dense rows include their zeros)."""
        return int(self.dense_w.size + self.sparse_vals.size)

    def nnz_per_step(self) -> int:
        return int(np.count_nonzero(self.dense_w) + np.count_nonzero(self.sparse_vals))


def compile_model(pruned: PrunedModel, dense_threshold: float = DENSE_THRESHOLD) -> CompiledModel:
    """Build the compact evaluator; every array is copied out of ``pruned``."""
    cfg = pruned.config
    h = cfg.hidden
    eff = pruned.effective()
    units = np.flatnonzero(hidden_consumed(pruned))
    n = units.size
    in_cols = np.flatnonzero(eff["lstm.wx"].any(axis=0))
    n_in = in_cols.size

    if cfg.is_classification:
        emb = eff["embedding"][:, in_cols]
        vocab_kept = np.flatnonzero(emb.any(axis=1))
        token_map = np.full(cfg.vocab_size, -1, dtype=np.int64)
        token_map[vocab_kept] = np.arange(vocab_kept.size)
        embedding = emb[vocab_kept].copy()
    else:
        token_map = np.full(cfg.vocab_size, -1, dtype=np.int64)
        token_map[in_cols] = np.arange(n_in)
        embedding = None

    w_cat = np.concatenate([eff["lstm.wx"][:, in_cols], eff["lstm.wh"][:, units]], axis=1)
    const = constant_rows(pruned)
    b = pruned.values()["lstm.b"]
    act_b = bias_activation(b, h)

    dense_rows, sparse_rows, const_rows = [], [], []
    for k in range(4):
        for u, j in enumerate(units):
            r = k * h + j
            entry = (k, u, r)
            if const[r]:
                const_rows.append(entry)
            elif np.count_nonzero(w_cat[r]) >= dense_threshold * w_cat.shape[1]:
                dense_rows.append(entry)
            else:
                sparse_rows.append(entry)
    layout = dense_rows + sparse_rows + const_rows
    row_gate = np.array([e[0] for e in layout], dtype=np.int64)
    scale = np.where(row_gate == 2, 2.0, 1.0)
    unpermute = np.array([e[0] * n + e[1] for e in layout], dtype=np.int64)
    inv = np.empty(4 * n, dtype=np.int64)
    inv[unpermute] = np.arange(4 * n)

    nd, ns = len(dense_rows), len(sparse_rows)
    sc = scale[: nd + ns]
    dense_idx = [e[2] for e in dense_rows]
    dense_w = w_cat[dense_idx] * sc[:nd, None] if nd else np.zeros((0, n_in + n))
    indptr, cols, vals = [0], [], []
    for pos, (_, _, r) in enumerate(sparse_rows):
        nz = np.flatnonzero(w_cat[r])
        cols.extend(nz.tolist())
        vals.extend((w_cat[r, nz] * sc[nd + pos]).tolist())
        indptr.append(len(cols))
    bias = np.array([b[e[2]] for e in dense_rows + sparse_rows], dtype=np.float64) * sc
    const_vals = np.array([act_b[e[2]] for e in const_rows], dtype=np.float64)

    return CompiledModel(
        task_is_classification=cfg.is_classification,
        hidden_units=units,
        n_in=n_in,
        token_map=token_map,
        embedding=embedding,
        dense_w=np.ascontiguousarray(dense_w),
        sparse_indptr=np.asarray(indptr, dtype=np.int64),
        sparse_cols=np.asarray(cols, dtype=np.int32),
        sparse_vals=np.asarray(vals, dtype=np.float64),
        bias=bias,
        const_vals=const_vals,
        scale=scale,
        unpermute=inv,
        out_w=eff["out.w"][:, units].copy(),
        out_b=pruned.values()["out.b"].copy(),
        row_gate=row_gate,
    )


@dataclass
class FastResult:
    h_seq: np.ndarray  # [T, n_hidden] states of the kept units
    logits: np.ndarray | None  # [K] at the last step (cls) or [T, K] (LM); None if T == 0
    state: tuple
    macs: int  # multiplications executed by the cell kernel


def fast_forward(cm: CompiledModel, ids, state=None) -> FastResult:
    """Evaluate one token sequence on the compiled structure."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= cm.token_map.size):
        raise ShapeError(f"token id outside the compiled vocabulary of {cm.token_map.size}")
    n = cm.n_hidden
    if state is None:
        h, c = np.zeros(n), np.zeros(n)
    else:
        h, c = (np.array(s, dtype=np.float64) for s in state)
        if h.shape != (n,) or c.shape != (n,):
            raise ShapeError(f"state must have {n} entries per vector")
    nd, ns = cm.n_dense, cm.n_sparse
    nv = nd + ns
    n_in = cm.n_in
    v = np.zeros(n_in + n)
    gates = np.empty(4 * n)
    gates[nv:] = cm.const_vals
    gv = gates[:nv]
    pre = np.empty(nv)
    pre_d = pre[:nd]
    scale_v = cm.scale[:nv]
    shift_v = scale_v - 1.0
    row_of = np.repeat(np.arange(ns), np.diff(cm.sparse_indptr))
    # the all-dense layout is already gate-major, so the gather can be skipped
    identity = bool(np.array_equal(cm.unpermute, np.arange(4 * n)))
    h_seq = np.empty((ids.size, n))
    hot = -1
    for t, tok in enumerate(ids):
        m = cm.token_map[tok]
        if cm.task_is_classification:
            if m >= 0:
                v[:n_in] = cm.embedding[m]
            else:
                v[:n_in] = 0.0
        else:
            if hot >= 0:
                v[hot] = 0.0
            hot = m
            if m >= 0:
                v[m] = 1.0
        v[n_in:] = h
        if nd:
            np.matmul(cm.dense_w, v, out=pre_d)
        if ns:
            pre[nd:] = np.bincount(row_of, weights=cm.sparse_vals * v[cm.sparse_cols], minlength=ns)
        pre += cm.bias
        expit(pre, out=gv)
        gv *= scale_v
        gv -= shift_v
        g4 = (gates if identity else gates[cm.unpermute]).reshape(4, n)
        c = g4[1] * c + g4[0] * g4[2]
        h = g4[3] * np.tanh(c)
        h_seq[t] = h
    macs = ids.size * cm.macs_per_step()
    if ids.size == 0:
        logits = None
    elif cm.task_is_classification:
        logits = cm.out_w @ h + cm.out_b
    else:
        logits = h_seq @ cm.out_w.T + cm.out_b
    return FastResult(h_seq, logits, (h, c), macs)


# ------------------------------------------------------------- dense side


@dataclass(frozen=True)
class DenseCell:
    """Straightforward per-step LSTM on the full pruned matrices (benchmark reference)."""

    is_classification: bool
    embedding: np.ndarray | None
    w_cat: np.ndarray  # [4H, D + H] with group variables folded in
    bias: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    input_dim: int
    hidden: int


def dense_cell(pruned: PrunedModel) -> DenseCell:
    eff = pruned.effective()
    v = pruned.values()
    return DenseCell(
        pruned.config.is_classification,
        eff.get("embedding"),
        np.ascontiguousarray(np.concatenate([eff["lstm.wx"], eff["lstm.wh"]], axis=1)),
        v["lstm.b"],
        eff["out.w"],
        v["out.b"],
        pruned.config.input_dim,
        pruned.hidden,
    )


def dense_forward(cell: DenseCell, ids):
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    hd, d = cell.hidden, cell.input_dim
    h, c = np.zeros(hd), np.zeros(hd)
    v = np.zeros(d + hd)
    h_seq = np.empty((ids.size, hd))
    for t, tok in enumerate(ids):
        if cell.is_classification:
            v[:d] = cell.embedding[tok]
        else:
            v[:d] = 0.0
            v[tok] = 1.0
        v[d:] = h
        pre = cell.w_cat @ v + cell.bias
        i = expit(pre[:hd])
        f = expit(pre[hd : 2 * hd])
        g = np.tanh(pre[2 * hd : 3 * hd])
        o = expit(pre[3 * hd :])
        c = f * c + i * g
        h = o * np.tanh(c)
        h_seq[t] = h
    if ids.size == 0:
        return h_seq, None
    if cell.is_classification:
        return h_seq, cell.out_w @ h + cell.out_b
    return h_seq, h_seq @ cell.out_w.T + cell.out_b


# -------------------------------------------------------------- benchmark

BENCH_HEADER = "config\tdense_ns_per_step\tcompiled_ns_per_step\tspeedup\tdense_macs\tcompiled_macs"


@dataclass
class BenchReport:
    dense_ns_per_step: float
    compiled_ns_per_step: float
    dense_iqr_ratio: float
    compiled_iqr_ratio: float
    dense_macs: int
    compiled_macs: int

    @property
    def speedup(self) -> float:
        return self.dense_ns_per_step / self.compiled_ns_per_step

    @property
    def mac_ratio(self) -> float:
        return self.compiled_macs / self.dense_macs

    def tsv_row(self, name: str) -> str:
        return (
            f"{name}\t{self.dense_ns_per_step:.6g}\t{self.compiled_ns_per_step:.6g}\t"
            f"{self.speedup:.6g}\t{self.dense_macs}\t{self.compiled_macs}"
        )


def _stats(samples):
    samples = np.asarray(samples)
    med = float(np.median(samples))
    q1, q3 = np.percentile(samples, [25, 75])
    return med, float((q3 - q1) / med) if med > 0 else 0.0


def _time_pair(fa, fb, steps: int, repeats: int):
    """Per-step timings of two callables, interleaved so machine load hits both alike."""
    fa(), fb()  # warm-up
    sa, sb = [], []
    for _ in range(repeats):
        for fn, out in ((fa, sa), (fb, sb)):
            t0 = time.perf_counter_ns()
            fn()
            out.append((time.perf_counter_ns() - t0) / max(steps, 1))
    return _stats(sa), _stats(sb)


def benchmark(pruned: PrunedModel, compiled: CompiledModel | None = None, steps: int = 100,
              repeats: int = 20, seed: int = 0) -> BenchReport:
    """Median wall-clock per timestep of the dense and compiled cells on random tokens.

    MAC columns are the analytic per-step counts of the recurrent cell.
    """
    if repeats < 10:
        raise ValueError("repeats must be at least 10")
    if compiled is None:
        compiled = compile_model(pruned)
    cell = dense_cell(pruned)
    ids = np.random.default_rng(seed).integers(0, pruned.config.vocab_size, size=steps)
    (d_ns, d_iqr), (c_ns, c_iqr) = _time_pair(
        lambda: dense_forward(cell, ids), lambda: fast_forward(compiled, ids), steps, repeats
    )
    dense_macs, compiled_macs = mac_counts(pruned)
    return BenchReport(d_ns, c_ns, d_iqr, c_iqr, dense_macs, compiled_macs)
