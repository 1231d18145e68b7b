"""LSTM with multiplicative group variables on inputs, hidden units and gate
preactivations, plus the embedding and output layers around it.

All four gates are stored stacked along the row axis in the fixed order
(i, f, g, o): ``lstm.wx`` is ``[4H, D]``, ``lstm.wh`` is ``[4H, H]``,
``lstm.b`` and ``z_gates`` are ``[4H]``.  The gate preactivation is

    pre = (wh @ (h_prev * z_h) + wx @ (x * z_x)) * z_gates + b

Forward and backward passes work on minibatches ``[T, B, ...]`` and take the
realized weight arrays of a single sampling event (see :class:`Draw`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ACC_DTYPE, NumericError, ShapeError, sigmoid
from .variational import VariationalParam, reparam_grads, sample

GATES = ("i", "f", "g", "o")
VARIANTS = ("baseline", "W", "WN", "WGN")
TASKS = ("classification", "char_lm", "word_lm")

WEIGHT_NAMES = ("embedding", "lstm.wx", "lstm.wh", "out.w")
BIAS_NAMES = ("lstm.b", "out.b")
GROUP_NAMES = ("z_vocab", "z_x", "z_h", "z_gates")


@dataclass(frozen=True)
class ModelConfig:
    task: str
    variant: str
    vocab_size: int
    hidden: int
    emb_dim: int = 0
    n_classes: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.is_classification and (self.emb_dim <= 0 or self.n_classes <= 1):
            raise ValueError("classification needs emb_dim > 0 and n_classes > 1")

    @property
    def is_classification(self) -> bool:
        return self.task == "classification"

    @property
    def input_dim(self) -> int:
        return self.emb_dim if self.is_classification else self.vocab_size

    @property
    def output_dim(self) -> int:
        return self.n_classes if self.is_classification else self.vocab_size

    def group_names(self) -> tuple:
        """Group variables present for this variant/task."""
        if self.variant in ("baseline", "W"):
            return ()
        names = ["z_h"]
        if self.is_classification:
            # language models keep every input unit
            names = ["z_vocab", "z_x", "z_h"]
        if self.variant == "WGN":
            names.append("z_gates")
        return tuple(names)

    def param_shapes(self) -> dict:
        """Ordered name -> shape map of every parameter tensor."""
        h, d, v, k = self.hidden, self.input_dim, self.vocab_size, self.output_dim
        shapes = {}
        if self.is_classification:
            shapes["embedding"] = (v, self.emb_dim)
        shapes["lstm.wx"] = (4 * h, d)
        shapes["lstm.wh"] = (4 * h, h)
        shapes["lstm.b"] = (4 * h,)
        shapes["out.w"] = (k, h)
        shapes["out.b"] = (k,)
        group_len = {"z_vocab": v, "z_x": d, "z_h": h, "z_gates": 4 * h}
        for name in self.group_names():
            shapes[name] = (group_len[name],)
        return shapes

    def is_variational(self, name: str) -> bool:
        if self.variant == "baseline":
            return False
        return name in WEIGHT_NAMES or name in GROUP_NAMES

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "variant": self.variant,
            "vocab_size": self.vocab_size,
            "hidden": self.hidden,
            "emb_dim": self.emb_dim,
            "n_classes": self.n_classes,
        }


def gate_slice(gate: str, hidden: int) -> slice:
    k = GATES.index(gate)
    return slice(k * hidden, (k + 1) * hidden)


class SparseLSTMModel:
    """Parameter container: every tensor is a VariationalParam or a plain array."""

    def __init__(self, config: ModelConfig, params: dict):
        shapes = config.param_shapes()
        if set(shapes) != set(params):
            raise ValueError(f"parameter set {sorted(params)} != expected {sorted(shapes)}")
        for name, shape in shapes.items():
            p = params[name]
            if tuple(p.shape) != shape:
                raise ShapeError(f"{name}: shape {p.shape} != {shape}")
            if config.is_variational(name) != isinstance(p, VariationalParam):
                raise TypeError(f"{name}: variational flag does not match variant {config.variant}")
        self.config = config
        self.params = {name: params[name] for name in shapes}

    def variational_params(self):
        return {n: p for n, p in self.params.items() if isinstance(p, VariationalParam)}

    def copy(self) -> "SparseLSTMModel":
        return SparseLSTMModel(
            self.config, {n: p.copy() for n, p in self.params.items()}
        )

    def draw(self, rng: np.random.Generator | None) -> "Draw":
        """One sampling event: every variational tensor is drawn exactly once."""
        values, noise = {}, {}
        for name, p in self.params.items():
            if isinstance(p, VariationalParam):
                values[name], noise[name] = sample(p, rng)
            else:
                values[name] = p.astype(ACC_DTYPE)
                noise[name] = None
        return Draw(values, noise)

    def param_grads(self, draw: "Draw", value_grads: dict) -> dict:
        """Chain value gradients through the reparameterization.

        Keys: ``name`` for plain tensors, ``name.mean`` / ``name.log_sigma``
        for variational ones.
        """
        out = {}
        for name, p in self.params.items():
            g = value_grads[name]
            if isinstance(p, VariationalParam):
                out[name + ".mean"], out[name + ".log_sigma"] = reparam_grads(
                    p, g, draw.noise[name]
                )
            else:
                out[name] = g
        return out


class StateError(RuntimeError):
    """Backward pass called with a cache from a different sequence."""


@dataclass
class Draw:
    values: dict
    noise: dict


# ---------------------------------------------------------------- LSTM core


@dataclass
class LSTMCache:
    x: np.ndarray  # [T, B, D] float, or [T, B] token ids (one-hot input)
    xz: np.ndarray | None
    h_prev: np.ndarray  # [T, B, H]  h_{t-1}
    hz_prev: np.ndarray  # [T, B, H]  h_{t-1} * z_h
    a: np.ndarray  # [T, B, 4H]  matrix part before z_gates
    gates: np.ndarray  # [T, B, 4H]  activated (i, f, g, o)
    c: np.ndarray  # [T + 1, B, H]  c[0] is the initial cell
    tanh_c: np.ndarray  # [T, B, H]


def _input_product(x, wx, zx):
    """x @ (wx * z_x).T for dense x [T,B,D] or one-hot ids [T,B]."""
    if np.issubdtype(x.dtype, np.integer):
        cols = wx.T[x]  # [T, B, 4H]
        if zx is not None:
            cols = cols * zx[x][..., None]
        return cols, None
    if x.shape[-1] != wx.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != {wx.shape[1]}")
    xz = x if zx is None else x * zx
    return xz @ wx.T, xz


def lstm_forward(x, h0, c0, wx, wh, b, zx=None, zh=None, zg=None):
    """Run the gated recurrence over ``x`` ([T, B, D] or ids [T, B]).

    Absent group vectors (None) act as all-ones.  Returns
    ``(h_seq [T, B, H], (h_T, c_T), cache)``.
    """
    four_h, hidden = wh.shape
    if four_h != 4 * hidden:
        raise ShapeError(f"recurrent matrix has shape {wh.shape}, expected [4H, H]")
    steps = x.shape[0]
    batch = x.shape[1] if x.ndim >= 2 else 0
    h = np.asarray(h0, dtype=ACC_DTYPE)
    c = np.asarray(c0, dtype=ACC_DTYPE)
    if h.shape != (batch, hidden) or c.shape != (batch, hidden):
        raise ShapeError(f"initial state shapes {h.shape}, {c.shape} != {(batch, hidden)}")
    xw, xz = _input_product(x, wx, zx)
    h_prev = np.empty((steps, batch, hidden))
    hz_prev = np.empty((steps, batch, hidden))
    a_all = np.empty((steps, batch, four_h))
    gates = np.empty((steps, batch, four_h))
    cs = np.empty((steps + 1, batch, hidden))
    tanh_c = np.empty((steps, batch, hidden))
    h_seq = np.empty((steps, batch, hidden))
    cs[0] = c
    hh = 2 * hidden
    for t in range(steps):
        hz = h if zh is None else h * zh
        a = xw[t] + hz @ wh.T
        pre = (a if zg is None else a * zg) + b
        if not np.all(np.isfinite(pre)):
            raise NumericError(f"non-finite gate preactivation at timestep {t}")
        gt = np.empty_like(pre)
        gt[:, :hh] = sigmoid(pre[:, :hh])
        gt[:, hh : 3 * hidden] = np.tanh(pre[:, hh : 3 * hidden])
        gt[:, 3 * hidden :] = sigmoid(pre[:, 3 * hidden :])
        i, f, g, o = (gt[:, k * hidden : (k + 1) * hidden] for k in range(4))
        c = f * c + i * g
        tc = np.tanh(c)
        h_prev[t], hz_prev[t], a_all[t], gates[t] = h, hz, a, gt
        h = o * tc
        cs[t + 1], tanh_c[t], h_seq[t] = c, tc, h
    cache = LSTMCache(x, xz, h_prev, hz_prev, a_all, gates, cs, tanh_c)
    return h_seq, (h, c), cache


def lstm_backward(cache: LSTMCache, grad_h_seq, wx, wh, zx=None, zh=None, zg=None, grad_c_last=None):
    """Backpropagation through time for :func:`lstm_forward`.

    Returns a dict with ``wx, wh, b, zx, zh, zg`` (None where the group vector
    is absent), ``x`` (input gradient, None for id inputs), ``h0`` and ``c0``.
    """
    steps, batch, hidden = cache.h_prev.shape
    if grad_h_seq.shape != (steps, batch, hidden):
        raise StateError(
            f"gradient shape {grad_h_seq.shape} does not match cached sequence {(steps, batch, hidden)}"
        )
    four_h = 4 * hidden
    dpre_all = np.empty((steps, batch, four_h))
    dhz_all = np.empty((steps, batch, hidden))
    dh_next = np.zeros((batch, hidden))
    dc_next = np.zeros((batch, hidden)) if grad_c_last is None else np.array(grad_c_last, dtype=ACC_DTYPE)
    for t in reversed(range(steps)):
        gt = cache.gates[t]
        i, f, g, o = (gt[:, k * hidden : (k + 1) * hidden] for k in range(4))
        tc = cache.tanh_c[t]
        dh = grad_h_seq[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dpre = np.empty((batch, four_h))
        dpre[:, :hidden] = dc * g * i * (1.0 - i)
        dpre[:, hidden : 2 * hidden] = dc * cache.c[t] * f * (1.0 - f)
        dpre[:, 2 * hidden : 3 * hidden] = dc * i * (1.0 - g * g)
        dpre[:, 3 * hidden :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        da = dpre if zg is None else dpre * zg
        dhz = da @ wh
        dh_next = dhz if zh is None else dhz * zh
        dpre_all[t] = dpre
        dhz_all[t] = dhz

    flat = lambda arr: arr.reshape(-1, arr.shape[-1])  # noqa: E731
    grads = {"b": dpre_all.sum(axis=(0, 1))}
    grads["zg"] = None if zg is None else (dpre_all * cache.a).sum(axis=(0, 1))
    da_all = dpre_all if zg is None else dpre_all * zg
    grads["wh"] = flat(da_all).T @ flat(cache.hz_prev)
    grads["zh"] = None if zh is None else (dhz_all * cache.h_prev).sum(axis=(0, 1))
    x = cache.x
    if np.issubdtype(x.dtype, np.integer):
        ids = x.reshape(-1)
        dwx_t = np.zeros((wx.shape[1], four_h))
        rows = flat(da_all)
        if zx is not None:
            rows_scaled = rows * zx[ids][:, None]
            np.add.at(dwx_t, ids, rows_scaled)
            dzx = np.zeros(wx.shape[1])
            np.add.at(dzx, ids, np.einsum("nk,kn->n", rows, wx[:, ids]))
            grads["zx"] = dzx
        else:
            np.add.at(dwx_t, ids, rows)
            grads["zx"] = None
        grads["wx"] = dwx_t.T
        grads["x"] = None
    else:
        grads["wx"] = flat(da_all).T @ flat(cache.xz)
        dxz = da_all @ wx
        if zx is None:
            grads["zx"], grads["x"] = None, dxz
        else:
            grads["zx"] = (dxz * x).sum(axis=(0, 1))
            grads["x"] = dxz * zx
    grads["h0"] = dh_next
    grads["c0"] = dc_next
    return grads


def effective_weights(model: SparseLSTMModel) -> dict:
    """Deterministic recurrent matrices with all group variables folded in.

    ``wx_eff[r, c] = wx[r, c] * z_x[c] * z_gates[r]`` and likewise for ``wh``
    with ``z_h``; a plain LSTM on these and ``lstm.b`` reproduces the
    deterministic forward of ``model``.
    """
    return effective_from_values(model.config, model.draw(None).values)


def effective_from_values(config: ModelConfig, values: dict) -> dict:
    wx = values["lstm.wx"]
    wh = values["lstm.wh"]
    zx, zh, zg = values.get("z_x"), values.get("z_h"), values.get("z_gates")
    row = np.ones(wx.shape[0]) if zg is None else zg
    col_x = np.ones(wx.shape[1]) if zx is None else zx
    col_h = np.ones(wh.shape[1]) if zh is None else zh
    return {
        "wx": wx * row[:, None] * col_x[None, :],
        "wh": wh * row[:, None] * col_h[None, :],
        "b": values["lstm.b"],
    }


# ---------------------------------------------------------- input / output


def embedding_forward(ids, table, z_vocab=None):
    """Row lookup ``table[ids]``, each row scaled by ``z_vocab[id]`` when present."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    rows = table[ids]
    if z_vocab is not None:
        rows = rows * z_vocab[ids][..., None]
    return rows


def embedding_backward(ids, grad_rows, table, z_vocab=None):
    ids = np.asarray(ids).reshape(-1)
    g = grad_rows.reshape(-1, table.shape[1])
    d_table = np.zeros(table.shape)
    if z_vocab is None:
        np.add.at(d_table, ids, g)
        return d_table, None
    np.add.at(d_table, ids, g * z_vocab[ids][:, None])
    d_z = np.zeros(table.shape[0])
    np.add.at(d_z, ids, np.einsum("nd,nd->n", g, table[ids]))
    return d_table, d_z


def output_forward(h, w, b):
    """Dense head ``h @ w.T + b`` over the last axis of ``h``."""
    if h.shape[-1] != w.shape[1]:
        raise ShapeError(f"hidden width {h.shape[-1]} != output layer input {w.shape[1]}")
    return h @ w.T + b


# ------------------------------------------------------------ full network


@dataclass
class NetworkCache:
    ids: np.ndarray  # [B, T]
    lengths: np.ndarray | None
    x: np.ndarray | None
    lstm: LSTMCache
    h_seq: np.ndarray
    h_read: np.ndarray  # hidden states fed to the head (before z_h)


def network_forward(config: ModelConfig, values: dict, ids, lengths=None, state=None):
    """Forward pass on token ids ``[B, T]``.

    Classification returns logits ``[B, K]`` read at position ``lengths - 1``;
    language models return ``[B, T, V]``.  ``state`` is an optional carried
    ``(h, c)``; the final ``(h_T, c_T)`` is returned alongside the cache.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ShapeError(f"ids must be [B, T], got {ids.shape}")
    batch, steps = ids.shape
    hidden = config.hidden
    if state is None:
        state = (np.zeros((batch, hidden)), np.zeros((batch, hidden)))
    zh = values.get("z_h")
    if config.is_classification:
        x = embedding_forward(ids.T, values["embedding"], values.get("z_vocab"))
    else:
        if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
            raise IndexError(f"token id out of range [0, {config.vocab_size})")
        x = ids.T
    h_seq, final, lcache = lstm_forward(
        x, state[0], state[1], values["lstm.wx"], values["lstm.wh"], values["lstm.b"],
        values.get("z_x"), zh, values.get("z_gates"),
    )
    if config.is_classification:
        if lengths is None:
            lengths = np.full(batch, steps)
        lengths = np.asarray(lengths)
        if np.any(lengths < 1) or np.any(lengths > steps):
            raise ShapeError("sequence lengths must lie in [1, T]")
        h_read = h_seq[lengths - 1, np.arange(batch)]  # [B, H]
    else:
        h_read = h_seq.transpose(1, 0, 2)  # [B, T, H]
    hz = h_read if zh is None else h_read * zh
    logits = output_forward(hz, values["out.w"], values["out.b"])
    cache = NetworkCache(ids, lengths, x if config.is_classification else None, lcache, h_seq, h_read)
    return logits, final, cache


def network_backward(config: ModelConfig, values: dict, cache: NetworkCache, grad_logits) -> dict:
    """Gradients of a scalar loss w.r.t. every realized tensor in ``values``."""
    zh = values.get("z_h")
    w_out = values["out.w"]
    hz = cache.h_read if zh is None else cache.h_read * zh
    gl = grad_logits.reshape(-1, grad_logits.shape[-1])
    grads = {
        "out.w": gl.T @ hz.reshape(-1, hz.shape[-1]),
        "out.b": gl.sum(axis=0),
    }
    d_hz = grad_logits @ w_out
    d_zh_head = None if zh is None else (d_hz * cache.h_read).reshape(-1, config.hidden).sum(axis=0)
    d_hread = d_hz if zh is None else d_hz * zh
    steps, batch, hidden = cache.h_seq.shape
    grad_h_seq = np.zeros((steps, batch, hidden))
    if config.is_classification:
        grad_h_seq[cache.lengths - 1, np.arange(batch)] = d_hread
    else:
        grad_h_seq[:] = d_hread.transpose(1, 0, 2)
    lg = lstm_backward(
        cache.lstm, grad_h_seq, values["lstm.wx"], values["lstm.wh"],
        values.get("z_x"), zh, values.get("z_gates"),
    )
    grads["lstm.wx"], grads["lstm.wh"], grads["lstm.b"] = lg["wx"], lg["wh"], lg["b"]
    if "z_x" in values:
        grads["z_x"] = lg["zx"]
    if "z_gates" in values:
        grads["z_gates"] = lg["zg"]
    if zh is not None:
        grads["z_h"] = lg["zh"] + d_zh_head
    if config.is_classification:
        d_table, d_zv = embedding_backward(
            cache.ids.T, lg["x"], values["embedding"], values.get("z_vocab")
        )
        grads["embedding"] = d_table
        if d_zv is not None:
            grads["z_vocab"] = d_zv
    return grads
