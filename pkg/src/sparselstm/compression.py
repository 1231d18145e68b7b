"""Pruning by signal-to-noise ratio, structural counts, checkpoints and reports."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ACC_DTYPE, rng_state, sigmoid
from .sparse_lstm import (
    GATES,
    ModelConfig,
    SparseLSTMModel,
    network_forward,
)
from .variational import DEFAULT_TAU, VariationalParam, prune_mask, snr

COUNTED_TENSORS = ("embedding", "lstm.wx", "lstm.wh", "out.w")


@dataclass
class PrunedModel:
    """Posterior means with low-SNR entries set to exactly zero."""

    config: ModelConfig
    tau: float
    weights: dict  # name -> array in storage dtype, masked entries are 0
    masks: dict  # name -> bool keep-mask, variational tensors only
    log_sigma: dict = field(default_factory=dict)

    def values(self) -> dict:
        return {n: w.astype(ACC_DTYPE) for n, w in self.weights.items()}

    def forward(self, ids, lengths=None, state=None):
        logits, final, cache = network_forward(self.config, self.values(), ids, lengths, state)
        return logits, final, cache

    @property
    def hidden(self) -> int:
        return self.config.hidden

    def effective(self) -> dict:
        """Weight tensors with every group multiplier folded in."""
        v = self.values()
        h = self.config.hidden
        ones = np.ones
        zg = v.get("z_gates", ones(4 * h))
        zx = v.get("z_x", ones(self.config.input_dim))
        zh = v.get("z_h", ones(h))
        eff = {
            "lstm.wx": v["lstm.wx"] * zg[:, None] * zx[None, :],
            "lstm.wh": v["lstm.wh"] * zg[:, None] * zh[None, :],
            "out.w": v["out.w"] * zh[None, :],
        }
        if self.config.is_classification:
            zv = v.get("z_vocab", ones(self.config.vocab_size))
            # z_x lives in lstm.wx only, so products of these tensors stay exact
            eff["embedding"] = v["embedding"] * zv[:, None]
        return eff

    def group_alive(self, name: str, length: int) -> np.ndarray:
        w = self.weights.get(name)
        return np.ones(length, dtype=bool) if w is None else (w != 0)


def apply_pruning(model: SparseLSTMModel, tau: float = DEFAULT_TAU) -> PrunedModel:
    """Zero every variational entry with snr < tau; plain tensors are copied."""
    weights, masks, log_sigma = {}, {}, {}
    for name, p in model.params.items():
        if isinstance(p, VariationalParam):
            keep = prune_mask(p, tau)
            weights[name] = np.where(keep, p.mean, 0).astype(p.mean.dtype)
            masks[name] = keep
            log_sigma[name] = p.log_sigma.copy()
        else:
            weights[name] = p.copy()
    return PrunedModel(model.config, float(tau), weights, masks, log_sigma)


# --------------------------------------------------------------- counting


@dataclass
class CompressionReport:
    rate: float
    total: int
    nonzero: int
    saturated: bool
    per_tensor: dict  # name -> (total, nonzero)


def compression_rate(pruned: PrunedModel) -> CompressionReport:
    """|w| / |w != 0| over every weight matrix, counting effective values."""
    eff = pruned.effective()
    per = {}
    if "embedding" in eff:
        # an embedding column feeding a removed input neuron is dead weight
        eff["embedding"] = eff["embedding"] * pruned.group_alive("z_x", pruned.config.input_dim)[None, :]
    for name in COUNTED_TENSORS:
        if name in eff:
            per[name] = (int(eff[name].size), int(np.count_nonzero(eff[name])))
    total = sum(t for t, _ in per.values())
    nonzero = sum(n for _, n in per.values())
    saturated = nonzero == 0
    return CompressionReport(total / max(nonzero, 1), total, nonzero, saturated, per)


@dataclass
class GateStructure:
    constant: np.ndarray  # bool [4, H], gate order (i, f, g, o)
    value: np.ndarray  # float [4, H], NaN where non-constant

    def regime(self, gate: str, unit: int) -> str:
        """'varying', 'always open' / 'always closed' (sigmoid gates within 0.01 of 1 / 0) or 'constant'."""
        k = GATES.index(gate)
        if not self.constant[k, unit]:
            return "varying"
        v = self.value[k, unit]
        if gate != "g" and v >= 0.99:
            return "always open"
        if gate != "g" and v <= 0.01:
            return "always closed"
        return "constant"

    def rows(self):
        for k, gate in enumerate(GATES):
            for j in range(self.constant.shape[1]):
                yield gate, j, bool(self.constant[k, j]), float(self.value[k, j])


def constant_rows(pruned: PrunedModel) -> np.ndarray:
    """Bool [4H]: gate row whose preactivation reduces to its bias."""
    eff = pruned.effective()
    h = pruned.hidden
    zero_row = ~(eff["lstm.wx"].any(axis=1) | eff["lstm.wh"].any(axis=1))
    return zero_row | ~pruned.group_alive("z_gates", 4 * h)


def bias_activation(b: np.ndarray, hidden: int) -> np.ndarray:
    """Activation of each gate bias: sigmoid for i, f, o and tanh for g."""
    b = np.asarray(b, dtype=ACC_DTYPE)
    out = sigmoid(b)
    g = slice(2 * hidden, 3 * hidden)
    out[g] = np.tanh(b[g])
    return out


def count_nonconstant_gates(pruned: PrunedModel):
    h = pruned.hidden
    const = constant_rows(pruned)
    vals = np.where(const, bias_activation(pruned.weights["lstm.b"], h), np.nan)
    gs = GateStructure(const.reshape(4, h), vals.reshape(4, h))
    return int(4 * h - const.sum()), gs


@dataclass
class ActiveNeurons:
    n_input: int
    n_hidden: int
    input_index: np.ndarray
    hidden_index: np.ndarray


def hidden_consumed(pruned: PrunedModel) -> np.ndarray:
    """Hidden unit j is alive and its output is read by the recurrence or the head."""
    eff = pruned.effective()
    used = eff["lstm.wh"].any(axis=0) | eff["out.w"].any(axis=0)
    return used & pruned.group_alive("z_h", pruned.hidden)


def count_active_neurons(pruned: PrunedModel, strict: bool = False) -> ActiveNeurons:
    """Remaining input units (vocabulary entries for classification, input
    columns for language models) and hidden units.

    ``strict`` additionally requires a hidden unit to have at least one
    non-constant gate, i.e. to be driven by the input.
    """
    eff = pruned.effective()
    cfg = pruned.config
    if cfg.is_classification:
        # a token counts only if some embedding coordinate it sets reaches the cell
        reach = eff["lstm.wx"].any(axis=0)
        inp = eff["embedding"][:, reach].any(axis=1) & pruned.group_alive("z_vocab", cfg.vocab_size)
    else:
        inp = eff["lstm.wx"].any(axis=0) & pruned.group_alive("z_x", cfg.input_dim)
    hid = hidden_consumed(pruned)
    if strict:
        driven = ~constant_rows(pruned).reshape(4, pruned.hidden).all(axis=0)
        hid = hid & driven
    return ActiveNeurons(int(inp.sum()), int(hid.sum()), np.flatnonzero(inp), np.flatnonzero(hid))


def active_embedding_dims(pruned: PrunedModel) -> np.ndarray:
    """Embedding coordinates that reach the recurrent layer (classification only)."""
    eff = pruned.effective()
    return np.flatnonzero(eff["lstm.wx"].any(axis=0) & eff["embedding"].any(axis=0))


def mac_counts(pruned: PrunedModel) -> tuple:
    """Per-timestep multiply-accumulates of the recurrent cell: (dense, compiled).

    Dense is ``4H (D + H)``.  Compiled sums the nonzeros of every
    non-constant gate row that belongs to a consumed hidden unit.
    """
    h = pruned.hidden
    d = pruned.config.input_dim
    eff = pruned.effective()
    nnz = np.count_nonzero(eff["lstm.wx"], axis=1) + np.count_nonzero(eff["lstm.wh"], axis=1)
    live_unit = np.tile(hidden_consumed(pruned), 4)
    work = (~constant_rows(pruned)) & live_unit
    return 4 * h * (d + h), int(nnz[work].sum())


# ------------------------------------------------------------ checkpoints

MAGIC = b"SVDL"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class PayloadLengthError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    obj: object  # SparseLSTMModel or PrunedModel
    extra: dict
    rng_state: dict | None

    @property
    def is_pruned(self) -> bool:
        return isinstance(self.obj, PrunedModel)


def _tensor_entries(obj):
    """(name, role, array) in manifest order."""
    if isinstance(obj, PrunedModel):
        for name, w in obj.weights.items():
            yield name, "weight", w
            if name in obj.masks:
                yield name, "mask", obj.masks[name]
                yield name, "log_sigma", obj.log_sigma[name]
    else:
        for name, p in obj.params.items():
            if isinstance(p, VariationalParam):
                yield name, "mean", p.mean
                yield name, "log_sigma", p.log_sigma
            else:
                yield name, "plain", p


def checkpoint_bytes(obj, extra=None, rng=None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, role, arr in _tensor_entries(obj):
        if role == "mask":
            blob = np.packbits(np.asarray(arr, dtype=bool).reshape(-1), bitorder="little").tobytes()
            dtype = "bits"
        else:
            arr = np.asarray(arr)
            dtype = arr.dtype.name
            if dtype not in ("float32", "float64"):
                raise CheckpointError(f"{name}: unsupported dtype {dtype}")
            blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C")
        entries.append(
            {"name": name, "role": role, "shape": list(np.shape(arr)), "dtype": dtype,
             "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "kind": "pruned" if isinstance(obj, PrunedModel) else "model",
        "config": obj.config.to_dict(),
        "tensors": entries,
        "payload_bytes": offset,
        "extra": extra or {},
        "rng_state": rng_state(rng) if rng is not None else None,
    }
    if isinstance(obj, PrunedModel):
        manifest["tau"] = obj.tau
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(mbytes)) + mbytes + b"".join(blobs)


def save_checkpoint(obj, path, extra=None, rng=None) -> Path:
    """Atomically write ``obj`` (model or pruned model) to ``path``."""
    data = checkpoint_bytes(obj, extra, rng)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedCheckpointError("file ends inside the header")
    _, version, mlen = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    start = _HEADER.size
    if len(data) < start + mlen:
        raise TruncatedCheckpointError("file ends inside the manifest")
    try:
        manifest = json.loads(data[start : start + mlen].decode("utf-8"))
        entries = manifest["tensors"]
        payload_bytes = int(manifest["payload_bytes"])
        config = ModelConfig(**manifest["config"])
        kind = manifest["kind"]
        tau = float(manifest["tau"]) if kind == "pruned" else None
        if kind not in ("pruned", "model"):
            raise ValueError(f"unknown checkpoint kind {kind!r}")
        for e in entries:
            e["name"], e["role"], e["shape"], e["dtype"], int(e["offset"]), int(e["nbytes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"malformed manifest: {exc}") from exc
    payload = data[start + mlen :]
    if sum(e["nbytes"] for e in entries) != payload_bytes:
        raise PayloadLengthError("tensor sizes in the manifest do not add up to payload_bytes")
    if len(payload) < payload_bytes:
        raise TruncatedCheckpointError(f"payload has {len(payload)} bytes, manifest declares {payload_bytes}")
    if len(payload) > payload_bytes:
        raise PayloadLengthError(f"payload has {len(payload)} bytes, manifest declares {payload_bytes}")

    arrays = {}
    for e in entries:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        shape = tuple(e["shape"])
        if e["dtype"] == "bits":
            n = int(np.prod(shape))
            arr = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=n, bitorder="little")
            arr = arr.astype(bool).reshape(shape)
        else:
            dt = np.dtype(e["dtype"]).newbyteorder("<")
            expected = int(np.prod(shape)) * dt.itemsize
            if expected != e["nbytes"]:
                raise PayloadLengthError(f"{e['name']}/{e['role']}: {e['nbytes']} bytes for shape {shape}")
            arr = np.frombuffer(raw, dtype=dt).reshape(shape).astype(e["dtype"])
        arrays[(e["name"], e["role"])] = arr

    extra = manifest.get("extra", {})
    rng = manifest.get("rng_state")
    if kind == "pruned":
        weights = {n: a for (n, r), a in arrays.items() if r == "weight"}
        masks = {n: a for (n, r), a in arrays.items() if r == "mask"}
        ls = {n: a for (n, r), a in arrays.items() if r == "log_sigma"}
        obj = PrunedModel(config, tau, weights, masks, ls)
    else:
        params = {}
        for (name, role), arr in arrays.items():
            if role == "plain":
                params[name] = arr
            elif role == "mean":
                params[name] = VariationalParam(
                    name, arr, arrays[(name, "log_sigma")], group=name.startswith("z_")
                )
        try:
            obj = SparseLSTMModel(config, params)
        except (ValueError, TypeError) as exc:
            raise ManifestError(str(exc)) from exc
    return Checkpoint(obj, extra, rng)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- reports

SNR_BINS = np.logspace(-6, 6, 21)


def snr_histogram(pruned: PrunedModel) -> dict:
    """20 log-spaced SNR bins per variational tensor; out-of-range values go to the end bins."""
    hist = {}
    for name, ls in pruned.log_sigma.items():
        # pruned entries have mean 0 and land in the lowest bin
        s = snr(VariationalParam(name, pruned.weights[name], ls))
        s = np.clip(s.reshape(-1), SNR_BINS[0], SNR_BINS[-1])
        counts, _ = np.histogram(s, bins=SNR_BINS)
        hist[name] = counts
    return hist


def fmt(x) -> str:
    return f"{x:.6g}"


def summary_row(pruned: PrunedModel, metric: float | None = None, strict: bool = False) -> dict:
    comp = compression_rate(pruned)
    act = count_active_neurons(pruned, strict=strict)
    gates, _ = count_nonconstant_gates(pruned)
    return {
        "variant": pruned.config.variant,
        "metric": "nan" if metric is None else fmt(metric),
        "compression": repr(float(fmt(comp.rate))),
        "neurons_x_h": f"{act.n_input}-{act.n_hidden}",
        "gates": str(gates),
    }


SUMMARY_COLUMNS = ("variant", "metric", "compression", "neurons_x_h", "gates")


def structure_report(pruned: PrunedModel, out_dir, metric: float | None = None, strict: bool = False) -> dict:
    """Write summary.tsv, gates.csv and snr_hist.tsv into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    row = summary_row(pruned, metric, strict)
    paths = {"summary": out / "summary.tsv", "gates": out / "gates.csv", "snr_hist": out / "snr_hist.tsv"}
    paths["summary"].write_text(
        "\t".join(SUMMARY_COLUMNS) + "\n" + "\t".join(row[c] for c in SUMMARY_COLUMNS) + "\n",
        encoding="utf-8",
    )
    _, gs = count_nonconstant_gates(pruned)
    lines = ["gate,unit,constant,value"]
    for gate, j, const, value in gs.rows():
        lines.append(f"{gate},{j},{'true' if const else 'false'},{fmt(value) if const else ''}")
    paths["gates"].write_text("\n".join(lines) + "\n", encoding="utf-8")
    lines = ["tensor\tbin_lo\tbin_hi\tcount"]
    for name, counts in snr_histogram(pruned).items():
        for k, c in enumerate(counts):
            lines.append(f"{name}\t{fmt(SNR_BINS[k])}\t{fmt(SNR_BINS[k + 1])}\t{int(c)}")
    paths["snr_hist"].write_text("\n".join(lines) + "\n", encoding="utf-8")
    return paths
