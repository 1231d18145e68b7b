"""ELBO objective, Adam, gradient clipping, initialization and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import ClassificationSet, DataError, LMBatchStream
from .numerics import ACC_DTYPE, DEFAULT_DTYPE, NumericError, make_rng, softmax_cross_entropy
from .sparse_lstm import GATES, ModelConfig, SparseLSTMModel, network_backward, network_forward
from .variational import DEFAULT_TAU, INIT_LOG_SIGMA, VariationalParam, kl_log_uniform

logger = logging.getLogger(__name__)

# per-task defaults: lr, batch, clip, unroll length
TASK_DEFAULTS = {
    "classification": {"lr": 0.0005, "batch_size": 128, "clip": None, "seq_len": 0},
    "char_lm": {"lr": 0.002, "batch_size": 64, "clip": 1.0, "seq_len": 100},
    "word_lm": {"lr": 0.002, "batch_size": 32, "clip": 10.0, "seq_len": 35},
}


class ConfigError(ValueError):
    pass


class DivergenceError(NumericError):
    pass


@dataclass
class TrainConfig:
    task: str
    variant: str = "WGN"
    vocab_size: int = 0
    n_classes: int = 0
    emb_dim: int = 300
    hidden: int = 128
    lr: float | None = None
    batch_size: int | None = None
    epochs: int = 10
    clip: float | None | str = "auto"  # None disables clipping
    seq_len: int | None = None
    tau: float = DEFAULT_TAU
    seed: int = 0
    kl_warmup_epochs: int = 0
    noise: str = "minibatch"  # or "sequence"
    dtype: str = "float32"

    def __post_init__(self):
        if self.task not in TASK_DEFAULTS:
            raise ConfigError(f"unknown task {self.task!r}")
        defaults = TASK_DEFAULTS[self.task]
        for key in ("lr", "batch_size", "seq_len"):
            if getattr(self, key) is None:
                setattr(self, key, defaults[key])
        if self.clip == "auto":
            self.clip = defaults["clip"]
        if self.noise not in ("minibatch", "sequence"):
            raise ConfigError(f"noise must be 'minibatch' or 'sequence', got {self.noise!r}")
        if self.tau < 0:
            raise ConfigError("tau must be non-negative")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ConfigError("batch size must be positive and epochs non-negative")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            task=self.task,
            variant=self.variant,
            vocab_size=self.vocab_size,
            hidden=self.hidden,
            emb_dim=self.emb_dim if self.task == "classification" else 0,
            n_classes=self.n_classes if self.task == "classification" else 0,
        )

    def kl_scale(self, epoch: int) -> float:
        """Linear warm-up over ``kl_warmup_epochs`` (0 disables it); epochs count from 0."""
        if self.kl_warmup_epochs <= 0:
            return 1.0
        return min(1.0, (epoch + 1) / self.kl_warmup_epochs)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ init


def orthogonal(rng, rows: int, cols: int) -> np.ndarray:
    """(Semi-)orthogonal matrix: orthonormal rows if rows <= cols, else columns."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def glorot_uniform(rng, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def init_model(config: TrainConfig | ModelConfig, rng: np.random.Generator, dtype=None) -> SparseLSTMModel:
    """Classification: orthogonal recurrent blocks, Glorot-uniform elsewhere.
    Language models: every matrix orthogonal.  Biases 0, log-sigma -3, group means 1.
    """
    if isinstance(config, TrainConfig):
        dtype = dtype or np.dtype(config.dtype)
        mc = config.model_config()
    else:
        mc = config
    dtype = np.dtype(dtype or DEFAULT_DTYPE)
    h = mc.hidden
    lm = not mc.is_classification
    init = {}
    for name, shape in mc.param_shapes().items():
        if name == "embedding":
            value = glorot_uniform(rng, *shape)
        elif name == "lstm.wx":
            maker = orthogonal if lm else glorot_uniform
            value = np.concatenate([maker(rng, h, shape[1]) for _ in GATES])
        elif name == "lstm.wh":
            value = np.concatenate([orthogonal(rng, h, h) for _ in GATES])
        elif name == "out.w":
            value = orthogonal(rng, *shape) if lm else glorot_uniform(rng, *shape)
        elif name.startswith("z_"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        init[name] = value
    params = {}
    for name, value in init.items():
        if mc.is_variational(name):
            params[name] = VariationalParam.init(
                name, value, INIT_LOG_SIGMA, group=name.startswith("z_"), dtype=dtype
            )
        else:
            params[name] = value.astype(dtype)
    return SparseLSTMModel(mc, params)


# ------------------------------------------------------------------ ELBO


@dataclass
class Batch:
    ids: np.ndarray  # [B, T]
    targets: np.ndarray  # [B] (classification) or [B, T] (LM)
    lengths: np.ndarray | None = None

    @property
    def n_items(self) -> int:
        return int(self.targets.size)


@dataclass
class ELBOResult:
    loss: float
    nll: float  # summed over the batch
    kl: float
    n_items: int
    correct: int = 0
    grads: dict | None = None
    state: tuple | None = None


def kl_total(model: SparseLSTMModel, with_grad: bool = False):
    total, grads = 0.0, {}
    for name, p in model.variational_params().items():
        if with_grad:
            k, gm, gl = kl_log_uniform(p, with_grad=True)
            grads[name + ".mean"], grads[name + ".log_sigma"] = gm, gl
        else:
            k = kl_log_uniform(p)
        total += k
    return (total, grads) if with_grad else total


def _nll_pass(model, values, batch: Batch, state, with_grad):
    logits, final, cache = network_forward(model.config, values, batch.ids, batch.lengths, state)
    nll, dlogits = softmax_cross_entropy(logits, batch.targets)
    correct = int((logits.argmax(axis=-1) == batch.targets).sum())
    value_grads = network_backward(model.config, values, cache, dlogits) if with_grad else None
    return nll, correct, final, value_grads


def elbo_minibatch(
    model: SparseLSTMModel,
    batch: Batch,
    n_data: int,
    rng: np.random.Generator | None,
    kl_scale: float = 1.0,
    state=None,
    with_grad: bool = True,
    noise: str = "minibatch",
) -> ELBOResult:
    """Minibatch estimate of the negative ELBO ``(N/B) * sum NLL + kl_scale * KL``.

    ``rng=None`` evaluates the posterior means.  With ``noise='minibatch'`` all
    sequences share one weight draw; ``'sequence'`` draws per sequence.
    """
    scale = n_data / batch.n_items
    if noise == "sequence" and rng is not None and batch.ids.shape[0] > 1:
        parts = []
        for r in range(batch.ids.shape[0]):
            sub = Batch(
                batch.ids[r : r + 1],
                batch.targets[r : r + 1],
                None if batch.lengths is None else batch.lengths[r : r + 1],
            )
            sub_state = None if state is None else (state[0][r : r + 1], state[1][r : r + 1])
            draw = model.draw(rng)
            nll, correct, final, vg = _nll_pass(model, draw.values, sub, sub_state, with_grad)
            parts.append((nll, correct, final, model.param_grads(draw, vg) if with_grad else None))
        nll = sum(p[0] for p in parts)
        correct = sum(p[1] for p in parts)
        final = tuple(np.concatenate([p[2][k] for p in parts]) for k in range(2))
        grads = None
        if with_grad:
            grads = {k: sum(p[3][k] for p in parts) for k in parts[0][3]}
    else:
        draw = model.draw(rng)
        nll, correct, final, vg = _nll_pass(model, draw.values, batch, state, with_grad)
        grads = model.param_grads(draw, vg) if with_grad else None
    if with_grad:
        grads = {k: g * scale for k, g in grads.items()}
        kl, kl_grads = kl_total(model, with_grad=True)
        for k, g in kl_grads.items():
            grads[k] = grads[k] + kl_scale * g
    else:
        kl = kl_total(model)
    loss = scale * nll + kl_scale * kl
    if not math.isfinite(loss):
        bad = [n for n, p in model.params.items() if not _finite_param(p)]
        raise NumericError(f"non-finite loss; parameters with non-finite entries: {bad or 'none'}")
    return ELBOResult(loss, nll, kl, batch.n_items, correct, grads, final)


def _finite_param(p) -> bool:
    if isinstance(p, VariationalParam):
        return bool(np.all(np.isfinite(p.mean)) and np.all(np.isfinite(p.log_sigma)))
    return bool(np.all(np.isfinite(p)))


# ------------------------------------------------------------- optimizer


def param_arrays(model: SparseLSTMModel) -> dict:
    """Live references to every trainable array, keyed like gradient dicts."""
    out = {}
    for name, p in model.params.items():
        if isinstance(p, VariationalParam):
            out[name + ".mean"] = p.mean
            out[name + ".log_sigma"] = p.log_sigma
        else:
            out[name] = p
    return out


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied in place to ``params``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for key, arr in params.items():
        g = np.asarray(grads[key], dtype=ACC_DTYPE)
        if g.shape != arr.shape:
            raise ValueError(f"{key}: gradient shape {g.shape} != parameter shape {arr.shape}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros(arr.shape, dtype=ACC_DTYPE)
            state.v[key] = np.zeros(arr.shape, dtype=ACC_DTYPE)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        arr[...] = arr.astype(ACC_DTYPE) - update


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=ACC_DTYPE))) for g in grads.values()))


def clip_gradients(grads: dict, threshold: float | None) -> dict:
    """Rescale all gradients jointly so their global L2 norm is at most ``threshold``."""
    if threshold is None:
        return grads
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    s = threshold / norm
    return {k: g * s for k, g in grads.items()}


# ------------------------------------------------------------- evaluation


def task_metric(task: str, mean_nll: float, accuracy: float | None = None) -> float:
    if task == "classification":
        return float(accuracy)
    if task == "char_lm":
        return mean_nll / math.log(2.0)
    return math.exp(mean_nll)


def higher_is_better(task: str) -> bool:
    return task == "classification"


@dataclass
class EvalResult:
    mean_nll: float
    metric: float
    n_items: int


def evaluate_values(config: ModelConfig, values: dict, data, batch_size: int = 256, seq_len: int = 100) -> EvalResult:
    """Deterministic evaluation of realized weights ``values`` on one split.

    Language-model splits are read as one unbroken stream (single lane, state
    carried across chunks of ``seq_len``).
    """
    total, n, correct = 0.0, 0, 0
    if config.is_classification:
        for s in range(0, len(data), batch_size):
            ids, lengths, labels = data.padded(np.arange(s, min(s + batch_size, len(data))))
            logits, _, _ = network_forward(config, values, ids, lengths)
            nll, _ = softmax_cross_entropy(logits, labels)
            total += nll
            n += labels.size
            correct += int((logits.argmax(axis=-1) == labels).sum())
        return EvalResult(total / n, task_metric(config.task, total / n, correct / n), n)
    ids = np.asarray(data, dtype=np.int64)
    if ids.size < 2:
        raise DataError("evaluation stream needs at least two tokens")
    state = None
    for s in range(0, ids.size - 1, seq_len):
        e = min(s + seq_len, ids.size - 1)
        inp, tgt = ids[None, s:e], ids[None, s + 1 : e + 1]
        logits, state, _ = network_forward(config, values, inp, None, state)
        nll, _ = softmax_cross_entropy(logits, tgt)
        total += nll
        n += tgt.size
    return EvalResult(total / n, task_metric(config.task, total / n), n)


def evaluate(model: SparseLSTMModel, data, batch_size: int = 256, seq_len: int = 100) -> EvalResult:
    return evaluate_values(model.config, model.draw(None).values, data, batch_size, seq_len)


# ------------------------------------------------------------- the loop


@dataclass
class TaskData:
    """Train/valid/test splits: ClassificationSets or LM token arrays."""

    train: object
    valid: object
    test: object = None
    vocab_size: int = 0
    n_classes: int = 0


@dataclass
class TrainResult:
    model: SparseLSTMModel
    best_model: SparseLSTMModel
    best_epoch: int
    history: list
    paths: dict


METRIC_HEADER = "epoch\tsplit\tnll\tkl\tmetric\tcompression\n"


def fmt(x: float) -> str:
    return f"{x:.6g}"


def _streams(seed: int):
    seq = np.random.SeedSequence(seed)
    init_ss, shuffle_ss, noise_ss = seq.spawn(3)
    return (
        np.random.Generator(np.random.PCG64(init_ss)),
        np.random.Generator(np.random.PCG64(shuffle_ss)),
        np.random.Generator(np.random.PCG64(noise_ss)),
    )


def train(
    config: TrainConfig,
    data: TaskData,
    out_dir=None,
    model: SparseLSTMModel | None = None,
    extra: dict | None = None,
) -> TrainResult:
    """Run the full training protocol.

    Writes ``metrics.tsv``, ``best.ckpt`` and ``final.ckpt`` to ``out_dir``
    when given; ``extra`` is stored in both checkpoints.  Baseline models are
    trained without noise or KL.
    """
    from .compression import apply_pruning, compression_rate, save_checkpoint

    if config.task == "classification":
        if not isinstance(data.train, ClassificationSet) or len(data.train) == 0:
            raise ConfigError("empty training set")
        n_data = len(data.train)
    else:
        n_data = int(np.asarray(data.train).size)
        if n_data == 0:
            raise ConfigError("empty training corpus")
    if data.vocab_size:
        config = replace(config, vocab_size=data.vocab_size)
    if data.n_classes and config.task == "classification":
        config = replace(config, n_classes=data.n_classes)

    init_rng, shuffle_rng, noise_rng = _streams(config.seed)
    if model is None:
        model = init_model(config, init_rng)
    mc = model.config
    variational = mc.variant != "baseline"
    params = param_arrays(model)
    adam = AdamState()
    out = Path(out_dir) if out_dir is not None else None
    paths = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"metrics": out / "metrics.tsv", "best": out / "best.ckpt", "final": out / "final.ckpt"}
        paths["metrics"].write_text(METRIC_HEADER, encoding="utf-8")

    extra = {**(extra or {}), "train_config": config.to_dict()}
    better = higher_is_better(config.task)
    best_metric, best_epoch, best_model = None, -1, model.copy()
    history = []
    last_good = model.copy()

    def batches():
        if mc.is_classification:
            perm = shuffle_rng.permutation(n_data)
            for s in range(0, n_data, config.batch_size):
                ids, lengths, labels = data.train.padded(perm[s : s + config.batch_size])
                yield Batch(ids, labels, lengths), False
        else:
            for inp, tgt, carry in LMBatchStream(data.train, config.batch_size, config.seq_len):
                yield Batch(inp, tgt), carry

    if not mc.is_classification:
        stream = LMBatchStream(data.train, config.batch_size, config.seq_len)
        n_data = stream.n_batches * config.batch_size * config.seq_len

    for epoch in range(config.epochs):
        kl_scale = config.kl_scale(epoch) if variational else 0.0
        state = None
        nll_sum, items, correct = 0.0, 0, 0
        try:
            for batch, carry in batches():
                res = elbo_minibatch(
                    model, batch, n_data, noise_rng if variational else None, kl_scale,
                    state if carry else None, noise=config.noise,
                )
                # carried LM state is detached: no gradient crosses batch boundaries
                state = res.state
                grads = {k: g / n_data for k, g in res.grads.items()}
                grads = clip_gradients(grads, config.clip)
                adam_step(params, grads, adam, config.lr)
                nll_sum += res.nll
                items += res.n_items
                correct += res.correct
                if not all(np.all(np.isfinite(a)) for a in params.values()):
                    raise NumericError("non-finite parameter after update")
        except NumericError as exc:
            if out is not None:
                save_checkpoint(last_good, paths["final"], extra=extra)
            raise DivergenceError(f"training diverged in epoch {epoch}: {exc}") from exc
        last_good = model.copy()

        kl = kl_total(model) if variational else 0.0
        comp = compression_rate(apply_pruning(model, config.tau)).rate
        train_mean = nll_sum / items
        train_metric = task_metric(config.task, train_mean, correct / items)
        ev = evaluate(model, data.valid, seq_len=config.seq_len or 100)
        rows = [
            (epoch, "train", train_mean, kl, train_metric, comp),
            (epoch, "valid", ev.mean_nll, kl, ev.metric, comp),
        ]
        history.extend(rows)
        if out is not None:
            with paths["metrics"].open("a", encoding="utf-8") as fh:
                for r in rows:
                    fh.write(f"{r[0]}\t{r[1]}\t" + "\t".join(fmt(v) for v in r[2:]) + "\n")
        improved = best_metric is None or (ev.metric > best_metric if better else ev.metric < best_metric)
        if improved:
            best_metric, best_epoch, best_model = ev.metric, epoch, model.copy()
            if out is not None:
                save_checkpoint(model, paths["best"], extra={**extra, "epoch": epoch}, rng=noise_rng)
        logger.info(
            "epoch %d train nll %.4f valid nll %.4f metric %.4f kl %.1f compression %.2fx",
            epoch, train_mean, ev.mean_nll, ev.metric, kl, comp,
        )
    if out is not None:
        save_checkpoint(model, paths["final"], extra={**extra, "epoch": config.epochs - 1}, rng=noise_rng)
        if best_epoch < 0:
            save_checkpoint(model, paths["best"], extra={**extra, "epoch": -1}, rng=noise_rng)
    return TrainResult(model, best_model, best_epoch, history, paths)
