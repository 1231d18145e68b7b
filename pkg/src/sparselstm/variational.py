"""Fully factorized normal posteriors under a log-uniform prior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ACC_DTYPE, DEFAULT_DTYPE, sigmoid

# Cubic-sigmoid fit of the negative KL between N(m, s^2) and the log-uniform prior.
K1, K2, K3 = 0.63576, 1.87320, 1.48695
LOG_ALPHA_CLAMP = 20.0
INIT_LOG_SIGMA = -3.0
DEFAULT_TAU = 0.05


@dataclass
class VariationalParam:
    """Posterior N(mean, exp(log_sigma)^2) over every entry of a tensor."""

    name: str
    mean: np.ndarray
    log_sigma: np.ndarray
    group: bool = False

    def __post_init__(self):
        if self.mean.shape != self.log_sigma.shape:
            raise ValueError(
                f"{self.name}: mean {self.mean.shape} and log_sigma {self.log_sigma.shape} differ"
            )

    @classmethod
    def init(cls, name, mean, log_sigma=INIT_LOG_SIGMA, group=False, dtype=DEFAULT_DTYPE):
        mean = np.asarray(mean, dtype=dtype)
        return cls(name, mean.copy(), np.full(mean.shape, log_sigma, dtype=dtype), group)

    @property
    def shape(self):
        return self.mean.shape

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.astype(ACC_DTYPE))

    def copy(self) -> "VariationalParam":
        return VariationalParam(self.name, self.mean.copy(), self.log_sigma.copy(), self.group)


def sample(p: VariationalParam, rng: np.random.Generator | None):
    """One reparameterized draw ``mean + sigma * eps``.

    ``rng=None`` is the deterministic mode: returns the mean and ``eps=None``.
    The returned ``eps`` is what :func:`reparam_grads` needs.
    """
    mean = p.mean.astype(ACC_DTYPE)
    if rng is None:
        return mean, None
    eps = rng.standard_normal(p.shape)
    return mean + p.sigma * eps, eps


def reparam_grads(p: VariationalParam, grad_value: np.ndarray, eps: np.ndarray | None):
    """Map d loss / d sample onto (d/d mean, d/d log_sigma)."""
    if eps is None:
        return grad_value, np.zeros_like(grad_value)
    return grad_value, grad_value * eps * p.sigma


def log_alpha(p: VariationalParam) -> np.ndarray:
    """Clamped log(sigma^2 / mean^2); mean == 0 lands on the upper clamp."""
    m2 = np.square(p.mean.astype(ACC_DTYPE))
    with np.errstate(divide="ignore"):
        la = 2.0 * p.log_sigma.astype(ACC_DTYPE) - np.log(m2)
    return np.clip(la, -LOG_ALPHA_CLAMP, LOG_ALPHA_CLAMP)


def kl_from_log_alpha(la: np.ndarray) -> np.ndarray:
    """Elementwise KL approximation as a function of log alpha."""
    la = np.asarray(la, dtype=ACC_DTYPE)
    return K1 - K1 * sigmoid(K2 + K3 * la) + 0.5 * np.logaddexp(0.0, -la)


def kl_log_uniform(p: VariationalParam, with_grad: bool = False):
    """Summed KL(q || log-uniform prior); optionally with grads w.r.t. mean and log_sigma."""
    m = p.mean.astype(ACC_DTYPE)
    ls = p.log_sigma.astype(ACC_DTYPE)
    m2 = np.square(m)
    with np.errstate(divide="ignore"):
        raw = 2.0 * ls - np.log(m2)
    la = np.clip(raw, -LOG_ALPHA_CLAMP, LOG_ALPHA_CLAMP)
    kl = float(kl_from_log_alpha(la).sum())
    if not with_grad:
        return kl
    s = sigmoid(K2 + K3 * la)
    dk_dla = -K1 * K3 * s * (1.0 - s) - 0.5 * sigmoid(-la)
    inside = (raw > -LOG_ALPHA_CLAMP) & (raw < LOG_ALPHA_CLAMP)
    dk_dla = np.where(inside, dk_dla, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_mean = np.where(inside, dk_dla * (-2.0 / np.where(m == 0, 1.0, m)), 0.0)
    d_log_sigma = 2.0 * dk_dla
    return kl, d_mean, d_log_sigma


def snr(p: VariationalParam) -> np.ndarray:
    """Signal-to-noise ratio mean^2 / sigma^2, elementwise."""
    m = p.mean.astype(ACC_DTYPE)
    return np.square(m) * np.exp(-2.0 * p.log_sigma.astype(ACC_DTYPE))


def prune_mask(p: VariationalParam, tau: float = DEFAULT_TAU) -> np.ndarray:
    """True where the entry is kept (snr >= tau)."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return snr(p) >= tau
