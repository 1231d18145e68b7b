"""Small dense-array substrate: products, activations, losses, RNG and a
finite-difference gradient checker.

Model parameters are stored as float32 by default; every reduction here and
in the layers runs in float64.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float32
ACC_DTYPE = np.float64
RNG_ALGORITHM = "PCG64"


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; draws are identical across platforms for a given seed."""
    return np.random.Generator(np.random.PCG64(seed))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    if state.get("bit_generator") != RNG_ALGORITHM:
        raise ValueError(f"unsupported rng algorithm {state.get('bit_generator')!r}")
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """C = A @ B with float64 accumulation in a fixed summation order.

    The inner index is accumulated left to right, one rank-1 update at a time,
    so the result is bitwise reproducible and independent of BLAS threading.
    Intended for checks and small problems; layers use ``np.matmul``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"gemm expects 2-d arrays, got {a.shape} and {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    a64 = a.astype(ACC_DTYPE)
    b64 = b.astype(ACC_DTYPE)
    out = np.zeros((m, n), dtype=ACC_DTYPE)
    for l in range(k):
        out += a64[:, l : l + 1] * b64[l : l + 1, :]
    return out.astype(np.result_type(a.dtype, b.dtype))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, target) -> tuple:
    """Negative log-likelihood of ``target`` under softmax(logits) and its gradient.

    Works on a single vector (target an int) or a batch ``[..., K]`` (target an
    int array of the leading shape); the loss is then summed over the batch.
    """
    logits = np.asarray(logits, dtype=ACC_DTYPE)
    target = np.asarray(target)
    k = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if np.any(target < 0) or np.any(target >= k):
        raise IndexError(f"target out of range [0, {k})")
    logp = log_softmax(logits)
    flat = logp.reshape(-1, k)
    idx = target.reshape(-1)
    picked = flat[np.arange(flat.shape[0]), idx]
    loss = -float(picked.sum())
    grad = np.exp(logp)
    gflat = grad.reshape(-1, k)
    gflat[np.arange(gflat.shape[0]), idx] -= 1.0
    return loss, grad


def gaussian_sample(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def finite_diff_gradient(f, theta: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta`` (any shape)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(theta, dtype=ACC_DTYPE)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(theta)
        flat[i] = orig - eps
        fm = f(theta)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    a = np.asarray(analytic, dtype=ACC_DTYPE)
    n = np.asarray(numeric, dtype=ACC_DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {name}")
