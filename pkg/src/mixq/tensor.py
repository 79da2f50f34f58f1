"""Dense array primitives with hand-written backward passes.

Arrays are plain ``numpy.ndarray`` objects. Every function keeps the dtype of
its inputs, so the model runs in float32 while gradient checks can run the
same code in float64.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name} contains NaN or Inf")
    return x


# -- matmul -----------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product over the last two axes."""
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return np.matmul(a, b)


def matmul_backward(dc: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (dA, dB) for C = A @ B, i.e. dC·Bᵀ and Aᵀ·dC."""
    da = np.matmul(dc, np.swapaxes(b, -1, -2))
    db = np.matmul(np.swapaxes(a, -1, -2), dc)
    # broadcast batch dims of b are summed out
    while db.ndim > b.ndim:
        db = db.sum(axis=0)
    return da, db


# -- softmax ----------------------------------------------------------------

def softmax_rows(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] < 1:
        raise ShapeError("softmax_rows: last dimension must be >= 1")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits given the softmax output ``p``."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# -- GELU -------------------------------------------------------------------

def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, x·Φ(x), using erf (not the tanh approximation)."""
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


# -- layer normalization ----------------------------------------------------

def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-12):
    """Normalize over the last axis. Returns ``(y, cache)``; cache feeds the backward."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layernorm: gamma/beta {gamma.shape} do not match last dim of {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layernorm_backward(dy: np.ndarray, cache):
    xhat, rstd, gamma = cache
    red = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=red)
    dbeta = dy.sum(axis=red)
    g = dy * gamma
    dx = rstd * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# -- divergences --------------------------------------------------------------

KL_Q_FLOOR = 1e-12


def _check_stochastic(p: np.ndarray, name: str, tol: float = 1e-5) -> None:
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, rtol=0.0, atol=tol):
        raise ContractError(f"kl_divergence_rows: {name} is not row-stochastic")


def kl_divergence_rows(p: np.ndarray, q: np.ndarray, check: bool = True) -> float:
    """Mean over rows of sum_j p·log(p/q).

    Terms with p == 0 contribute 0; q is floored at 1e-12.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence_rows: shapes {p.shape} and {q.shape} differ")
    if check:
        _check_stochastic(p, "p")
        _check_stochastic(q, "q")
    return float(_kl_terms(p, q).sum(axis=-1).mean())


def _kl_terms(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    pos = p > 0
    safe_p = np.where(pos, p, 1.0)
    logq = np.log(np.maximum(q, KL_Q_FLOOR))
    return np.where(pos, p * (np.log(safe_p) - logq), 0.0).astype(p.dtype, copy=False)


def kl_rows_grad_logits(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """d/dz of kl_divergence_rows(softmax(z), q), where p = softmax(z).

    Includes the 1/rows factor of the row mean.
    """
    n_rows = p.size // p.shape[-1]
    pos = p > 0
    g = np.where(pos, np.log(np.where(pos, p, 1.0)) - np.log(np.maximum(q, KL_Q_FLOOR)), 0.0)
    g = g.astype(p.dtype, copy=False)
    return softmax_backward(p, g) / p.dtype.type(n_rows)


# -- classification loss --------------------------------------------------------

def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logp = log_softmax_rows(logits)
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / logits.dtype.type(n)
