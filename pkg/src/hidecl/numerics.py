"""Dense-array math shared by every learning module.

Everything here operates on plain numpy arrays. Gradient routines are
float64 by default; training code may pass float32 arrays and gets
float32 back.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "AdamState",
    "Adam",
    "LinearHead",
    "softmax",
    "log_softmax",
    "softmax_cross_entropy",
    "softmax_cross_entropy_batch",
    "adam_step",
    "grad_check",
]


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Row-stable softmax (max subtraction before exponentiation)."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Cross entropy of a single logit vector against an integer class.

    Returns (loss, grad) with grad = softmax(logits) - onehot(target).
    """
    logits = np.asarray(logits)
    if logits.ndim != 1 or logits.shape[0] < 1:
        raise ValueError(f"logits must be a non-empty 1-D array, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    k = logits.shape[0]
    if not 0 <= target < k:
        raise IndexError(f"target {target} out of range for {k} classes")
    logp = log_softmax(logits)
    loss = -float(logp[target])
    grad = np.exp(logp)
    grad[target] -= 1.0
    return loss, grad


def softmax_cross_entropy_batch(
    logits: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross entropy over a batch of logit rows.

    grad is d(mean loss)/d(logits), i.e. (softmax - onehot) / B.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2:
        raise ValueError(f"expected [B, K] logits, got shape {logits.shape}")
    b, k = logits.shape
    if targets.shape != (b,):
        raise ValueError("one target per logit row required")
    if np.any(targets < 0) or np.any(targets >= k):
        raise IndexError("target out of range")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    logp = log_softmax(logits, axis=1)
    loss = -float(np.mean(logp[np.arange(b), targets]))
    grad = np.exp(logp)
    grad[np.arange(b), targets] -= 1.0
    grad /= b
    return loss, grad


@dataclass
class AdamState:
    """Per-parameter moment estimates; step increases by one per update."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param),
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(
    params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Mutates `state` in place.

    Returns the updated parameter array (a new array; `params` is untouched).
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"moments {state.m.shape}"
        )
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps), state


class Adam:
    """Adam over a dict of named parameters, built on adam_step.

    Keeps one AdamState per name; update() returns the new arrays so the
    caller stays the owner of its parameters.
    """

    def __init__(self, lr: float = 0.005, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._states: dict[str, AdamState] = {}

    def update(self, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            st = self._states.get(name)
            if st is None:
                st = AdamState.for_param(p, self.beta1, self.beta2, self.eps)
                self._states[name] = st
            out[name], _ = adam_step(p, g, st, self.lr)
        return out


def grad_check(
    loss_fn: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic: np.ndarray,
    step: float,
) -> float:
    """Max relative error between `analytic` and central finite differences.

    Relative error per coordinate is |a - n| / max(1e-12, |a| + |n|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point)
    analytic = np.asarray(analytic)
    if point.shape != analytic.shape:
        raise ValueError("analytic gradient must match the shape of point")
    flat = point.reshape(-1).copy()
    numeric = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(loss_fn(flat.reshape(point.shape)))
        flat[i] = orig - step
        down = float(loss_fn(flat.reshape(point.shape)))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValueError(f"loss_fn returned non-finite value near coordinate {i}")
        numeric[i] = (up - down) / (2.0 * step)
    a = analytic.reshape(-1).astype(np.float64)
    denom = np.maximum(1e-12, np.abs(a) + np.abs(numeric))
    return float(np.max(np.abs(a - numeric) / denom))


@dataclass
class LinearHead:
    """Dense layer D -> K with bias, used for the task and class heads."""

    w: np.ndarray  # [D, K]
    b: np.ndarray  # [K]

    @classmethod
    def zeros(cls, dim: int, k: int, dtype=np.float64) -> "LinearHead":
        return cls(w=np.zeros((dim, k), dtype=dtype), b=np.zeros(k, dtype=dtype))

    @property
    def out_features(self) -> int:
        return self.b.shape[0]

    def logits(self, x: np.ndarray) -> np.ndarray:
        """x: [D] or [B, D] -> logits [K] or [B, K]."""
        return x @ self.w + self.b

    def backward(self, x: np.ndarray, dlogits: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Given upstream dlogits, return (dw, db, dx) for a [B, D] input."""
        x2 = np.atleast_2d(x)
        d2 = np.atleast_2d(dlogits)
        dw = x2.T @ d2
        db = d2.sum(axis=0)
        dx = d2 @ self.w.T
        if x.ndim == 1:
            dx = dx[0]
        return dw, db, dx

    def params(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.w = params["w"]
        self.b = params["b"]
