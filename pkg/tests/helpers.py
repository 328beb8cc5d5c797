"""Shared oracles for the test-suite."""

import numpy as np

from cimadapt.engine import Tensor


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def check_grads(build, arrays: list[np.ndarray], tol: float = 1e-4, eps: float = 1e-5) -> None:
    """``build(*tensors)`` returns a scalar Tensor; compare backprop with finite differences for each input."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    build(*tensors).backward()
    for t, a in zip(tensors, arrays):
        num = numeric_grad(lambda: float(build(*[Tensor(b) for b in arrays]).data), a, eps)
        assert rel_err(t.grad, num) < tol, (rel_err(t.grad, num), t.grad, num)


def weighted(out: Tensor, seed: int = 0) -> Tensor:
    """Random fixed linear functional of ``out``, so every output element matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * w).sum()
