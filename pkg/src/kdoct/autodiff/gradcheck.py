"""Finite-difference gradient checking in float64.

Analytic gradients come from running the ops on float64 copies of the
inputs; the reference comes from central differences of the same forward
function under ``no_grad``.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from . import functional as F
from .tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    num = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    den = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if den < 1e-12:
        return num
    return num / den


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr``, perturbed in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-3,
              seed: int = 0) -> list[float]:
    """Relative error of the analytic gradient for each input of ``fn``.

    ``fn`` maps Tensors to a Tensor of any shape; it is reduced to a scalar
    with a fixed random projection so every output element matters.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    backward(F.sum(F.mul(out, proj)))

    errors = []
    for t in tensors:
        def scalar() -> float:
            with no_grad():
                o = fn(*[Tensor(x.data, dtype=np.float64) for x in tensors])
            return float((o.data * proj).sum())

        numeric = numerical_gradient(scalar, t.data, eps)
        errors.append(relative_error(t.grad, numeric))
    return errors


def check_parameter_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                              eps: float = 1e-3) -> dict[str, float]:
    """Relative gradient error per named parameter of a scalar ``loss_fn``.

    ``params`` must already be float64 leaves with ``requires_grad`` set.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    analytic = {name: p.grad.copy() for name, p in params.items()}

    def scalar() -> float:
        with no_grad():
            return float(loss_fn().data)

    return {
        name: relative_error(analytic[name], numerical_gradient(scalar, p.data, eps))
        for name, p in params.items()
    }
