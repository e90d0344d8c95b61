"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from dxnet.autodiff import NonFiniteError, Variable, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def numeric_gradient(f: Callable[[], Variable], v: Variable, step: float) -> np.ndarray:
    """Perturb ``v.data`` in place, one coordinate at a time."""
    flat = v.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f().data)
        flat[i] = orig - step
        fm = float(f().data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite loss while probing coordinate {i}")
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(v.shape)


def check_gradients(f: Callable[[], Variable], variables: Sequence[Variable], step: float = 1e-5) -> float:
    """Max relative error over every coordinate of every variable in ``variables``.

    ``f`` must rebuild the scalar loss from the current ``.data`` of the
    variables each time it is called.
    """
    for v in variables:
        if v.data.dtype != np.float64:
            raise TypeError("gradient checks require float64 variables")
        v.requires_grad = True
    loss = f()
    backward(loss)
    analytic = [np.zeros(v.shape) if v.grad is None else v.grad.copy() for v in variables]
    worst = 0.0
    for v, a in zip(variables, analytic):
        worst = max(worst, relative_error(a, numeric_gradient(f, v, step)))
    return worst


def grad_check(f: Callable[[Variable], Variable], point: np.ndarray, step: float = 1e-4) -> float:
    """Check ``f`` at ``point``; returns the max relative error."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = Variable(np.array(point, dtype=np.float64), requires_grad=True)
    return check_gradients(lambda: f(x), [x], step)
