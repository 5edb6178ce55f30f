"""Central finite-difference verification of analytic gradients.

The checker treats the forward computation as a black box ``f() -> float``
re-evaluated after perturbing one scalar at a time, so it is independent of
the tape machinery it validates. All checks are float64; relative error uses
an absolute floor so that exactly-zero gradients compare sanely.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .engine import ParameterStore, Tape, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
_REL_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), _REL_FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_gradient(f: Callable[[], float], t: Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every element of ``t.data``."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def check_tensors(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor],
                  h: float = DEFAULT_STEP) -> dict[str, float]:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the forward pass from the live tensors on each
    call. Returns the max relative error per named tensor.
    """
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in tensors.items()}

    def f() -> float:
        return loss_fn().item()

    errors = {}
    for name, t in tensors.items():
        errors[name] = relative_error(analytic[name], numeric_gradient(f, t, h=h))
    return errors


def check_params(loss_fn: Callable[[], Tensor], params: ParameterStore,
                 h: float = DEFAULT_STEP) -> dict[str, float]:
    """check_tensors over every parameter in the store."""
    params.zero_grads()
    errors = check_tensors(loss_fn, dict(params.items()), h=h)
    params.zero_grads()
    return errors
