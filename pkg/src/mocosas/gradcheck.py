"""Central finite-difference gradient checking."""

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``arr`` (perturbed in place).

    ``indices`` restricts the probe to a subset of flat positions; the other
    entries of the result are left as NaN.
    """
    flat = arr.reshape(-1)
    out = np.full(flat.shape, np.nan)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise relative error over entries with ``|analytic| > floor``."""
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    keep = ~np.isnan(n) & (np.abs(a) > floor)
    if not keep.any():
        return 0.0
    a, n = a[keep], n[keep]
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), np.abs(n))))


def check_gradients(
    loss_fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-5,
    max_probes: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Dict[int, float]:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    Returns the worst relative error per leaf (keyed by position in ``leaves``).
    With ``max_probes`` only that many randomly chosen entries per leaf are
    differenced, which keeps large networks affordable.
    """
    rng = rng or np.random.default_rng(0)
    for leaf in leaves:
        leaf.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros(leaf.shape) for leaf in leaves]

    def scalar() -> float:
        return float(loss_fn().data)

    errors = {}
    for pos, leaf in enumerate(leaves):
        idx = None
        if max_probes is not None and leaf.size > max_probes:
            idx = rng.choice(leaf.size, size=max_probes, replace=False)
        num = numeric_grad(scalar, leaf.data, h=h, indices=idx)
        errors[pos] = relative_error(analytic[pos], num)
    return errors
