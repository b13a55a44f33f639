"""Central finite-difference gradient checking shared across test modules."""

from __future__ import annotations

import numpy as np

from debiasrank import tensor as T

FD_STEP = 1e-5
REL_TOL = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-6)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def finite_diff_grad(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x, all coordinates."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def check_grad(build, inputs: list[np.ndarray], step: float = FD_STEP,
               rel_tol: float = REL_TOL) -> float:
    """Compare autodiff grads of a scalar graph against finite differences.

    ``build`` maps a list of leaf Tensors to a scalar Tensor. Returns the
    worst relative error across all inputs and asserts it under rel_tol.
    """
    leaves = [T.parameter(x) for x in inputs]
    root = build(leaves)
    T.backward(root)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        def scalar_at(x, k=k):
            probe = [T.constant(v) for v in inputs]
            probe[k] = T.constant(x)
            return build(probe).item()

        numeric = finite_diff_grad(scalar_at, inputs[k], step=step)
        err = relative_error(leaf.grad, numeric)
        worst = max(worst, err)
        assert err < rel_tol, f"gradient mismatch on input {k}: rel err {err:.3e}"
    return worst
