"""Central finite differences for checking hand-written backward passes."""

import numpy as np


def numeric_grad(f, arr, step=1e-3, indices=None):
    """Central-difference gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place).

    With ``indices`` (flat positions) only those entries are evaluated; the
    result is then a vector aligned with ``indices``.
    """
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        out.append((hi - lo) / (2 * step))
    out = np.asarray(out, dtype=np.float64)
    return out.reshape(arr.shape) if indices is None else out


def rel_error(analytic, numeric, floor=1e-8):
    """Largest entrywise error relative to the larger gradient magnitude of the tensor."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
    return float(np.max(np.abs(a - n)) / scale)
