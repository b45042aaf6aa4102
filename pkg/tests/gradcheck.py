"""Central finite-difference helpers shared by the gradient tests."""

import numpy as np

# Entries whose gradient magnitude is below this floor are compared absolutely.
DENOM_FLOOR = 1e-8


def rel_error(analytic, numeric, floor=DENOM_FLOOR):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def fd_flat(fun, x0, h):
    """Central differences of scalar ``fun`` at every entry of flat vector ``x0``."""
    out = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        out[i] = (fun(xp) - fun(xm)) / (2 * h)
    return out
