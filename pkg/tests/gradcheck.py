"""Central finite-difference gradient oracle.

Independent of the tape: it only re-evaluates a forward function on
perturbed copies of the parameter arrays, so it cross-checks the
analytic vjp rules rather than reusing them.
"""

import numpy as np


def finite_difference_grad(fn, arrays, h=1e-6, max_coords=200, seed=0):
    """Return FD gradients of scalar fn(arrays) wrt each array.

    Checks every coordinate when an array has <= max_coords entries,
    otherwise a seeded random subset (remaining entries are left as NaN
    and skipped by `relative_error`).
    """
    rng = np.random.default_rng(seed)
    grads = []
    for k, base in enumerate(arrays):
        g = np.full(base.size, np.nan)
        if base.size <= max_coords:
            coords = np.arange(base.size)
        else:
            coords = rng.choice(base.size, size=max_coords, replace=False)
        flat = base.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(arrays)
            flat[i] = orig - h
            fm = fn(arrays)
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
        grads.append(g.reshape(base.shape))
    return grads


def relative_error(analytic, fd):
    """Vector-norm relative error over the coordinates FD actually probed."""
    a = np.concatenate([x.reshape(-1) for x in analytic])
    f = np.concatenate([x.reshape(-1) for x in fd])
    probed = ~np.isnan(f)
    a, f = a[probed], f[probed]
    denom = max(np.linalg.norm(a), np.linalg.norm(f), 1e-12)
    return np.linalg.norm(a - f) / denom
