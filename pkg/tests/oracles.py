"""Independent numerical oracles shared by the test suite.

These deliberately avoid the library's differentiation paths: central
finite differences and straight-line formula re-implementations only.
"""

import numpy as np


def fd_jacobian(fn, x, step=1e-5):
    """Central finite-difference Jacobian of fn: R^n -> R^(...)."""
    x = np.asarray(x, dtype=np.float64)
    base = np.asarray(fn(x), dtype=np.float64)
    jac = np.zeros(base.shape + x.shape)
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = step
        hi = np.asarray(fn(x + e), dtype=np.float64)
        lo = np.asarray(fn(x - e), dtype=np.float64)
        jac[..., j] = (hi - lo) / (2.0 * step)
    return jac


def fd_scalar_grad_coord(fn, x, j, step):
    """Central difference of a scalar function along coordinate j."""
    e = np.zeros_like(x)
    e.flat[j] = step
    return (fn(x + e) - fn(x - e)) / (2.0 * step)


def rel_err(got, want, floor=1e-9):
    """Elementwise relative error with an absolute floor for tiny values."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    return np.max(np.abs(got - want) / np.maximum(np.abs(want), floor))


def smooth_fd_coords(loss_of_flat, values, coords, need, rng):
    """Central differences on coordinates where the loss is locally smooth.

    Hinge losses are piecewise smooth; a coordinate whose +/-h interval
    straddles a kink has mismatching one-sided slopes and no two-sided
    derivative to compare against, so it is skipped and replaced by a
    fresh draw.  Returns a list of (index, central_difference) pairs of
    length ``need``.
    """
    f0 = loss_of_flat(values)
    out = []
    tried = set()
    coords = list(coords)
    while len(out) < need:
        if not coords:
            j = int(rng.integers(0, values.size))
            if j in tried:
                continue
        else:
            j = int(coords.pop(0))
        tried.add(j)
        h = 1e-6 * max(1.0, abs(values[j]))
        e = np.zeros(values.size)
        e[j] = h
        up = loss_of_flat(values + e)
        dn = loss_of_flat(values - e)
        left = (f0 - dn) / h
        right = (up - f0) / h
        central = (up - dn) / (2.0 * h)
        if abs(left - right) > 1e-3 * (abs(central) + 1e-6):
            continue  # straddles a hinge kink
        out.append((j, central))
    return out
