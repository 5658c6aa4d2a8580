"""Shared numerical helpers for the test suite."""

import numpy as np
import pytest


def rel_err(a, b, floor=1e-6):
    """Max elementwise relative error with a denominator floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def central_difference(f, arrays, step=1e-5):
    """Central finite differences of the scalar callable ``f`` wrt each array.

    ``f`` takes no arguments and must read the (mutated in place) arrays
    on every call; this keeps it independent of the autodiff path under
    test.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def unit_rows(rng, n, d):
    """Random row-normalized matrix with rows kept away from zero."""
    while True:
        z = rng.uniform(-2.0, 2.0, (n, d))
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        if norms.min() > 1e-3:
            return z / norms


def loss_close(a, b, tol=1e-12):
    """Absolute tolerance for O(1) losses, relative above that scale."""
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
