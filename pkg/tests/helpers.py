"""Finite-difference oracles shared by the test modules."""

import numpy as np


def central_grad(fn, x, h=1e-5):
    """d fn(x) / dx for scalar ``fn`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def numerical_jacobian(fn, x, h=1e-5):
    """Jacobian of a vector map ``fn: R^D -> R^D`` at the flat point ``x``."""
    x = np.array(x, dtype=np.float64).reshape(-1)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.ravel(fn(x + e)) - np.ravel(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=1)


def log_abs_det(jac):
    sign, value = np.linalg.slogdet(jac)
    assert sign != 0
    return value


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def randomize(model, rng, scale=0.3):
    """Perturb every parameter so couplings are far from the identity."""
    for p in model.parameters():
        p.assign(p.data + rng.normal(0, scale, p.shape))
    return model
