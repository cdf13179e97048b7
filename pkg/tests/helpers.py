"""Shared test oracles: finite differences and error metrics."""

import numpy as np

from s3pet.autodiff import Tape


def finite_difference(f, arrays, eps=1e-5):
    """Central-difference gradient of scalar f(*arrays) w.r.t. each array.

    Independent of the tape: evaluates f forward-only at perturbed inputs.
    """
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(*arrays)
            flat[i] = orig - eps
            lo = f(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def rel_err(approx, exact):
    """Max elementwise error scaled by max(1, magnitude of the reference)."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = max(1.0, float(np.max(np.abs(exact))) if exact.size else 1.0)
    return float(np.max(np.abs(approx - exact))) / denom if approx.size else 0.0


def tape_grads(build_loss, wrt):
    """Build a loss inside a fresh tape, backprop, return grads for `wrt`."""
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    out = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    tape.release()
    return out
