"""Shared fixtures. BLAS threading is pinned to 1 before numpy loads:
on small desk-scale gemms the thread-sync overhead is a net loss, and a
fixed thread count keeps reduction order (and thus bit-level replay) stable.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from zglab import data, engine


@pytest.fixture(scope="session")
def archs():
    return {
        "mlp-small": engine.ArchSpec("mlp-small", (1, 8, 8), 5),
        "cnn-small": engine.ArchSpec("cnn-small", (1, 8, 8), 5),
    }


@pytest.fixture(scope="session")
def blobs():
    return data.synth_blobs(7, 256, 8)


def finite_difference(loss_fn, array, indices, h=1e-6):
    """Central-difference gradient of loss_fn at the given flat indices."""
    flat = array.reshape(-1)
    out = {}
    for idx in indices:
        orig = flat[idx]
        flat[idx] = orig + h
        lp = loss_fn()
        flat[idx] = orig - h
        lm = loss_fn()
        flat[idx] = orig
        out[idx] = (lp - lm) / (2.0 * h)
    return out


def grad_matches_fd(analytic_flat, fd: dict, rtol=1e-5, atol_small=1e-10):
    """Spec tolerance: relative <= rtol, absolute for near-zero coordinates."""
    worst = 0.0
    for idx, fd_val in fd.items():
        a = analytic_flat[idx]
        if abs(a) < 1e-8:
            assert abs(a - fd_val) <= atol_small, (idx, a, fd_val)
        else:
            rel = abs(a - fd_val) / abs(a)
            worst = max(worst, rel)
            assert rel <= rtol, (idx, a, fd_val, rel)
    return worst
