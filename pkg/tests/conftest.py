import numpy as np
import pytest


def finite_diff_check(eval_fn, arr, analytic, indices, eps=1e-5, rtol=1e-4):
    """Central finite differences on selected entries of a parameter array.

    eval_fn re-evaluates the scalar objective after in-place perturbation of
    `arr`; `analytic` is the hand-written gradient for the same entries.
    """
    for i in indices:
        old = arr.flat[i]
        arr.flat[i] = old + eps
        up = eval_fn()
        arr.flat[i] = old - eps
        down = eval_fn()
        arr.flat[i] = old
        fd = (up - down) / (2 * eps)
        ref = analytic.flat[i]
        denom = max(abs(fd), abs(ref), 1e-8)
        assert abs(fd - ref) / denom < rtol, (
            f"entry {i}: finite-diff {fd:.6e} vs analytic {ref:.6e}"
        )


def probe_indices(rng, size, count=50):
    return rng.choice(size, size=min(count, size), replace=False)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
