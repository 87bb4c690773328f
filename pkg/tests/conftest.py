import numpy as np
import pytest

from simulst import autodiff as ad


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.reset_tape()
    yield
    ad.reset_tape()


def central_difference(f, arrays, h=1e-5):
    """Gradient of scalar f(*arrays) w.r.t. every entry, by central differences.

    Independent oracle for the reverse-mode engine: evaluates f twice per
    element in float64 and never touches the tape machinery of the value
    under test (f is re-run from scratch for each perturbation).
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(*arrays)
            flat[i] = orig - h
            down = f(*arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(approx, exact):
    denom = max(np.abs(approx).max(initial=0.0), np.abs(exact).max(initial=0.0), 1e-8)
    return np.abs(approx - exact).max(initial=0.0) / denom
