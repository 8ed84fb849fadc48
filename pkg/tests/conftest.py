import numpy as np
import pytest


def central_diff(f, x: np.ndarray, idx, h: float = 1e-5) -> float:
    """Central finite difference of scalar ``f`` w.r.t. entry ``idx`` of ``x`` (restored afterwards)."""
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-3) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
