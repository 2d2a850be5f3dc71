import numpy as np
import pytest

from oracles import bessel_ref

ORACLE_GRID_N = 10_000


@pytest.fixture(scope="session")
def hankel_grid():
    """(x, H0_ref, H1_ref) on 1e4 log-spaced arguments in [1e-6, 1e6]."""
    x = np.logspace(-6.0, 6.0, ORACLE_GRID_N)
    refs = [bessel_ref(float(v)) for v in x]
    h0 = np.array([r[0] for r in refs])
    h1 = np.array([r[1] for r in refs])
    return x, h0, h1
