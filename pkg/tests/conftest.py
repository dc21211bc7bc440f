import numpy as np
import pytest

from tightpack import ArrayGeometry, WeightMatrix

# 8x4 occupancy with every column pair conflicting somewhere in the matrix.
# Identity packing at H=4 gives widths (3, 3); swapping rows 2 and 6 gives
# (2, 3); then swapping columns 0 and 1 inside section 1 gives (2, 2).
CROSSED_PATTERN = np.array([
    [1, 0, 1, 0],
    [1, 0, 0, 1],
    [1, 1, 0, 0],
    [0, 1, 1, 0],
    [0, 0, 1, 1],
    [0, 1, 0, 1],
    [0, 1, 1, 0],
    [0, 0, 1, 0],
], dtype=np.int8)

CROSSED_GEOM = ArrayGeometry(array_rows=4, array_cols=4, group_max=4, subarray_cols=4)


def random_weights(rng: np.random.Generator, rows: int, cols: int, density: float,
                   name: str = "") -> WeightMatrix:
    v = rng.integers(1, 128, (rows, cols)) * rng.choice(np.array([-1, 1]), (rows, cols))
    v[rng.random((rows, cols)) >= density] = 0
    return WeightMatrix(v.astype(np.int8), 1.0, name)


def lognormal_weights(rng: np.random.Generator, rows: int, cols: int, density: float,
                      sigma: float = 0.8):
    """Real-valued sparse matrix with log-normal magnitudes and random signs."""
    n = rows * cols
    k = round(density * n)
    vals = np.zeros(n)
    idx = rng.choice(n, k, replace=False)
    vals[idx] = rng.lognormal(0.0, sigma, k) * rng.choice(np.array([-1.0, 1.0]), k)
    return vals.reshape(rows, cols)


@pytest.fixture
def crossed_matrix():
    values = CROSSED_PATTERN * np.arange(1, 33, dtype=np.int8).reshape(8, 4)
    return WeightMatrix(values.astype(np.int8), 1.0, "crossed")


@pytest.fixture
def crossed_geom():
    return CROSSED_GEOM


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
