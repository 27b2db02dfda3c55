import numpy as np
import pytest

from subdomain_trisolve.partition import PartitionLabels
from subdomain_trisolve.sparsemat import CsrMatrix


def random_triangle(
    rng: np.random.Generator,
    n: int,
    part: int,
    upper: bool = False,
    unit_diagonal: bool = True,
    density: float = 0.2,
) -> tuple[CsrMatrix, PartitionLabels]:
    """Random triangular factor whose couplings stay inside contiguous blocks of `part` rows."""
    layout = PartitionLabels.contiguous(n, part)
    dense = np.zeros((n, n))
    for s, e in layout.ranges():
        block = rng.uniform(-0.5, 0.5, size=(e - s, e - s))
        block *= rng.random((e - s, e - s)) < density
        block = np.triu(block, 1) if upper else np.tril(block, -1)
        dense[s:e, s:e] = block
    if not unit_diagonal:
        dense[np.diag_indices(n)] = rng.uniform(1.0, 2.0, size=n) * rng.choice([-1, 1], size=n)
    return CsrMatrix.from_dense(dense), layout


def diagonally_dominant(rng: np.random.Generator, n: int, density: float = 1.0) -> np.ndarray:
    """Dense, strictly row diagonally dominant matrix."""
    dense = rng.uniform(-1.0, 1.0, size=(n, n))
    if density < 1.0:
        dense *= rng.random((n, n)) < density
    dense[np.diag_indices(n)] = np.abs(dense).sum(axis=1) + 1.0
    return dense


def block_diagonal(rng: np.random.Generator, n: int, part: int, density: float = 0.3):
    """Diagonally dominant CSR matrix with couplings only inside blocks of `part` rows."""
    layout = PartitionLabels.contiguous(n, part)
    dense = np.zeros((n, n))
    for s, e in layout.ranges():
        dense[s:e, s:e] = diagonally_dominant(rng, e - s, density)
    return CsrMatrix.from_dense(dense), layout


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def make_triangle(rng):
    return lambda n, part, **kw: random_triangle(rng, n, part, **kw)


@pytest.fixture
def make_dominant(rng):
    return lambda n, density=1.0: diagonally_dominant(rng, n, density)


@pytest.fixture
def make_block_diagonal(rng):
    return lambda n, part, density=0.3: block_diagonal(rng, n, part, density)


@pytest.fixture
def seeded_triangle():
    return lambda seed, n, part, **kw: random_triangle(np.random.default_rng(seed), n, part, **kw)
