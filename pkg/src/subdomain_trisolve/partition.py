"""Uniform partition labels for matrix rows and their row permutations."""

import logging
import os
from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from subdomain_trisolve.errors import DimensionMismatchError, PartitionError
from subdomain_trisolve.sparsemat import INDEX_DTYPE, CsrMatrix, GridSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PartitionLabels:
    labels: np.ndarray
    n_subdomains: int
    rows_per_subdomain: int

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=INDEX_DTYPE)
        object.__setattr__(self, "labels", labels)
        if self.rows_per_subdomain < 1:
            raise PartitionError(f"rows per subdomain must be >= 1, got {self.rows_per_subdomain}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_subdomains):
            raise PartitionError(f"labels must lie in [0, {self.n_subdomains})")
        sizes = np.bincount(labels, minlength=self.n_subdomains)
        if np.any(sizes[:-1] != self.rows_per_subdomain) or not (
            0 < sizes[-1] <= self.rows_per_subdomain
        ):
            raise PartitionError(
                f"every subdomain must hold {self.rows_per_subdomain} rows "
                f"(the last one may hold fewer), got sizes {sizes.tolist()[:8]}..."
            )

    @classmethod
    def single(cls, n: int) -> "PartitionLabels":
        """One subdomain holding every row."""
        return cls(np.zeros(n, dtype=INDEX_DTYPE), 1, max(n, 1))

    @classmethod
    def contiguous(cls, n: int, rows_per_subdomain: int) -> "PartitionLabels":
        """Consecutive row ranges of `rows_per_subdomain` rows."""
        labels = np.arange(n, dtype=INDEX_DTYPE) // rows_per_subdomain
        return cls(labels, -(-n // rows_per_subdomain), rows_per_subdomain)

    @property
    def nrows(self) -> int:
        return int(self.labels.size)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_subdomains)

    @property
    def remainder_rows(self) -> int:
        """Rows of the final subdomain when it is smaller than the others, else 0."""
        last = int(self.sizes()[-1])
        return last if last < self.rows_per_subdomain else 0

    @property
    def is_contiguous(self) -> bool:
        return bool(np.all(np.diff(self.labels) >= 0))

    @cached_property
    def bounds(self) -> np.ndarray:
        """Row offsets of each subdomain; requires contiguous (reordered) labels."""
        if not self.is_contiguous:
            raise PartitionError(
                "Subdomain rows are not contiguous; reorder the matrix first."
            )
        return np.concatenate(([0], np.cumsum(self.sizes()))).astype(INDEX_DTYPE)

    def ranges(self) -> list[tuple[int, int]]:
        b = self.bounds.tolist()
        return list(zip(b[:-1], b[1:]))

    def permuted(self, perm: "Permutation") -> "PartitionLabels":
        """Labels in the row order of the permuted matrix."""
        if perm.size != self.nrows:
            raise DimensionMismatchError(
                f"Permutation of size {perm.size} does not match {self.nrows} labels"
            )
        return PartitionLabels(
            self.labels[perm.new_to_old], self.n_subdomains, self.rows_per_subdomain
        )

    def expand(self, block_dim: int) -> "PartitionLabels":
        """Scalar-row labels of a block-row partition."""
        return PartitionLabels(
            np.repeat(self.labels, block_dim),
            self.n_subdomains,
            self.rows_per_subdomain * block_dim,
        )

    def write(self, path: str | os.PathLike) -> None:
        np.savetxt(path, self.labels, fmt="%d")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "PartitionLabels":
        """Reads a newline-delimited label file; the subdomain size is the largest count."""
        try:
            labels = np.loadtxt(path, dtype=INDEX_DTYPE, ndmin=1)
        except (OSError, ValueError) as e:
            raise PartitionError(f"Cannot read label file {path}: {e}") from e
        if labels.size == 0:
            raise PartitionError(f"Label file {path} is empty")
        sizes = np.bincount(labels)
        return cls(labels, sizes.size, int(sizes.max()))


@dataclass(frozen=True, eq=False)
class Permutation:
    """Paired row maps.

    `new_to_old[j]` is the original row placed at position j; `old_to_new`
    is its inverse. These are the `pmap` and `inv_pmap` arrays as the CSR
    reordering loop uses them.
    """

    new_to_old: np.ndarray
    old_to_new: np.ndarray

    def __post_init__(self):
        n2o = np.ascontiguousarray(self.new_to_old, dtype=INDEX_DTYPE)
        o2n = np.ascontiguousarray(self.old_to_new, dtype=INDEX_DTYPE)
        object.__setattr__(self, "new_to_old", n2o)
        object.__setattr__(self, "old_to_new", o2n)
        n = n2o.size
        if o2n.size != n:
            raise PartitionError("Permutation maps must have equal length")
        if n and (
            n2o.min() < 0
            or n2o.max() >= n
            or not np.array_equal(o2n[n2o], np.arange(n))
        ):
            raise PartitionError("Permutation maps must be mutually inverse bijections")

    @classmethod
    def from_new_to_old(cls, new_to_old) -> "Permutation":
        n2o = np.asarray(new_to_old, dtype=INDEX_DTYPE)
        o2n = np.empty_like(n2o)
        o2n[n2o] = np.arange(n2o.size, dtype=INDEX_DTYPE)
        return cls(n2o, o2n)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        r = np.arange(n, dtype=INDEX_DTYPE)
        return cls(r, r.copy())

    @property
    def size(self) -> int:
        return int(self.new_to_old.size)

    def expand(self, block_dim: int) -> "Permutation":
        """Scalar-row permutation of a block-row permutation."""
        offsets = np.arange(block_dim, dtype=INDEX_DTYPE)
        return Permutation.from_new_to_old(
            (block_dim * self.new_to_old[:, None] + offsets).ravel()
        )


def geometric_cuts(grid: GridSpec, sub: tuple[int, int, int]) -> PartitionLabels:
    """Labels grid vertices by the box-shaped tile that contains them.

    Vertex gidx = i + nx*(j + ny*k) gets label ibx + bx*(jby + by*kbz) with
    ibx = i // nblk_x etc. and bx = nx / nblk_x tiles along x.
    """
    nblk_x, nblk_y, nblk_z = sub
    if min(sub) < 1:
        raise PartitionError(f"Tile dimensions must be >= 1, got {sub}")
    if grid.nx % nblk_x or grid.ny % nblk_y or grid.nz % nblk_z:
        raise PartitionError(f"Grid {grid.dims} is not divisible by tile {tuple(sub)}")
    bx = grid.nx // nblk_x
    by = grid.ny // nblk_y
    bz = grid.nz // nblk_z
    i, j, k = grid.coordinates()
    labels = i // nblk_x + bx * (j // nblk_y + by * (k // nblk_z))
    logger.debug(f"Geometric cuts: {bx * by * bz} tiles of {nblk_x * nblk_y * nblk_z} rows.")
    return PartitionLabels(labels, bx * by * bz, nblk_x * nblk_y * nblk_z)


def _adjacency(A: CsrMatrix) -> tuple[list[int], list[int]]:
    """Symmetrized adjacency lists of the pattern, self loops removed."""
    if A.nrows != A.ncols:
        raise PartitionError(f"Graph partitioning needs a square matrix, got {A.shape}")
    B = sp.csr_matrix((np.ones(A.nnz), A.col_idx, A.row_ptr), shape=A.shape)
    S = (B + B.T).tocoo()
    off = S.row != S.col
    S = sp.csr_matrix(
        (np.ones(int(off.sum())), (S.row[off], S.col[off])), shape=A.shape
    )
    S.sort_indices()
    return S.indptr.tolist(), S.indices.tolist()


def graph_partition_uniform(
    A: CsrMatrix, rows_per_subdomain: int, seed: int | None = None
) -> PartitionLabels:
    """Greedy graph growing into parts of exactly `rows_per_subdomain` rows.

    Each part starts from the unassigned row with the fewest unassigned
    neighbors and grows breadth-first. When the frontier runs dry before the
    part is full, growth restarts from the next such row, so every part ends
    with exactly the requested size (the last one takes the remainder).
    Ties between start rows go to the lowest index, or to a random priority
    drawn from `seed` when one is given.
    """
    n = A.nrows
    P = rows_per_subdomain
    if P < 1:
        raise PartitionError(f"rows per subdomain must be >= 1, got {P}")
    if n == 0:
        raise PartitionError("Cannot partition an empty matrix")
    n_parts = -(-n // P)
    ptr, adj = _adjacency(A)

    if seed is None:
        priority = np.arange(n, dtype=INDEX_DTYPE)
    else:
        priority = np.random.default_rng(seed).permutation(n).astype(INDEX_DTYPE)
    free_degree = np.diff(np.asarray(ptr, dtype=INDEX_DTYPE))
    unassigned_key = n + 1
    labels = np.full(n, -1, dtype=INDEX_DTYPE)
    assigned = [False] * n

    def next_start() -> int:
        key = np.where(labels < 0, free_degree, unassigned_key * 2) * n + priority
        return int(np.argmin(key))

    def take(row: int, part: int) -> None:
        assigned[row] = True
        labels[row] = part
        for q in range(ptr[row], ptr[row + 1]):
            free_degree[adj[q]] -= 1

    remaining = n
    for part in range(n_parts):
        target = min(P, remaining)
        filled = 0
        queue: deque[int] = deque()
        while filled < target:
            if not queue:
                start = next_start()
                take(start, part)
                filled += 1
                queue.append(start)
                continue
            row = queue.popleft()
            for q in range(ptr[row], ptr[row + 1]):
                nbr = adj[q]
                if not assigned[nbr] and filled < target:
                    take(nbr, part)
                    filled += 1
                    queue.append(nbr)
        remaining -= target

    logger.info(f"Graph growing produced {n_parts} parts of {P} rows.")
    return PartitionLabels(labels, n_parts, P)


def labels_to_permutation(labels: PartitionLabels) -> Permutation:
    """Groups rows by label, keeping original order within a label."""
    new_to_old = np.argsort(labels.labels, kind="stable")
    return Permutation.from_new_to_old(new_to_old)
