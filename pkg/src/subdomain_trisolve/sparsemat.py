"""Sparse matrix containers, SpMV and synthetic Laplacian generation.

`CsrMatrix` and `BsrMatrix` are immutable carriers of the raw CSR/BSR arrays.
Kernels that need row-level access read the arrays directly; SpMV delegates
to a cached `scipy.sparse` view of the same storage.
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from subdomain_trisolve.errors import DimensionMismatchError, GridError, MatrixFormatError

logger = logging.getLogger(__name__)

BLOCK_DIM = 3
INDEX_DTYPE = np.int64
VALUE_DTYPE = np.float64
_INDEX_LIMIT = 2**62

DIAGONAL_VALUE = 6.0
NEIGHBOR_VALUE = -1.0


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise GridError(f"Grid dimensions must be >= 1, got {self.dims}")
        if self.nx * self.ny * self.nz * 7 >= _INDEX_LIMIT:
            raise GridError(f"Grid {self.dims} overflows 64-bit index arithmetic")

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """Parses "nx,ny,nz" (also accepts "x" as separator)."""
        parts = text.replace("x", ",").split(",")
        try:
            nx, ny, nz = (int(p) for p in parts)
        except ValueError as e:
            raise GridError(f"Expected three comma-separated integers, got '{text}'") from e
        return cls(nx, ny, nz)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n(self) -> int:
        return self.nx * self.ny * self.nz

    def index(self, i: int, j: int, k: int) -> int:
        return i + self.nx * (j + self.ny * k)

    def coordinates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-vertex (i, j, k) arrays in natural ordering."""
        g = np.arange(self.n, dtype=INDEX_DTYPE)
        return g % self.nx, (g // self.nx) % self.ny, g // (self.nx * self.ny)


def _as_index(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=INDEX_DTYPE)


def _check_structure(row_ptr, col_idx, nrows, ncols, what="") -> None:
    if row_ptr.shape != (nrows + 1,):
        raise MatrixFormatError(f"{what}row_ptr must have length {nrows + 1}")
    if row_ptr[0] != 0 or row_ptr[-1] != col_idx.size:
        raise MatrixFormatError(f"{what}row_ptr must start at 0 and end at nnz")
    if np.any(np.diff(row_ptr) < 0):
        raise MatrixFormatError(f"{what}row_ptr must be non-decreasing")
    if col_idx.size == 0:
        return
    if col_idx.min() < 0 or col_idx.max() >= ncols:
        raise MatrixFormatError(f"{what}column index out of range [0, {ncols})")
    # strictly increasing inside every row: a non-increase may only happen at row starts
    steps = np.diff(col_idx) <= 0
    starts = np.zeros(col_idx.size, dtype=bool)
    starts[row_ptr[1:-1][row_ptr[1:-1] < col_idx.size]] = True
    if np.any(steps & ~starts[1:]):
        raise MatrixFormatError(f"{what}columns must be strictly increasing within each row")


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    nrows: int
    ncols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_ptr", _as_index(self.row_ptr))
        object.__setattr__(self, "col_idx", _as_index(self.col_idx))
        object.__setattr__(
            self, "values", np.ascontiguousarray(self.values, dtype=VALUE_DTYPE)
        )
        if self.values.shape != self.col_idx.shape:
            raise MatrixFormatError("values and col_idx must have the same length")
        _check_structure(self.row_ptr, self.col_idx, self.nrows, self.ncols)

    @property
    def nnz(self) -> int:
        return int(self.col_idx.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @cached_property
    def row_of_entry(self) -> np.ndarray:
        return np.repeat(np.arange(self.nrows, dtype=INDEX_DTYPE), np.diff(self.row_ptr))

    @cached_property
    def _scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.col_idx, self.row_ptr), shape=self.shape
        )

    def to_scipy(self) -> sp.csr_matrix:
        return self._scipy

    @classmethod
    def from_scipy(cls, A) -> "CsrMatrix":
        """Builds a CSR matrix from any scipy sparse matrix, summing duplicates.

        Explicitly stored zeros are kept.
        """
        A = sp.csr_matrix(A, copy=True)
        A.sum_duplicates()
        A.sort_indices()
        return cls(A.shape[0], A.shape[1], A.indptr, A.indices, A.data)

    @classmethod
    def from_dense(cls, dense) -> "CsrMatrix":
        dense = np.asarray(dense, dtype=VALUE_DTYPE)
        return cls.from_scipy(sp.csr_matrix(dense))

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    def to_dense(self) -> np.ndarray:
        return self._scipy.toarray()

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_ptr[i], self.row_ptr[i + 1]
        return self.col_idx[lo:hi], self.values[lo:hi]

    def diagonal_positions(self) -> np.ndarray:
        """Entry index of each row's diagonal, or -1 when absent."""
        pos = np.full(self.nrows, -1, dtype=INDEX_DTYPE)
        hits = np.nonzero(self.col_idx == self.row_of_entry)[0]
        pos[self.row_of_entry[hits]] = hits
        return pos

    def select(self, keep: np.ndarray) -> "CsrMatrix":
        """Returns the matrix restricted to the entries where `keep` is True."""
        counts = np.bincount(self.row_of_entry[keep], minlength=self.nrows)
        row_ptr = np.concatenate(([0], np.cumsum(counts)))
        return CsrMatrix(
            self.nrows, self.ncols, row_ptr, self.col_idx[keep], self.values[keep]
        )


@dataclass(frozen=True, eq=False)
class BsrMatrix:
    """Block sparse row matrix with dense 3x3 blocks stored row-major."""

    n_block_rows: int
    n_block_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    blocks: np.ndarray

    block_dim = BLOCK_DIM

    def __post_init__(self):
        object.__setattr__(self, "row_ptr", _as_index(self.row_ptr))
        object.__setattr__(self, "col_idx", _as_index(self.col_idx))
        blocks = np.ascontiguousarray(self.blocks, dtype=VALUE_DTYPE)
        object.__setattr__(
            self, "blocks", blocks.reshape(-1, BLOCK_DIM, BLOCK_DIM)
        )
        if self.blocks.shape[0] != self.col_idx.size:
            raise MatrixFormatError("one 3x3 block is required per block column index")
        _check_structure(
            self.row_ptr, self.col_idx, self.n_block_rows, self.n_block_cols, "block "
        )

    @property
    def nnzb(self) -> int:
        return int(self.col_idx.size)

    @property
    def nnz(self) -> int:
        return BLOCK_DIM * BLOCK_DIM * self.nnzb

    @property
    def nrows(self) -> int:
        return BLOCK_DIM * self.n_block_rows

    @property
    def ncols(self) -> int:
        return BLOCK_DIM * self.n_block_cols

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @cached_property
    def row_of_block(self) -> np.ndarray:
        return np.repeat(
            np.arange(self.n_block_rows, dtype=INDEX_DTYPE), np.diff(self.row_ptr)
        )

    @cached_property
    def _scipy(self) -> sp.bsr_matrix:
        return sp.bsr_matrix(
            (self.blocks, self.col_idx, self.row_ptr),
            shape=self.shape,
            blocksize=(BLOCK_DIM, BLOCK_DIM),
        )

    def to_scipy(self) -> sp.bsr_matrix:
        return self._scipy

    def to_dense(self) -> np.ndarray:
        return self._scipy.toarray()

    def diagonal_positions(self) -> np.ndarray:
        pos = np.full(self.n_block_rows, -1, dtype=INDEX_DTYPE)
        hits = np.nonzero(self.col_idx == self.row_of_block)[0]
        pos[self.row_of_block[hits]] = hits
        return pos

    def select(self, keep: np.ndarray) -> "BsrMatrix":
        counts = np.bincount(self.row_of_block[keep], minlength=self.n_block_rows)
        row_ptr = np.concatenate(([0], np.cumsum(counts)))
        return BsrMatrix(
            self.n_block_rows,
            self.n_block_cols,
            row_ptr,
            self.col_idx[keep],
            self.blocks[keep],
        )

    @classmethod
    def from_scalar(cls, A: CsrMatrix) -> "BsrMatrix":
        """Replaces every scalar entry e of `A` by the block e*I3."""
        blocks = A.values[:, None, None] * np.eye(BLOCK_DIM)
        return cls(A.nrows, A.ncols, A.row_ptr, A.col_idx, blocks)


SparseMatrix = CsrMatrix | BsrMatrix


def laplacian_block_count(grid: GridSpec) -> int:
    """Stencil entries of the 7-point Laplacian, without building it."""
    nx, ny, nz = grid.dims
    return 7 * nx * ny * nz - 2 * (ny * nz + nx * nz + nx * ny)


def laplacian_nnz(grid: GridSpec, layout: str = "scalar") -> int:
    blocks = laplacian_block_count(grid)
    return blocks * BLOCK_DIM * BLOCK_DIM if layout == "bsr3" else blocks


def _laplacian_pattern(grid: GridSpec) -> CsrMatrix:
    nx, ny, nz = grid.dims
    n = grid.n
    i, j, k = grid.coordinates()
    g = np.arange(n, dtype=INDEX_DTYPE)
    # natural ordering makes these offsets ascending in column index
    offsets = np.array([-nx * ny, -nx, -1, 0, 1, nx, nx * ny], dtype=INDEX_DTYPE)
    valid = np.stack(
        [k > 0, j > 0, i > 0, np.ones(n, dtype=bool), i < nx - 1, j < ny - 1, k < nz - 1],
        axis=1,
    )
    cols = g[:, None] + offsets[None, :]
    values = np.where(offsets == 0, DIAGONAL_VALUE, NEIGHBOR_VALUE)
    row_ptr = np.concatenate(([0], np.cumsum(valid.sum(axis=1))))
    return CsrMatrix(
        n, n, row_ptr, cols[valid], np.broadcast_to(values, valid.shape)[valid]
    )


def generate_laplacian_3d(grid: GridSpec, layout: str = "scalar") -> SparseMatrix:
    """7-point finite-difference Laplacian on a Cartesian grid.

    Rows follow the natural ordering gidx = i + nx*(j + ny*k). The diagonal is
    6 on every row, boundary rows included, and each existing neighbor is -1.
    With layout "bsr3" every scalar entry e becomes the 3x3 block e*I.
    """
    if layout not in ("scalar", "bsr3"):
        raise ValueError(f"Unknown layout '{layout}'")
    A = _laplacian_pattern(grid)
    logger.debug(f"Generated {grid.dims} Laplacian with {A.nnz} stencil entries.")
    if layout == "bsr3":
        return BsrMatrix.from_scalar(A)
    return A


def spmv(A: SparseMatrix, x) -> np.ndarray:
    """y = A @ x for CSR or 3x3 BSR matrices."""
    x = np.asarray(x, dtype=VALUE_DTYPE)
    if x.shape != (A.ncols,):
        raise DimensionMismatchError(
            f"Vector of length {x.shape[0] if x.ndim else 0} does not match {A.ncols} columns"
        )
    return A.to_scipy() @ x


def bsr_to_csr(A: BsrMatrix) -> CsrMatrix:
    """Scalar expansion of a 3x3 BSR matrix.

    Each scalar row lists its block row's blocks in block-column order, and
    within a block the three columns in order. Stored zeros inside blocks are
    kept, so the pattern stays block-faithful.
    """
    d = BLOCK_DIM
    lengths = np.diff(A.row_ptr)
    br = A.row_of_block
    p = np.arange(A.nnzb, dtype=INDEX_DTYPE) - A.row_ptr[br]
    r = np.arange(d)[None, :, None]
    c = np.arange(d)[None, None, :]
    pos = (
        (d * d * A.row_ptr[br])[:, None, None]
        + r * (d * lengths[br])[:, None, None]
        + (d * p)[:, None, None]
        + c
    )
    col_idx = np.empty(A.nnz, dtype=INDEX_DTYPE)
    values = np.empty(A.nnz, dtype=VALUE_DTYPE)
    col_idx[pos.ravel()] = np.broadcast_to(d * A.col_idx[:, None, None] + c, pos.shape).ravel()
    values[pos.ravel()] = A.blocks.ravel()
    row_ptr = np.concatenate(([0], np.cumsum(np.repeat(d * lengths, d))))
    return CsrMatrix(A.nrows, A.ncols, row_ptr, col_idx, values)


def csr_to_bsr(A: CsrMatrix) -> BsrMatrix:
    """Groups a scalar CSR matrix into 3x3 blocks; partial blocks are zero-filled."""
    if A.nrows % BLOCK_DIM or A.ncols % BLOCK_DIM:
        raise MatrixFormatError(
            f"A {A.nrows}x{A.ncols} matrix cannot be split into {BLOCK_DIM}x{BLOCK_DIM} blocks"
        )
    B = A.to_scipy().tobsr(blocksize=(BLOCK_DIM, BLOCK_DIM))
    B.sort_indices()
    return BsrMatrix(
        A.nrows // BLOCK_DIM, A.ncols // BLOCK_DIM, B.indptr, B.indices, B.data
    )


def as_csr(A: SparseMatrix) -> CsrMatrix:
    return bsr_to_csr(A) if isinstance(A, BsrMatrix) else A


def gather_row_entries(row_ptr: np.ndarray, rows: np.ndarray):
    """Entry positions of the listed rows, concatenated in list order.

    Returns the row pointer of the gathered rows, the positions of their
    entries in the source arrays, and the list index each entry came from.
    """
    rows = np.asarray(rows, dtype=INDEX_DTYPE)
    lengths = row_ptr[rows + 1] - row_ptr[rows]
    new_ptr = np.concatenate(([0], np.cumsum(lengths))).astype(INDEX_DTYPE)
    pos = np.repeat(row_ptr[rows] - new_ptr[:-1], lengths) + np.arange(
        new_ptr[-1], dtype=INDEX_DTYPE
    )
    owner = np.repeat(np.arange(rows.size, dtype=INDEX_DTYPE), lengths)
    return new_ptr, pos, owner
