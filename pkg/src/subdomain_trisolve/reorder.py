"""Symmetric row/column permutation and removal of inter-subdomain couplings."""

import logging
from dataclasses import asdict, dataclass

import numpy as np

from subdomain_trisolve.errors import DimensionMismatchError, PartitionError
from subdomain_trisolve.partition import PartitionLabels, Permutation
from subdomain_trisolve.sparsemat import (
    BLOCK_DIM,
    BsrMatrix,
    CsrMatrix,
    GridSpec,
    SparseMatrix,
    gather_row_entries,
    laplacian_nnz,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecompositionStats:
    nnz_before: int
    nnz_after: int
    dropped: int
    dropped_fraction: float
    n_subdomains: int = 0
    rows_per_subdomain: int = 0
    remainder_rows: int = 0

    @classmethod
    def from_counts(
        cls, nnz_before: int, nnz_after: int, layout: PartitionLabels | None = None
    ) -> "DecompositionStats":
        dropped = nnz_before - nnz_after
        return cls(
            nnz_before=nnz_before,
            nnz_after=nnz_after,
            dropped=dropped,
            dropped_fraction=dropped / nnz_before if nnz_before else 0.0,
            n_subdomains=layout.n_subdomains if layout else 0,
            rows_per_subdomain=layout.rows_per_subdomain if layout else 0,
            remainder_rows=layout.remainder_rows if layout else 0,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _check_perm(nrows: int, ncols: int, perm: Permutation) -> None:
    if nrows != ncols:
        raise DimensionMismatchError(f"Symmetric reordering needs a square matrix, got {nrows}x{ncols}")
    if perm.size != nrows:
        raise DimensionMismatchError(
            f"Permutation of size {perm.size} does not match {nrows} rows"
        )


def reorder_csr(A: CsrMatrix, perm: Permutation) -> CsrMatrix:
    """Returns P*A*P^T.

    Row j of the result is row new_to_old[j] of A with every column c
    relabelled old_to_new[c]; columns are then sorted within each row.
    """
    _check_perm(A.nrows, A.ncols, perm)
    new_ptr, pos, new_rows = gather_row_entries(A.row_ptr, perm.new_to_old)
    cols = perm.old_to_new[A.col_idx[pos]]
    order = np.lexsort((cols, new_rows))
    return CsrMatrix(A.nrows, A.ncols, new_ptr, cols[order], A.values[pos][order])


def reorder_bsr(A: BsrMatrix, perm: Permutation) -> BsrMatrix:
    """Block-row analogue of `reorder_csr`; 3x3 blocks move intact."""
    _check_perm(A.n_block_rows, A.n_block_cols, perm)
    new_ptr, pos, new_rows = gather_row_entries(A.row_ptr, perm.new_to_old)
    cols = perm.old_to_new[A.col_idx[pos]]
    order = np.lexsort((cols, new_rows))
    return BsrMatrix(
        A.n_block_rows, A.n_block_cols, new_ptr, cols[order], A.blocks[pos][order]
    )


def reorder(A: SparseMatrix, perm: Permutation) -> SparseMatrix:
    if isinstance(A, BsrMatrix):
        return reorder_bsr(A, perm)
    return reorder_csr(A, perm)


def drop_inter_partition(
    A: SparseMatrix, layout: PartitionLabels
) -> tuple[SparseMatrix, DecompositionStats]:
    """Keeps entry (r, c) only when rows r and c share a subdomain.

    `layout` labels the rows of `A` as they are stored (already reordered).
    For BSR input the labels are per block row and counts are scalar.
    """
    if isinstance(A, BsrMatrix):
        if layout.nrows != A.n_block_rows:
            raise DimensionMismatchError(
                f"{layout.nrows} labels for {A.n_block_rows} block rows"
            )
        rows = A.row_of_block
    else:
        if layout.nrows != A.nrows:
            raise DimensionMismatchError(f"{layout.nrows} labels for {A.nrows} rows")
        rows = A.row_of_entry
    keep = layout.labels[rows] == layout.labels[A.col_idx]
    kept = A.select(keep)
    stats = DecompositionStats.from_counts(A.nnz, kept.nnz, layout)
    logger.info(
        f"Dropped {stats.dropped} of {stats.nnz_before} nonzeros "
        f"({100 * stats.dropped_fraction:.2f}%) across {layout.n_subdomains} subdomains."
    )
    return kept, stats


def count_decomposition(
    grid: GridSpec, labels: PartitionLabels, layout: str = "scalar"
) -> DecompositionStats:
    """Decomposition statistics of the grid Laplacian from labels alone.

    Counts stencil couplings whose two vertices carry different labels; no
    matrix values are allocated. Agrees with `drop_inter_partition` applied
    to the assembled, reordered Laplacian.
    """
    if labels.nrows != grid.n:
        raise PartitionError(f"{labels.nrows} labels for a grid of {grid.n} vertices")
    cube = labels.labels.reshape(grid.nz, grid.ny, grid.nx)
    crossing = (
        int(np.count_nonzero(cube[:, :, 1:] != cube[:, :, :-1]))
        + int(np.count_nonzero(cube[:, 1:, :] != cube[:, :-1, :]))
        + int(np.count_nonzero(cube[1:, :, :] != cube[:-1, :, :]))
    )
    per_entry = BLOCK_DIM * BLOCK_DIM if layout == "bsr3" else 1
    before = laplacian_nnz(grid, layout)
    # each crossing neighbor pair contributes two entries
    return DecompositionStats.from_counts(before, before - 2 * crossing * per_entry, labels)
