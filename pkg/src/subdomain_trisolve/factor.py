"""ILU0 and ILDU0 factorizations for scalar CSR and 3x3-block BSR matrices.

The lower factor carries an implicit unit diagonal and stores only its
strictly lower entries. ILDU0 moves the diagonal of U into an explicit
inverse-diagonal array and leaves U with an implicit unit diagonal too.
"""

import logging
from dataclasses import dataclass

import numpy as np

from subdomain_trisolve.config import FactorConfig
from subdomain_trisolve.errors import (
    DecompositionViolationError,
    DimensionMismatchError,
    MissingDiagonalError,
    SingularPivotBlockError,
    ZeroPivotError,
)
from subdomain_trisolve.parallel import WorkerPool, run_tasks
from subdomain_trisolve.partition import PartitionLabels
from subdomain_trisolve.sparsemat import (
    BLOCK_DIM,
    BsrMatrix,
    CsrMatrix,
    SparseMatrix,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class IluFactors:
    L: SparseMatrix
    U: SparseMatrix

    @property
    def is_block(self) -> bool:
        return isinstance(self.U, BsrMatrix)


@dataclass(frozen=True, eq=False)
class IlduFactors:
    L_unit: SparseMatrix
    U_unit: SparseMatrix
    inv_D: np.ndarray

    @property
    def is_block(self) -> bool:
        return isinstance(self.U_unit, BsrMatrix)

    @property
    def nrows(self) -> int:
        return self.U_unit.nrows


def inverse_3x3(blocks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverses and determinants of a stack of 3x3 blocks via the adjugate."""
    blocks = np.asarray(blocks, dtype=np.float64)
    r0, r1, r2 = blocks[..., 0, :], blocks[..., 1, :], blocks[..., 2, :]
    c0 = np.cross(r1, r2)
    det = np.einsum("...i,...i->...", r0, c0)
    adj = np.stack([c0, np.cross(r2, r0), np.cross(r0, r1)], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = adj / det[..., None, None]
    return inv, det


def _subdomain_ranges(
    A: SparseMatrix, layout: PartitionLabels | None, rows_of_entry: np.ndarray, n: int
) -> list[tuple[int, int]]:
    if layout is None:
        return [(0, n)]
    if layout.nrows != n:
        raise DimensionMismatchError(f"{layout.nrows} labels for {n} rows")
    labels = layout.labels
    crossing = np.nonzero(labels[rows_of_entry] != labels[A.col_idx])[0]
    if crossing.size:
        row = int(rows_of_entry[crossing[0]])
        raise DecompositionViolationError(
            f"Row {row} couples to column {int(A.col_idx[crossing[0]])} in another subdomain"
        )
    return layout.ranges()


def _check_square(A: SparseMatrix) -> None:
    if A.nrows != A.ncols:
        raise DimensionMismatchError(f"ILU0 needs a square matrix, got {A.shape}")


def _diagonal_or_raise(A: SparseMatrix) -> np.ndarray:
    diag = A.diagonal_positions()
    missing = np.nonzero(diag < 0)[0]
    if missing.size:
        raise MissingDiagonalError(int(missing[0]))
    return diag


def _eliminate_rows(start, end, ptr, cols, vals, diag, pivot_floor) -> None:
    for i in range(start, end):
        lo, hi = ptr[i], ptr[i + 1]
        where = {cols[p]: p for p in range(lo, hi)}
        for p in range(lo, hi):
            j = cols[p]
            if j >= i:
                break
            lij = vals[p] / vals[diag[j]]
            vals[p] = lij
            for q in range(diag[j] + 1, ptr[j + 1]):
                t = where.get(cols[q])
                if t is not None:
                    vals[t] -= lij * vals[q]
        pivot = vals[diag[i]]
        if pivot == 0.0 or abs(pivot) < pivot_floor:
            raise ZeroPivotError(i)


def _split(A: SparseMatrix, values, rows: np.ndarray) -> IluFactors:
    if isinstance(A, BsrMatrix):
        M = BsrMatrix(A.n_block_rows, A.n_block_cols, A.row_ptr, A.col_idx, values)
    else:
        M = CsrMatrix(A.nrows, A.ncols, A.row_ptr, A.col_idx, values)
    lower = A.col_idx < rows
    return IluFactors(L=M.select(lower), U=M.select(~lower))


def ilu0(
    A: CsrMatrix,
    config: FactorConfig | None = None,
    layout: PartitionLabels | None = None,
    pool: WorkerPool | None = None,
) -> IluFactors:
    """Incomplete LU with zero fill-in (IKJ elimination on the pattern of A).

    When `layout` is given the matrix must already be decomposed; each
    subdomain's rows are then eliminated as an independent task, with the
    same arithmetic as a whole-matrix sweep.
    """
    config = config or FactorConfig()
    _check_square(A)
    diag = _diagonal_or_raise(A)
    ranges = _subdomain_ranges(A, layout, A.row_of_entry, A.nrows)
    ptr, cols, diag_l = A.row_ptr.tolist(), A.col_idx.tolist(), diag.tolist()
    vals = A.values.tolist()
    run_tasks(
        _eliminate_rows,
        [(s, e, ptr, cols, vals, diag_l, config.pivot_floor) for s, e in ranges],
        pool,
    )
    logger.debug(f"ILU0 of {A.nrows} rows over {len(ranges)} subdomain(s).")
    return _split(A, np.asarray(vals), A.row_of_entry)


def _eliminate_block_rows(start, end, ptr, cols, blocks, diag, inv_pivots, pivot_floor):
    for i in range(start, end):
        lo, hi = ptr[i], ptr[i + 1]
        where = {cols[p]: p for p in range(lo, hi)}
        for p in range(lo, hi):
            j = cols[p]
            if j >= i:
                break
            lij = blocks[p] @ inv_pivots[j]
            blocks[p] = lij
            for q in range(diag[j] + 1, ptr[j + 1]):
                t = where.get(cols[q])
                if t is not None:
                    blocks[t] = blocks[t] - lij @ blocks[q]
        inv, det = inverse_3x3(blocks[diag[i]])
        if det == 0.0 or abs(det) < pivot_floor:
            raise SingularPivotBlockError(i)
        inv_pivots[i] = inv


def ilu0_bsr(
    A: BsrMatrix,
    config: FactorConfig | None = None,
    layout: PartitionLabels | None = None,
    pool: WorkerPool | None = None,
) -> IluFactors:
    """Block ILU0: L_ij = A_ij (U_jj)^-1 and A_ik -= L_ij U_jk on the block pattern.

    `layout` labels block rows.
    """
    config = config or FactorConfig()
    _check_square(A)
    diag = _diagonal_or_raise(A)
    ranges = _subdomain_ranges(A, layout, A.row_of_block, A.n_block_rows)
    blocks = [b.copy() for b in A.blocks]
    inv_pivots: list = [None] * A.n_block_rows
    run_tasks(
        _eliminate_block_rows,
        [
            (s, e, A.row_ptr.tolist(), A.col_idx.tolist(), blocks, diag.tolist(),
             inv_pivots, config.pivot_floor)
            for s, e in ranges
        ],
        pool,
    )
    values = np.stack(blocks) if blocks else np.empty((0, BLOCK_DIM, BLOCK_DIM))
    logger.debug(f"Block ILU0 of {A.n_block_rows} block rows over {len(ranges)} subdomain(s).")
    return _split(A, values, A.row_of_block)


def factorize(
    A: SparseMatrix,
    config: FactorConfig | None = None,
    layout: PartitionLabels | None = None,
    pool: WorkerPool | None = None,
) -> IluFactors:
    if isinstance(A, BsrMatrix):
        return ilu0_bsr(A, config, layout, pool)
    return ilu0(A, config, layout, pool)


def ildu0(f: IluFactors, config: FactorConfig | None = None) -> IlduFactors:
    """Splits U into D * U_unit and stores D^-1.

    Scalar: inv_D[i] = 1/U[i,i] and U_unit[i,j] = inv_D[i]*U[i,j] for j > i.
    Block: inv_D[i] = (U_ii)^-1 and U_unit blocks are inv_D[i] @ U_ij.
    """
    config = config or FactorConfig()
    U = f.U
    diag = _diagonal_or_raise(U)
    if isinstance(U, BsrMatrix):
        inv_D, det = inverse_3x3(U.blocks[diag])
        bad = np.nonzero((det == 0.0) | (np.abs(det) < config.pivot_floor))[0]
        if bad.size:
            raise SingularPivotBlockError(int(bad[0]))
        strict = U.select(U.col_idx > U.row_of_block)
        scaled = np.einsum("kab,kbc->kac", inv_D[strict.row_of_block], strict.blocks)
        U_unit = BsrMatrix(
            strict.n_block_rows, strict.n_block_cols, strict.row_ptr, strict.col_idx, scaled
        )
    else:
        pivots = U.values[diag]
        bad = np.nonzero((pivots == 0.0) | (np.abs(pivots) < config.pivot_floor))[0]
        if bad.size:
            raise ZeroPivotError(int(bad[0]))
        inv_D = 1.0 / pivots
        strict = U.select(U.col_idx > U.row_of_entry)
        U_unit = CsrMatrix(
            strict.nrows,
            strict.ncols,
            strict.row_ptr,
            strict.col_idx,
            strict.values * inv_D[strict.row_of_entry],
        )
    return IlduFactors(L_unit=f.L, U_unit=U_unit, inv_D=inv_D)
