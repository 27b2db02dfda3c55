"""Level assignment for triangular factors and per-subdomain level schedules.

A row's level is the length of its longest dependency chain inside its
subdomain: level 0 rows have no off-diagonal entries in the triangle, and
every other row sits one level above its deepest dependency. Rows that share
a level and a subdomain can be solved concurrently.
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from subdomain_trisolve.errors import (
    DecompositionViolationError,
    DimensionMismatchError,
    MatrixFormatError,
)
from subdomain_trisolve.parallel import WorkerPool, run_tasks
from subdomain_trisolve.partition import PartitionLabels
from subdomain_trisolve.sparsemat import (
    BLOCK_DIM,
    INDEX_DTYPE,
    BsrMatrix,
    CsrMatrix,
    SparseMatrix,
    as_csr,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LevelMap:
    hmap: np.ndarray
    upper: bool = False

    @property
    def nrows(self) -> int:
        return int(self.hmap.size)

    @property
    def unassigned(self) -> int:
        """Sentinel level of rows not yet reached during construction."""
        return self.nrows + 1


def scalar_layout(M: SparseMatrix, layout: PartitionLabels | None) -> PartitionLabels:
    """Row labels for the scalar rows of `M`, expanding block-row labels if needed."""
    if layout is None:
        return PartitionLabels.single(M.nrows)
    if layout.nrows == M.nrows:
        return layout
    if isinstance(M, BsrMatrix) and layout.nrows == M.n_block_rows:
        return layout.expand(BLOCK_DIM)
    raise DimensionMismatchError(f"{layout.nrows} labels for a matrix with {M.nrows} rows")


def strict_triangle(M: CsrMatrix, upper: bool) -> CsrMatrix:
    """Off-diagonal part of a triangular factor.

    Raises:
        MatrixFormatError: If `M` has entries on the wrong side of the diagonal.
    """
    rows = M.row_of_entry
    wrong = M.col_idx < rows if upper else M.col_idx > rows
    if np.any(wrong):
        row = int(rows[np.nonzero(wrong)[0][0]])
        side = "upper" if upper else "lower"
        raise MatrixFormatError(f"Row {row} has entries outside the {side} triangle")
    return M.select(M.col_idx != rows)


def check_confined(M: CsrMatrix, labels: np.ndarray) -> None:
    """Raises when any entry couples rows with different subdomain labels."""
    crossing = np.nonzero(labels[M.row_of_entry] != labels[M.col_idx])[0]
    if crossing.size:
        first = crossing[0]
        raise DecompositionViolationError(
            f"Row {int(M.row_of_entry[first])} depends on row {int(M.col_idx[first])} "
            "of another subdomain"
        )


def _sweep(start, end, ptr, cols, hmap, upper) -> None:
    rows = range(end - 1, start - 1, -1) if upper else range(start, end)
    for i in rows:
        h = 0
        for k in range(ptr[i], ptr[i + 1]):
            d = hmap[cols[k]] + 1
            if d > h:
                h = d
        hmap[i] = h


def _assign(
    M: SparseMatrix, layout: PartitionLabels | None, upper: bool, pool: WorkerPool | None
) -> LevelMap:
    layout = scalar_layout(M, layout)
    strict = strict_triangle(as_csr(M), upper)
    check_confined(strict, layout.labels)
    hmap = [0] * strict.nrows
    ptr, cols = strict.row_ptr.tolist(), strict.col_idx.tolist()
    run_tasks(_sweep, [(s, e, ptr, cols, hmap, upper) for s, e in layout.ranges()], pool)
    return LevelMap(np.asarray(hmap, dtype=INDEX_DTYPE), upper)


def level_assign(
    L: SparseMatrix, layout: PartitionLabels | None = None, pool: WorkerPool | None = None
) -> LevelMap:
    """Levels of a lower-triangular factor, one ascending sweep per subdomain."""
    return _assign(L, layout, False, pool)


def level_assign_upper(
    U: SparseMatrix, layout: PartitionLabels | None = None, pool: WorkerPool | None = None
) -> LevelMap:
    """Levels of an upper-triangular factor, one descending sweep per subdomain."""
    return _assign(U, layout, True, pool)


def level_assign_fixpoint(
    M: SparseMatrix, layout: PartitionLabels | None = None, upper: bool = False
) -> LevelMap:
    """Level assignment by repeated promotion.

    All rows start at the sentinel `nrows + 1` and rows without dependencies
    are placed on level 0. Each round promotes every unplaced row whose
    dependencies all sit at or below the current level to the next level,
    until no row is left unplaced.
    """
    layout = scalar_layout(M, layout)
    strict = strict_triangle(as_csr(M), upper)
    check_confined(strict, layout.labels)
    n = strict.nrows
    result = LevelMap(np.full(n, n + 1, dtype=INDEX_DTYPE), upper)
    hmap = result.hmap
    rows = strict.row_of_entry
    has_deps = np.diff(strict.row_ptr) > 0
    hmap[~has_deps] = 0
    level = 0
    while np.any(hmap == result.unassigned):
        deepest = np.full(n, -1, dtype=INDEX_DTYPE)
        np.maximum.at(deepest, rows, hmap[strict.col_idx])
        ready = (hmap == result.unassigned) & (deepest <= level)
        if not np.any(ready):
            raise MatrixFormatError("Dependency graph has a cycle")
        hmap[ready] = level + 1
        level += 1
    return result


@dataclass(frozen=True, eq=False)
class LevelSchedule:
    """Rows grouped by (subdomain, level), both ascending, rows ascending within a level.

    `rows[level_ptr[g]:level_ptr[g + 1]]` is level group g, and subdomain s
    owns groups `subdomain_levels[s]` up to `subdomain_levels[s + 1]`.
    """

    rows: np.ndarray
    level_ptr: np.ndarray
    subdomain_levels: np.ndarray
    bounds: np.ndarray
    upper: bool = False

    @property
    def nrows(self) -> int:
        return int(self.rows.size)

    @property
    def n_subdomains(self) -> int:
        return int(self.bounds.size - 1)

    def level_counts(self) -> np.ndarray:
        return np.diff(self.subdomain_levels)

    @cached_property
    def level_lists(self) -> list[list[list[int]]]:
        """Per subdomain, the row lists of its levels in execution order."""
        rows = self.rows.tolist()
        ptr = self.level_ptr.tolist()
        sub = self.subdomain_levels.tolist()
        return [
            [rows[ptr[g]:ptr[g + 1]] for g in range(sub[s], sub[s + 1])]
            for s in range(self.n_subdomains)
        ]

    @cached_property
    def level_arrays(self) -> list[list[np.ndarray]]:
        sub = self.subdomain_levels.tolist()
        ptr = self.level_ptr
        return [
            [self.rows[ptr[g]:ptr[g + 1]] for g in range(sub[s], sub[s + 1])]
            for s in range(self.n_subdomains)
        ]

    def summary(self) -> dict:
        counts = self.level_counts()
        total_levels = int(counts.sum())
        return {
            "n_subdomains": self.n_subdomains,
            "max_levels": int(counts.max()) if counts.size else 0,
            "mean_level_width": self.nrows / total_levels if total_levels else 0.0,
        }


def build_level_schedule(levels: LevelMap, layout: PartitionLabels | None = None) -> LevelSchedule:
    """Buckets rows by subdomain and level."""
    if layout is None:
        layout = PartitionLabels.single(levels.nrows)
    if layout.nrows != levels.nrows:
        raise DimensionMismatchError(f"{layout.nrows} labels for {levels.nrows} levels")
    hmap = levels.hmap
    if hmap.size and hmap.max() > levels.nrows:
        raise MatrixFormatError("Level map still contains unassigned rows")
    bounds = layout.bounds
    labels = layout.labels
    rows = np.lexsort((np.arange(hmap.size), hmap, labels)).astype(INDEX_DTYPE)

    # one group per distinct (subdomain, level) pair, in sorted order
    key_sd, key_lv = labels[rows], hmap[rows]
    new_group = np.ones(rows.size, dtype=bool)
    new_group[1:] = (key_sd[1:] != key_sd[:-1]) | (key_lv[1:] != key_lv[:-1])
    starts = np.nonzero(new_group)[0]
    level_ptr = np.concatenate((starts, [rows.size])).astype(INDEX_DTYPE)
    groups_per_sd = np.bincount(key_sd[starts], minlength=layout.n_subdomains)
    subdomain_levels = np.concatenate(([0], np.cumsum(groups_per_sd))).astype(INDEX_DTYPE)

    schedule = LevelSchedule(rows, level_ptr, subdomain_levels, bounds, levels.upper)
    summary = schedule.summary()
    logger.debug(
        f"Level schedule over {summary['n_subdomains']} subdomain(s): "
        f"max {summary['max_levels']} levels, mean width {summary['mean_level_width']:.1f}."
    )
    return schedule


def schedule_factor(
    M: SparseMatrix,
    layout: PartitionLabels | None = None,
    upper: bool = False,
    pool: WorkerPool | None = None,
) -> LevelSchedule:
    """Level assignment followed by bucketing, on the scalar rows of `M`."""
    scalar = scalar_layout(M, layout)
    levels = level_assign_upper(M, scalar, pool) if upper else level_assign(M, scalar, pool)
    return build_level_schedule(levels, scalar)
