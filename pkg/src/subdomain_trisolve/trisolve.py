"""Sparse triangular solves on decomposed factors.

Four execution strategies share one view of a triangular factor:

* ``reference``: sequential substitution over all rows.
* ``syncfree``: per subdomain, rows run as soon as their dependencies have
  completed, tracked with outstanding-dependency counters and a ready queue.
  Each finished row pushes its contribution into the partial sums of its
  dependents.
* ``level_vc``: per subdomain, level by level, each row walks its own
  nonzeros in ascending column order.
* ``level_ec``: per subdomain, level by level, all nonzeros of the level are
  gathered at once and scattered into the row accumulators.

Subdomains are independent tasks. Each one works in its own
`SubdomainScratch`, which is bounded by ``max_subdomain_rows``.
"""

import logging
import weakref
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np

from subdomain_trisolve.config import DEFAULT_MAX_SUBDOMAIN_ROWS, TrisolveConfig
from subdomain_trisolve.errors import (
    DimensionMismatchError,
    ScratchCapacityError,
    ZeroDiagonalError,
)
from subdomain_trisolve.factor import IlduFactors
from subdomain_trisolve.parallel import WorkerPool, run_tasks
from subdomain_trisolve.partition import PartitionLabels
from subdomain_trisolve.schedule import (
    LevelSchedule,
    check_confined,
    schedule_factor,
    scalar_layout,
    strict_triangle,
)
from subdomain_trisolve.sparsemat import (
    BLOCK_DIM,
    VALUE_DTYPE,
    CsrMatrix,
    SparseMatrix,
    as_csr,
    gather_row_entries,
)

logger = logging.getLogger(__name__)


class SolveStrategy(str, Enum):
    REFERENCE = "reference"
    SYNCFREE = "syncfree"
    LEVEL_VC = "level_vc"
    LEVEL_EC = "level_ec"


@dataclass(eq=False)
class SubdomainScratch:
    """Dense working buffer of one subdomain, indexed by local row."""

    owner: int
    start: int
    end: int
    capacity: int = DEFAULT_MAX_SUBDOMAIN_ROWS
    sum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.end - self.start > self.capacity:
            raise ScratchCapacityError(
                f"Subdomain {self.owner} has {self.end - self.start} rows, "
                f"more than the scratch capacity of {self.capacity}"
            )
        self.sum = np.zeros(self.end - self.start, dtype=VALUE_DTYPE)

    def load(self, b: np.ndarray) -> None:
        self.sum[:] = b[self.start:self.end]

    def store(self, x: np.ndarray) -> None:
        x[self.start:self.end] = self.sum


@dataclass(frozen=True, eq=False)
class TriangleView:
    """Strictly triangular entries of a factor plus its stored diagonal.

    `diag` is None for factors with an implicit unit diagonal.
    """

    strict: CsrMatrix
    diag: np.ndarray | None
    upper: bool

    @property
    def n(self) -> int:
        return self.strict.nrows

    @cached_property
    def lists(self) -> tuple[list, list, list, list | None]:
        return (
            self.strict.row_ptr.tolist(),
            self.strict.col_idx.tolist(),
            self.strict.values.tolist(),
            None if self.diag is None else self.diag.tolist(),
        )

    @cached_property
    def dependents(self) -> tuple[list, list, list]:
        """Column-major copy: for each row j, the rows that read x[j] and their weights."""
        T = self.strict.to_scipy().tocsc()
        T.sort_indices()
        return T.indptr.tolist(), T.indices.tolist(), T.data.tolist()

    @cached_property
    def validated(self) -> weakref.WeakSet:
        """Schedules already checked against this factor."""
        return weakref.WeakSet()

    @cached_property
    def edge_plans(self) -> weakref.WeakKeyDictionary:
        return weakref.WeakKeyDictionary()


# factor -> {(upper, unit_diagonal): view}; entries go away with the factor
_views: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def triangle_view(M: SparseMatrix, upper: bool, unit_diagonal: bool) -> TriangleView:
    """Splits a triangular factor into its strict part and diagonal, once per factor.

    With `unit_diagonal` any stored diagonal is ignored. Otherwise every row
    must store a nonzero diagonal.
    """
    views = _views.setdefault(M, {})
    key = (upper, unit_diagonal)
    if key not in views:
        views[key] = _build_view(M, upper, unit_diagonal)
    return views[key]


def _build_view(M: SparseMatrix, upper: bool, unit_diagonal: bool) -> TriangleView:
    A = as_csr(M)
    if A.nrows != A.ncols:
        raise DimensionMismatchError(f"Triangular factor must be square, got {A.shape}")
    strict = strict_triangle(A, upper)
    diag = None
    if not unit_diagonal:
        pos = A.diagonal_positions()
        diag = np.where(pos >= 0, A.values[pos], 0.0)
        zero = np.nonzero(diag == 0.0)[0]
        if zero.size:
            raise ZeroDiagonalError(int(zero[0]))
    return TriangleView(strict, diag, upper)


def _check_rhs(view: TriangleView, b) -> np.ndarray:
    b = np.asarray(b, dtype=VALUE_DTYPE)
    if b.shape != (view.n,):
        raise DimensionMismatchError(
            f"Right-hand side of shape {b.shape} does not match {view.n} rows"
        )
    return b


def _substitute_rows(view: TriangleView, buf, off: int, rows) -> None:
    ptr, cols, vals, diag = view.lists
    for i in rows:
        s = buf[i - off]
        for k in range(ptr[i], ptr[i + 1]):
            s -= vals[k] * buf[cols[k] - off]
        if diag is not None:
            s /= diag[i]
        buf[i - off] = s


def _solve_reference(view: TriangleView, b: np.ndarray) -> np.ndarray:
    buf = b.tolist()
    rows = range(view.n - 1, -1, -1) if view.upper else range(view.n)
    _substitute_rows(view, buf, 0, rows)
    return np.asarray(buf, dtype=VALUE_DTYPE)


def lower_solve_reference(L: SparseMatrix, b, unit_diagonal: bool = True) -> np.ndarray:
    """Forward substitution in ascending row order."""
    view = triangle_view(L, False, unit_diagonal)
    return _solve_reference(view, _check_rhs(view, b))


def upper_solve_reference(U: SparseMatrix, b, unit_diagonal: bool = False) -> np.ndarray:
    """Backward substitution in descending row order."""
    view = triangle_view(U, True, unit_diagonal)
    return _solve_reference(view, _check_rhs(view, b))


def _syncfree_task(view, owner, start, end, b, x, capacity) -> None:
    scratch = SubdomainScratch(owner, start, end, capacity)
    partial = scratch.sum
    ptr, _, _, diag = view.lists
    dptr, drows, dvals = view.dependents
    pending = [ptr[i + 1] - ptr[i] for i in range(start, end)]
    order = range(end - 1, start - 1, -1) if view.upper else range(start, end)
    ready = deque(i for i in order if pending[i - start] == 0)
    while ready:
        j = ready.popleft()
        v = b[j] - partial[j - start]
        if diag is not None:
            v /= diag[j]
        x[j] = v
        for k in range(dptr[j], dptr[j + 1]):
            i = drows[k]
            partial[i - start] += dvals[k] * v
            pending[i - start] -= 1
            if pending[i - start] == 0:
                ready.append(i)


def _solve_syncfree(
    view: TriangleView,
    b: np.ndarray,
    layout: PartitionLabels,
    config: TrisolveConfig | None,
    pool: WorkerPool | None,
) -> np.ndarray:
    config = config or TrisolveConfig(workers=1)
    check_confined(view.strict, layout.labels)
    x = np.empty(view.n, dtype=VALUE_DTYPE)
    b_list = b.tolist()
    run_tasks(
        _syncfree_task,
        [
            (view, sd, s, e, b_list, x, config.max_subdomain_rows)
            for sd, (s, e) in enumerate(layout.ranges())
        ],
        pool,
    )
    return x


def lower_solve_syncfree(
    L: SparseMatrix,
    b,
    layout: PartitionLabels | None = None,
    unit_diagonal: bool = True,
    config: TrisolveConfig | None = None,
    pool: WorkerPool | None = None,
) -> np.ndarray:
    view = triangle_view(L, False, unit_diagonal)
    return _solve_syncfree(
        view, _check_rhs(view, b), scalar_layout(L, layout), config, pool
    )


def upper_solve_syncfree(
    U: SparseMatrix,
    b,
    layout: PartitionLabels | None = None,
    unit_diagonal: bool = False,
    config: TrisolveConfig | None = None,
    pool: WorkerPool | None = None,
) -> np.ndarray:
    view = triangle_view(U, True, unit_diagonal)
    return _solve_syncfree(
        view, _check_rhs(view, b), scalar_layout(U, layout), config, pool
    )


def _validate_schedule(view: TriangleView, schedule: LevelSchedule) -> None:
    if schedule in view.validated:
        return
    if schedule.nrows != view.n:
        raise DimensionMismatchError(
            f"Schedule over {schedule.nrows} rows does not match {view.n} rows"
        )
    if schedule.upper != view.upper:
        raise DimensionMismatchError("Schedule direction does not match the factor")
    check_confined(
        view.strict,
        np.repeat(np.arange(schedule.n_subdomains), np.diff(schedule.bounds)),
    )
    view.validated.add(schedule)


def _edge_plan(view: TriangleView, schedule: LevelSchedule) -> list[list[tuple]]:
    """Per subdomain and level: the level's rows, its entry positions and their target rows."""
    plan = view.edge_plans.get(schedule)
    if plan is not None:
        return plan
    plan = []
    for levels in schedule.level_arrays:
        steps = []
        for rows in levels:
            _, pos, owner = gather_row_entries(view.strict.row_ptr, rows)
            steps.append((rows, pos, rows[owner]))
        plan.append(steps)
    view.edge_plans[schedule] = plan
    return plan


def _vertex_levels(view: TriangleView, levels: list[list[int]], buf, off: int) -> None:
    for rows in levels:
        _substitute_rows(view, buf, off, rows)


def _edge_levels(view: TriangleView, steps: list[tuple], buf, off: int) -> None:
    vals, cols, diag = view.strict.values, view.strict.col_idx, view.diag
    for rows, pos, target in steps:
        if pos.size:
            np.subtract.at(buf, target - off, vals[pos] * buf[cols[pos] - off])
        if diag is not None:
            buf[rows - off] /= diag[rows]


def _level_task(kernel, view, work, owner, start, end, b, x, capacity) -> None:
    scratch = SubdomainScratch(owner, start, end, capacity)
    scratch.load(b)
    kernel(view, work, scratch.sum, start)
    scratch.store(x)


def _solve_level(
    view: TriangleView,
    b: np.ndarray,
    schedule: LevelSchedule,
    edge: bool,
    config: TrisolveConfig | None,
    pool: WorkerPool | None,
) -> np.ndarray:
    config = config or TrisolveConfig(workers=1)
    _validate_schedule(view, schedule)
    ranges = list(zip(schedule.bounds[:-1].tolist(), schedule.bounds[1:].tolist()))
    if edge:
        kernel, work = _edge_levels, _edge_plan(view, schedule)
    else:
        kernel, work = _vertex_levels, schedule.level_lists
    if edge and not config.use_scratch:
        x = b.copy()
        run_tasks(kernel, [(view, work[sd], x, 0) for sd in range(len(ranges))], pool)
        return x
    x = np.empty(view.n, dtype=VALUE_DTYPE)
    run_tasks(
        _level_task,
        [
            (kernel, view, work[sd], sd, s, e, b, x, config.max_subdomain_rows)
            for sd, (s, e) in enumerate(ranges)
        ],
        pool,
    )
    return x


def lower_solve_level_vc(
    L: SparseMatrix,
    b,
    schedule: LevelSchedule,
    unit_diagonal: bool = True,
    config: TrisolveConfig | None = None,
    pool: WorkerPool | None = None,
) -> np.ndarray:
    view = triangle_view(L, False, unit_diagonal)
    return _solve_level(view, _check_rhs(view, b), schedule, False, config, pool)


def upper_solve_level_vc(
    U: SparseMatrix,
    b,
    schedule: LevelSchedule,
    unit_diagonal: bool = False,
    config: TrisolveConfig | None = None,
    pool: WorkerPool | None = None,
) -> np.ndarray:
    view = triangle_view(U, True, unit_diagonal)
    return _solve_level(view, _check_rhs(view, b), schedule, False, config, pool)


def lower_solve_level_ec(
    L: SparseMatrix,
    b,
    schedule: LevelSchedule,
    unit_diagonal: bool = True,
    config: TrisolveConfig | None = None,
    pool: WorkerPool | None = None,
) -> np.ndarray:
    view = triangle_view(L, False, unit_diagonal)
    return _solve_level(view, _check_rhs(view, b), schedule, True, config, pool)


def upper_solve_level_ec(
    U: SparseMatrix,
    b,
    schedule: LevelSchedule,
    unit_diagonal: bool = False,
    config: TrisolveConfig | None = None,
    pool: WorkerPool | None = None,
) -> np.ndarray:
    view = triangle_view(U, True, unit_diagonal)
    return _solve_level(view, _check_rhs(view, b), schedule, True, config, pool)


def triangular_solve(
    M: SparseMatrix,
    b,
    *,
    upper: bool = False,
    unit_diagonal: bool | None = None,
    strategy: str | SolveStrategy | None = None,
    layout: PartitionLabels | None = None,
    schedule: LevelSchedule | None = None,
    config: TrisolveConfig | None = None,
    pool: WorkerPool | None = None,
) -> np.ndarray:
    """Solves M x = b with the configured strategy.

    Lower factors default to an implicit unit diagonal, upper factors to a
    stored one. Level strategies build a schedule from `layout` when none is
    passed.
    """
    config = config or TrisolveConfig(workers=1)
    strategy = SolveStrategy(strategy or config.strategy)
    if unit_diagonal is None:
        unit_diagonal = not upper
    view = triangle_view(M, upper, unit_diagonal)
    b = _check_rhs(view, b)
    if strategy is SolveStrategy.REFERENCE:
        return _solve_reference(view, b)
    if strategy is SolveStrategy.SYNCFREE:
        return _solve_syncfree(view, b, scalar_layout(M, layout), config, pool)
    if schedule is None:
        schedule = schedule_factor(M, layout, upper, pool)
    return _solve_level(view, b, schedule, strategy is SolveStrategy.LEVEL_EC, config, pool)


def scale_inverse_diagonal(inv_D: np.ndarray, v: np.ndarray, start: int = 0) -> np.ndarray:
    """Applies the inverse diagonal to rows start..start+len(v) of a vector.

    Scalar: inv_D[i] * v[i]. Block: each 3-row segment is multiplied by its
    3x3 inverse block, written out entry by entry.
    """
    if inv_D.ndim == 1:
        return inv_D[start:start + v.size] * v
    first = start // BLOCK_DIM
    a = inv_D[first:first + v.size // BLOCK_DIM]
    w = v.reshape(-1, BLOCK_DIM)
    out = a[:, :, 0] * w[:, 0:1] + a[:, :, 1] * w[:, 1:2] + a[:, :, 2] * w[:, 2:3]
    return out.ravel()


def _check_pair(sched_L: LevelSchedule, sched_U: LevelSchedule) -> None:
    if not np.array_equal(sched_L.bounds, sched_U.bounds):
        raise DimensionMismatchError("Lower and upper schedules use different subdomains")


def _fused_task(kernel, views, works, inv_D, owner, start, end, b, x, capacity) -> None:
    lower, upper = views
    scratch = SubdomainScratch(owner, start, end, capacity)
    scratch.load(b)
    kernel(lower, works[0], scratch.sum, start)
    scratch.sum[:] = scale_inverse_diagonal(inv_D, scratch.sum, start)
    kernel(upper, works[1], scratch.sum, start)
    scratch.store(x)


def apply_ildu0_fused(
    f: IlduFactors,
    b,
    sched_L: LevelSchedule,
    sched_U: LevelSchedule,
    strategy: str | SolveStrategy = SolveStrategy.LEVEL_VC,
    config: TrisolveConfig | None = None,
    pool: WorkerPool | None = None,
) -> np.ndarray:
    """x = U_unit^-1 D^-1 L_unit^-1 b in one task per subdomain.

    Each subdomain loads b into its scratch once, runs the lower levels, the
    diagonal scaling and the upper levels there, and writes x back once.
    """
    config = config or TrisolveConfig(workers=1)
    strategy = SolveStrategy(strategy)
    if strategy not in (SolveStrategy.LEVEL_VC, SolveStrategy.LEVEL_EC):
        raise ValueError(f"The fused apply needs a level strategy, got '{strategy.value}'")
    lower = triangle_view(f.L_unit, False, True)
    upper = triangle_view(f.U_unit, True, True)
    b = _check_rhs(lower, b)
    _validate_schedule(lower, sched_L)
    _validate_schedule(upper, sched_U)
    _check_pair(sched_L, sched_U)
    if strategy is SolveStrategy.LEVEL_EC:
        kernel = _edge_levels
        works = (_edge_plan(lower, sched_L), _edge_plan(upper, sched_U))
    else:
        kernel = _vertex_levels
        works = (sched_L.level_lists, sched_U.level_lists)
    x = np.empty(lower.n, dtype=VALUE_DTYPE)
    bounds = sched_L.bounds.tolist()
    run_tasks(
        _fused_task,
        [
            (kernel, (lower, upper), (works[0][sd], works[1][sd]), f.inv_D, sd,
             bounds[sd], bounds[sd + 1], b, x, config.max_subdomain_rows)
            for sd in range(sched_L.n_subdomains)
        ],
        pool,
    )
    return x


def apply_ildu0_unfused(
    f: IlduFactors,
    b,
    sched_L: LevelSchedule | None = None,
    sched_U: LevelSchedule | None = None,
    strategy: str | SolveStrategy | None = None,
    layout: PartitionLabels | None = None,
    config: TrisolveConfig | None = None,
    pool: WorkerPool | None = None,
) -> np.ndarray:
    """Lower solve, diagonal scaling and upper solve as three separate passes."""
    y = triangular_solve(
        f.L_unit, b, upper=False, unit_diagonal=True, strategy=strategy,
        layout=layout, schedule=sched_L, config=config, pool=pool,
    )
    y = scale_inverse_diagonal(f.inv_D, y)
    return triangular_solve(
        f.U_unit, y, upper=True, unit_diagonal=True, strategy=strategy,
        layout=layout, schedule=sched_U, config=config, pool=pool,
    )
