"""End-to-end runs: load or generate, decompose, factor, schedule, solve, benchmark."""

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from subdomain_trisolve.config import PRESETS, RunConfig, TrisolveConfig
from subdomain_trisolve.errors import ConfigError, DimensionMismatchError, SolverError
from subdomain_trisolve.factor import factorize, ildu0
from subdomain_trisolve.krylov import (
    IdentityPreconditioner,
    Ildu0Preconditioner,
    Ilu0Preconditioner,
    Preconditioner,
    SolveReport,
    bicgstab,
    permute_rhs,
    unpermute_solution,
)
from subdomain_trisolve.matrix_market import read_matrix_market
from subdomain_trisolve.parallel import WorkerPool
from subdomain_trisolve.partition import (
    PartitionLabels,
    Permutation,
    geometric_cuts,
    graph_partition_uniform,
    labels_to_permutation,
)
from subdomain_trisolve.reorder import (
    DecompositionStats,
    count_decomposition,
    drop_inter_partition,
    reorder,
)
from subdomain_trisolve.schedule import schedule_factor
from subdomain_trisolve.sparsemat import (
    BsrMatrix,
    CsrMatrix,
    GridSpec,
    SparseMatrix,
    csr_to_bsr,
    generate_laplacian_3d,
    spmv,
)
from subdomain_trisolve.trisolve import SolveStrategy, triangular_solve

logger = logging.getLogger(__name__)

PRECOND_VARIANTS = ("ilu0", "ildu0", "ildu0_fused")


@contextmanager
def timed(timings: dict[str, float], phase: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[phase] = timings.get(phase, 0.0) + 1000 * (time.perf_counter() - start)


def resolve_source(gen: str | None) -> tuple[GridSpec, str, tuple[int, int, int] | None]:
    """Turns a --gen value into a grid, a matrix name and the preset tile, if any."""
    if gen in PRESETS:
        dims, tile = PRESETS[gen]
        return GridSpec(*dims), gen, tile
    grid = GridSpec.parse(gen)
    return grid, "laplacian_{}x{}x{}".format(*grid.dims), None


def load_matrix(run: RunConfig) -> tuple[SparseMatrix, str, GridSpec | None]:
    if run.grid is not None:
        grid = GridSpec(*run.grid)
        name = run.name or "laplacian_{}x{}x{}".format(*grid.dims)
        return generate_laplacian_3d(grid, run.layout), name, grid
    A = read_matrix_market(run.input_path)
    if run.layout == "bsr3":
        A = csr_to_bsr(A)
    return A, run.name or str(run.input_path), None


@dataclass(frozen=True, eq=False)
class Decomposition:
    """Reordered matrix with and without inter-subdomain couplings.

    `perm` and `layout` act on the rows of `A` as stored (block rows for BSR).
    """

    perm: Permutation
    layout: PartitionLabels
    reordered: SparseMatrix
    decomposed: SparseMatrix
    stats: DecompositionStats
    is_decomposed: bool = True


def _block_pattern(A: SparseMatrix) -> CsrMatrix:
    if isinstance(A, BsrMatrix):
        return CsrMatrix(
            A.n_block_rows, A.n_block_cols, A.row_ptr, A.col_idx, np.ones(A.nnzb)
        )
    return A


def partition_labels(
    A: SparseMatrix,
    grid: GridSpec | None,
    tile: tuple[int, int, int] | None,
    part_size: int | None,
    seed: int | None = None,
    labels_path: str | None = None,
) -> PartitionLabels | None:
    """Labels in the original row order, or None when the run is not decomposed."""
    if labels_path is not None:
        return PartitionLabels.read(labels_path)
    if tile is not None:
        if grid is None:
            raise ConfigError("Geometric partitioning requires a generated Laplacian source.")
        return geometric_cuts(grid, tile)
    if part_size is not None:
        return graph_partition_uniform(_block_pattern(A), part_size, seed)
    return None


def decompose(
    A: SparseMatrix,
    labels: PartitionLabels | None,
    timings: dict[str, float] | None = None,
) -> Decomposition:
    """Reorders `A` so every subdomain is a contiguous row range, then drops couplings."""
    timings = {} if timings is None else timings
    n = A.n_block_rows if isinstance(A, BsrMatrix) else A.nrows
    if labels is None:
        return Decomposition(
            Permutation.identity(n),
            PartitionLabels.single(n),
            A,
            A,
            DecompositionStats.from_counts(A.nnz, A.nnz),
            is_decomposed=False,
        )
    if labels.nrows != n:
        raise DimensionMismatchError(f"{labels.nrows} labels for {n} rows")
    with timed(timings, "reorder"):
        perm = labels_to_permutation(labels)
        reordered = reorder(A, perm)
        layout = labels.permuted(perm)
        decomposed, stats = drop_inter_partition(reordered, layout)
    return Decomposition(perm, layout, reordered, decomposed, stats)


def count_geometric(grid: GridSpec, tile: tuple[int, int, int], layout: str) -> DecompositionStats:
    """Decomposition statistics of a generated Laplacian without assembling it."""
    return count_decomposition(grid, geometric_cuts(grid, tile), layout)


def build_rhs(run: RunConfig, A: SparseMatrix) -> np.ndarray:
    """Right-hand side in the original row order.

    "manufactured" sets b = A * 1 so the exact solution is all ones.
    """
    if run.rhs == "ones":
        return np.ones(A.nrows)
    if run.rhs == "manufactured":
        return spmv(A, np.ones(A.ncols))
    b = np.loadtxt(run.rhs_path, ndmin=1)
    if b.shape != (A.nrows,):
        raise DimensionMismatchError(
            f"Right-hand side file holds {b.size} values for {A.nrows} rows"
        )
    return b


def effective_trisolve(config: TrisolveConfig, nrows: int, decomposed: bool) -> TrisolveConfig:
    """Undecomposed factors larger than the scratch fall back to the reference strategy."""
    if (
        not decomposed
        and config.strategy != SolveStrategy.REFERENCE.value
        and nrows > config.max_subdomain_rows
    ):
        logger.warning(
            f"Undecomposed factor of {nrows} rows exceeds the scratch capacity of "
            f"{config.max_subdomain_rows}; using the reference strategy."
        )
        return replace(config, strategy=SolveStrategy.REFERENCE.value)
    return config


def build_preconditioner(
    kind: str,
    dec: Decomposition,
    run: RunConfig,
    pool: WorkerPool | None,
    timings: dict[str, float],
    trisolve: TrisolveConfig | None = None,
) -> Preconditioner:
    A = dec.decomposed
    if kind == "none":
        return IdentityPreconditioner(A.nrows)
    trisolve = trisolve or effective_trisolve(run.trisolve, A.nrows, dec.is_decomposed)
    with timed(timings, "factor"):
        factors = factorize(A, run.factor, dec.layout, pool)
        if kind != "ilu0":
            factors = ildu0(factors, run.factor)
    with timed(timings, "schedule"):
        if kind == "ilu0":
            return Ilu0Preconditioner(factors, dec.layout, trisolve, pool, run.factor)
        return Ildu0Preconditioner(
            factors, dec.layout, trisolve, pool, fused=kind == "ildu0_fused"
        )


def schedule_summary(M: Preconditioner) -> dict:
    sched = getattr(M, "sched_L", None)
    upper = getattr(M, "sched_U", None)
    if sched is None:
        return {}
    summary = sched.summary()
    if upper is not None:
        summary["upper"] = upper.summary()
    return summary


@dataclass
class RunOutcome:
    name: str
    matrix: SparseMatrix
    decomposition: Decomposition
    strategy: str
    precond: str
    report: SolveReport
    x: np.ndarray | None
    schedule: dict = field(default_factory=dict)
    timings_ms: dict[str, float] = field(default_factory=dict)
    error: SolverError | None = None


def run_solve(run: RunConfig, pool: WorkerPool | None = None) -> RunOutcome:
    """Full pipeline for one RunConfig.

    Solver failures are returned in `RunOutcome.error` together with the
    partial report, so callers can still write it out.
    """
    timings: dict[str, float] = {}
    A, name, grid = load_matrix(run)
    with timed(timings, "partition"):
        labels = partition_labels(A, grid, run.tile, run.part_size, run.seed, run.labels_path)
    dec = decompose(A, labels, timings)
    timings.setdefault("reorder", 0.0)
    M = build_preconditioner(run.precond, dec, run, pool, timings)
    timings.setdefault("factor", 0.0)
    timings.setdefault("schedule", 0.0)

    b = permute_rhs(dec.perm, build_rhs(run, A))
    solve_times = []
    report, x, error = SolveReport(), None, None
    for _ in range(run.repetitions):
        start = time.perf_counter()
        try:
            y, report = bicgstab(dec.reordered, b, M=M, config=run.solver)
            error = None
        except SolverError as e:
            y, report, error = e.x, e.report, e
        solve_times.append(1000 * (time.perf_counter() - start))
        x = unpermute_solution(dec.perm, y) if y is not None else None
    timings["solve"] = float(np.median(solve_times))

    strategy = getattr(M, "strategy", None)
    return RunOutcome(
        name=name,
        matrix=A,
        decomposition=dec,
        strategy=strategy.value if strategy is not None else run.trisolve.strategy,
        precond=run.precond,
        report=report,
        x=x,
        schedule=schedule_summary(M),
        timings_ms=timings,
        error=error,
    )


@dataclass(frozen=True)
class BenchEntry:
    strategy: str
    min_ms: float
    mean_ms: float
    median_ms: float
    max_deviation: float
    precond: str | None = None

    def to_dict(self) -> dict:
        data = {
            "strategy": self.strategy,
            "min_ms": self.min_ms,
            "mean_ms": self.mean_ms,
            "median_ms": self.median_ms,
            "max_deviation": self.max_deviation,
        }
        if self.precond is not None:
            data["precond"] = self.precond
        return data


def _relative_deviation(x: np.ndarray, ref: np.ndarray) -> float:
    scale = float(np.max(np.abs(ref))) if ref.size else 0.0
    diff = float(np.max(np.abs(x - ref))) if ref.size else 0.0
    return diff / scale if scale > 0 else diff


def _time_calls(fn, repetitions: int) -> tuple[list[float], np.ndarray]:
    times, result = [], None
    for _ in range(repetitions):
        start = time.perf_counter()
        result = fn()
        times.append(1000 * (time.perf_counter() - start))
    return times, result


def _entry(strategy, times, result, ref, precond=None) -> BenchEntry:
    return BenchEntry(
        strategy=strategy,
        min_ms=float(np.min(times)),
        mean_ms=float(np.mean(times)),
        median_ms=float(np.median(times)),
        max_deviation=_relative_deviation(result, ref),
        precond=precond,
    )


def prepare_bench(run: RunConfig) -> tuple[str, SparseMatrix, Decomposition]:
    A, name, grid = load_matrix(run)
    labels = partition_labels(A, grid, run.tile, run.part_size, run.seed, run.labels_path)
    return name, A, decompose(A, labels)


def trisolve_bench(
    dec: Decomposition,
    strategies: list[str],
    run: RunConfig,
    pool: WorkerPool | None = None,
) -> list[BenchEntry]:
    """Times one lower solve with the ILU0 factor per strategy against the reference solve."""
    factors = factorize(dec.decomposed, run.factor, dec.layout, pool)
    L = factors.L
    b = np.ones(L.nrows)
    ref = triangular_solve(L, b, strategy=SolveStrategy.REFERENCE)
    entries = []
    for name in strategies:
        strategy = SolveStrategy(name)
        config = replace(run.trisolve, strategy=strategy.value)
        schedule = None
        if strategy in (SolveStrategy.LEVEL_VC, SolveStrategy.LEVEL_EC):
            schedule = schedule_factor(L, dec.layout, upper=False, pool=pool)
        times, x = _time_calls(
            lambda: triangular_solve(
                L, b, strategy=strategy, layout=dec.layout, schedule=schedule,
                config=config, pool=pool,
            ),
            run.repetitions,
        )
        entries.append(_entry(strategy.value, times, x, ref))
        logger.info(f"{strategy.value}: median {entries[-1].median_ms:.3f} ms")
    return entries


def precond_bench(
    dec: Decomposition,
    strategies: list[str],
    run: RunConfig,
    pool: WorkerPool | None = None,
) -> list[BenchEntry]:
    """Times one preconditioner apply per (variant, strategy) pair.

    Deviations are measured against the ILU0 apply with the reference strategy.
    Fused applies are only timed for level strategies.
    """
    b = np.ones(dec.decomposed.nrows)
    timings: dict[str, float] = {}
    reference_config = replace(run.trisolve, strategy=SolveStrategy.REFERENCE.value)
    ref = build_preconditioner("ilu0", dec, run, pool, timings, reference_config).apply(b)
    entries = []
    for variant in PRECOND_VARIANTS:
        for name in strategies:
            strategy = SolveStrategy(name)
            if variant == "ildu0_fused" and strategy not in (
                SolveStrategy.LEVEL_VC, SolveStrategy.LEVEL_EC
            ):
                logger.info(f"Skipping fused apply for strategy '{strategy.value}'.")
                continue
            config = replace(run.trisolve, strategy=strategy.value)
            M = build_preconditioner(variant, dec, run, pool, timings, config)
            times, x = _time_calls(lambda: M.apply(b), run.repetitions)
            entries.append(_entry(strategy.value, times, x, ref, precond=variant))
    return entries
