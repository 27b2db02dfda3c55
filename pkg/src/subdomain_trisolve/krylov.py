"""Preconditioned BiCGSTAB and the preconditioners it is paired with.

The solver works in the split form: with M = K1 K2 it iterates on
K1^-1 A K2^-1 y = K1^-1 b starting from y0 = K2 x0, and recovers
x = K2^-1 y at the end. Convergence is measured on that preconditioned
residual, relative to its initial norm unless `absolute` is set.
"""

import logging
import time
from abc import ABC, abstractmethod
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from subdomain_trisolve.config import BicgstabConfig, FactorConfig, TrisolveConfig
from subdomain_trisolve.errors import (
    BreakdownError,
    DimensionMismatchError,
    MaxIterationsError,
)
from subdomain_trisolve.factor import IlduFactors, IluFactors, factorize, ildu0
from subdomain_trisolve.parallel import WorkerPool
from subdomain_trisolve.partition import PartitionLabels, Permutation
from subdomain_trisolve.schedule import LevelSchedule, schedule_factor
from subdomain_trisolve.sparsemat import BLOCK_DIM, VALUE_DTYPE, SparseMatrix, spmv
from subdomain_trisolve.trisolve import (
    SolveStrategy,
    apply_ildu0_fused,
    apply_ildu0_unfused,
    scale_inverse_diagonal,
    triangular_solve,
)

logger = logging.getLogger(__name__)

LEVEL_STRATEGIES = (SolveStrategy.LEVEL_VC, SolveStrategy.LEVEL_EC)


def dot(a: np.ndarray, b: np.ndarray) -> float:
    # pairwise summation, fixed order
    return float(np.sum(a * b))


def norm(a: np.ndarray) -> float:
    return float(np.sqrt(dot(a, a)))


class Preconditioner(ABC):
    """Split preconditioner M = K1 K2."""

    def __init__(self, n: int):
        self.n = n

    @abstractmethod
    def apply_left(self, v: np.ndarray) -> np.ndarray:
        """K1^-1 v"""

    @abstractmethod
    def apply_right_inverse(self, v: np.ndarray) -> np.ndarray:
        """K2^-1 v"""

    @abstractmethod
    def apply_right(self, v: np.ndarray) -> np.ndarray:
        """K2 v"""

    def apply(self, v: np.ndarray) -> np.ndarray:
        """M^-1 v"""
        return self.apply_right_inverse(self.apply_left(v))


class IdentityPreconditioner(Preconditioner):
    def apply_left(self, v):
        return v

    def apply_right_inverse(self, v):
        return v

    def apply_right(self, v):
        return v

    def apply(self, v):
        return v


class _TriangularPreconditioner(Preconditioner):
    """Shared solve plumbing: strategy, layout and cached level schedules."""

    def __init__(
        self,
        n: int,
        layout: PartitionLabels | None,
        config: TrisolveConfig | None,
        pool: WorkerPool | None,
    ):
        super().__init__(n)
        self.layout = layout
        self.config = config or TrisolveConfig(workers=1)
        self.strategy = SolveStrategy(self.config.strategy)
        self.pool = pool

    def _schedule(self, M: SparseMatrix, upper: bool) -> LevelSchedule | None:
        if self.strategy not in LEVEL_STRATEGIES:
            return None
        return schedule_factor(M, self.layout, upper, self.pool)

    def _solve(self, M, v, upper, schedule, unit_diagonal=True) -> np.ndarray:
        return triangular_solve(
            M,
            v,
            upper=upper,
            unit_diagonal=unit_diagonal,
            strategy=self.strategy,
            layout=self.layout,
            schedule=schedule,
            config=self.config,
            pool=self.pool,
        )


class Ilu0Preconditioner(_TriangularPreconditioner):
    """K1 = L (unit lower), K2 = U.

    Block factors solve U as D (U_unit), i.e. a block-diagonal scaling
    followed by a unit upper solve.
    """

    def __init__(self, factors: IluFactors, layout=None, config=None, pool=None, factor_config=None):
        super().__init__(factors.U.nrows, layout, config, pool)
        self.factors = factors
        self._ildu = ildu0(factors, factor_config) if factors.is_block else None
        upper = self._ildu.U_unit if self._ildu else factors.U
        self.sched_L = self._schedule(factors.L, upper=False)
        self.sched_U = self._schedule(upper, upper=True)

    def apply_left(self, v):
        return self._solve(self.factors.L, v, False, self.sched_L)

    def apply_right_inverse(self, v):
        if self._ildu is None:
            return self._solve(self.factors.U, v, True, self.sched_U, unit_diagonal=False)
        scaled = scale_inverse_diagonal(self._ildu.inv_D, np.asarray(v, dtype=VALUE_DTYPE))
        return self._solve(self._ildu.U_unit, scaled, True, self.sched_U)

    def apply_right(self, v):
        return spmv(self.factors.U, v)


class Ildu0Preconditioner(_TriangularPreconditioner):
    """K1 = L D, K2 = U_unit.

    `apply` is the full M^-1. With `fused` it runs as one task per
    subdomain, otherwise as three passes. A fused preconditioner cannot be
    split, so it acts as K1 = M, K2 = I and every half-apply on the left
    is the fused kernel.
    """

    def __init__(self, factors: IlduFactors, layout=None, config=None, pool=None, fused=False,
                 schedules: tuple[LevelSchedule, LevelSchedule] | None = None):
        super().__init__(factors.nrows, layout, config, pool)
        self.factors = factors
        if fused and self.strategy not in LEVEL_STRATEGIES:
            logger.warning(
                f"Fused ILDU0 apply needs a level strategy; '{self.strategy.value}' "
                "falls back to separate passes."
            )
            fused = False
        self.fused = fused
        if schedules is not None:
            self.sched_L, self.sched_U = schedules
        else:
            self.sched_L = self._schedule(factors.L_unit, upper=False)
            self.sched_U = self._schedule(factors.U_unit, upper=True)

    def apply_left(self, v):
        if self.fused:
            return self.apply(v)
        y = self._solve(self.factors.L_unit, v, False, self.sched_L)
        return scale_inverse_diagonal(self.factors.inv_D, y)

    def apply_right_inverse(self, v):
        if self.fused:
            return np.array(v, dtype=VALUE_DTYPE)
        return self._solve(self.factors.U_unit, v, True, self.sched_U)

    def apply_right(self, v):
        v = np.asarray(v, dtype=VALUE_DTYPE)
        if self.fused:
            return v.copy()
        return v + spmv(self.factors.U_unit, v)

    def apply(self, v):
        if self.fused:
            return apply_ildu0_fused(
                self.factors, v, self.sched_L, self.sched_U,
                strategy=self.strategy, config=self.config, pool=self.pool,
            )
        return apply_ildu0_unfused(
            self.factors, v, self.sched_L, self.sched_U, strategy=self.strategy,
            layout=self.layout, config=self.config, pool=self.pool,
        )


def make_ilu0_preconditioner(
    A: SparseMatrix,
    layout: PartitionLabels | None = None,
    config: TrisolveConfig | None = None,
    factor_config: FactorConfig | None = None,
    pool: WorkerPool | None = None,
) -> Ilu0Preconditioner:
    """ILU0 of the (decomposed) matrix wrapped as a two-solve preconditioner."""
    factors = factorize(A, factor_config, layout, pool)
    return Ilu0Preconditioner(factors, layout, config, pool, factor_config)


def make_ildu0_preconditioner(
    A: SparseMatrix,
    layout: PartitionLabels | None = None,
    config: TrisolveConfig | None = None,
    factor_config: FactorConfig | None = None,
    pool: WorkerPool | None = None,
    fused: bool = False,
) -> Ildu0Preconditioner:
    factors = ildu0(factorize(A, factor_config, layout, pool), factor_config)
    return Ildu0Preconditioner(factors, layout, config, pool, fused=fused)


def make_ildu0_fused_preconditioner(
    f: IlduFactors,
    schedules: tuple[LevelSchedule, LevelSchedule] | None = None,
    layout: PartitionLabels | None = None,
    config: TrisolveConfig | None = None,
    pool: WorkerPool | None = None,
) -> Ildu0Preconditioner:
    return Ildu0Preconditioner(f, layout, config, pool, fused=True, schedules=schedules)


@dataclass
class SolveReport:
    iterations: int = 0
    converged: bool = False
    residual_history: list[float] = field(default_factory=list)
    breakdown_reason: str | None = None
    timings: dict[str, float] = field(
        default_factory=lambda: {"spmv": 0.0, "precond": 0.0, "blas1": 0.0}
    )
    true_residual: float | None = None
    rho: list[float] = field(default_factory=list)
    alpha: list[float] = field(default_factory=list)
    omega: list[float] = field(default_factory=list)

    @property
    def final_residual(self) -> float | None:
        return self.residual_history[-1] if self.residual_history else None

    def to_dict(self) -> dict:
        data = asdict(self)
        data["final_residual"] = self.final_residual
        return data


@contextmanager
def _timed(report: SolveReport, phase: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        report.timings[phase] += time.perf_counter() - start


def _check_vector(A: SparseMatrix, v, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=VALUE_DTYPE)
    if v.shape != (A.nrows,):
        raise DimensionMismatchError(
            f"{what} of shape {v.shape} does not match a {A.nrows}x{A.ncols} matrix"
        )
    return v


class _SplitOperator:
    """K1^-1 A K2^-1 with per-phase timing."""

    def __init__(self, A, left, right_inverse, report):
        self.A = A
        self.left = left
        self.right_inverse = right_inverse
        self.report = report

    def __call__(self, v: np.ndarray) -> np.ndarray:
        with _timed(self.report, "precond"):
            w = self.right_inverse(v)
        with _timed(self.report, "spmv"):
            w = spmv(self.A, w)
        with _timed(self.report, "precond"):
            return self.left(w)


def bicgstab(
    A: SparseMatrix,
    b,
    x0=None,
    M: Preconditioner | None = None,
    config: BicgstabConfig | None = None,
) -> tuple[np.ndarray, SolveReport]:
    """Preconditioned BiCGSTAB.

    Returns:
        The solution and a `SolveReport`.

    Raises:
        BreakdownError: If rho, r_hat.v, t.t or omega falls below `breakdown_eps`.
        MaxIterationsError: If `max_iter` iterations do not reach the tolerance.
    """
    config = config or BicgstabConfig()
    if A.nrows != A.ncols:
        raise DimensionMismatchError(f"BiCGSTAB needs a square matrix, got {A.shape}")
    b = _check_vector(A, b, "Right-hand side")
    M = M or IdentityPreconditioner(A.nrows)
    if M.n != A.nrows:
        raise DimensionMismatchError(f"Preconditioner of size {M.n} does not match {A.nrows} rows")
    report = SolveReport()
    eps = config.breakdown_eps

    if config.side == "right":
        # K1 = I, K2 = M; iterate on the correction to x0 so M itself is never multiplied
        x_start = np.zeros(A.nrows) if x0 is None else _check_vector(A, x0, "Initial guess")
        op = _SplitOperator(A, lambda v: v, M.apply, report)
        right_inverse = M.apply
        y = np.zeros(A.nrows)
        with _timed(report, "spmv"):
            r = b - spmv(A, x_start) if x0 is not None else b.copy()
    else:
        x_start = None
        op = _SplitOperator(A, M.apply_left, M.apply_right_inverse, report)
        right_inverse = M.apply_right_inverse
        with _timed(report, "precond"):
            r = M.apply_left(b)
        if x0 is None:
            y = np.zeros(A.nrows)
        else:
            with _timed(report, "precond"):
                y = M.apply_right(_check_vector(A, x0, "Initial guess"))
            r = r - op(y)

    def finish() -> np.ndarray:
        with _timed(report, "precond"):
            x = right_inverse(y)
        if x_start is not None:
            x = x_start + x
        with _timed(report, "spmv"):
            true_r = norm(b - spmv(A, x))
        b_norm = norm(b)
        report.true_residual = true_r / b_norm if b_norm > 0 else true_r
        return x

    def fail(reason: str):
        report.breakdown_reason = reason
        x = finish()
        logger.warning(f"BiCGSTAB breakdown after {report.iterations} iterations: {reason}")
        raise BreakdownError(reason, report, x)

    with _timed(report, "blas1"):
        r_hat = r.copy()
        r_norm = norm(r)
        rho = dot(r_hat, r)
    report.residual_history.append(r_norm)
    reference = 1.0 if config.absolute else r_norm
    threshold = config.tol * reference
    if r_norm == 0.0:
        report.converged = True
        return finish(), report

    p = r.copy()
    for iteration in range(1, config.max_iter + 1):
        report.iterations = iteration
        if abs(rho) < eps:
            fail("rho")
        report.rho.append(rho)
        v = op(p)
        with _timed(report, "blas1"):
            rv = dot(r_hat, v)
        if abs(rv) < eps:
            fail("r_hat.v")
        alpha = rho / rv
        report.alpha.append(alpha)
        with _timed(report, "blas1"):
            s = r - alpha * v
            s_norm = norm(s)
        if s_norm < threshold:
            y = y + alpha * p
            report.residual_history.append(s_norm)
            report.converged = True
            break
        t = op(s)
        with _timed(report, "blas1"):
            tt = dot(t, t)
        if tt < eps:
            fail("t.t")
        omega = dot(t, s) / tt
        if abs(omega) < eps:
            fail("omega")
        report.omega.append(omega)
        with _timed(report, "blas1"):
            y = y + alpha * p + omega * s
            r = s - omega * t
            r_norm = norm(r)
        report.residual_history.append(r_norm)
        logger.debug(f"BiCGSTAB iteration {iteration}: residual {r_norm:.3e}")
        if r_norm < threshold:
            report.converged = True
            break
        with _timed(report, "blas1"):
            rho_next = dot(r_hat, r)
            beta = (rho_next / rho) * (alpha / omega)
            rho = rho_next
            p = r + beta * (p - omega * v)

    x = finish()
    if not report.converged:
        logger.warning(f"BiCGSTAB did not converge in {config.max_iter} iterations.")
        raise MaxIterationsError(config.max_iter, report, x)
    logger.info(
        f"BiCGSTAB converged in {report.iterations} iterations "
        f"(true relative residual {report.true_residual:.3e})."
    )
    return x, report


def _for_vector(perm: Permutation, v: np.ndarray) -> Permutation:
    if v.size == perm.size:
        return perm
    if v.size == BLOCK_DIM * perm.size:
        return perm.expand(BLOCK_DIM)
    raise DimensionMismatchError(f"Vector of length {v.size} does not match permutation of size {perm.size}")


def permute_rhs(perm: Permutation, v) -> np.ndarray:
    """Vector in the reordered row order: out[j] = v[new_to_old[j]]."""
    v = np.asarray(v)
    return v[_for_vector(perm, v).new_to_old]


def unpermute_solution(perm: Permutation, v) -> np.ndarray:
    """Inverse of `permute_rhs`."""
    v = np.asarray(v)
    return v[_for_vector(perm, v).old_to_new]
