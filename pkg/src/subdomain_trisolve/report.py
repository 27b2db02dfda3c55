import csv
import json
import logging
import os

from subdomain_trisolve.krylov import SolveReport
from subdomain_trisolve.pipeline import BenchEntry, RunOutcome
from subdomain_trisolve.reorder import DecompositionStats
from subdomain_trisolve.sparsemat import SparseMatrix

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def matrix_section(name: str, A: SparseMatrix) -> dict:
    return {"name": name, "nrows": A.nrows, "nnz": A.nnz}


def decomposition_section(stats: DecompositionStats) -> dict:
    return {
        "P": stats.rows_per_subdomain,
        "n_subdomains": stats.n_subdomains,
        "remainder_rows": stats.remainder_rows,
        "nnz_before": stats.nnz_before,
        "nnz_after": stats.nnz_after,
        "nnz_dropped": stats.dropped,
        "dropped_fraction": stats.dropped_fraction,
    }


def solver_section(strategy: str, precond: str, report: SolveReport) -> dict:
    return {
        "strategy": strategy,
        "precond": precond,
        "iterations": report.iterations,
        "converged": report.converged,
        "final_residual": report.final_residual,
        "true_residual": report.true_residual,
        "breakdown_reason": report.breakdown_reason,
        "timings_s": dict(report.timings),
    }


def run_report(outcome: RunOutcome) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "matrix": matrix_section(outcome.name, outcome.matrix),
        "decomposition": decomposition_section(outcome.decomposition.stats),
        "schedule": outcome.schedule,
        "solver": solver_section(outcome.strategy, outcome.precond, outcome.report),
        "timings_ms": dict(outcome.timings_ms),
    }


def decompose_report(
    name: str,
    A: SparseMatrix | None,
    stats: DecompositionStats,
    schedule: dict | None = None,
    nrows: int | None = None,
) -> dict:
    """Report of a decomposition; `A` may be None in count-only mode."""
    matrix = (
        matrix_section(name, A)
        if A is not None
        else {"name": name, "nrows": nrows, "nnz": stats.nnz_before}
    )
    return {
        "schema_version": SCHEMA_VERSION,
        "matrix": matrix,
        "decomposition": decomposition_section(stats),
        "schedule": schedule or {},
    }


def bench_report(name: str, A: SparseMatrix, entries: list[BenchEntry]) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "matrix": matrix_section(name, A),
        "entries": [entry.to_dict() for entry in entries],
    }


def write_report(path: str | os.PathLike, data: dict) -> None:
    with open(path, "w") as f:
        json.dump(data, f, indent=2)
    logger.info(f"Wrote report to {path}.")


def write_residuals(path: str | os.PathLike, history: list[float]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "residual"])
        for iteration, residual in enumerate(history):
            writer.writerow([iteration, repr(float(residual))])
    logger.info(f"Wrote {len(history)} residuals to {path}.")


def read_residuals(path: str | os.PathLike) -> list[float]:
    with open(path, newline="") as f:
        return [float(row["residual"]) for row in csv.DictReader(f)]
