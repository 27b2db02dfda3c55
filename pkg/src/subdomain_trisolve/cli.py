import logging
import sys
from contextlib import contextmanager
from dataclasses import fields

import click

from subdomain_trisolve.config import (
    LAYOUTS,
    PRECONDITIONERS,
    PRESETS,
    RHS_MODES,
    SIDES,
    STRATEGIES,
    BicgstabConfig,
    FactorConfig,
    RunConfig,
    TrisolveConfig,
    load_config_file,
    merge_overrides,
)
from subdomain_trisolve.errors import ConfigError, SubdomainSolveError
from subdomain_trisolve.factor import factorize
from subdomain_trisolve.matrix_market import write_matrix_market
from subdomain_trisolve.parallel import WorkerPool
from subdomain_trisolve.partition import geometric_cuts
from subdomain_trisolve.pipeline import (
    count_geometric,
    decompose,
    load_matrix,
    partition_labels,
    precond_bench,
    prepare_bench,
    resolve_source,
    run_solve,
    trisolve_bench,
)
from subdomain_trisolve.report import (
    bench_report,
    decompose_report,
    run_report,
    write_report,
    write_residuals,
)
from subdomain_trisolve.schedule import schedule_factor
from subdomain_trisolve.sparsemat import (
    GridSpec,
    as_csr,
    generate_laplacian_3d,
    laplacian_nnz,
)

logger = logging.getLogger(__name__)
logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s"
)

ENV_PREFIX = "SUBDOMAIN_TRISOLVE_"
_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"trisolve", "factor", "solver"}


class IntTriple(click.ParamType):
    """Three positive integers written as "a,b,c" (or "axbxc")."""

    name = "triple"

    def convert(self, value, param, ctx):
        if isinstance(value, tuple):
            return value
        try:
            triple = tuple(int(p) for p in str(value).replace("x", ",").split(","))
        except ValueError:
            self.fail(f"'{value}' is not three comma-separated integers", param, ctx)
        if len(triple) != 3 or min(triple) < 1:
            self.fail(f"'{value}' is not three positive integers", param, ctx)
        return triple


TRIPLE = IntTriple()


def env(flag: str) -> str:
    return ENV_PREFIX + flag.upper().replace("-", "_")


def setup_file_logging(log_file: str) -> logging.FileHandler:
    """Mirrors package log records into `log_file`."""
    handler = logging.FileHandler(log_file, encoding="utf-8")
    handler.setFormatter(
        logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    )
    logging.getLogger("subdomain_trisolve").addHandler(handler)
    return handler


@contextmanager
def handle_errors():
    """Maps package errors to exit status 1 and anything unexpected to 2."""
    try:
        yield
    except SubdomainSolveError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)
    except (click.ClickException, click.exceptions.Exit, click.exceptions.Abort):
        raise
    except Exception as e:
        logger.exception(f"An unexpected error occurred: {e}")
        click.echo(f"Error: unexpected failure: {e}", err=True)
        sys.exit(2)


_source_options = [
    click.option(
        "--input",
        "input_path",
        type=click.Path(dir_okay=False),
        envvar=env("input"),
        help="Matrix Market file to load.",
    ),
    click.option(
        "--gen",
        envvar=env("gen"),
        help="Generate a 7-point Laplacian: 'nx,ny,nz' or a preset "
        f"({', '.join(PRESETS)}).",
    ),
    click.option(
        "--layout",
        type=click.Choice(LAYOUTS),
        envvar=env("layout"),
        help="Scalar CSR or 3x3 block BSR storage (presets default to bsr3).",
    ),
]

_partition_options = [
    click.option(
        "--tile",
        type=TRIPLE,
        envvar=env("tile"),
        help="Geometric subdomain tile 'x,y,z' (generated grids only).",
    ),
    click.option(
        "--part-size",
        type=int,
        envvar=env("part_size"),
        help="Rows per subdomain for graph partitioning.",
    ),
    click.option(
        "--seed",
        type=int,
        envvar=env("seed"),
        help="Seed for graph-partition tie-breaking.",
    ),
    click.option(
        "--labels",
        "labels_path",
        type=click.Path(dir_okay=False),
        envvar=env("labels"),
        help="Subdomain label file, one label per (block) row in the original order.",
    ),
]

_trisolve_options = [
    click.option(
        "--strategy",
        type=click.Choice(STRATEGIES),
        envvar=env("strategy"),
        help="Triangular-solve strategy.",
    ),
    click.option(
        "--workers",
        type=int,
        envvar=env("workers"),
        help="Worker threads (default: available cores).",
    ),
]

_report_option = click.option(
    "--report",
    "report_path",
    type=click.Path(dir_okay=False),
    envvar=env("report"),
    help="Write a JSON report to this path.",
)

_repetitions_option = click.option(
    "--repetitions",
    type=int,
    envvar=env("repetitions"),
    help="Timed repetitions; timings report the median.",
)


def with_options(options):
    def decorator(fn):
        for option in reversed(options):
            fn = option(fn)
        return fn

    return decorator


def build_run_config(ctx: click.Context, **cli) -> RunConfig:
    """Layers built-in defaults, the config file, then env vars and flags."""
    loaded = ctx.obj.get("config_file") if ctx.obj else None
    run_table = dict(loaded["run"]) if loaded else {}
    unknown = set(run_table) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"Unknown keys in [run]: {', '.join(sorted(unknown))}")
    for key in ("grid", "tile"):
        if run_table.get(key) is not None:
            run_table[key] = tuple(run_table[key])

    gen = cli.pop("gen", None)
    if gen is not None:
        grid, name, preset_tile = resolve_source(gen)
        cli["grid"] = grid.dims
        cli.setdefault("name", name)
        if preset_tile is not None:
            if cli.get("layout") is None:
                cli["layout"] = "bsr3"
            if all(cli.get(k) is None for k in ("tile", "part_size", "labels_path")):
                cli["tile"] = preset_tile
    if cli.get("input_path") is not None:
        run_table.pop("grid", None)
    if cli.get("grid") is not None:
        run_table.pop("input_path", None)
    for key in ("tile", "part_size", "labels_path"):
        if cli.get(key) is not None:
            for other in {"tile", "part_size", "labels_path"} - {key}:
                run_table.pop(other, None)

    trisolve = merge_overrides(
        loaded["trisolve"] if loaded else TrisolveConfig(),
        strategy=cli.pop("strategy", None),
        workers=cli.pop("workers", None),
    )
    factor = loaded["factor"] if loaded else FactorConfig()
    solver = merge_overrides(
        loaded["solver"] if loaded else BicgstabConfig(),
        tol=cli.pop("tol", None),
        max_iter=cli.pop("max_iter", None),
        side=cli.pop("side", None),
    )
    values = {**run_table, **{k: v for k, v in cli.items() if v is not None}}
    return RunConfig(**values, trisolve=trisolve, factor=factor, solver=solver)


@click.group()
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    envvar=env("log_level"),
    default="INFO",
    help="Logging verbosity.",
)
@click.option(
    "--log-file",
    type=click.Path(dir_okay=False),
    envvar=env("log_file"),
    help="Also write log records to this file.",
)
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False),
    envvar=env("config"),
    help="TOML file with [run], [trisolve], [factor] and [solver] tables.",
)
@click.pass_context
def main(ctx: click.Context, log_level: str, log_file: str | None, config_path: str | None):
    """Fine-grained domain decomposition for sparse triangular solves."""
    logging.getLogger().setLevel(log_level.upper())
    ctx.ensure_object(dict)
    if log_file:
        handler = setup_file_logging(log_file)

        def close_handler():
            logging.getLogger("subdomain_trisolve").removeHandler(handler)
            handler.close()

        ctx.call_on_close(close_handler)
    if config_path:
        with handle_errors():
            ctx.obj["config_file"] = load_config_file(config_path)


@main.command()
@click.option("--gen", envvar=env("gen"), required=True, help="Grid 'nx,ny,nz' or a preset.")
@click.option("--layout", type=click.Choice(LAYOUTS), envvar=env("layout"))
@click.option(
    "-o",
    "--output",
    type=click.Path(dir_okay=False),
    envvar=env("output"),
    help="Matrix Market file to write.",
)
@click.option(
    "--count-only",
    is_flag=True,
    envvar=env("count_only"),
    help="Print the nonzero count without assembling the matrix.",
)
def gen(gen: str, layout: str | None, output: str | None, count_only: bool) -> None:
    """Generates a 3D 7-point Laplacian."""
    with handle_errors():
        grid, name, preset_tile = resolve_source(gen)
        layout = layout or ("bsr3" if preset_tile is not None else "scalar")
        if count_only:
            click.echo(f"{name}: nnz {laplacian_nnz(grid, layout)}")
            return
        if not output:
            raise ConfigError("An output path is required unless --count-only is given.")
        A = generate_laplacian_3d(grid, layout)
        write_matrix_market(as_csr(A), output)
        click.echo(f"Wrote {name} ({A.nrows} rows, {A.nnz} nonzeros) to {output}")


@main.command(name="decompose")
@with_options(_source_options + _partition_options + [_report_option])
@click.option("--workers", type=int, envvar=env("workers"))
@click.option(
    "--count-only",
    is_flag=True,
    envvar=env("count_only"),
    help="Count dropped couplings from geometric labels alone.",
)
@click.option(
    "--labels-out",
    "labels_out",
    type=click.Path(dir_okay=False),
    envvar=env("labels_out"),
    help="Write the subdomain labels, original row order, for a later --labels.",
)
@click.pass_context
def decompose_cmd(
    ctx: click.Context,
    report_path: str | None,
    count_only: bool,
    labels_out: str | None,
    **options,
) -> None:
    """Partitions, reorders and drops inter-subdomain couplings."""
    with handle_errors():
        run = build_run_config(ctx, **options)
        if not run.decomposed:
            raise ConfigError("decompose needs --tile, --part-size, --labels or a preset.")
        if count_only:
            if run.grid is None or run.tile is None:
                raise ConfigError("--count-only needs a generated grid with a tile.")
            grid = GridSpec(*run.grid)
            stats = count_geometric(grid, run.tile, run.layout)
            if labels_out:
                geometric_cuts(grid, run.tile).write(labels_out)
            report = decompose_report(
                run.name, None, stats, nrows=grid.n * (3 if run.layout == "bsr3" else 1)
            )
        else:
            A, name, grid = load_matrix(run)
            labels = partition_labels(
                A, grid, run.tile, run.part_size, run.seed, run.labels_path
            )
            if labels_out:
                labels.write(labels_out)
            dec = decompose(A, labels)
            with WorkerPool(run.trisolve.workers) as pool:
                factors = factorize(dec.decomposed, run.factor, dec.layout, pool)
                summary = schedule_factor(factors.L, dec.layout, pool=pool).summary()
            stats = dec.stats
            report = decompose_report(name, A, stats, summary)
        click.echo(
            f"{report['matrix']['name']}: nnz {stats.nnz_before} -> {stats.nnz_after}, "
            f"dropped {stats.dropped} ({100 * stats.dropped_fraction:.2f}%) "
            f"in {stats.n_subdomains} subdomains of {stats.rows_per_subdomain} rows"
        )
        if report.get("schedule"):
            click.echo(
                f"levels: max {report['schedule']['max_levels']}, "
                f"mean width {report['schedule']['mean_level_width']:.1f}"
            )
        if report_path:
            write_report(report_path, report)


@main.command()
@with_options(_source_options + _partition_options + _trisolve_options)
@click.option("--precond", type=click.Choice(PRECONDITIONERS), envvar=env("precond"))
@click.option("--tol", type=float, envvar=env("tol"), help="Relative convergence tolerance.")
@click.option("--max-iter", type=int, envvar=env("max_iter"))
@click.option("--side", type=click.Choice(SIDES), envvar=env("side"))
@click.option("--rhs", type=click.Choice(RHS_MODES), envvar=env("rhs"))
@click.option("--rhs-file", "rhs_path", type=click.Path(dir_okay=False), envvar=env("rhs_file"))
@with_options([_repetitions_option, _report_option])
@click.option(
    "--residuals",
    "residuals_path",
    type=click.Path(dir_okay=False),
    envvar=env("residuals"),
    help="Write the residual history as CSV.",
)
@click.pass_context
def solve(
    ctx: click.Context, report_path: str | None, residuals_path: str | None, **options
) -> None:
    """Runs preconditioned BiCGSTAB on the reordered system."""
    with handle_errors():
        run = build_run_config(ctx, **options)
        with WorkerPool(run.trisolve.workers) as pool:
            outcome = run_solve(run, pool)
        if report_path:
            write_report(report_path, run_report(outcome))
        if residuals_path:
            write_residuals(residuals_path, outcome.report.residual_history)
        if outcome.error is not None:
            raise outcome.error
        report = outcome.report
        click.echo(
            f"{outcome.name}: converged in {report.iterations} iterations "
            f"({outcome.precond}, {outcome.strategy}), "
            f"true relative residual {report.true_residual:.3e}"
        )


def _strategies(value: str | None) -> list[str]:
    if not value:
        return list(STRATEGIES)
    names = [s.strip() for s in value.split(",") if s.strip()]
    unknown = [s for s in names if s not in STRATEGIES]
    if unknown:
        raise ConfigError(
            f"Unknown strategies: {', '.join(unknown)}; expected {', '.join(STRATEGIES)}"
        )
    return names


def _bench(ctx, runner, strategies, report_path, options) -> None:
    with handle_errors():
        run = build_run_config(ctx, **options)
        names = _strategies(strategies)
        name, A, dec = prepare_bench(run)
        with WorkerPool(run.trisolve.workers) as pool:
            entries = runner(dec, names, run, pool)
        for entry in entries:
            label = f"{entry.precond}/{entry.strategy}" if entry.precond else entry.strategy
            click.echo(
                f"{label}: min {entry.min_ms:.3f} ms, mean {entry.mean_ms:.3f} ms, "
                f"max deviation {entry.max_deviation:.2e}"
            )
        if report_path:
            write_report(report_path, bench_report(name, A, entries))


_bench_options = (
    _source_options
    + _partition_options
    + [
        click.option("--workers", type=int, envvar=env("workers")),
        click.option(
            "--strategies",
            envvar=env("strategies"),
            help=f"Comma-separated subset of {', '.join(STRATEGIES)} (default: all).",
        ),
        _repetitions_option,
        _report_option,
    ]
)


@main.command(name="trisolve-bench")
@with_options(_bench_options)
@click.pass_context
def trisolve_bench_cmd(ctx, strategies, report_path, **options) -> None:
    """Times one lower triangular solve per strategy."""
    _bench(ctx, trisolve_bench, strategies, report_path, options)


@main.command(name="precond-bench")
@with_options(_bench_options)
@click.pass_context
def precond_bench_cmd(ctx, strategies, report_path, **options) -> None:
    """Times one preconditioner apply per variant and strategy."""
    _bench(ctx, precond_bench, strategies, report_path, options)


if __name__ == "__main__":
    main()
