import multiprocessing
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any

try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:  # Python <= 3.10
    import tomli as tomllib

from subdomain_trisolve.errors import ConfigError

DEFAULT_MAX_SUBDOMAIN_ROWS = 8192
DEFAULT_PIVOT_FLOOR = 1e-300
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 1000
DEFAULT_BREAKDOWN_EPS = 1e-30

STRATEGIES = ("reference", "syncfree", "level_vc", "level_ec")
PRECONDITIONERS = ("none", "ilu0", "ildu0", "ildu0_fused")
LAYOUTS = ("scalar", "bsr3")
RHS_MODES = ("ones", "manufactured", "file")
SIDES = ("split", "right")

# grid, tile
PRESETS: dict[str, tuple[tuple[int, int, int], tuple[int, int, int]]] = {
    "laplacian1": ((128, 128, 128), (16, 16, 8)),
    "laplacian2": ((256, 128, 128), (16, 16, 8)),
}


def default_workers() -> int:
    return multiprocessing.cpu_count()


@dataclass(frozen=True)
class TrisolveConfig:
    strategy: str = "level_vc"
    workers: int = field(default_factory=default_workers)
    max_subdomain_rows: int = DEFAULT_MAX_SUBDOMAIN_ROWS
    use_scratch: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"Unknown strategy '{self.strategy}', expected one of {', '.join(STRATEGIES)}"
            )
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.max_subdomain_rows < 1:
            raise ConfigError(
                f"max_subdomain_rows must be >= 1, got {self.max_subdomain_rows}"
            )


@dataclass(frozen=True)
class FactorConfig:
    pivot_floor: float = DEFAULT_PIVOT_FLOOR

    def __post_init__(self):
        if not self.pivot_floor >= 0.0:
            raise ConfigError(f"pivot_floor must be >= 0, got {self.pivot_floor}")


@dataclass(frozen=True)
class BicgstabConfig:
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    breakdown_eps: float = DEFAULT_BREAKDOWN_EPS
    absolute: bool = False
    side: str = "split"

    def __post_init__(self):
        if not self.tol > 0.0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.side not in SIDES:
            raise ConfigError(f"side must be one of {', '.join(SIDES)}, got '{self.side}'")


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI pipeline run needs."""

    input_path: str | None = None
    grid: tuple[int, int, int] | None = None
    name: str | None = None
    layout: str = "scalar"
    tile: tuple[int, int, int] | None = None
    part_size: int | None = None
    labels_path: str | None = None
    precond: str = "ildu0_fused"
    rhs: str = "manufactured"
    rhs_path: str | None = None
    seed: int = 0
    repetitions: int = 1
    trisolve: TrisolveConfig = field(default_factory=TrisolveConfig)
    factor: FactorConfig = field(default_factory=FactorConfig)
    solver: BicgstabConfig = field(default_factory=BicgstabConfig)

    def __post_init__(self):
        if (self.input_path is None) == (self.grid is None):
            raise ConfigError("Exactly one of an input file or a generated grid is required.")
        if self.layout not in LAYOUTS:
            raise ConfigError(f"layout must be one of {', '.join(LAYOUTS)}, got '{self.layout}'")
        if self.precond not in PRECONDITIONERS:
            raise ConfigError(
                f"precond must be one of {', '.join(PRECONDITIONERS)}, got '{self.precond}'"
            )
        if self.rhs not in RHS_MODES:
            raise ConfigError(f"rhs must be one of {', '.join(RHS_MODES)}, got '{self.rhs}'")
        if self.rhs == "file" and not self.rhs_path:
            raise ConfigError("rhs mode 'file' requires a right-hand-side path.")
        if sum(x is not None for x in (self.tile, self.part_size, self.labels_path)) > 1:
            raise ConfigError("Choose one of geometric tiles, a graph part size or a label file.")
        if self.tile is not None and self.grid is None:
            raise ConfigError("Geometric partitioning requires a generated Laplacian source.")
        if self.part_size is not None and self.part_size < 1:
            raise ConfigError(f"part size must be >= 1, got {self.part_size}")
        if self.repetitions < 1:
            raise ConfigError(f"repetitions must be >= 1, got {self.repetitions}")

    @property
    def decomposed(self) -> bool:
        return any(x is not None for x in (self.tile, self.part_size, self.labels_path))


_SECTIONS = {
    "trisolve": TrisolveConfig,
    "factor": FactorConfig,
    "solver": BicgstabConfig,
}


def _build_section(cls, values: dict[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(
            f"Unknown keys in [{section}]: {', '.join(sorted(unknown))}"
        )
    return cls(**values)


def load_config_file(path: str | os.PathLike) -> dict[str, Any]:
    """Loads a TOML configuration file.

    Args:
        path: Path to the TOML file.

    Returns:
        A dictionary with the section objects ("trisolve", "factor", "solver")
        and the raw "run" table.

    Raises:
        ConfigError: If the file is missing, not valid TOML, or has unknown keys.
    """
    try:
        with open(path, "rb") as file:
            data = tomllib.load(file)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Error decoding config file {path}: {e}") from e

    loaded: dict[str, Any] = {"run": dict(data.get("run", {}))}
    for section, cls in _SECTIONS.items():
        loaded[section] = _build_section(cls, dict(data.get(section, {})), section)
    return loaded


def merge_overrides(base, **overrides):
    """Returns `base` with every non-None override applied."""
    values = {key: value for key, value in overrides.items() if value is not None}
    return replace(base, **values) if values else base
