import pytest

from subdomain_trisolve.config import (
    BicgstabConfig,
    FactorConfig,
    RunConfig,
    TrisolveConfig,
    load_config_file,
    merge_overrides,
)
from subdomain_trisolve.errors import ConfigError


def test_defaults():
    assert TrisolveConfig(workers=1).strategy == "level_vc"
    assert TrisolveConfig().workers >= 1
    assert TrisolveConfig().max_subdomain_rows == 8192
    assert BicgstabConfig().tol == 1e-8
    assert BicgstabConfig().max_iter == 1000
    assert BicgstabConfig().side == "split"
    assert FactorConfig().pivot_floor == 1e-300
    run = RunConfig(grid=(2, 2, 2))
    assert run.precond == "ildu0_fused"
    assert run.rhs == "manufactured"
    assert not run.decomposed
    assert RunConfig(input_path="a.mtx", labels_path="l.txt").decomposed


@pytest.mark.parametrize(
    "cls, kwargs",
    [
        (TrisolveConfig, {"strategy": "magic"}),
        (TrisolveConfig, {"workers": 0}),
        (TrisolveConfig, {"max_subdomain_rows": 0}),
        (FactorConfig, {"pivot_floor": -1.0}),
        (BicgstabConfig, {"tol": 0.0}),
        (BicgstabConfig, {"max_iter": 0}),
        (BicgstabConfig, {"side": "left"}),
        (RunConfig, {}),
        (RunConfig, {"grid": (2, 2, 2), "input_path": "a.mtx"}),
        (RunConfig, {"grid": (2, 2, 2), "layout": "bsr2"}),
        (RunConfig, {"grid": (2, 2, 2), "precond": "jacobi"}),
        (RunConfig, {"grid": (2, 2, 2), "rhs": "random"}),
        (RunConfig, {"grid": (2, 2, 2), "rhs": "file"}),
        (RunConfig, {"grid": (2, 2, 2), "tile": (1, 1, 1), "part_size": 2}),
        (RunConfig, {"input_path": "a.mtx", "tile": (1, 1, 1)}),
        (RunConfig, {"input_path": "a.mtx", "part_size": 2, "labels_path": "l.txt"}),
        (RunConfig, {"grid": (2, 2, 2), "part_size": 0}),
        (RunConfig, {"grid": (2, 2, 2), "repetitions": 0}),
    ],
)
def test_validation(cls, kwargs):
    with pytest.raises(ConfigError):
        cls(**kwargs)


def test_load_config_file(tmp_path):
    path = tmp_path / "config.toml"
    path.write_text(
        "[run]\n"
        'precond = "ilu0"\n'
        "tile = [2, 2, 2]\n"
        "\n"
        "[trisolve]\n"
        'strategy = "level_ec"\n'
        "workers = 2\n"
        "\n"
        "[solver]\n"
        "tol = 1e-10\n"
        'side = "right"\n'
    )
    loaded = load_config_file(path)
    assert loaded["run"] == {"precond": "ilu0", "tile": [2, 2, 2]}
    assert loaded["trisolve"] == TrisolveConfig(strategy="level_ec", workers=2)
    assert loaded["solver"] == BicgstabConfig(tol=1e-10, side="right")
    assert loaded["factor"] == FactorConfig()


@pytest.mark.parametrize(
    "text, message",
    [
        ("[trisolve]\nstrategy = \n", "Error decoding"),
        ("[solver]\ntolerance = 1e-6\n", "Unknown keys in [solver]: tolerance"),
        ('[trisolve]\nstrategy = "fast"\n', "Unknown strategy 'fast'"),
    ],
)
def test_load_config_file_errors(tmp_path, text, message):
    path = tmp_path / "config.toml"
    path.write_text(text)
    with pytest.raises(ConfigError) as e:
        load_config_file(path)
    assert message in str(e.value)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config_file(tmp_path / "absent.toml")


def test_merge_overrides():
    base = BicgstabConfig(tol=1e-6)
    assert merge_overrides(base, tol=None, max_iter=None) is base
    merged = merge_overrides(base, tol=None, max_iter=5)
    assert merged.tol == 1e-6
    assert merged.max_iter == 5
    with pytest.raises(ConfigError):
        merge_overrides(base, side="left")
