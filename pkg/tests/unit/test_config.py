from __future__ import annotations

import json
import math
from pathlib import Path

import pytest

from flowtrack.config import RunConfig, dump_config, load_config, with_tracking
from flowtrack.errors import ConfigError
from flowtrack.models import ConstraintSet

TOML_TEXT = """
seed = 11
threads = 2

[tracking]
nk = 4
p_th = 0.25
constraints = ["out", "in"]
feature = "position"
ball_factor = "inf"

[regularization]
lambda_div = 0.5

[sampling]
long_axis = [0.0, 1.0, 0.0]

[paths]
output_root = "elsewhere"
"""


def test_missing_file_gives_defaults(tmp_path: Path) -> None:
    assert load_config(tmp_path / "absent.toml") == RunConfig()
    assert load_config(None) == RunConfig()


def test_toml_sections_reach_every_component(tmp_path: Path) -> None:
    path = tmp_path / "flowtrack.toml"
    path.write_text(TOML_TEXT, encoding="utf-8")
    config = load_config(path)
    assert (config.seed, config.threads) == (11, 2)
    assert config.tracking.nk == 4
    assert config.tracking.constraints == ConstraintSet(inc=True)
    assert math.isinf(config.tracking.ball_factor)
    assert config.regularization.lambda_div == 0.5
    assert config.regularization.lambda_sparse == 1e-3
    assert config.sampling.long_axis == (0.0, 1.0, 0.0)
    assert config.sampling.z_fr == config.tracking.z_fr
    assert config.paths.output_root == "elsewhere"


def test_json_config_is_accepted(tmp_path: Path) -> None:
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"tracking": {"nk": 2, "z_fr": 6, "theta_fr": 5}}), "utf-8")
    config = load_config(path)
    assert config.tracking.nk == 2
    assert (config.sampling.z_fr, config.sampling.theta_fr) == (6, 5)


@pytest.mark.parametrize(
    "text, message",
    [
        ("[tracking]\ncolour = 3\n", "tracking"),
        ("[tracking]\np_th = 2.0\n", "tracking.p_th"),
        ("[tracking]\nconstraints = [\"out\", \"loop\"]\n", "C_loop requires C_bal"),
        ("[axes]\nlong_axis = [0.0, 0.0, 2.0]\n", "unit vector"),
        ("seed = [\n", "cannot parse"),
    ],
)
def test_invalid_configs_raise_config_error(tmp_path: Path, text: str, message: str) -> None:
    path = tmp_path / "bad.toml"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError, match=message):
        load_config(path)


def test_cli_overrides_skip_missing_values() -> None:
    config = RunConfig()
    assert with_tracking(config, nk=None, p_th=None) is config
    updated = with_tracking(config, nk=5, z_fr=6, theta_fr=5)
    assert updated.tracking.nk == 5
    assert (updated.sampling.z_fr, updated.sampling.theta_fr) == (6, 5)
    with pytest.raises(ConfigError):
        with_tracking(config, p_th=3.0)


def test_dumped_config_loads_back_equal(tmp_path: Path) -> None:
    source = tmp_path / "flowtrack.toml"
    source.write_text(TOML_TEXT, encoding="utf-8")
    config = load_config(source)
    dumped = tmp_path / "meta" / "run_config.json"
    dump_config(dumped, config)
    assert load_config(dumped) == config
