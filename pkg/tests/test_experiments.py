import json
import math

import numpy as np
import pytest

from dynsbi.experiments import (PRESETS, ConfigError, ExperimentConfig, exponential_sl_curve, lgssm_check,
                                run_experiment, summarize_scaling, vole_init)
from dynsbi.models import VOLE_TRUTH, LgSsmParams, vole_simulate
from dynsbi.priors import vole_prior


# --- config ---------------------------------------------------------------

def test_every_tag_constructs():
    for tag in PRESETS:
        for preset in ("desk", "full"):
            cfg = ExperimentConfig(tag, 1, preset)
            assert set(cfg.resolved()) == set(PRESETS[tag]["desk"])


@pytest.mark.parametrize("kwargs", [
    {"experiment": "nope", "seed": 1},
    {"experiment": "exp-sl-demo", "seed": -1},
    {"experiment": "exp-sl-demo", "seed": 1, "preset": "huge"},
    {"experiment": "exp-sl-demo", "seed": 1, "settings": {"bogus": 1}},
    {"experiment": "exp-sl-demo", "seed": 1, "settings": {"m": 0}},
    {"experiment": "vole-sim-compare", "seed": 1, "settings": {"iterations": -5}},
    {"experiment": "exp-sl-demo", "seed": 1, "threads": 0},
    {"experiment": "exp-sl-demo", "seed": 1, "schema_version": 99},
])
def test_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kwargs)


def test_config_from_dict_requires_seed_and_known_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "exp-sl-demo"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "exp-sl-demo", "seed": 1, "colour": "red"})
    cfg = ExperimentConfig.from_dict({"experiment": "exp-sl-demo"}, seed=7)
    assert cfg.seed == 7


def test_full_preset_overrides():
    cfg = ExperimentConfig("vole-sim-compare", 1, "full", {"datasets": 2})
    r = cfg.resolved()
    assert r["iterations"] == 25_000 and r["datasets"] == 2


# --- runs -----------------------------------------------------------------

def _files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.name != "timing.json"}


def test_manifest_rerun_is_byte_identical(tmp_path):
    cfg = ExperimentConfig("exp-sl-demo", 3, settings={"m": 300})
    first = run_experiment(cfg, tmp_path / "a")
    assert first["status"] == "ok"
    again = ExperimentConfig.load(tmp_path / "a" / "manifest.json")
    run_experiment(again, tmp_path / "b")
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert {"sl_curve.csv", "summary.json", "manifest.json"} <= set(_files(tmp_path / "a"))


def test_threads_do_not_change_artifacts(tmp_path):
    run_experiment(ExperimentConfig("lgssm-oracle", 4, settings={"reps": 6, "particles": 200}), tmp_path / "a")
    run_experiment(ExperimentConfig("lgssm-oracle", 4, settings={"reps": 6, "particles": 200}, threads=2),
                   tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a["lgssm.csv"] == b["lgssm.csv"] and a["summary.json"] == b["summary.json"]


def test_lgssm_oracle_report(tmp_path):
    run_experiment(ExperimentConfig("lgssm-oracle", 5, settings={"reps": 20, "particles": 500}), tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary) >= {"kalman", "mean", "sd", "se", "z", "within_3se"}
    assert (tmp_path / "lgssm.csv").read_text().count("\n") == 21


def test_missing_data_path_is_recorded(tmp_path):
    with pytest.raises(ConfigError):
        run_experiment(ExperimentConfig("kilpisjarvi-fit", 1), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "error" and "data_path" in manifest["error"]


def test_nonfinite_values_written_as_null(tmp_path):
    from dynsbi.experiments import write_json
    write_json(tmp_path / "x.json", {"a": math.inf, "b": [1.0, math.nan]})
    assert json.loads((tmp_path / "x.json").read_text()) == {"a": None, "b": [1.0, None]}
    write_json(tmp_path / "y.json", {"a": np.array([1.0, np.nan]), "b": np.bool_(True)})
    assert json.loads((tmp_path / "y.json").read_text()) == {"a": [1.0, None], "b": True}


# --- helpers --------------------------------------------------------------

def test_summarize_scaling_recovers_quadratic():
    grid = np.linspace(2.8, 3.8, 10)
    rows = [{"v": v, "tolerance": 1.0 + (v - 3.3) ** 2, "rep": 0} for v in grid]
    out = summarize_scaling(rows, grid)
    assert out["quadratic_coef"][0] > 0
    assert out["fit_argmin"] == pytest.approx(3.3, abs=1e-3)


def test_exponential_curve_shapes():
    alphas = np.arange(0.5, 2.01, 0.25)
    out = exponential_sl_curve(1.0, 200, alphas, 2000, seed=9)
    assert len(out["synthetic"]) == len(alphas) == len(out["exact"])
    assert abs(alphas[np.argmax(out["synthetic"])] - alphas[np.argmax(out["exact"])]) <= 0.25


def test_vole_init_finite_and_data_matched():
    y = vole_simulate(VOLE_TRUTH, seed=1).obs
    prior = vole_prior()
    init = vole_init(prior, y)
    assert np.isfinite(prior.logpdf(init))
    # phi is chosen so the noise-free path has the data's mean level
    assert 0.1 * VOLE_TRUTH.phi < init[-1] < 10 * VOLE_TRUTH.phi


def test_lgssm_check_keys():
    res = lgssm_check(LgSsmParams(0.9, 1.0, 0.5, 0.8), 10, 100, 5, seed=1)
    assert len(res["estimates"]) == 5 and math.isfinite(res["z"])
