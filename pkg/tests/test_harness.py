import csv
import itertools
import json
import math

import numpy as np
import pytest

from gatedhmoe import harness
from gatedhmoe.cli import main
from gatedhmoe.estimator import ConfigError, FitError, OptimizerConfig
from gatedhmoe.harness import (
    CSV_COLUMNS,
    ExperimentConfig,
    RateReport,
    child_seed,
    emit_outputs,
    fit_rate,
    generate_dataset,
    read_csv,
    regression_rate_check,
    run_experiment,
    summarize,
)
from gatedhmoe.model import ModelSpec, Variant, eval_model


def tiny_cfg(**kw):
    base = dict(variants=["MHA", "GatedValue"], K_fit=[3], sample_sizes=[200, 400, 800], trials=2,
                optimizer=OptimizerConfig(max_epochs=15), master_seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


def test_noiseless_dataset_is_exact(truth):
    spec = ModelSpec(Variant.GATED_SDPA)
    data = generate_dataset(truth, spec, 300, 0.0, 1)
    assert np.array_equal(data.Y, eval_model(truth, spec, data.X))
    assert data.meta["variant"] == "GatedSDPA" and data.meta["seed"] == 1


def test_covariate_means_within_clt_bound(truth):
    n = 100_000
    data = generate_dataset(truth, ModelSpec(), n, 0.1, 2)
    assert np.all(np.abs(data.X.mean(axis=0)) < 4 * (1 / math.sqrt(3)) / math.sqrt(n))
    assert data.X.min() >= -1 and data.X.max() <= 1


def test_dataset_determinism(truth):
    a = generate_dataset(truth, ModelSpec(), 100, 0.1, 5)
    b = generate_dataset(truth, ModelSpec(), 100, 0.1, 5)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y)


def test_rate_of_exact_power_law():
    ns = [1000, 2000, 5000, 10000]
    f = fit_rate([(n, 7 * n**-0.5) for n in ns])
    assert abs(f.slope + 0.5) < 1e-12 and abs(f.r2 - 1) < 1e-12
    assert f.intercept == pytest.approx(math.log(7), abs=1e-10)


def test_rate_of_constant():
    f = fit_rate([(n, 3.0) for n in (10, 100, 1000)])
    assert abs(f.slope) < 1e-12


def test_rate_recovery_monte_carlo():
    ns = np.array([1000, 2000, 5000, 10000, 20000, 50000])
    for seed in range(100):
        noise = np.random.default_rng(seed).normal(scale=0.01, size=ns.size)
        f = fit_rate(zip(ns, 2.0 * ns**-0.49 * (1 + noise)))
        assert abs(f.slope + 0.49) <= 0.02


def test_rate_drops_nonpositive_and_needs_three():
    with pytest.warns(RuntimeWarning):
        f = fit_rate([(10, 1.0), (100, 0.1), (1000, 0.01), (10000, 0.0)])
    assert f.points == 3 and f.slope == pytest.approx(-1.0)
    with pytest.raises(harness.RateFitError), pytest.warns(RuntimeWarning):
        fit_rate([(10, 1.0), (100, -1.0), (1000, 0.5)])


def test_child_seeds_distinct_over_desk_grid():
    cfg = ExperimentConfig.load("configs/desk.toml")
    seeds = {
        child_seed(cfg.master_seed, v, K, n, t)
        for v, K, n, t in itertools.product(cfg.variants, cfg.K_fit, cfg.sample_sizes, range(cfg.trials))
    }
    assert len(seeds) == len(cfg.variants) * len(cfg.K_fit) * len(cfg.sample_sizes) * cfg.trials


def test_monotone_fit_from_exact_init():
    cfg = tiny_cfg(sample_sizes=[500], trials=1, noise_sd=0.0, init_scale=0.0)
    report = run_experiment(cfg)
    for t in report.trials:
        assert t.sse_final <= t.sse_init
        assert t.loss_l2 <= t.loss_l2_init + 1e-12


def test_sse_never_increases_across_trials():
    report = run_experiment(tiny_cfg())
    assert all(t.sse_final <= t.sse_init for t in report.trials)
    assert len(report.trials) == 12


def test_regression_check_skips_vanishing_distances():
    cfg = tiny_cfg(noise_sd=0.0, init_scale=0.0, trials=1)
    with pytest.warns(RuntimeWarning, match="vanish"):
        slopes = regression_rate_check(cfg)
    assert all(v is None for v in slopes.values())


def test_aborted_trials_are_excluded(monkeypatch):
    real_fit = harness.fit
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 1:
            raise FitError("non-finite loss or gradient at epoch 3")
        return real_fit(*args, **kw)

    monkeypatch.setattr(harness, "fit", flaky)
    report = run_experiment(tiny_cfg())
    assert sum(t.aborted for t in report.trials) == 1
    assert report.summary[("MHA", 3, 200)]["loss_l2"][1] == 0.0  # one trial left


def test_abort_budget(monkeypatch):
    def broken(*args, **kw):
        raise FitError("non-finite loss or gradient at epoch 0")

    monkeypatch.setattr(harness, "fit", broken)
    with pytest.raises(harness.AbortBudgetExceeded):
        run_experiment(tiny_cfg())


def test_empty_report_outputs(tmp_path):
    written = emit_outputs(RateReport(), tmp_path)
    assert (tmp_path / "results.csv").read_text() == ",".join(CSV_COLUMNS) + "\n"
    assert not list(tmp_path.glob("*.svg")) and len(written) == 2


def test_svg_structure_and_csv_round_trip(tmp_path):
    report = run_experiment(tiny_cfg(variants=["GatedValue"]))
    emit_outputs(report, tmp_path)
    svgs = list(tmp_path.glob("*.svg"))
    assert [p.name for p in svgs] == ["GatedValue_K3.svg"]
    text = svgs[0].read_text()
    assert text.count("<circle") == 3 and text.count("stroke-dasharray") == 1
    back = read_csv(tmp_path / "results.csv")
    keys = CSV_COLUMNS
    for a, b in zip(back, report.trials):
        assert [getattr(a, k) for k in keys] == [getattr(b, k) for k in keys]
    rates = json.loads((tmp_path / "rates.json").read_text())
    assert set(rates) == {"GatedValue/K=3"} and rates["GatedValue/K=3"]["plotted"] == "loss_l2"


def test_summary_is_order_independent():
    report = run_experiment(tiny_cfg(sample_sizes=[200, 300, 400], trials=1))
    again = summarize(list(reversed(report.trials)), tiny_cfg())
    assert again.summary == report.summary


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_cfg(sample_sizes=[400, 200])
    with pytest.raises(ConfigError):
        tiny_cfg(trials=0)
    with pytest.raises(ConfigError):
        tiny_cfg(noise_sd=-1)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})


def test_config_files_and_seed_override(tmp_path):
    cfg = ExperimentConfig.load("configs/desk.toml", env={})
    assert cfg.sample_sizes == (1000, 2000, 5000, 10000, 20000, 50000) and cfg.trials == 5
    assert cfg.noise_sd == 0.1 and cfg.optimizer.eta == 0.05 and cfg.optimizer.max_epochs == 1000
    assert cfg.K_fit == (3, 4) and cfg.activation.bias == 0.5
    assert ExperimentConfig.load("configs/desk.toml", env={"HMOE_SEED": "99"}).master_seed == 99
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"sample_sizes": [10, 20, 30], "trials": 1}))
    assert ExperimentConfig.load(path, env={}).sample_sizes == (10, 20, 30)
    paper = ExperimentConfig.load("configs/paper.toml", env={})
    assert paper.sample_sizes[0] == 10000 and paper.sample_sizes[-1] == 100000 and paper.trials == 10


# ---------------------------------------------------------------------------
# command line


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip().startswith("{") else out)


def test_cli_simulate_fit_voronoi(tmp_path, capsys, truth):
    data = tmp_path / "d.npz"
    code, doc = run_cli(capsys, "simulate", "--n", "300", "--seed", "4", "--out", str(data))
    assert code == 0 and doc["n"] == 300
    fitted = tmp_path / "g.json"
    code, doc = run_cli(capsys, "fit", "--data", str(data), "--K", "3", "--epochs", "20", "--out", str(fitted))
    assert code == 0 and doc["sse"] <= doc["sse_init"]
    truth_path = tmp_path / "t.json"
    truth.to_json(truth_path)
    code, doc = run_cli(capsys, "voronoi", str(fitted), str(truth_path))
    assert code == 0 and doc["loss_l2"] >= 0 and "cells" in doc["assignment"]


def test_cli_identifiability(capsys):
    code, doc = run_cli(capsys, "check-identifiability", "--activation", "identity")
    assert code == 0 and doc["sigma_min"] < 1e-10 and doc["pass"] is False and doc["pde_residual"] < 1e-12


def test_cli_bridge(tmp_path, capsys):
    from gatedhmoe.bridge import AttentionWeights

    path = tmp_path / "w.json"
    AttentionWeights.random(np.random.default_rng(0), 2, 3, 2, 2, "AfterValue").to_json(path)
    code, doc = run_cli(capsys, "bridge-verify", str(path))
    assert code == 0 and doc["pass"] is True


def test_cli_rates_and_exit_codes(tmp_path, capsys, monkeypatch):
    code, _ = run_cli(capsys, "rates", "--config", "configs/smoke.toml", "--out", str(tmp_path / "r"))
    assert code == 0 and (tmp_path / "r" / "results.csv").exists()
    bad = tmp_path / "bad.toml"
    bad.write_text("sample_sizes = [5, 3, 4]\n")
    assert main(["rates", "--config", str(bad)]) == 1
    monkeypatch.setenv("HMOE_SEED", "not-a-number")
    assert main(["rates", "--config", "configs/smoke.toml"]) == 1
    monkeypatch.delenv("HMOE_SEED")

    def broken(*args, **kw):
        raise FitError("non-finite loss or gradient at epoch 0")

    monkeypatch.setattr(harness, "fit", broken)
    assert main(["rates", "--config", "configs/smoke.toml", "--out", str(tmp_path / "x")]) == 2
