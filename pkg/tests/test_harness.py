import json
import warnings

import numpy as np
import pytest

from srot.bounds import marginal_gap_asymptote
from srot.harness import (
    DEFAULTS,
    EXPERIMENTS,
    ExperimentSpec,
    epsilon_grid,
    loglog_slope,
    measure_kc,
    run_experiment,
    worker_count,
)
from srot.core import generate_instance


def spec(exp, seeds=(7,), **params):
    return ExperimentSpec(exp, seeds=seeds, params=params)


def test_spec_validation():
    with pytest.raises(ValueError):
        ExperimentSpec("figure-1")
    with pytest.raises(ValueError):
        ExperimentSpec("marginal-gap", params={"nn": 3})
    with pytest.raises(ValueError):
        ExperimentSpec("marginal-gap", seeds=())
    assert set(EXPERIMENTS) == {
        "marginal-gap", "ot-gap", "iteration-bounds", "sinkhorn-compare", "unregularized-bound",
    }


def test_protocol_defaults():
    d = DEFAULTS["marginal-gap"]
    assert (d["n"], d["cost_lo"], d["cost_hi"], d["weight_lo"], d["weight_hi"]) == (50, 1, 10, 1, 5)
    assert (d["tau"], d["eta"], d["iterations"], d["stride"]) == (1e6, 1e-2, 2000, 2)
    d = DEFAULTS["iteration-bounds"]
    assert (d["n"], d["cost_hi"], d["weight_hi"], d["taus"], d["grid"]) == (100, 100, 10, [1.0, 10.0, 100.0], 20)
    d = DEFAULTS["sinkhorn-compare"]
    assert (d["n"], d["eta"], d["tau"], d["tau1"], d["tau2"], d["iterations"]) == (500, 0.1, 0.1, 0.1, 0.1, 100)


def test_off_protocol_parameters_warn():
    with pytest.warns(UserWarning, match="protocol"):
        run_experiment(spec("marginal-gap", n=10, iterations=20))


def test_epsilon_grid_is_inclusive():
    g = epsilon_grid(1.0, 0.05, 20)
    assert len(g) == 20 and g[0] == 1.0 and g[-1] == pytest.approx(0.05)
    assert np.allclose(np.diff(g), -0.05)


def test_loglog_slope_of_power_law():
    x = np.array([1.0, 10, 100, 1000])
    assert loglog_slope(x, 3 / x) == pytest.approx(-1.0)


def test_worker_count(monkeypatch):
    monkeypatch.setenv("SROT_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("SROT_THREADS", "0")
    with pytest.raises(ValueError):
        worker_count()
    monkeypatch.delenv("SROT_THREADS")
    assert 1 <= worker_count() <= 4


def test_marginal_gap_series_shape():
    res = run_experiment(spec("marginal-gap"))
    s = res.series["gap"]
    ks = s.column("k")
    assert len(s.rows) == 1000 and ks[0] == 2 and ks[-1] == 2000
    assert np.all(ks % 2 == 0)
    assert res.bound_violations == 0
    asym = s.column("asymptote")[0]
    assert np.all(s.column("bound") >= asym)
    # the asymptote shrinks in proportion to 1/tau
    assert res.summary["seeds"]["7"]["asymptote"] == pytest.approx(
        marginal_gap_asymptote(1e6, 1e-2, res.summary["seeds"]["7"]["U"])
    )


def test_marginal_gap_is_certified_across_seeds():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run_experiment(spec("marginal-gap", seeds=tuple(range(10)), iterations=400))
    assert res.bound_violations == 0


def test_ot_gap_asymptote_drops_with_larger_tau_and_smaller_eta():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base = run_experiment(spec("ot-gap", n=15, iterations=200))
        tight = run_experiment(spec("ot-gap", n=15, iterations=200, tau=1e8, eta=1e-3))
    assert tight.summary["seeds"]["7"]["asymptote"] < base.summary["seeds"]["7"]["asymptote"]
    assert base.bound_violations == 0


def test_measure_kc_reports_first_even_hit():
    p = generate_instance(10, seed=1)
    kc = measure_kc(p, 1.0, 0.1, 0.0, 1e9, 100)
    assert kc == 2
    assert measure_kc(p, 1.0, 0.1, -1e9, 1.0, 50) is None


def test_iteration_bounds_small_grid_and_repeats():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run_experiment(
            spec("iteration-bounds", n=12, taus=[1.0], grid=3, repeats=2, reference_max_iterations=5000)
        )
    assert set(res.series) == {"cells", "repeat_cells", "repeat_stats"}
    cells = res.series["cells"]
    kf = cells.column("k_f")
    assert np.all(np.diff(kf) > 0)  # epsilon decreases along the grid
    assert res.bound_violations == 0 and res.summary["censored"] == 0
    assert len(res.series["repeat_stats"].rows) == 3


def test_sinkhorn_compare_traces():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run_experiment(spec("sinkhorn-compare", n=40, iterations=40))
    s = res.series["traces"]
    assert {r[1] for r in s.rows} == {"sinkhorn", "sr-sinkhorn", "uot-sinkhorn"}
    sk = [r for r in s.rows if r[1] == "sinkhorn" and r[3] == "v"]
    assert sk[-1][5] < sk[0][5]  # row gap after column updates decreases


def test_unregularized_bound_small():
    res = run_experiment(spec("unregularized-bound", n=6, taus=[1.0, 10.0, 100.0], reference_max_iterations=3000))
    gaps = res.series["gap"].column("empirical")
    assert res.bound_violations == 0
    assert np.all(np.diff(gaps) < 0)


def test_written_files(tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run_experiment(ExperimentSpec("marginal-gap", (7,), {"n": 8, "iterations": 10}, str(tmp_path)))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["marginal-gap_gap.csv", "marginal-gap_schema.json", "marginal-gap_summary.json"]
    schema = json.loads((tmp_path / "marginal-gap_schema.json").read_text())
    header = (tmp_path / "marginal-gap_gap.csv").read_text().splitlines()[0].split(",")
    assert header == schema["gap"]["columns"]
    assert set(schema["gap"]["descriptions"]) == set(header)
    summary = json.loads((tmp_path / "marginal-gap_summary.json").read_text())
    assert summary["provenance"]["seeds"] == [7] and "version" in summary["provenance"]
    assert "bound_violations" in summary["summary"]
