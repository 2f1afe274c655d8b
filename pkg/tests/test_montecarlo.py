import csv
import io
import json

import numpy as np
import pytest

from shorttail.distributions import PRESETS
from shorttail.errors import ConfigError
from shorttail.expectile_core import oracle_expectile
from shorttail.montecarlo import (
    TABLE1, MCConfig, aggregate, default_k_grid, pooled_expectile, run_mc_study, table1_check,
)

BETA = PRESETS["beta-iid"]


def test_default_grid_and_validation():
    assert default_k_grid(300) == list(range(3, 76))
    cfg = MCConfig(BETA, 300, M=5)
    assert cfg.p_target == pytest.approx(1 / 300) and cfg.k_grid == tuple(range(3, 76))
    for bad in (dict(M=0), dict(k_grid=(5, 4)), dict(k_grid=(1, 2)), dict(k_grid=(10, 300)),
                dict(estimators=("median",)), dict(methods=("hill",)), dict(p_target=1.5)):
        with pytest.raises(ConfigError):
            MCConfig(BETA, 300, **bad)


def test_report_rows_order():
    cfg = MCConfig(BETA, 100, M=1, k_grid=(5,))
    assert cfg.rows == [("empirical", "none"), ("laws", "gpml"), ("laws-alt", "gpml"), ("qb", "gpml"),
                        ("laws", "moment"), ("laws-alt", "moment"), ("qb", "moment")]


@pytest.fixture(scope="module")
def small_report():
    cfg = MCConfig(PRESETS["gev-iid"], 150, M=12, k_grid=(5, 10, 20, 37), seed=3)
    return run_mc_study(cfg, keep_estimates=True)


def test_empirical_cell_ignores_k(small_report):
    for metric in ("relative_bias_x100", "variance_x100", "mse_x100"):
        row = small_report.cell(metric, "empirical")
        assert np.all(row == row[0])


def test_report_invariants(small_report):
    assert np.all(small_report.mse_x100[np.isfinite(small_report.mse_x100)]
                  >= small_report.variance_x100[np.isfinite(small_report.mse_x100)] - 1e-9)
    succ = np.isfinite(small_report.estimates).sum(axis=0)
    assert np.all(small_report.failure_count + succ == 12)
    assert small_report.truth == oracle_expectile(PRESETS["gev-iid"], 1 - 1 / 150, 1e-10).value


def test_aggregate_against_direct_formulas():
    est = np.array([[[1.1, np.nan]], [[0.9, 1.2]], [[1.3, 1.0]]])
    bias, var, mse, fails = aggregate(est, 1.0)
    e = np.array([0.1, -0.1, 0.3])
    assert bias[0, 0] == pytest.approx(100 * e.mean())
    assert var[0, 0] == pytest.approx(100 * e.var())
    assert mse[0, 0] == pytest.approx(100 * np.mean(e ** 2))
    assert fails.tolist() == [[0, 1]]
    assert mse[0, 1] == pytest.approx(100 * (0.2 ** 2 + 0.0) / 2)


def test_single_replicate():
    rep = run_mc_study(MCConfig(BETA, 100, M=1, k_grid=(5, 10), estimators=("empirical", "qb"), seed=1))
    ok = np.isfinite(rep.mse_x100)
    assert np.all(rep.variance_x100[ok] == 0)
    assert np.allclose(rep.mse_x100[ok], rep.relative_bias_x100[ok] ** 2 / 100)


def test_worker_count_does_not_change_results():
    cfg = MCConfig(PRESETS["spl-ar1"], 120, M=30, k_grid=(4, 8, 16), seed=9)
    a = run_mc_study(cfg, workers=1)
    b = run_mc_study(cfg, workers=3)
    assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()


def test_exports(small_report):
    rows = list(csv.reader(io.StringIO(small_report.to_csv("gev-iid"))))
    assert rows[0] == ["model", "n", "estimator", "method", "k", "metric", "value"]
    assert len(rows) - 1 == 7 * 4 * 4
    doc = json.loads(small_report.to_json())
    assert doc["truth"] == small_report.truth and len(doc["mse_x100"]) == 7


def test_empirical_underestimates_beta_truth():
    cfg = MCConfig(BETA, 300, M=1000, k_grid=(3,), estimators=("empirical",), seed=77)
    rep = run_mc_study(cfg)
    assert rep.truth == pytest.approx(0.8814, abs=5e-4)
    assert rep.cell("relative_bias_x100", "empirical")[0] < 0


def test_table_oracle_all_cells_and_shared_truth():
    for fam, by_n in TABLE1.items():
        for n, value in by_n.items():
            iid = table1_check(f"{fam}-iid", n, mc_draws=None)
            ar1 = table1_check(f"{fam}-ar1", n, mc_draws=None)
            assert iid.passed and ar1.passed
            assert iid.oracle_value == ar1.oracle_value
            assert iid.table_value == value
    with pytest.raises(ConfigError):
        table1_check("beta-iid", 1000, mc_draws=None)


def test_pooled_expectile_agrees_with_oracle():
    m = PRESETS["gev-iid"]
    value, se = pooled_expectile(m, 0.99, 2_000_000, seed=4, chunk=500_000)
    assert abs(value - oracle_expectile(m, 0.99, 1e-10).value) < 4 * se


@pytest.mark.slow
def test_table_with_full_pooled_monte_carlo():
    res = table1_check("spl-iid", 500, mc_draws=10**8)
    assert res.passed and abs(res.mc_value - 4.6372) < 5e-4
