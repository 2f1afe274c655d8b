import csv
import io
import json
import warnings

import numpy as np
import pytest
from scipy import integrate

from shorttail.backtest import (
    EXPECTILE_FORECASTERS, QUANTILE_FORECASTERS, RollingScheme, default_level_grid,
    expectile_score, quantile_score, rank_forecasters, run_expectile_backtest,
    run_quantile_backtest, stationarity_warning, window_forecasts,
)
from shorttail.distributions import PRESETS, SeededStream, pdf, quantile, sample
from shorttail.errors import ConfigError, DomainError
from shorttail.expectile_core import SortedSample, oracle_expectile
from shorttail.extreme_expectile import ExtrapolationInputs, expectile_level_for_quantile, laws_extrapolated
from shorttail.tail_fit import fit_tail


def test_expectile_score_examples():
    assert expectile_score(1.5, 1.5, 0.9) == 0.0
    assert expectile_score(0.0, 2.0, 0.5) == 2.0
    assert expectile_score(1.0, 0.0, 0.9) == pytest.approx(0.1)
    with pytest.raises(DomainError):
        expectile_score(0.0, 1.0, 1.0)


def test_quantile_score_examples():
    assert quantile_score(3.0, 3.0, 0.99) == 0.0
    assert quantile_score(0.0, 1.0, 0.99) == pytest.approx(0.99)
    assert quantile_score(1.0, 0.0, 0.99) == pytest.approx(0.01)
    with pytest.raises(DomainError):
        quantile_score(0.0, 1.0, 0.0)


def test_scores_nonnegative_and_zero_iff_perfect():
    rng = np.random.default_rng(0)
    xi, x = rng.normal(size=200), rng.normal(size=200)
    s = expectile_score(xi, x, 0.97)
    assert np.all(s >= 0) and np.all(s[xi != x] > 0)
    assert np.all(quantile_score(xi, x, 0.97) >= 0)


def test_default_level_grid():
    g = default_level_grid()
    assert g.size == 101 and g[0] == 0.99 and g[-1] == pytest.approx(0.9999)


def test_rolling_scheme_counts():
    s = RollingScheme(np.arange(403.0), 300)
    assert s.T == 103
    assert np.array_equal(s.window(0), np.arange(300.0))
    assert s.realized[0] == 300 and s.realized[-1] == 402
    assert RollingScheme(np.arange(403.0), 300, step=10).T == 11
    with pytest.raises(ConfigError):
        RollingScheme(np.arange(300.0), 300)
    with pytest.raises(DomainError):
        RollingScheme([1.0, np.nan, 2.0, 3.0, 4.0], 3)


def test_constant_series_scores_zero():
    scheme = RollingScheme(np.full(40, 2.5), 30)
    for run in (run_expectile_backtest, run_quantile_backtest):
        rep = run(scheme, [0.99, 0.995], k_grid=[3, 5])
        assert np.all(rep.avg_loss == 0)
        assert np.all(rep.forecasts == 2.5)


def test_empirical_forecaster_exact_when_next_value_is_window_expectile():
    tau, n = 0.995, 50
    x = list(np.random.default_rng(1).exponential(size=n))
    for _ in range(20):
        x.append(SortedSample(x[-n:]).expectile(tau))
    rep = run_expectile_backtest(RollingScheme(np.array(x), n), [tau], ["Empirical"], [3])
    assert rep.avg_loss[0, 0] == 0.0


@pytest.fixture(scope="module")
def ar1_series():
    return sample(PRESETS["beta-ar1"], 403, SeededStream(12))


@pytest.fixture(scope="module")
def reports(ar1_series):
    scheme = RollingScheme(ar1_series, 300)
    levels = [0.99, 0.995, 0.999]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        e = run_expectile_backtest(scheme, levels, k_grid=[5, 15, 40, 75], keep_loss_by_k=True)
        q = run_quantile_backtest(scheme, levels, k_grid=[5, 15, 40, 75], keep_loss_by_k=True)
    return e, q


def test_pipeline_shapes(reports):
    e, q = reports
    assert e.T == q.T == 103
    assert e.forecasters == list(EXPECTILE_FORECASTERS) and len(e.forecasters) == 7
    assert q.forecasters == list(QUANTILE_FORECASTERS) and len(q.forecasters) == 8
    assert e.forecasts.shape == (103, 7, 3) and q.forecasts.shape == (103, 8, 3)
    assert np.all(e.avg_loss >= 0) and np.all(q.avg_loss >= 0)


def test_optimal_k_minimises_average_loss(reports):
    for rep in reports:
        best = rep.loss_by_k.min(axis=1)
        assert np.array_equal(best, rep.avg_loss)
        for i, name in enumerate(rep.forecasters):
            if name == "Empirical":
                assert np.all(rep.opt_k[i] == -1)
            else:
                j = np.argmin(rep.loss_by_k[i], axis=0)
                assert np.array_equal(rep.opt_k[i], np.asarray(rep.k_grid)[j])


def test_rescoring_forecasts_reproduces_average(reports):
    e, q = reports
    for i in range(7):
        for j, lev in enumerate(e.level_grid):
            assert np.mean(expectile_score(e.forecasts[:, i, j], e.realized, lev)) == pytest.approx(e.avg_loss[i, j])
    for i in range(8):
        for j, lev in enumerate(q.level_grid):
            assert np.mean(quantile_score(q.forecasts[:, i, j], q.realized, lev)) == pytest.approx(q.avg_loss[i, j])


def test_gp_quantile_at_intermediate_level_is_threshold(ar1_series):
    n, k = 300, 15
    fc, bad = window_forecasts(ar1_series[:n], [1 - k / n], "quantile", ["GP-quantile-Moment"], [k])
    assert not bad.any()
    assert fc[0, 0, 0] == pytest.approx(np.sort(ar1_series[:n])[n - k - 1], abs=1e-12)


def test_level_substitution_in_quantile_mode(ar1_series):
    x = ar1_series[:300]
    alpha, k = 0.995, 40
    fc, bad = window_forecasts(x, [alpha], "quantile", ["LAWS-Moment"], [k])
    fit = fit_tail(x, k, "Moment")
    pi = expectile_level_for_quantile(SortedSample(x).mean, fit, 1 - alpha).pi_hat
    direct = laws_extrapolated(ExtrapolationInputs.from_sample(x, k, "Moment"), pi).value
    assert not bad.any() and fc[0, 0, 0] == pytest.approx(direct, rel=1e-12)


def test_failures_fall_back_to_empirical():
    x = np.r_[np.zeros(40), np.linspace(1, 2, 10)]
    levels = [0.99, 0.999]
    fc, bad = window_forecasts(x, levels, "expectile", ["QB-GPML"], [3])
    ss = SortedSample(x)
    for j, lev in enumerate(levels):
        if bad[0, 0, j]:
            assert fc[0, 0, j] == ss.expectile(lev)


def test_ranking_and_ties(reports):
    e, _ = reports
    ranked = rank_forecasters(e, 0.995)
    j = e.level_index(0.995)
    losses = [e.avg_loss[e.forecasters.index(f), j] for f in ranked]
    assert losses == sorted(losses)
    tied = run_expectile_backtest(RollingScheme(np.full(12, 1.0), 10), [0.99], k_grid=[3])
    assert rank_forecasters(tied, 0.99) == list(EXPECTILE_FORECASTERS)
    with pytest.raises(DomainError):
        rank_forecasters(e, 0.5)


def test_injected_forecasters_and_validation(ar1_series):
    scheme = RollingScheme(ar1_series, 300)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rep = run_quantile_backtest(scheme, [0.99], ["GP-quantile-GPML"], [10],
                                    extra={"low": np.zeros((103, 1)), "high": np.full((103, 1), 5.0)})
        assert rep.forecasters == ["GP-quantile-GPML", "low", "high"]
        with pytest.raises(ConfigError):
            run_quantile_backtest(scheme, [0.99], ["GP-quantile-GPML"], [10], extra={"bad": np.zeros(3)})
        with pytest.raises(ConfigError):
            run_expectile_backtest(scheme, [], k_grid=[10])
        with pytest.raises(ConfigError):
            run_expectile_backtest(scheme, [0.99], ["GP-quantile-GPML"], [10])
        with pytest.raises(ConfigError):
            run_expectile_backtest(scheme, [0.99], k_grid=[10, 5])


def test_worker_count_and_exports(ar1_series):
    scheme = RollingScheme(ar1_series[:340], 300)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = run_expectile_backtest(scheme, [0.99, 0.999], k_grid=[5, 20], workers=1)
        b = run_expectile_backtest(scheme, [0.99, 0.999], k_grid=[5, 20], workers=2, block_size=7)
    assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()
    rows = list(csv.reader(io.StringIO(a.to_csv())))
    assert rows[0] == ["forecaster", "level", "avg_loss", "opt_k", "fallback_count"]
    assert len(rows) == 1 + 7 * 2
    assert set(json.loads(a.to_json())["ranking"]) == {repr(0.99), repr(0.999)}


def test_stationarity_warning():
    with pytest.warns(RuntimeWarning):
        stationarity_warning(np.r_[np.zeros(100), np.ones(100)] + np.linspace(0, 0.01, 200))
    rng = np.random.default_rng(3)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        stationarity_warning(rng.normal(size=400))


@pytest.mark.parametrize("name", ["beta-iid", "spl-iid", "gev-iid"])
def test_expected_expectile_score_minimised_at_true_expectile(name):
    m = PRESETS[name]
    tau = 0.99
    xi = oracle_expectile(m, tau, 1e-12).value
    lo, hi = m.marginal.support
    lo = lo if np.isfinite(lo) else float(quantile(m, 1e-15))

    def risk(c):
        f = lambda u: abs(tau - (u - c <= 0)) * (u - c) ** 2 * pdf(m, u)
        return integrate.quad(f, lo, hi, points=[c] if lo < c < hi else None, limit=200,
                              epsabs=1e-14, epsrel=1e-12)[0]

    width = 0.05 * (hi - xi)
    grid = xi + np.linspace(-width, width, 21)
    risks = [risk(c) for c in grid]
    assert int(np.argmin(risks)) == 10


def test_oracle_quantile_beats_shifts_with_enough_cases():
    m = PRESETS["spl-iid"]
    x = sample(m, 200_000, SeededStream(31))
    q = float(quantile(m, 0.99))
    scores = {d: np.mean(quantile_score(q + d, x, 0.99)) for d in (-0.05, 0.0, 0.05)}
    assert scores[0.0] < scores[-0.05] and scores[0.0] < scores[0.05]
