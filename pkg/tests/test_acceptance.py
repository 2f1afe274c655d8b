"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (collected again in the terminal
summary) and then asserts the criterion at its stated tolerance.
"""

import json
import time
import warnings

import numpy as np
import pytest

from shorttail.backtest import (
    EXPECTILE_FORECASTERS, QUANTILE_FORECASTERS, RollingScheme, run_expectile_backtest,
    run_quantile_backtest,
)
from shorttail.cli import DEFAULTS, main
from shorttail.distributions import PRESETS, SeededStream, ShortPowerLaw, quantile, sample, survival
from shorttail.expectile_core import (
    SortedSample, empirical_E_survival, empirical_expectile, oracle_expectile, oracle_scale,
)
from shorttail.extreme_expectile import asymptotic_variance_iid, pi_level
from shorttail.montecarlo import MCConfig, run_mc_study
from shorttail.tail_fit import endpoint, extreme_quantile, fit_tail

TAUS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99)


def slope_bisection_expectile(x, tau):
    """Grid minimisation of sum eta_tau(x - theta), refined on the loss slope."""
    lo, hi = x.min() - 1.0, x.max() + 1.0
    while hi - lo > 1e-12 * max(1.0, abs(lo)):
        grid = np.linspace(lo, hi, 101)
        r = x[None, :] - grid[:, None]
        slope = -(np.abs(tau - (r <= 0)) * r).sum(axis=1)
        i = int(np.argmax(slope >= 0))
        if slope[i] == 0:
            return grid[i]
        lo, hi = grid[i - 1], grid[i]
    return 0.5 * (lo + hi)


def small_samples():
    rng = np.random.default_rng(20240)
    for _ in range(200):
        n = int(rng.integers(2, 51))
        kind = rng.integers(3)
        if kind == 0:
            x = rng.normal(size=n)
        elif kind == 1:
            x = rng.beta(3, 2.5, size=n)
        else:
            x = rng.integers(0, 5, size=n).astype(float)   # ties
        yield x


def test_criterion_01_true_expectile_table(verdict):
    frozen = {
        "beta-iid": (0.8571, 0.8814, 0.8968),
        "spl-iid": (4.5284, 4.5939, 4.6372),
        "gev-iid": (1.9523, 2.1020, 2.2000),
    }
    t0 = time.perf_counter()
    worst = 0.0
    for name, values in frozen.items():
        for n, table in zip((150, 300, 500), values):
            worst = max(worst, abs(oracle_expectile(PRESETS[name], 1 - 1 / n, 1e-10).value - table))
    elapsed = time.perf_counter() - t0
    ok = worst <= 5e-4 and elapsed < 10
    verdict(1, ok, f"max |oracle - table| = {worst:.2e} (tol 5e-4), {elapsed:.2f} s (limit 10 s)")
    assert ok


def test_criterion_02_solver_matches_brute_force(verdict):
    worst, mean_exact = 0.0, True
    for x in small_samples():
        for tau in TAUS:
            got = empirical_expectile(x, tau).value
            if tau == 0.5:
                mean_exact &= got == np.mean(x)
            worst = max(worst, abs(got - slope_bisection_expectile(x, tau)))
    ok = worst <= 1e-9 and mean_exact
    verdict(2, ok, f"max |solver - brute force| = {worst:.1e} (tol 1e-9), tau=1/2 equals mean: {mean_exact}")
    assert ok


def test_criterion_03_duality(verdict):
    worst = 0.0
    for x in small_samples():
        for tau in TAUS:
            xi = empirical_expectile(x, tau).value
            worst = max(worst, abs(empirical_E_survival(x, xi) - (1 - tau)))
    ok = worst <= 1e-10
    verdict(3, ok, f"max |Ebar_n(xi) - (1 - tau)| = {worst:.1e} (tol 1e-10) on 2000 cases")
    assert ok


def test_criterion_04_tail_fit_consistency(verdict):
    t0 = time.perf_counter()
    sigma, gamma, k = 2.0, -0.4, 5000
    hits_gpml = 0
    for r in range(100):
        u = SeededStream(4, r).generator().uniform(size=k)
        y = sigma * np.expm1(-gamma * np.log1p(-u)) / gamma
        # a zero threshold below all k exceedances
        fit = fit_tail(np.concatenate([[0.0], y]), k, "gpml")
        hits_gpml += abs(fit.gamma_hat - gamma) < 0.03
    spl = PRESETS["spl-iid"]
    hits_mom = sum(abs(fit_tail(sample(spl, 100_000, SeededStream(44, r)), 2000, "moment").gamma_hat + 1 / 3) < 0.05
                   for r in range(100))
    elapsed = time.perf_counter() - t0
    ok = hits_gpml >= 95 and hits_mom >= 90 and elapsed < 120
    verdict(4, ok, f"GPML {hits_gpml}/100 (need 95), Moment {hits_mom}/100 (need 90), {elapsed:.0f} s")
    assert ok


def test_criterion_05_endpoint_and_quantile(verdict):
    spl = PRESETS["spl-iid"]
    p = 1e-4
    q_true = float(quantile(spl, 1 - p))
    counts = {}
    for method in ("moment", "gpml"):
        hits = 0
        for r in range(100):
            fit = fit_tail(sample(spl, 100_000, SeededStream(5, r)), 2000, method)
            hits += abs(endpoint(fit) - 5.0) < 0.05 and abs(float(extreme_quantile(fit, p)) - q_true) < 0.02
        counts[method] = hits
    ok = min(counts.values()) >= 90
    verdict(5, ok, f"endpoint and quantile both within tolerance: Moment {counts['moment']}/100, "
                   f"GPML {counts['gpml']}/100 (need 90)")
    assert ok


def test_criterion_06_intermediate_variance(verdict):
    m = PRESETS["beta-iid"]
    n, k = 10_000, 500
    tau = 1 - k / n
    xi = oracle_expectile(m, tau, 1e-12).value
    fbar = float(survival(m, xi))
    a = oracle_scale(m, xi)
    est = np.array([SortedSample(sample(m, n, SeededStream(6, r))).expectile(tau) for r in range(2000)])
    z = np.sqrt(n * fbar) * (est - xi) / a
    v11 = asymptotic_variance_iid(-0.4)[0, 0]
    ratio = z.var() / v11
    ok = abs(ratio - 1) <= 0.2
    verdict(6, ok, f"var = {z.var():.4f} vs V11 = {v11:.4f}, ratio {ratio:.3f} (within 20%)")
    assert ok


@pytest.fixture(scope="module")
def beta_studies():
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = {name: run_mc_study(MCConfig(PRESETS[name], 300, M=1000, seed=2024))
               for name in ("beta-iid", "beta-ar1")}
    return out, time.perf_counter() - t0


def test_criterion_07_simulation_patterns(verdict, beta_studies):
    studies, elapsed = beta_studies
    ks = np.array(studies["beta-iid"].config.k_grid)
    small = ks <= 0.05 * 300
    neg_bias, qb_best = True, {}
    for name, rep in studies.items():
        for i, (est, _) in enumerate(rep.rows):
            if est in ("empirical", "qb"):
                neg_bias &= bool(np.all(rep.relative_bias_x100[i] < 0))
        extrap = [i for i, (est, _) in enumerate(rep.rows) if est != "empirical"]
        mse = rep.mse_x100[extrap][:, small]
        best = [rep.rows[extrap[j]][0] for j in np.nanargmin(mse, axis=0)]
        qb_best[name] = sum(b == "qb" for b in best)
    iid, ar1 = studies["beta-iid"].variance_x100, studies["beta-ar1"].variance_x100
    ok_cells = np.isfinite(iid) & np.isfinite(ar1)
    share = float(np.mean(ar1[ok_cells] > iid[ok_cells]))
    n_small = int(small.sum())
    a_ok = neg_bias
    b_ok = all(v == n_small for v in qb_best.values())
    c_ok = share >= 0.7
    ok = a_ok and b_ok and c_ok and elapsed < 900
    verdict(7, ok, f"(a) negative bias {a_ok}; (b) QB lowest MSE at k<=15: iid {qb_best['beta-iid']}/{n_small}, "
                   f"AR1 {qb_best['beta-ar1']}/{n_small}; (c) AR1 variance larger in {share:.1%} of cells; "
                   f"{elapsed:.0f} s")
    assert ok


def test_criterion_08_backtest_pipeline(verdict):
    x = sample(PRESETS["beta-ar1"], 403, SeededStream(8))
    scheme = RollingScheme(x, 300)
    levels = [0.99, 0.995, 0.999]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        e = run_expectile_backtest(scheme, levels, k_grid=list(range(3, 76, 4)))
        q = run_quantile_backtest(scheme, levels, k_grid=list(range(3, 76, 4)))
    mech = (scheme.T == 103 and e.forecasters == list(EXPECTILE_FORECASTERS)
            and q.forecasters == list(QUANTILE_FORECASTERS) and len(e.forecasters) == 7
            and len(q.forecasters) == 8 and bool(np.all(e.avg_loss >= 0)) and bool(np.all(q.avg_loss >= 0)))

    # consistency backtest: truth-injected quantile forecaster and its +-0.05 shifts
    spl = PRESETS["spl-iid"]
    series = sample(spl, 800, SeededStream(2024))
    scheme = RollingScheme(series, 300)
    alpha = 0.99
    q_true = float(quantile(spl, alpha))
    extra = {"Oracle": np.full((scheme.T, 1), q_true),
             "Oracle-0.05": np.full((scheme.T, 1), q_true - 0.05),
             "Oracle+0.05": np.full((scheme.T, 1), q_true + 0.05)}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rep = run_quantile_backtest(scheme, [alpha], extra=extra)
    ranking = rep.ranking(alpha)
    losses = dict(zip(rep.forecasters, rep.avg_loss[:, 0]))
    oracle_first = scheme.T == 500 and ranking[0] == "Oracle"
    ok = mech and oracle_first
    verdict(8, ok, f"mechanics {mech} (T=103, 7 and 8 forecasters, losses >= 0); oracle rank "
                   f"{ranking.index('Oracle') + 1} of {len(ranking)} at T={scheme.T} "
                   f"(oracle {losses['Oracle']:.6f}, -0.05 {losses['Oracle-0.05']:.6f}, "
                   f"+0.05 {losses['Oracle+0.05']:.6f}, best {ranking[0]} {losses[ranking[0]]:.6f})")
    assert ok


def test_criterion_09_level_selection(verdict):
    spl = ShortPowerLaw(5.0, 1 / 3, 3.0)
    rel = {}
    for p in (1e-2, 1e-3):
        q = float(quantile(spl, 1 - p))
        pi = pi_level(spl.endpoint, q, spl.mean, spl.evi, p)
        rel[p] = abs(oracle_expectile(spl, 1 - pi, 1e-12).value / q - 1)
    ok = max(rel.values()) <= 0.01
    verdict(9, ok, "relative gap " + ", ".join(f"p={p:g}: {v:.2e}" for p, v in rel.items()) + " (tol 1e-2)")
    assert ok


def _run(argv):
    return main([str(a) for a in argv])


def _rerun_config(manifest, path):
    """Config file reproducing a run from its manifest."""
    doc = json.loads(manifest.read_text())
    command = doc["command"]
    cfg = {k: v for k, v in doc["config"].items() if k in DEFAULTS[command] and k not in ("out", "workers")}
    path.write_text(json.dumps({"schema_version": 1, **cfg}))
    return command


def _strip(manifest):
    doc = json.loads(manifest.read_text())
    doc.pop("wall_clock")
    doc["config"].pop("out", None)
    doc["outputs"] = sorted(doc["outputs"])
    return doc


def test_criterion_10_cli_determinism(verdict, tmp_path, capsys):
    sim = tmp_path / "series.csv"
    assert _run(["simulate", "--model", "spl-iid", "--n", 330, "--seed", 10, "--out", sim]) == 0
    prices = tmp_path / "prices.csv"
    days = np.datetime64("2020-01-05") + np.arange(70)
    prices.write_text("date,close\n" + "".join(f"{d},{100 * np.exp(v):.6f}\n"
                                               for d, v in zip(days, np.sin(np.arange(70) / 5))))
    runs = [
        ["simulate", "--model", "gev-ar1", "--n", 200, "--seed", 3],
        ["fit", "--input", sim, "--k", 30, "--method", "gpml"],
        ["estimate", "--input", sim, "--p", 1e-3, "--auto-k", "--estimator", "qb"],
        ["mc-study", "--model", "beta-iid", "--n", 150, "--M", 8, "--k-min", 5, "--k-max", 9, "--seed", 4],
        ["backtest", "--input", sim, "--n", 300, "--level-grid", "0.99,0.999", "--k-min", 5, "--k-max", 12],
        ["table1", "--model", "gev-iid", "--n", 300, "--mc-draws", 0],
        ["weekly-returns", "--input", prices],
    ]
    mismatches = []
    for i, argv in enumerate(runs):
        first, second = tmp_path / f"a{i}", tmp_path / f"b{i}"
        extra_a = ["--workers", 1] if argv[0] in ("mc-study", "backtest") else []
        extra_b = ["--workers", 2] if argv[0] in ("mc-study", "backtest") else []
        assert _run(argv + extra_a + ["--out", first]) == 0
        cfg = tmp_path / f"cfg{i}.json"
        command = _rerun_config(first / "manifest.json", cfg)
        assert _run([command, "--config", cfg, "--out", second] + extra_b) == 0
        a_files = sorted(p.name for p in first.iterdir())
        if a_files != sorted(p.name for p in second.iterdir()):
            mismatches.append(f"{argv[0]}: file sets differ")
            continue
        for name in a_files:
            if name == "manifest.json":
                if _strip(first / name) != _strip(second / name):
                    mismatches.append(f"{argv[0]}: manifest")
            elif (first / name).read_bytes() != (second / name).read_bytes():
                mismatches.append(f"{argv[0]}: {name}")
    capsys.readouterr()
    ok = not mismatches
    verdict(10, ok, f"{len(runs)} commands rerun from their manifests (workers 1 vs 2 where used); "
                    f"mismatches: {mismatches or 'none'}")
    assert ok
