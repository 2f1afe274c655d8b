"""
Monte Carlo comparison of extreme expectile estimators.

For every replicate ``m`` a sample is drawn from substream ``m`` of the
configured seed, every estimator is evaluated at ``tau'_n = 1 - p`` for each
``k`` of the grid, and relative errors ``e = xi_hat / xi - 1`` against the
oracle expectile are aggregated into bias, variance and MSE (all x100).

Replicate results land in a fixed ``(M, estimators, k)`` array before any
reduction, so the report does not depend on how many worker processes ran.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .distributions import ModelSpec, PRESETS, SeededStream, sample
from .errors import ConfigError, EstimationError
from .expectile_core import SortedSample, oracle_expectile
from .extreme_expectile import ExtrapolationInputs, laws_extrapolated, qb_extrapolated
from .tail_fit import fit_tail, normalize_method

log = logging.getLogger(__name__)

ESTIMATORS = ("empirical", "laws", "laws-alt", "qb")
METHODS = ("gpml", "moment")

# Hard-coded truth values at tau'_n = 1 - 1/n, keyed by marginal family then n.
TABLE1 = {
    "beta": {150: 0.8571, 300: 0.8814, 500: 0.8968},
    "spl": {150: 4.5284, 300: 4.5939, 500: 4.6372},
    "gev": {150: 1.9523, 300: 2.1020, 500: 2.2000},
}


def default_k_grid(n: int) -> list[int]:
    lo = max(2, math.ceil(0.01 * n))
    hi = min(n - 1, math.floor(0.25 * n))
    return list(range(lo, hi + 1))


@dataclass(frozen=True)
class MCConfig:
    model: ModelSpec
    n: int
    M: int = 1000
    p_target: Optional[float] = None
    k_grid: Optional[tuple[int, ...]] = None
    estimators: tuple[str, ...] = ESTIMATORS
    methods: tuple[str, ...] = METHODS
    seed: int = 0

    def __post_init__(self):
        if self.n < 3:
            raise ConfigError("n must be at least 3")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.p_target is None:
            object.__setattr__(self, "p_target", 1.0 / self.n)
        if not (0 < self.p_target < 1):
            raise ConfigError("p_target must lie in (0, 1)")
        grid = tuple(int(k) for k in (self.k_grid if self.k_grid is not None else default_k_grid(self.n)))
        if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("k_grid must be nonempty and strictly increasing")
        if grid[0] < 2 or grid[-1] > self.n - 1:
            raise ConfigError("k_grid must lie within [2, n-1]")
        object.__setattr__(self, "k_grid", grid)
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {e!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")

    @property
    def rows(self) -> list[tuple[str, str]]:
        """(estimator, method) pairs in report order; empirical has method 'none'."""
        out = []
        if "empirical" in self.estimators:
            out.append(("empirical", "none"))
        for m in self.methods:
            for e in ("laws", "laws-alt", "qb"):
                if e in self.estimators:
                    out.append((e, m))
        return out

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(), "n": self.n, "M": self.M, "p_target": self.p_target,
            "k_grid": list(self.k_grid), "estimators": list(self.estimators),
            "methods": list(self.methods), "seed": self.seed,
        }


def evaluate_replicate(x, rows, k_grid, p) -> np.ndarray:
    """Estimates for one sample: array ``(len(rows), len(k_grid))``, NaN on failure."""
    ss = SortedSample(x)
    out = np.full((len(rows), len(k_grid)), np.nan)
    fits: dict = {}
    emp = ss.expectile(1.0 - p)
    for j, k in enumerate(k_grid):
        inputs = {}
        for r, (est, meth) in enumerate(rows):
            if est == "empirical":
                out[r, j] = emp
                continue
            try:
                if meth not in inputs:
                    key = (normalize_method(meth), k)
                    if key not in fits:
                        fits[key] = fit_tail(ss.x, k, key[0], presorted=True)
                    inputs[meth] = fits[key]
                fit = inputs[meth]
                if est == "qb":
                    out[r, j] = qb_extrapolated(ss.mean, fit, p).value
                else:
                    ext = ExtrapolationInputs.from_sample(ss, k, fit.method, fit=fit)
                    variant = "Direct" if est == "laws" else "Alt"
                    out[r, j] = laws_extrapolated(ext, p, variant, refit_cache=fits).value
            except EstimationError:
                pass
    return out


def _run_block(args):
    config, start, stop = args
    rows = config.rows
    block = np.empty((stop - start, len(rows), len(config.k_grid)))
    for m in range(start, stop):
        x = sample(config.model, config.n, SeededStream(config.seed, m))
        block[m - start] = evaluate_replicate(x, rows, config.k_grid, config.p_target)
    return block


def simulate_estimates(config: MCConfig, workers: int = 1, block_size: int = 25) -> np.ndarray:
    """Raw estimates, shape ``(M, rows, k)``."""
    blocks = [(config, s, min(s + block_size, config.M)) for s in range(0, config.M, block_size)]
    if workers <= 1:
        parts = [_run_block(b) for b in blocks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block, blocks))
    return np.concatenate(parts, axis=0)


@dataclass
class MCReport:
    config: MCConfig
    truth: float
    rows: list[tuple[str, str]]
    relative_bias_x100: np.ndarray
    variance_x100: np.ndarray
    mse_x100: np.ndarray
    failure_count: np.ndarray
    estimates: Optional[np.ndarray] = field(default=None, repr=False)

    METRICS = ("relative_bias_x100", "variance_x100", "mse_x100", "failure_count")

    def cell(self, metric: str, estimator: str, method: str = "none") -> np.ndarray:
        return getattr(self, metric)[self.rows.index((estimator, method))]

    def long_rows(self, model_name: str = "") -> list[tuple]:
        name = model_name or _model_label(self.config.model)
        out = []
        for metric in self.METRICS:
            arr = getattr(self, metric)
            for r, (est, meth) in enumerate(self.rows):
                for j, k in enumerate(self.config.k_grid):
                    v = arr[r, j]
                    out.append((name, self.config.n, est, meth, k, metric,
                                int(v) if metric == "failure_count" else float(v)))
        return out

    def to_csv(self, model_name: str = "") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "n", "estimator", "method", "k", "metric", "value"])
        for row in self.long_rows(model_name):
            w.writerow([*row[:-1], repr(row[-1])])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "config": self.config.to_dict(),
            "truth": self.truth,
            "rows": [list(r) for r in self.rows],
            "k_grid": list(self.config.k_grid),
        }
        for metric in self.METRICS:
            doc[metric] = getattr(self, metric).tolist()
        return json.dumps(doc, indent=1, sort_keys=True)


def _model_label(model: ModelSpec) -> str:
    for name, spec in PRESETS.items():
        if spec == model:
            return name
    return f"{model.marginal.family}-{model.dependence}"


def aggregate(estimates: np.ndarray, truth: float):
    e = estimates / truth - 1.0
    ok = np.isfinite(e)
    count = ok.sum(axis=0)
    fails = e.shape[0] - count
    e0 = np.where(ok, e, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = e0.sum(axis=0) / count
        mse = (e0 * e0).sum(axis=0) / count
        dev = np.where(ok, e - mean, 0.0)
        var = (dev * dev).sum(axis=0) / count
    return mean * 100.0, var * 100.0, mse * 100.0, fails


def run_mc_study(config: MCConfig, workers: int = 1, keep_estimates: bool = False,
                 truth: Optional[float] = None) -> MCReport:
    if truth is None:
        try:
            truth = oracle_expectile(config.model, 1.0 - config.p_target, 1e-10).value
        except Exception as exc:  # pragma: no cover - diagnostics path
            raise EstimationError(f"oracle expectile failed: {exc}") from exc
    est = simulate_estimates(config, workers)
    bias, var, mse, fails = aggregate(est, truth)
    return MCReport(config, truth, config.rows, bias, var, mse, fails,
                    est if keep_estimates else None)


# ---------------------------------------------------------------------------
# Table of true extreme expectiles
# ---------------------------------------------------------------------------

def _chunk_sums(xs_sorted, cs, total, grid):
    """Sum of (x - t)^+ and (t - x)^+ over a sorted chunk, for every t in grid."""
    idx = np.searchsorted(xs_sorted, grid, side="right")
    below_sum = np.where(idx > 0, cs[np.maximum(idx - 1, 0)], 0.0)
    n = xs_sorted.size
    above = (total - below_sum) - (n - idx) * grid
    below = idx * grid - below_sum
    return above, below


def pooled_expectile(model: ModelSpec, tau: float, draws: int, seed: int = 0,
                     chunk: int = 10_000_000, grid_points: int = 801) -> tuple[float, float]:
    """Expectile of a large pooled i.i.d. sample, computed chunk by chunk.

    A pilot chunk locates the root roughly; one pass over all chunks then
    accumulates the first-order condition on a fine grid around it, and the
    root is interpolated inside the bracketing cell.  Returns the value and a
    standard error.
    """
    marg = ModelSpec(model.marginal)
    n_chunks = max(1, math.ceil(draws / chunk))
    sizes = [min(chunk, draws - c * chunk) for c in range(n_chunks)]

    def draw(c):
        return sample(marg, sizes[c], SeededStream(seed, c))

    pilot = SortedSample(draw(0))
    theta0 = pilot.expectile(tau)
    # influence-function standard error of the pilot estimate
    x = pilot.x
    psi = tau * np.clip(x - theta0, 0, None) - (1 - tau) * np.clip(theta0 - x, 0, None)
    slope = tau * np.mean(x > theta0) + (1 - tau) * np.mean(x <= theta0)
    se_pilot = float(np.std(psi) / slope / math.sqrt(x.size))
    half = 10.0 * se_pilot + 1e-12
    grid = np.linspace(theta0 - half, theta0 + half, grid_points)

    above = np.zeros(grid_points)
    below = np.zeros(grid_points)
    for c in range(n_chunks):
        ss = pilot if c == 0 else SortedSample(draw(c))
        a, b = _chunk_sums(ss.x, ss.cumsum, ss.total, grid)
        above += a
        below += b
    g = tau * above - (1 - tau) * below
    j = int(np.argmax(g <= 0))
    if j == 0 or g[-1] > 0:
        raise EstimationError("pooled expectile fell outside the pilot bracket")
    t = g[j - 1] / (g[j - 1] - g[j])
    value = float(grid[j - 1] + t * (grid[j] - grid[j - 1]))
    return value, se_pilot * math.sqrt(sizes[0] / draws)


@dataclass(frozen=True)
class Table1Check:
    model: str
    n: int
    table_value: float
    oracle_value: float
    mc_value: Optional[float]
    mc_se: Optional[float]
    passed: bool


def table1_check(model, n: int, tol: float = 5e-4, mc_draws: Optional[int] = 10**8,
                 seed: int = 0) -> Table1Check:
    """Compare oracle (and optionally a pooled Monte Carlo) with the tabulated truth."""
    spec = PRESETS[model] if isinstance(model, str) else model
    name = model if isinstance(model, str) else _model_label(spec)
    fam = spec.marginal.family
    if fam not in TABLE1 or n not in TABLE1[fam]:
        raise ConfigError(f"no tabulated truth for {name!r} at n={n}")
    table = TABLE1[fam][n]
    tau = 1.0 - 1.0 / n
    oracle = oracle_expectile(spec, tau, 1e-7).value
    ok = abs(oracle - table) <= tol
    mc = se = None
    if mc_draws:
        mc, se = pooled_expectile(spec, tau, mc_draws, seed)
        ok = ok and abs(mc - table) <= tol
    return Table1Check(name, n, table, oracle, mc, se, bool(ok))
