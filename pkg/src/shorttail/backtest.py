"""
Rolling-window forecast verification with consistent scoring functions.

Each window of ``n`` consecutive losses forecasts the next observation.  For
every forecaster, ``k`` and level the point forecast is scored against the
realised value; average scores over the ``T`` cases are then minimised over
``k`` (on the average, never per window) and forecasters are ranked by the
resulting realised loss, lower being better.

Expectile forecasters are scored with ``eta_tau(x - xi)``, quantile
forecasters with the check loss ``rho_alpha(x - q)``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, DomainError, EstimationError
from .expectile_core import SortedSample, asymmetric_squared_loss
from .extreme_expectile import ExtrapolationInputs, laws_kernel, laws_scale, qb_kernel
from .tail_fit import fit_tail, gp_excess

log = logging.getLogger(__name__)

EXPECTILE_FORECASTERS = (
    "Empirical",
    "LAWS-GPML", "LAWS-Alt-GPML", "QB-GPML",
    "LAWS-Moment", "LAWS-Alt-Moment", "QB-Moment",
)
QUANTILE_FORECASTERS = (
    "GP-quantile-GPML", "LAWS-GPML", "LAWS-Alt-GPML", "QB-GPML",
    "GP-quantile-Moment", "LAWS-Moment", "LAWS-Alt-Moment", "QB-Moment",
)
_SCORE_CHUNK = 64    # fixed reduction blocks: sums never depend on how cases were distributed
_KINDS = {"LAWS": "laws", "LAWS-Alt": "laws-alt", "QB": "qb", "GP-quantile": "gpq"}


def default_level_grid() -> np.ndarray:
    return np.linspace(0.99, 0.9999, 101)


def _parse(name: str):
    if name == "Empirical":
        return "empirical", None
    kind, _, method = name.rpartition("-")
    if kind not in _KINDS or method not in ("GPML", "Moment"):
        raise ConfigError(f"unknown forecaster {name!r}")
    return _KINDS[kind], method


# ---------------------------------------------------------------------------
# Scoring functions
# ---------------------------------------------------------------------------

def expectile_score(xi, x, tau):
    """``|tau - 1{x - xi <= 0}| (x - xi)^2``."""
    if not (0.0 < tau < 1.0):
        raise DomainError("tau must lie in (0, 1)")
    out = asymmetric_squared_loss(np.asarray(x, dtype=float) - xi, tau)
    return float(out) if np.ndim(out) == 0 else out


def quantile_score(q, x, alpha):
    """``|alpha - 1{x - q <= 0}| |x - q|``."""
    if not (0.0 < alpha < 1.0):
        raise DomainError("alpha must lie in (0, 1)")
    r = np.asarray(x, dtype=float) - q
    out = np.abs(alpha - (r <= 0)) * np.abs(r)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Rolling scheme
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RollingScheme:
    series: np.ndarray
    n: int
    step: int = 1

    def __post_init__(self):
        s = np.asarray(self.series, dtype=float).ravel()
        if not np.all(np.isfinite(s)):
            raise DomainError("series contains NaN or infinite values")
        object.__setattr__(self, "series", s)
        if self.n < 3:
            raise ConfigError("window length must be at least 3")
        if self.step < 1:
            raise ConfigError("step must be >= 1")
        if s.size - self.n < 1:
            raise ConfigError(f"series of length {s.size} leaves no forecast case for n={self.n}")

    @property
    def starts(self) -> np.ndarray:
        return np.arange(0, self.series.size - self.n, self.step)

    @property
    def T(self) -> int:
        return int(self.starts.size)

    def window(self, t: int) -> np.ndarray:
        s = self.starts[t]
        return self.series[s:s + self.n]

    @property
    def realized(self) -> np.ndarray:
        return self.series[self.starts + self.n]


def stationarity_warning(series, threshold: float = 3.0) -> Optional[float]:
    """Welch statistic comparing the two halves; warns when it exceeds ``threshold``."""
    s = np.asarray(series, dtype=float)
    a, b = s[: s.size // 2], s[s.size // 2:]
    if a.size < 2 or b.size < 2:
        return None
    se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    if se == 0:
        return 0.0
    stat = (b.mean() - a.mean()) / se
    if abs(stat) > threshold:
        warnings.warn(f"series mean differs between halves (Welch statistic {stat:.2f}); "
                      "windows may not be stationary", RuntimeWarning, stacklevel=3)
    return float(stat)


# ---------------------------------------------------------------------------
# Forecasts on one window
# ---------------------------------------------------------------------------

def empirical_quantile(sorted_x: np.ndarray, alpha) -> np.ndarray:
    return np.quantile(sorted_x, alpha)


def _tail_pieces(fit, mean):
    """(x_star, spread) for the quantile-based route, or None when unavailable."""
    if fit.gamma_hat >= 0:
        return None
    x_star = fit.threshold - fit.scale_hat / fit.gamma_hat
    if not x_star > mean:
        return None
    return x_star, (x_star - mean) * (1.0 - 1.0 / fit.gamma_hat)


def _gp_quantile(fit, p):
    return fit.threshold + fit.scale_hat * gp_excess(fit.k / (fit.n * p), fit.gamma_hat)


def window_forecasts(x, levels, mode: str, forecasters: Sequence[str], k_grid: Sequence[int]):
    """Forecasts ``(F, K, L)`` on one window, with a mask of entries that fell back.

    Failed entries are replaced by the window's empirical expectile (expectile
    mode) or empirical quantile (quantile mode) at the same level.
    """
    ss = SortedSample(x)
    levels = np.asarray(levels, dtype=float)
    p = 1.0 - levels
    L, K = levels.size, len(k_grid)
    if mode == "expectile":
        fallback = np.array([ss.expectile(t) for t in levels])
    else:
        fallback = empirical_quantile(ss.x, levels)
    out = np.full((len(forecasters), K, L), np.nan)
    parsed = [_parse(f) for f in forecasters]
    fits: dict = {}

    for j, k in enumerate(k_grid):
        for i, (kind, method) in enumerate(parsed):
            if kind == "empirical":
                out[i, j] = fallback
                continue
            try:
                key = (method, int(k))
                if key not in fits:
                    fits[key] = fit_tail(ss.x, k, method, presorted=True)
                fit = fits[key]
            except EstimationError:
                continue
            # levels typed as 1 - k/n land a few ulps above k/n; do not count that as extrapolating inward
            kn = fit.k / fit.n * (1.0 + 1e-12)
            with np.errstate(all="ignore"):
                out[i, j] = _forecast(kind, fit, ss, p, kn, mode, fits)

    bad = ~np.isfinite(out)
    out = np.where(bad, fallback, out)
    return out, bad


def _forecast(kind, fit, ss, p, kn, mode, fits):
    res = np.full(p.shape, np.nan)
    if kind == "gpq":
        ok = p <= kn
        res[ok] = _gp_quantile(fit, p[ok])
        return res

    # target tail probability of the expectile being forecast
    if mode == "expectile":
        target = p
    else:
        pieces = _tail_pieces(fit, ss.mean)
        if pieces is None:
            return res
        x_star, spread = pieces
        gap = np.maximum(x_star - _gp_quantile(fit, np.minimum(p, kn)), 0.0)
        raw = p * gap / spread
        target = np.clip(raw, np.finfo(float).eps, 1.0 - 1.0 / ss.n)
        target[p > kn] = np.nan
    ok = np.isfinite(target) & (target <= kn)
    if not ok.any():
        return res
    t = target[ok]

    if kind == "qb":
        pieces = _tail_pieces(fit, ss.mean)
        if pieces is None:
            return res
        x_star, spread = pieces
        gap = np.maximum(x_star - _gp_quantile(fit, t), 0.0)
        res[ok] = qb_kernel(x_star, spread, gap, fit.gamma_hat)
        return res

    try:
        inputs = ExtrapolationInputs.from_sample(ss, fit.k, fit.method, fit=fit)
        sigma = laws_scale(inputs, "Direct" if kind == "laws" else "Alt", refit_cache=fits)
    except EstimationError:
        return res
    res[ok] = laws_kernel(inputs.xi_intermediate, sigma, fit.gamma_hat, kn / t)
    return res


def _run_cases(args):
    series, n, step, cases, levels, mode, forecasters, k_grid = args
    scheme = RollingScheme(series, n, step)
    outs, bads = [], []
    for t in cases:
        f, b = window_forecasts(scheme.window(t), levels, mode, forecasters, k_grid)
        outs.append(f)
        bads.append(b)
    return np.stack(outs), np.stack(bads)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class ScoreReport:
    mode: str
    level_grid: np.ndarray
    forecasters: list[str]
    k_grid: list[int]
    avg_loss: np.ndarray           # (F, L)
    opt_k: np.ndarray              # (F, L); -1 where k does not apply
    fallback_count: np.ndarray     # (F, L) at the optimal k
    forecasts: np.ndarray = field(repr=False)   # (T, F, L) at the optimal k
    realized: np.ndarray = field(repr=False)
    loss_by_k: Optional[np.ndarray] = field(default=None, repr=False)  # (F, K, L)

    @property
    def T(self) -> int:
        return int(self.realized.size)

    def level_index(self, level: float) -> int:
        hits = np.flatnonzero(np.isclose(self.level_grid, level, rtol=0, atol=1e-12))
        if hits.size == 0:
            raise DomainError(f"level {level} is not on the report's grid")
        return int(hits[0])

    def ranking(self, level: float) -> list[str]:
        return rank_forecasters(self, level)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["forecaster", "level", "avg_loss", "opt_k", "fallback_count"])
        for i, name in enumerate(self.forecasters):
            for j, lev in enumerate(self.level_grid):
                k = int(self.opt_k[i, j])
                w.writerow([name, repr(float(lev)), repr(float(self.avg_loss[i, j])),
                            "" if k < 0 else k, int(self.fallback_count[i, j])])
        return buf.getvalue()

    def forecasts_csv(self) -> str:
        """Long table of forecasts at the optimal k: case, forecaster, level, forecast, realized."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case", "forecaster", "level", "forecast", "realized"])
        for t in range(self.T):
            for i, name in enumerate(self.forecasters):
                for j, lev in enumerate(self.level_grid):
                    w.writerow([t, name, repr(float(lev)), repr(float(self.forecasts[t, i, j])),
                                repr(float(self.realized[t]))])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "mode": self.mode,
            "T": self.T,
            "level_grid": self.level_grid.tolist(),
            "forecasters": self.forecasters,
            "k_grid": list(self.k_grid),
            "avg_loss": self.avg_loss.tolist(),
            "opt_k": self.opt_k.tolist(),
            "fallback_count": self.fallback_count.tolist(),
            "ranking": {repr(float(lev)): self.ranking(lev) for lev in self.level_grid},
        }
        return json.dumps(doc, indent=1, sort_keys=True)


def rank_forecasters(report: ScoreReport, level: float) -> list[str]:
    """Ascending average loss; ties keep the report's forecaster order."""
    j = report.level_index(level)
    order = sorted(range(len(report.forecasters)), key=lambda i: (report.avg_loss[i, j], i))
    return [report.forecasters[i] for i in order]


def _scores(forecast, x, levels, mode):
    r = x - forecast
    if mode == "expectile":
        return np.abs(levels - (r <= 0)) * r * r
    return np.abs(levels - (r <= 0)) * np.abs(r)


def _check_levels(levels):
    levels = np.asarray(levels, dtype=float).ravel()
    if levels.size == 0:
        raise ConfigError("level grid is empty")
    if np.any(levels <= 0) or np.any(levels >= 1):
        raise ConfigError("levels must lie in (0, 1)")
    return levels


def _default_k(n):
    lo = max(2, math.ceil(0.01 * n))
    return list(range(lo, max(lo, math.floor(0.25 * n)) + 1))


def run_backtest(scheme: RollingScheme, levels, mode: str, forecasters=None, k_grid=None,
                 extra: Optional[Mapping[str, np.ndarray]] = None, workers: int = 1,
                 keep_loss_by_k: bool = False, block_size: int = 16) -> ScoreReport:
    """Shared engine behind the expectile and quantile backtests.

    ``extra`` injects precomputed forecasts ``(T, L)`` (for instance a
    truth-based oracle); they are scored alongside and ranked after the
    built-in forecasters on ties.
    """
    if mode not in ("expectile", "quantile"):
        raise ConfigError("mode must be 'expectile' or 'quantile'")
    levels = _check_levels(levels)
    names = list(forecasters if forecasters is not None else
                 (EXPECTILE_FORECASTERS if mode == "expectile" else QUANTILE_FORECASTERS))
    allowed = EXPECTILE_FORECASTERS if mode == "expectile" else QUANTILE_FORECASTERS
    for f in names:
        if f not in allowed:
            raise ConfigError(f"forecaster {f!r} is not available in {mode} mode")
    k_grid = [int(k) for k in (k_grid if k_grid is not None else _default_k(scheme.n))]
    if not k_grid or any(b <= a for a, b in zip(k_grid, k_grid[1:])):
        raise ConfigError("k_grid must be nonempty and strictly increasing")
    if k_grid[0] < 2 or k_grid[-1] >= scheme.n:
        raise ConfigError("k_grid must lie within [2, n-1]")
    stationarity_warning(scheme.series)

    T = scheme.T
    chunks = [list(range(s, min(s + block_size, T))) for s in range(0, T, block_size)]
    jobs = [(scheme.series, scheme.n, scheme.step, c, levels, mode, names, k_grid) for c in chunks]
    if workers <= 1:
        parts = [_run_cases(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_cases, jobs))
    fc = np.concatenate([p[0] for p in parts])      # (T, F, K, L)
    fb = np.concatenate([p[1] for p in parts])
    x = scheme.realized

    # fixed-order chunked accumulation keeps memory flat and results reproducible
    loss_sum = np.zeros(fc.shape[1:])
    for s in range(0, T, _SCORE_CHUNK):
        loss_sum += _scores(fc[s:s + _SCORE_CHUNK], x[s:s + _SCORE_CHUNK, None, None, None],
                            levels, mode).sum(axis=0)
    loss_by_k = loss_sum / T                        # (F, K, L)
    kidx = np.argmin(loss_by_k, axis=1)             # first minimum -> smallest k
    F, L = len(names), levels.size
    fi, li = np.meshgrid(np.arange(F), np.arange(L), indexing="ij")
    avg = loss_by_k[fi, kidx, li]
    opt_k = np.asarray(k_grid)[kidx]
    fallback = fb[:, fi, kidx, li].sum(axis=0)
    best = fc[:, fi, kidx, li]                      # (T, F, L)
    for i, name in enumerate(names):
        if name == "Empirical":
            opt_k[i] = -1

    if extra:
        ex_names, ex_fc = [], []
        for name, arr in extra.items():
            arr = np.asarray(arr, dtype=float)
            if arr.shape != (T, L):
                raise ConfigError(f"injected forecaster {name!r} must have shape {(T, L)}")
            ex_names.append(name)
            ex_fc.append(arr)
        ex_fc = np.stack(ex_fc, axis=1)             # (T, E, L)
        avg = np.concatenate([avg, _scores(ex_fc, x[:, None, None], levels, mode).mean(axis=0)])
        opt_k = np.concatenate([opt_k, np.full((len(ex_names), L), -1)])
        fallback = np.concatenate([fallback, np.zeros((len(ex_names), L), dtype=fallback.dtype)])
        best = np.concatenate([best, ex_fc], axis=1)
        names = names + ex_names

    return ScoreReport(mode, levels, names, k_grid, avg, opt_k, fallback, best, x,
                       loss_by_k if keep_loss_by_k else None)


def run_expectile_backtest(scheme: RollingScheme, level_grid=None, forecasters=None,
                           k_grid=None, **kw) -> ScoreReport:
    levels = default_level_grid() if level_grid is None else level_grid
    return run_backtest(scheme, levels, "expectile", forecasters, k_grid, **kw)


def run_quantile_backtest(scheme: RollingScheme, alpha_grid=None, forecasters=None,
                          k_grid=None, **kw) -> ScoreReport:
    levels = default_level_grid() if alpha_grid is None else alpha_grid
    return run_backtest(scheme, levels, "quantile", forecasters, k_grid, **kw)
