"""
Tail parameter estimation from the top ``k`` order statistics.

Both estimators return the pair ``(gamma_hat, scale_hat)`` estimating the
extreme value index and the scale ``a(n/k)``, anchored at the threshold
``X_{n-k,n}`` (the ``(k+1)``-th largest observation).  From such a fit the
extreme quantile ``q_{1-p}`` and, for a negative index, the right endpoint
follow by the usual GP extrapolation.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import optimize

from .errors import (
    ConvergenceError,
    DegenerateSampleError,
    DomainError,
    ExtrapolationError,
    InfiniteEndpointError,
)

log = logging.getLogger(__name__)

GAMMA_ZERO = 1e-8
METHODS = ("GPML", "Moment")


@dataclass(frozen=True)
class TailFit:
    gamma_hat: float
    scale_hat: float
    k: int
    threshold: float
    n: int
    method: str
    shift: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def order_statistics(sample) -> np.ndarray:
    x = np.asarray(sample, dtype=float).ravel()
    if x.size == 0:
        raise DomainError("sample is empty")
    if np.isnan(x).any():
        raise DomainError("sample contains NaN")
    return np.sort(x, kind="stable")


def _prepare(sample, k, presorted):
    xs = np.asarray(sample, dtype=float) if presorted else order_statistics(sample)
    n = xs.size
    if int(k) != k or not (2 <= k < n):
        raise DomainError(f"need 2 <= k < n, got k={k}, n={n}")
    return xs, n, int(k)


# ---------------------------------------------------------------------------
# GP pseudo-maximum likelihood
# ---------------------------------------------------------------------------

# Grid over u = theta * y_max, theta = gamma / sigma.  Feasibility is u > -1.
_U_GRID = np.unique(np.concatenate([
    -(1.0 - np.geomspace(1e-8, 0.5, 50)),
    -np.geomspace(0.5, 1e-4, 50),
    [0.0],
    np.geomspace(1e-4, 1e4, 100),
]))


def _profile_loglik(u, y, ymax):
    """Profile GPD log-likelihood at ``theta = u / ymax`` (scale maximised out)."""
    k = y.size
    u = np.atleast_1d(np.asarray(u, dtype=float))
    out = np.empty(u.shape)
    small = np.abs(u) < 1e-12
    if small.any():
        out[small] = -k * math.log(float(np.mean(y))) - k
    if (~small).any():
        theta = u[~small] / ymax
        g = np.log1p(np.outer(theta, y)).mean(axis=1)
        sigma = g / theta
        out[~small] = -k * np.log(sigma) - k * g - k
    return out


def _profile_params(u, y, ymax):
    if abs(u) < 1e-12:
        return 0.0, float(np.mean(y))
    theta = u / ymax
    g = float(np.mean(np.log1p(theta * y)))
    return g, g / theta


def _profile_slope(u, y, ymax):
    """Sign-carrying derivative of the profile log-likelihood in ``u`` (up to ``k / ymax``)."""
    theta = u / ymax
    g = float(np.mean(np.log1p(theta * y)))
    dg = float(np.mean(y / (1.0 + theta * y)))
    return 1.0 / theta - dg * (1.0 + 1.0 / g)


def _polish(lo, hi, y, ymax):
    """Root of the profile slope inside a bracket that excludes u = 0, else None."""
    if lo < 0.0 < hi or lo == 0.0 or hi == 0.0:
        return None
    f_lo, f_hi = _profile_slope(lo, y, ymax), _profile_slope(hi, y, ymax)
    if not (np.isfinite(f_lo) and np.isfinite(f_hi)) or f_lo * f_hi > 0:
        return None
    return optimize.brentq(_profile_slope, lo, hi, args=(y, ymax), xtol=1e-15, rtol=1e-15, maxiter=200)


def gpd_pseudo_ml(sample, k: int, *, presorted: bool = False) -> TailFit:
    """GP maximum likelihood fit to the ``k`` exceedances over ``X_{n-k,n}``.

    The two-parameter likelihood is profiled onto ``theta = gamma / sigma``
    (Grimshaw's reduction).  The profile is scanned on a fixed scale-free grid
    of about 200 feasible points, every interior local maximum is polished by
    bounded Brent search followed by a root solve of the profile slope, and the
    highest stationary point wins.  The
    likelihood diverges at the boundary ``1 + theta y_max = 0`` when the index
    is below -1, so boundary points are never accepted.
    """
    xs, n, k = _prepare(sample, k, presorted)
    threshold = float(xs[n - k - 1])
    y = xs[n - k:][::-1] - threshold
    ymax = float(y[0])
    if ymax <= 0 or np.unique(y).size < 2:
        raise DegenerateSampleError(f"exceedances over {threshold!r} are degenerate (k={k})")

    ll = _profile_loglik(_U_GRID, y, ymax)
    interior = np.flatnonzero((ll[1:-1] >= ll[:-2]) & (ll[1:-1] >= ll[2:])) + 1
    best = None
    for i in interior:
        res = optimize.minimize_scalar(
            lambda v: -_profile_loglik(v, y, ymax)[0],
            bounds=(_U_GRID[i - 1], _U_GRID[i + 1]), method="bounded",
            options={"xatol": 1e-12, "maxiter": 500},
        )
        cand_u, cand_ll = float(res.x), -float(res.fun)
        # likelihood values are flat to ~sqrt(eps) at the top; the slope root is sharper
        root = _polish(_U_GRID[i - 1], _U_GRID[i + 1], y, ymax)
        if root is not None:
            root_ll = float(_profile_loglik(root, y, ymax)[0])
            if root_ll >= cand_ll - 1e-9 * abs(cand_ll):
                cand_u, cand_ll = root, root_ll
        if cand_ll < ll[i]:
            cand_u, cand_ll = float(_U_GRID[i]), float(ll[i])
        if best is None or cand_ll > best[1]:
            best = (cand_u, cand_ll)
    if best is None:
        raise ConvergenceError(
            "no interior stationary point of the GP likelihood",
            {"k": k, "threshold": threshold, "argmax_grid_u": float(_U_GRID[int(np.argmax(ll))])},
        )
    gamma_hat, sigma_hat = _profile_params(best[0], y, ymax)
    if not (sigma_hat > 0 and np.isfinite(gamma_hat)):
        raise ConvergenceError("GP fit produced an invalid scale",
                               {"k": k, "gamma": gamma_hat, "sigma": sigma_hat})
    return TailFit(gamma_hat, sigma_hat, k, threshold, n, "GPML")


# ---------------------------------------------------------------------------
# Moment estimator
# ---------------------------------------------------------------------------

def moment_estimator(sample, k: int, *, presorted: bool = False) -> TailFit:
    """Dekkers-Einmahl-de Haan moment estimator and its companion scale estimate.

    Log-spacings need positive data: when ``min(sample) <= 0`` every value is
    shifted by ``1 - min(sample)`` first, and the shift is recorded on the fit.
    """
    xs, n, k = _prepare(sample, k, presorted)
    shift = 0.0
    if xs[0] <= 0:
        shift = 1.0 - float(xs[0])
    t_shifted = float(xs[n - k - 1]) + shift
    if not t_shifted > 0:
        raise DomainError("threshold is not positive after the shift")
    logs = np.log(xs[n - k:] + shift) - math.log(t_shifted)
    m1 = float(np.mean(logs))
    m2 = float(np.mean(logs * logs))
    if m2 == 0 or m1 * m1 == m2:
        raise DegenerateSampleError(f"top {k} order statistics are tied")
    gamma_minus = 1.0 - 0.5 / (1.0 - m1 * m1 / m2)
    gamma_hat = m1 + gamma_minus
    scale_hat = t_shifted * m1 * (1.0 - gamma_minus)
    return TailFit(gamma_hat, scale_hat, k, float(xs[n - k - 1]), n, "Moment", shift)


FITTERS = {"GPML": gpd_pseudo_ml, "Moment": moment_estimator}


def normalize_method(method: str) -> str:
    key = str(method).lower()
    for m in METHODS:
        if m.lower() == key:
            return m
    raise DomainError(f"unknown tail-fit method {method!r}")


def fit_tail(sample, k: int, method: str = "GPML", *, presorted: bool = False) -> TailFit:
    return FITTERS[normalize_method(method)](sample, k, presorted=presorted)


# ---------------------------------------------------------------------------
# Extrapolation
# ---------------------------------------------------------------------------

def gp_excess(ratio, gamma):
    """``(ratio^gamma - 1) / gamma`` with its ``log(ratio)`` limit near ``gamma = 0``."""
    ratio = np.asarray(ratio, dtype=float)
    if abs(gamma) < GAMMA_ZERO:
        return np.log(ratio)
    return np.expm1(gamma * np.log(ratio)) / gamma


def extreme_quantile(fit: TailFit, p):
    """``X_{n-k,n} + a(n/k) ((k/(np))^gamma - 1) / gamma``.

    ``p = k/n`` returns the threshold itself; larger ``p`` is not extrapolation
    and raises ExtrapolationError.
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr <= 0) or np.any(p_arr > fit.k / fit.n):
        raise ExtrapolationError(f"tail probability must lie in (0, k/n={fit.k / fit.n}], got {p}")
    q = fit.threshold + fit.scale_hat * gp_excess(fit.k / (fit.n * p_arr), fit.gamma_hat)
    return float(q) if np.ndim(q) == 0 else q


def endpoint(fit: TailFit) -> float:
    if fit.gamma_hat >= 0:
        raise InfiniteEndpointError(f"gamma_hat={fit.gamma_hat} >= 0: endpoint is infinite")
    return fit.threshold - fit.scale_hat / fit.gamma_hat


# ---------------------------------------------------------------------------
# Choice of k
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KSelection:
    k: int
    gamma_hat: float
    run: Optional[tuple[int, int]]
    fallback: bool
    window: int
    band: float

    def to_dict(self) -> dict:
        return asdict(self)


def gamma_path(sample, ks, method: str = "GPML") -> np.ndarray:
    """Index estimates for each ``k`` in ``ks``; failed fits give NaN."""
    xs = order_statistics(sample)
    fitter = FITTERS[normalize_method(method)]
    out = np.full(len(ks), np.nan)
    for i, k in enumerate(ks):
        try:
            out[i] = fitter(xs, int(k), presorted=True).gamma_hat
        except (DegenerateSampleError, ConvergenceError, DomainError):
            pass
    return out


def stable_region(ks, path, window: int = 10, band: float = 0.4) -> KSelection:
    """Pick ``k`` at the median of the longest stable stretch of an estimate path.

    A window of ``window`` consecutive points is stable when its range does not
    exceed ``band`` times the median absolute deviation of the whole path; a
    region is a maximal run of ``k`` covered by overlapping stable windows.
    Ties between equally long regions go to the larger ``k``.
    """
    ks = np.asarray(ks, dtype=int)
    path = np.asarray(path, dtype=float)
    if window < 3:
        raise DomainError("window must be >= 3")
    if ks.size != path.size or ks.size < window:
        raise DomainError("path shorter than the stability window")
    finite = np.isfinite(path)
    med = np.median(path[finite]) if finite.any() else np.nan
    mad = np.median(np.abs(path[finite] - med)) if finite.any() else np.nan
    limit = band * mad

    nwin = ks.size - window + 1
    covered = np.zeros(ks.size, dtype=bool)
    for s in range(nwin):
        w = path[s:s + window]
        if np.all(np.isfinite(w)) and (w.max() - w.min()) <= limit:
            covered[s:s + window] = True

    best = None
    i = 0
    while i < ks.size:
        if not covered[i]:
            i += 1
            continue
        j = i
        while j + 1 < ks.size and covered[j + 1]:
            j += 1
        # later runs win ties: compare with >=
        if best is None or (j - i) >= (best[1] - best[0]):
            best = (i, j)
        i = j + 1

    if best is None:
        k_fb = int(math.floor(math.sqrt(ks[0] * ks[-1])))
        idx = int(np.argmin(np.abs(ks - k_fb)))
        warnings.warn("no stable region in the estimate path; using the geometric-mean k",
                      RuntimeWarning, stacklevel=2)
        return KSelection(k_fb, float(path[idx]), None, True, window, band)

    lo, hi = best
    seg = path[lo:hi + 1]
    order = np.argsort(seg, kind="stable")
    pick = lo + int(order[(seg.size - 1) // 2])
    return KSelection(int(ks[pick]), float(path[pick]), (int(ks[lo]), int(ks[hi])), False,
                      window, band)


def select_k_path_stability(sample, k_min: int, k_max: int, method: str = "GPML",
                            window: int = 10, band: float = 0.4) -> KSelection:
    n = np.asarray(sample).size
    if not (2 <= k_min < k_max < n):
        raise DomainError(f"need 2 <= k_min < k_max < n, got {k_min}, {k_max}, n={n}")
    ks = np.arange(k_min, k_max + 1)
    return stable_region(ks, gamma_path(sample, ks, method), window, band)
