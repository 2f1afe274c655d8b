"""
Extrapolated expectile estimators for distributions with a finite endpoint.

LAWS extrapolation moves the intermediate sample expectile at
``tau_n = 1 - k/n`` out to level ``1 - p_n``:

    xi*_{1-p} = xi_hat_{tau_n} + sigma_n * (((1 - tau_n)/p)^(g/(1-g)) - 1) / g

with two readings of the scale ``sigma_n`` (refit at the exceedance count of
the intermediate expectile, or rescaled from ``a(n/k)``).  The quantile-based
estimator goes through the fitted endpoint and extreme quantile instead:

    xi~*_{1-p} = x* - [(x* - mean)(1 - 1/g)]^(-g/(1-g)) * (x* - q*_{1-p})^(1/(1-g)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, ExtrapolationError, InfiniteEndpointError
from .expectile_core import ExpectileEstimate, Method, SortedSample
from .tail_fit import GAMMA_ZERO, TailFit, endpoint, extreme_quantile, fit_tail, normalize_method

VARIANTS = ("Direct", "Alt")


@dataclass
class ExtrapolationInputs:
    """Everything the LAWS extrapolation needs from one sample and one ``k``."""

    tau_n: float
    fit: TailFit
    xi_intermediate: float
    fbar_intermediate: float
    mean: float
    n: int
    sample: SortedSample

    def __post_init__(self):
        if not (0.0 < self.tau_n < 1.0):
            raise DomainError("tau_n must lie in (0, 1)")
        if not self.fbar_intermediate > 0:
            raise ExtrapolationError(
                "no observation exceeds the intermediate expectile; cannot anchor the extrapolation")

    @classmethod
    def from_sample(cls, sample, k: int, method: str = "GPML",
                    fit: Optional[TailFit] = None) -> "ExtrapolationInputs":
        ss = sample if isinstance(sample, SortedSample) else SortedSample(sample)
        method = normalize_method(method)
        if fit is None:
            fit = fit_tail(ss.x, k, method, presorted=True)
        tau_n = 1.0 - k / ss.n
        xi = ss.expectile(tau_n)
        return cls(tau_n, fit, xi, ss.survival(xi), ss.mean, ss.n, ss)


def _finite(value, what):
    if not np.isfinite(value):
        raise ExtrapolationError(f"{what} is not finite ({value!r})")
    return value


def _check_p(p, tau_n):
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr <= 0) or np.any(p_arr > 1.0 - tau_n):
        raise ExtrapolationError(f"p_n must lie in (0, 1 - tau_n = {1.0 - tau_n}], got {p}")
    return p_arr


def laws_kernel(xi_tn, sigma, gamma, ratio):
    """``xi_tn + sigma * (ratio^(g/(1-g)) - 1)/g``; ``log(ratio)`` bracket near g = 0."""
    ratio = np.asarray(ratio, dtype=float)
    if abs(gamma) < GAMMA_ZERO:
        bracket = np.log(ratio)
    else:
        bracket = np.expm1(gamma / (1.0 - gamma) * np.log(ratio)) / gamma
    return xi_tn + sigma * bracket


def laws_scale(inputs: ExtrapolationInputs, variant: str = "Direct", refit_cache=None) -> float:
    """Scale estimate of ``a(1/Fbar(xi_{tau_n}))``.

    Direct refits the tail at ``k' = n * Fbar_hat(xi_hat_{tau_n})`` exceedances
    with the same method; Alt rescales ``a(n/k)`` by
    ``((1 - tau_n) / Fbar_hat)^gamma``.
    """
    fit = inputs.fit
    if variant == "Direct":
        k_prime = int(round(inputs.n * inputs.fbar_intermediate))
        if k_prime < 2:
            raise ExtrapolationError(f"only {k_prime} exceedance(s) of the intermediate expectile")
        if k_prime >= inputs.n:
            raise ExtrapolationError("intermediate expectile lies below the sample minimum")
        if k_prime == fit.k:
            return fit.scale_hat
        if refit_cache is not None and (fit.method, k_prime) in refit_cache:
            refit = refit_cache[(fit.method, k_prime)]
        else:
            refit = fit_tail(inputs.sample.x, k_prime, fit.method, presorted=True)
            if refit_cache is not None:
                refit_cache[(fit.method, k_prime)] = refit
        return refit.scale_hat
    if variant == "Alt":
        with np.errstate(over="ignore"):
            sigma = fit.scale_hat * np.exp(fit.gamma_hat * np.log((1.0 - inputs.tau_n) / inputs.fbar_intermediate))
        return _finite(float(sigma), "rescaled LAWS scale")
    raise DomainError(f"unknown LAWS variant {variant!r}")


def laws_extrapolated(inputs: ExtrapolationInputs, p_n: float, variant: str = "Direct",
                      refit_cache=None) -> ExpectileEstimate:
    p = float(_check_p(p_n, inputs.tau_n))
    sigma = laws_scale(inputs, variant, refit_cache)
    with np.errstate(over="ignore", invalid="ignore"):
        value = float(laws_kernel(inputs.xi_intermediate, sigma, inputs.fit.gamma_hat,
                                  (1.0 - inputs.tau_n) / p))
    _finite(value, "extrapolated expectile")
    return ExpectileEstimate(
        level=1.0 - p, value=value,
        method=Method.LAWS if variant == "Direct" else Method.LAWS_ALT,
        k_used=inputs.fit.k, scale_variant=variant,
        details={"fit": inputs.fit.to_dict(), "sigma_n": sigma,
                 "xi_intermediate": inputs.xi_intermediate, "tau_n": inputs.tau_n},
    )


def _qb_parts(sample_mean, fit, p_n):
    if fit.gamma_hat >= 0:
        raise InfiniteEndpointError(f"gamma_hat={fit.gamma_hat} >= 0: quantile-based route needs a negative index")
    x_star = endpoint(fit)
    q_star = extreme_quantile(fit, p_n)
    spread = (x_star - sample_mean) * (1.0 - 1.0 / fit.gamma_hat)
    if not x_star > sample_mean:
        raise ExtrapolationError(f"fitted endpoint {x_star!r} does not exceed the sample mean {sample_mean!r}")
    gap = x_star - q_star
    if np.any(gap < 0):
        raise ExtrapolationError(f"extreme quantile {q_star!r} exceeds fitted endpoint {x_star!r}")
    return x_star, q_star, spread, np.maximum(gap, 0.0)


def qb_kernel(x_star, spread, gap, gamma):
    return x_star - spread ** (-gamma / (1.0 - gamma)) * gap ** (1.0 / (1.0 - gamma))


def qb_extrapolated(sample_mean: float, fit: TailFit, p_n: float) -> ExpectileEstimate:
    x_star, q_star, spread, gap = _qb_parts(sample_mean, fit, p_n)
    with np.errstate(over="ignore", invalid="ignore"):
        value = _finite(float(qb_kernel(x_star, spread, gap, fit.gamma_hat)), "extrapolated expectile")
    return ExpectileEstimate(
        level=1.0 - float(p_n), value=value, method=Method.QB, k_used=fit.k,
        details={"fit": fit.to_dict(), "endpoint": x_star, "extreme_quantile": float(q_star)},
    )


def pi_level(x_star, q, mean, gamma, p):
    """Expectile tail level at which the expectile matches ``q_{1-p}``."""
    return p * (x_star - q) / ((x_star - mean) * (1.0 - 1.0 / gamma))


@dataclass(frozen=True)
class LevelSelection:
    pi_hat: float
    raw: float
    clamped: bool

    @property
    def level(self) -> float:
        return 1.0 - self.pi_hat


def expectile_level_for_quantile(sample_mean: float, fit: TailFit, p_n: float) -> LevelSelection:
    """Estimate ``pi`` such that ``xi_{1-pi}`` coincides with ``q_{1-p_n}``.

    The value is clamped to ``[eps, 1 - 1/n]`` and flagged when clamping occurs.
    """
    x_star, q_star, spread, gap = _qb_parts(sample_mean, fit, p_n)
    raw = float(p_n * gap / spread)
    lo, hi = np.finfo(float).eps, 1.0 - 1.0 / fit.n
    pi = min(max(raw, lo), hi)
    return LevelSelection(pi, raw, pi != raw)


def asymptotic_variance_iid(gamma: float) -> np.ndarray:
    """Limit covariance of the normalised (intermediate expectile, quantile) pair."""
    if not gamma < 0.5:
        raise DomainError("asymptotic variance is finite only for gamma < 1/2")
    v11 = 2.0 / ((1.0 - gamma) * (1.0 - 2.0 * gamma))
    v12 = 1.0 / (1.0 - gamma)
    return np.array([[v11, v12], [v12, 1.0]])


def estimate(sample, p_n: float, k: int, estimator: str = "laws", method: str = "GPML",
             ) -> tuple[ExpectileEstimate, Optional[TailFit]]:
    """One-call front end: ``estimator`` in {empirical, laws, laws-alt, qb}."""
    ss = SortedSample(sample)
    est = estimator.lower()
    if est == "empirical":
        value = ss.expectile(1.0 - p_n)
        return ExpectileEstimate(1.0 - p_n, value, Method.EMPIRICAL), None
    if est == "qb":
        fit = fit_tail(ss.x, k, method, presorted=True)
        return qb_extrapolated(ss.mean, fit, p_n), fit
    inputs = ExtrapolationInputs.from_sample(ss, k, method)
    if est == "laws":
        return laws_extrapolated(inputs, p_n, "Direct"), inputs.fit
    if est == "laws-alt":
        return laws_extrapolated(inputs, p_n, "Alt"), inputs.fit
    raise DomainError(f"unknown estimator {estimator!r}")
