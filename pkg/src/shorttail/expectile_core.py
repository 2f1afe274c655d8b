"""
Empirical expectiles and the tail functionals around them.

The sample tau-expectile minimises ``sum eta_tau(X_t - theta)`` with
``eta_tau(x) = |tau - 1{x <= 0}| x^2``.  Its first-order condition

    tau * sum_{X_t > theta} (X_t - theta) = (1 - tau) * sum_{X_t <= theta} (theta - X_t)

is continuous, strictly decreasing and piecewise linear in ``theta`` with knots
at the order statistics, so the root is located between two consecutive order
statistics and then solved in closed form.  Equivalently the expectile is the
tau-quantile of the law with survival function

    Ebar(x) = phi(x) / (2 phi(x) + x - mean),  phi(x) = E[(X - x) 1{X > x}].
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from scipy import integrate, optimize

from .distributions import _marginal
from .errors import DomainError


class Method(str, enum.Enum):
    EMPIRICAL = "EmpiricalLAWS"
    LAWS = "ExtrapolatedLAWS"
    LAWS_ALT = "ExtrapolatedLAWSAlt"
    QB = "QuantileBased"
    ORACLE = "Oracle"


@dataclass(frozen=True)
class ExpectileEstimate:
    level: float
    value: float
    method: Method
    k_used: Optional[int] = None
    scale_variant: Optional[str] = None
    details: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (0.0 < self.level < 1.0):
            raise DomainError(f"expectile level must lie in (0, 1), got {self.level}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "level": self.level,
            "value": self.value,
            "method": self.method.value,
            "k_used": self.k_used,
            "scale_variant": self.scale_variant,
            "details": self.details,
        }


def as_sample(sample) -> np.ndarray:
    x = np.asarray(sample, dtype=float).ravel()
    if x.size == 0:
        raise DomainError("sample is empty")
    if not np.all(np.isfinite(x)):
        raise DomainError("sample contains NaN or infinite values")
    return x


def _check_tau(tau):
    if not (0.0 < tau < 1.0):
        raise DomainError(f"asymmetry level must lie strictly inside (0, 1), got {tau}")


class SortedSample:
    """A sorted copy of a sample with prefix sums, reused across many levels."""

    def __init__(self, sample, *, presorted: bool = False):
        x = as_sample(sample)
        # mean of the data as given, so the 1/2-expectile reproduces np.mean bit for bit
        self.mean = float(np.mean(x))
        self.x = x if presorted else np.sort(x, kind="stable")
        self.n = self.x.size
        self.total = float(np.sum(self.x))
        self.cumsum = np.cumsum(self.x)

    def expectile(self, tau: float) -> float:
        _check_tau(tau)
        if tau == 0.5:
            return self.mean
        x, n, cs, total = self.x, self.n, self.cumsum, self.total
        i = np.arange(n)
        # FOC evaluated at each order statistic x[i] (i+1 points are <= x[i])
        above = (total - cs) - (n - i - 1) * x
        below = (i + 1) * x - cs
        g = tau * above - (1.0 - tau) * below
        j = int(np.argmax(g <= 0))
        if j == 0 or g[j] == 0:
            return float(x[j])
        # root in (x[j-1], x[j]) where exactly j points lie at or below theta
        s_lo = cs[j - 1]
        theta = (tau * total + (1.0 - 2.0 * tau) * s_lo) / (tau * n + (1.0 - 2.0 * tau) * j)
        return float(min(max(theta, x[j - 1]), x[j]))

    def survival(self, t: float) -> float:
        """Fraction of observations strictly above ``t``."""
        return (self.n - int(np.searchsorted(self.x, t, side="right"))) / self.n

    def exceedance_count(self, t: float) -> int:
        return self.n - int(np.searchsorted(self.x, t, side="right"))


def empirical_expectile(sample, tau: float) -> ExpectileEstimate:
    """LAWS estimate of the tau-expectile, solved exactly between order statistics."""
    _check_tau(tau)
    value = SortedSample(sample).expectile(tau)
    return ExpectileEstimate(level=tau, value=value, method=Method.EMPIRICAL)


def empirical_tail_moment(sample, x: float, kappa: int = 1) -> float:
    """``(1/n) * sum (X_t - x)^kappa 1{X_t > x}``."""
    if kappa not in (1, 2):
        raise DomainError("kappa must be 1 or 2")
    s = as_sample(sample)
    exc = s[s > x] - x
    return float(np.sum(exc ** kappa) / s.size)


def empirical_E_survival(sample, x: float) -> float:
    s = as_sample(sample)
    phi = empirical_tail_moment(s, x, 1)
    denom = 2.0 * phi + x - float(np.mean(s))
    if not denom > 0:
        raise DomainError(f"Ebar undefined at x={x!r}: nonpositive denominator {denom!r}")
    return phi / denom


def empirical_survival(sample, x: float) -> float:
    s = np.asarray(sample, dtype=float).ravel()
    if s.size == 0:
        raise DomainError("sample is empty")
    return float(np.count_nonzero(s > x) / s.size)


def asymmetric_squared_loss(residual, tau: float):
    """eta_tau applied elementwise."""
    r = np.asarray(residual, dtype=float)
    return np.abs(tau - (r <= 0)) * r * r


# ---------------------------------------------------------------------------
# Population expectiles of known models
# ---------------------------------------------------------------------------

def oracle_tail_moment(model, x: float, epsabs: float = 1e-12) -> float:
    """``phi(x) = int_x^{x*} (u - x) f(u) du`` by adaptive Gauss-Kronrod quadrature."""
    m = _marginal(model)
    lo, hi = m.support
    if x >= hi:
        return 0.0
    if not np.isfinite(hi):
        raise DomainError("oracle tail moment requires a finite right endpoint")
    a = max(x, lo)
    val, _ = integrate.quad(lambda u: (u - x) * float(m.pdf(u)), a, hi,
                            epsabs=epsabs, epsrel=1e-12, limit=500)
    return val


def oracle_expectile(model, tau: float, tol: float = 1e-9) -> ExpectileEstimate:
    """True tau-expectile of a model's marginal law.

    Solves ``(2 tau - 1) phi(x) = (1 - tau)(x - E X)``, i.e. ``Ebar(x) = 1 - tau``,
    by a bracketed root search on ``[E X, x*]`` (or below the mean when
    ``tau < 1/2``) to absolute tolerance ``tol``.
    """
    _check_tau(tau)
    if not tol > 0:
        raise DomainError("tol must be positive")
    m = _marginal(model)
    mean = m.mean
    lo, hi = m.support
    if tau == 0.5:
        return ExpectileEstimate(level=tau, value=mean, method=Method.ORACLE)
    # the root moves by ~ dphi / (1 - tau), so the integral gets the tighter budget
    epsabs = tol * min(tau, 1.0 - tau) / 10.0

    def foc(x):
        return (2.0 * tau - 1.0) * oracle_tail_moment(m, x, epsabs) - (1.0 - tau) * (x - mean)

    if tau > 0.5:
        a, b = mean, hi
    else:
        a = lo if np.isfinite(lo) else float(m.quantile(1e-300))
        b = mean
    value = optimize.brentq(foc, a, b, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500)
    return ExpectileEstimate(level=tau, value=float(value), method=Method.ORACLE,
                             details={"tol": tol})


def oracle_scale(model, x: float) -> float:
    """Scale function ``a(1/Fbar(x))`` taken as ``-gamma (x* - x)``.

    This is the first-order equivalent used to link scale and endpoint in the
    short-tailed domain of attraction.
    """
    m = _marginal(model)
    return -m.evi * (m.support[1] - x)
