"""
Simulation models with a finite right endpoint.

Three marginal families are provided (Beta, a short-tailed power law and the
GEV distribution), each with closed-form or numerically exact density, CDF and
quantile function.  Any marginal can be wrapped in a Gaussian AR(1) copula,

    Y_{t+1} = rho * Y_t + sqrt(1 - rho^2) * eps_t,   X_t = q_X(Phi(Y_t)),

which keeps the marginal law of ``X_t`` intact while introducing serial
dependence.

Randomness is driven by :class:`SeededStream`, a ``(seed, replicate_index)``
pair mapped to an independent Philox substream, so replicate ``m`` produces the
same path whatever order or process it is generated in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import signal, special

from .errors import DomainError

RNG_ALGORITHM = "numpy Philox4x64-10, key from SeedSequence(seed, spawn_key=(replicate_index,))"


# ---------------------------------------------------------------------------
# Marginal families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Beta:
    alpha: float
    beta: float

    family = "beta"

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise DomainError("Beta shape parameters must be positive")

    @property
    def evi(self) -> float:
        return -1.0 / self.beta

    @property
    def support(self) -> tuple[float, float]:
        return 0.0, 1.0

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x > 0) & (x < 1)
        xc = np.where(inside, x, 0.5)
        logf = ((self.alpha - 1) * np.log(xc) + (self.beta - 1) * np.log1p(-xc)
                - special.betaln(self.alpha, self.beta))
        return np.where(inside, np.exp(logf), 0.0)

    def cdf(self, x):
        x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
        return special.betainc(self.alpha, self.beta, x)

    def sf(self, x):
        x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
        return special.betaincc(self.alpha, self.beta, x)

    def quantile(self, u):
        # scipy's inverse as a starting point, then one safeguarded Newton
        # step on the CDF; the result is within ~1e-15 of the bisection root.
        u = np.asarray(u, dtype=float)
        x = special.betaincinv(self.alpha, self.beta, u)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = (special.betainc(self.alpha, self.beta, x) - u) / self.pdf(x)
        x_new = x - np.where(np.isfinite(step), step, 0.0)
        ok = (x_new >= 0) & (x_new <= 1)
        better = np.abs(special.betainc(self.alpha, self.beta, np.clip(x_new, 0, 1)) - u) \
            <= np.abs(special.betainc(self.alpha, self.beta, x) - u)
        return np.where(ok & better, x_new, x)

    def to_dict(self) -> dict:
        return {"family": self.family, "alpha": self.alpha, "beta": self.beta}


@dataclass(frozen=True)
class ShortPowerLaw:
    """``F(x) = 1 - K (endpoint - x)^alpha_shape`` on its compact support."""

    endpoint: float
    K: float
    alpha_shape: float

    family = "spl"

    def __post_init__(self):
        if not (self.K > 0 and self.alpha_shape > 0):
            raise DomainError("ShortPowerLaw needs K > 0 and alpha_shape > 0")

    @property
    def evi(self) -> float:
        return -1.0 / self.alpha_shape

    @property
    def width(self) -> float:
        return self.K ** (-1.0 / self.alpha_shape)

    @property
    def support(self) -> tuple[float, float]:
        return self.endpoint - self.width, self.endpoint

    @property
    def mean(self) -> float:
        a = self.alpha_shape
        return self.endpoint - self.width * a / (a + 1)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.support
        inside = (x >= lo) & (x <= hi)
        d = np.where(inside, self.endpoint - x, 0.0)
        return np.where(inside, self.K * self.alpha_shape * d ** (self.alpha_shape - 1), 0.0)

    def sf(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.support
        d = np.clip(self.endpoint - x, 0.0, self.width)
        return np.where(x < lo, 1.0, np.where(x >= hi, 0.0, self.K * d ** self.alpha_shape))

    def cdf(self, x):
        return 1.0 - self.sf(x)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        return self.endpoint - ((1.0 - u) / self.K) ** (1.0 / self.alpha_shape)

    def to_dict(self) -> dict:
        return {"family": self.family, "endpoint": self.endpoint, "K": self.K,
                "alpha_shape": self.alpha_shape}


@dataclass(frozen=True)
class GEV:
    """Standard GEV with ``F(x) = exp(-(1 + gamma x)^(-1/gamma))``."""

    gamma: float

    family = "gev"

    @property
    def evi(self) -> float:
        return self.gamma

    @property
    def support(self) -> tuple[float, float]:
        g = self.gamma
        if g < 0:
            return -math.inf, -1.0 / g
        if g > 0:
            return -1.0 / g, math.inf
        return -math.inf, math.inf

    @property
    def mean(self) -> float:
        g = self.gamma
        if g >= 1:
            return math.inf
        if g == 0:
            return np.euler_gamma
        return (math.gamma(1.0 - g) - 1.0) / g

    def _t(self, x):
        # t(x) = -log F(x) on the support
        g = self.gamma
        if g == 0:
            return np.exp(-x)
        z = 1.0 + g * x
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(z > 0, np.abs(z) ** (-1.0 / g), np.where(g < 0, 0.0, np.inf))

    def cdf(self, x):
        return np.exp(-self._t(np.asarray(x, dtype=float)))

    def sf(self, x):
        return -np.expm1(-self._t(np.asarray(x, dtype=float)))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        g = self.gamma
        t = self._t(x)
        lo, hi = self.support
        inside = (x > lo) & (x < hi)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            dens = t ** (g + 1.0) * np.exp(-t)
        return np.where(inside, dens, 0.0)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        g = self.gamma
        if g == 0:
            return -np.log(-np.log(u))
        return ((-np.log(u)) ** (-g) - 1.0) / g

    def to_dict(self) -> dict:
        return {"family": self.family, "gamma": self.gamma}


Marginal = Union[Beta, ShortPowerLaw, GEV]


@dataclass(frozen=True)
class ModelSpec:
    """A marginal law, optionally made serially dependent via an AR(1) copula.

    ``rho=None`` means i.i.d. sampling.
    """

    marginal: Marginal
    rho: float | None = None

    def __post_init__(self):
        if self.rho is not None and not (-1.0 < self.rho < 1.0):
            raise DomainError(f"AR(1) correlation must lie in (-1, 1), got {self.rho}")

    @property
    def dependence(self) -> str:
        return "iid" if self.rho is None else "ar1"

    @property
    def endpoint(self) -> float:
        return self.marginal.support[1]

    def to_dict(self) -> dict:
        d = self.marginal.to_dict()
        d["dependence"] = self.dependence
        d["rho"] = self.rho
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        fam = d.pop("family", None)
        dep = d.pop("dependence", "iid")
        rho = d.pop("rho", None)
        try:
            if fam == "beta":
                marginal = Beta(float(d.pop("alpha")), float(d.pop("beta")))
            elif fam == "spl":
                marginal = ShortPowerLaw(float(d.pop("endpoint")), float(d.pop("K")),
                                         float(d.pop("alpha_shape")))
            elif fam == "gev":
                marginal = GEV(float(d.pop("gamma")))
            else:
                raise DomainError(f"unknown model family {fam!r}")
        except KeyError as exc:
            raise DomainError(f"missing model parameter {exc.args[0]!r}") from None
        if d:
            raise DomainError(f"unknown model keys: {sorted(d)}")
        if dep == "iid":
            if rho is not None:
                raise DomainError("rho given for an i.i.d. model")
            return cls(marginal)
        if dep == "ar1":
            if rho is None:
                raise DomainError("AR(1) model requires rho")
            return cls(marginal, float(rho))
        raise DomainError(f"unknown dependence {dep!r}")


def beta_preset() -> Beta:
    return Beta(3.0, 2.5)


def spl_preset() -> ShortPowerLaw:
    return ShortPowerLaw(5.0, 1.0 / 3.0, 3.0)


def gev_preset() -> GEV:
    return GEV(-1.0 / 3.0)


# models (i)-(vi) of the simulation design
PRESETS: dict[str, ModelSpec] = {
    "beta-iid": ModelSpec(beta_preset()),
    "spl-iid": ModelSpec(spl_preset()),
    "gev-iid": ModelSpec(gev_preset()),
    "beta-ar1": ModelSpec(beta_preset(), 0.95),
    "spl-ar1": ModelSpec(spl_preset(), 0.5),
    "gev-ar1": ModelSpec(gev_preset(), 0.8),
}


def preset(name: str) -> ModelSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise DomainError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _marginal(model) -> Marginal:
    return model.marginal if isinstance(model, ModelSpec) else model


# ---------------------------------------------------------------------------
# Pointwise functions
# ---------------------------------------------------------------------------

def quantile(model, u):
    """Marginal quantile ``F^{-1}(u)``; dependence is ignored.

    Raises DomainError unless every ``u`` lies strictly inside (0, 1).
    """
    u_arr = np.asarray(u, dtype=float)
    if not np.all((u_arr > 0) & (u_arr < 1)):
        raise DomainError("quantile level must lie strictly inside (0, 1)")
    q = _marginal(model).quantile(u_arr)
    return float(q) if np.ndim(q) == 0 else q


def cdf(model, x):
    """Marginal distribution function, equal to 0 or 1 outside the support."""
    p = np.clip(_marginal(model).cdf(x), 0.0, 1.0)
    return float(p) if np.ndim(p) == 0 else p


def survival(model, x):
    s = np.clip(_marginal(model).sf(x), 0.0, 1.0)
    return float(s) if np.ndim(s) == 0 else s


def pdf(model, x):
    f = _marginal(model).pdf(x)
    return float(f) if np.ndim(f) == 0 else f


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SeededStream:
    seed: int
    replicate_index: int = 0

    def __post_init__(self):
        if self.replicate_index < 0:
            raise DomainError("replicate_index must be >= 0")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.replicate_index,))
        return np.random.Generator(np.random.Philox(ss))


def _open_uniforms(rng: np.random.Generator, n: int) -> np.ndarray:
    # 53-bit grid shifted by half a step: never 0 or 1
    return (rng.integers(0, 2**53, size=n, dtype=np.int64) + 0.5) / 2.0**53


def _check_n(n):
    if int(n) != n or n <= 0:
        raise DomainError(f"sample size must be a positive integer, got {n}")


def sample_iid(model, n: int, stream: SeededStream) -> np.ndarray:
    """Inverse-transform sample of ``n`` independent draws."""
    _check_n(n)
    if isinstance(model, ModelSpec) and model.rho is not None:
        raise DomainError("sample_iid called on an AR(1) model; use sample_ar1_copula")
    u = _open_uniforms(stream.generator(), int(n))
    return np.asarray(_marginal(model).quantile(u), dtype=float)


def latent_ar1(rho: float, n: int, rng: np.random.Generator, init: str = "stationary") -> np.ndarray:
    """Gaussian AR(1) path with unit stationary variance."""
    e = rng.standard_normal(n)
    if init == "stationary":
        e[1:] *= math.sqrt(1.0 - rho * rho)
    elif init == "zero":
        e[0] = 0.0
        e[1:] *= math.sqrt(1.0 - rho * rho)
    else:
        raise DomainError(f"unknown AR(1) initialisation {init!r}")
    return signal.lfilter([1.0], [1.0, -rho], e)


def sample_ar1_copula(model: ModelSpec, n: int, stream: SeededStream, burn_in: int = 0,
                      init: str = "stationary") -> np.ndarray:
    """Sample ``X_t = q_X(Phi(Y_t))`` with ``Y`` a Gaussian AR(1) chain.

    ``Y_0`` is drawn from N(0, 1) so the chain is stationary from the first
    step and ``burn_in`` defaults to 0.  Pass ``init="zero"`` together with a
    positive ``burn_in`` to mimic implementations starting at ``Y_0 = 0``.
    """
    _check_n(n)
    if model.rho is None:
        raise DomainError("sample_ar1_copula needs an AR(1) model")
    if burn_in < 0:
        raise DomainError("burn_in must be >= 0")
    y = latent_ar1(model.rho, int(n) + int(burn_in), stream.generator(), init)[int(burn_in):]
    u = np.clip(special.ndtr(y), np.finfo(float).tiny, 1.0 - 2.0**-53)
    return np.asarray(_marginal(model).quantile(u), dtype=float)


def sample(model: ModelSpec, n: int, stream: SeededStream) -> np.ndarray:
    """Dispatch to the i.i.d. or copula sampler according to ``model.rho``."""
    if isinstance(model, ModelSpec) and model.rho is not None:
        return sample_ar1_copula(model, n, stream)
    return sample_iid(model, n, stream)
