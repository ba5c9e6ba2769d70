"""Exponential-family response distributions with canonical links.

Three families are supported: gaussian (identity link), poisson (log link)
and bernoulli (logit link).  Each family provides the conditional
log-density, its first and second derivatives in the linear predictor,
random draws, and two residual transforms (randomized-quantile and
deviance) used by the residual-based initializer and by model checking.

All operations are vectorized over numpy arrays, accept scalars, and are
pure given an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

# Uniform-tail clip for randomized quantile residuals: keeps the normal
# score finite when the CDF saturates in floating point.
_W_CLIP = 1e-10


@dataclass(frozen=True)
class Family:
    """A response distribution. ``dispersion_fixed`` pins phi at 1."""

    kind: str
    dispersion_fixed: bool

    def __post_init__(self):
        if self.kind not in ("gaussian", "poisson", "bernoulli"):
            raise ValueError(f"unknown family {self.kind!r}")


@dataclass(frozen=True)
class Link:
    """A link function g mapping the mean to the linear predictor."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("identity", "log", "logit"):
            raise ValueError(f"unknown link {self.kind!r}")

    def __call__(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "identity":
            return mu
        if self.kind == "log":
            return np.log(mu)
        return special.logit(mu)

    def inverse(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind == "identity":
            return eta
        if self.kind == "log":
            return np.exp(eta)
        return special.expit(eta)


GAUSSIAN = Family("gaussian", dispersion_fixed=False)
POISSON = Family("poisson", dispersion_fixed=True)
BERNOULLI = Family("bernoulli", dispersion_fixed=True)

_FAMILIES = {f.kind: f for f in (GAUSSIAN, POISSON, BERNOULLI)}
_CANONICAL = {"gaussian": Link("identity"), "poisson": Link("log"), "bernoulli": Link("logit")}


def get_family(name: str) -> Family:
    try:
        return _FAMILIES[name]
    except KeyError:
        raise ValueError(
            f"unknown family {name!r}; expected one of {sorted(_FAMILIES)}"
        ) from None


def canonical_link(family: Family) -> Link:
    return _CANONICAL[family.kind]


def _check_canonical(family: Family, link: Link):
    if link.kind != _CANONICAL[family.kind].kind:
        raise ValueError(
            f"family {family.kind!r} is only supported with its canonical "
            f"link {_CANONICAL[family.kind].kind!r}, got {link.kind!r}"
        )


def _check_phi(family: Family, phi):
    if family.dispersion_fixed:
        if not np.all(np.asarray(phi) == 1.0):
            raise ValueError(f"{family.kind} requires phi = 1")
    elif not np.all(np.asarray(phi) > 0):
        raise ValueError("gaussian dispersion must be positive")


def validate_response(family: Family, y) -> np.ndarray:
    """Check that ``y`` lies in the family's support; returns y as floats."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{family.kind} response contains non-finite values")
    if family.kind == "poisson":
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ValueError("poisson response must be a non-negative integer")
    elif family.kind == "bernoulli":
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("bernoulli response must be 0 or 1")
    return y


def log_density(family: Family, link: Link, y, eta, phi=1.0):
    """log f(y | eta, phi) for the given family/canonical-link pair."""
    _check_canonical(family, link)
    _check_phi(family, phi)
    y = validate_response(family, y)
    eta = np.asarray(eta, dtype=float)
    if family.kind == "poisson":
        out = y * eta - np.exp(eta) - special.gammaln(y + 1.0)
    elif family.kind == "bernoulli":
        # y*eta - log(1 + e^eta), stable on both tails
        out = y * eta - np.logaddexp(0.0, eta)
    else:
        out = -0.5 * (y - eta) ** 2 / phi - 0.5 * np.log(2.0 * np.pi * phi)
    return out if out.ndim else float(out)


def neg_loglik_derivs(family: Family, link: Link, y, eta, phi=1.0):
    """First and second derivatives of -log f with respect to eta.

    With canonical links the second derivative is the variance function at
    the mean divided by phi, so it is positive for interior eta.
    """
    _check_canonical(family, link)
    _check_phi(family, phi)
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family.kind == "poisson":
        mu = np.exp(eta)
        d1, d2 = mu - y, mu
    elif family.kind == "bernoulli":
        mu = special.expit(eta)
        d1, d2 = mu - y, mu * (1.0 - mu)
    else:
        d1, d2 = (eta - y) / phi, np.full_like(eta, 1.0 / phi)
    if d1.ndim:
        return d1, d2
    return float(d1), float(d2)


def simulate_response(family: Family, link: Link, eta, phi=1.0, rng=None):
    """Draw responses with mean ``link.inverse(eta)``."""
    _check_canonical(family, link)
    _check_phi(family, phi)
    if rng is None:
        rng = np.random.default_rng()
    eta = np.asarray(eta, dtype=float)
    mu = link.inverse(eta)
    if family.kind == "poisson":
        out = rng.poisson(mu).astype(float)
    elif family.kind == "bernoulli":
        out = (rng.random(mu.shape) < mu).astype(float)
    else:
        out = rng.normal(mu, np.sqrt(phi))
    return out if out.ndim else float(out)


def quantile_residual(family: Family, y, mu, phi=1.0, rng=None):
    """Randomized quantile residual: Phi^{-1}(w) with w uniform on the
    CDF step (F(y-1), F(y)] for discrete families and w = F(y) otherwise.

    Under the true model the residuals are standard normal.  ``w`` is
    clipped away from {0, 1} so the normal score stays finite.
    """
    _check_phi(family, phi)
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if family.kind == "gaussian":
        w = stats.norm.cdf(y, loc=mu, scale=np.sqrt(phi))
    else:
        if rng is None:
            rng = np.random.default_rng()
        if family.kind == "poisson":
            hi = stats.poisson.cdf(y, mu)
            lo = stats.poisson.cdf(y - 1.0, mu)
        else:
            hi = np.where(y > 0, 1.0, 1.0 - mu)
            lo = np.where(y > 0, 1.0 - mu, 0.0)
        w = lo + (hi - lo) * rng.random(np.broadcast(y, mu).shape)
    w = np.clip(w, _W_CLIP, 1.0 - _W_CLIP)
    out = stats.norm.ppf(w)
    return out if out.ndim else float(out)


def _kernels(family: Family, y, phi):
    """Validated-once fast closures for repeated likelihood evaluation.

    Returns ``(loglik_sum, derivs)`` where ``loglik_sum(eta)`` is the summed
    log-density (``-inf`` maps overflow) and ``derivs(eta)`` the first and
    second derivatives of the negative log-density in eta.
    """
    y = validate_response(family, y)
    _check_phi(family, phi)
    if family.kind == "poisson":
        const = float(np.sum(special.gammaln(y + 1.0)))

        def loglik_sum(eta):
            return float(y @ eta - np.sum(np.exp(eta))) - const

        def derivs(eta):
            mu = np.exp(eta)
            return mu - y, mu

    elif family.kind == "bernoulli":

        def loglik_sum(eta):
            return float(y @ eta - np.sum(np.logaddexp(0.0, eta)))

        def derivs(eta):
            mu = special.expit(eta)
            return mu - y, mu * (1.0 - mu)

    else:
        const = 0.5 * y.size * np.log(2.0 * np.pi * phi)
        inv_phi = 1.0 / phi

        def loglik_sum(eta):
            r = y - eta
            return -0.5 * inv_phi * float(r @ r) - const

        def derivs(eta):
            return (eta - y) * inv_phi, np.full_like(eta, inv_phi)

    return loglik_sum, derivs


def deviance_residual(family: Family, y, mu, phi=1.0):
    """Signed square root of the unit deviance; zero at y = mu."""
    _check_phi(family, phi)
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if family.kind == "gaussian":
        out = (y - mu) / np.sqrt(phi)
        return out if out.ndim else float(out)
    if family.kind == "poisson":
        with np.errstate(divide="ignore", invalid="ignore"):
            ylogy = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0) / mu), 0.0)
        dev = 2.0 * (ylogy - (y - mu))
    else:
        with np.errstate(divide="ignore"):
            dev = -2.0 * np.where(y > 0, np.log(mu), np.log1p(-mu))
    out = np.sign(y - mu) * np.sqrt(np.maximum(dev, 0.0))
    return out if out.ndim else float(out)
