"""Unconstrained parameterizations of random-effect covariance matrices.

Three structures are supported for a q-dimensional random effect:

``diag``
    Independent coordinates; theta holds q log standard deviations.
``us``
    Unstructured positive-definite covariance via a scaled-Cholesky
    parameterization: q log standard deviations followed by q(q-1)/2
    unconstrained entries filling a unit-diagonal lower triangle row by
    row; each row is normalized to unit length and scaled by its
    standard deviation.  Smooth and surjective onto PD matrices.
``rr``
    Reduced-rank covariance L L^T with L a q x d loading matrix whose
    upper triangle is zero for identifiability; theta fills the lower
    trapezoid column by column, d*q - d*(d-1)/2 entries in total.

The loading diagonal is left unconstrained in sign: reported quantities
derive from L L^T and are invariant to the residual sign ambiguity, so
raw loadings are reported as fitted.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_SD_FLOOR = 1e-12  # below this, a coordinate is treated as degenerate


@lru_cache(maxsize=128)
def _upper_indices(q: int, d: int):
    rows, cols = np.triu_indices(q, k=1)
    keep = cols < d
    return rows[keep], cols[keep]


@dataclass(frozen=True)
class LoadingMatrix:
    """A q x d factor-loading matrix with zero upper triangle."""

    q: int
    d: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.q, self.d):
            raise ValueError(f"loading matrix must be {self.q}x{self.d}, got {v.shape}")
        if self.d > self.q:
            raise ValueError("rank cannot exceed the random-effect dimension")
        rows, cols = _upper_indices(self.q, self.d)
        if np.any(v[rows, cols] != 0.0):
            raise ValueError("upper triangle of a loading matrix must be zero")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class CovarianceStructure:
    """Structure descriptor for one random term."""

    kind: str
    q: int
    rank: int | None = None

    def __post_init__(self):
        if self.kind not in ("diag", "us", "rr"):
            raise ValueError(f"unknown covariance structure {self.kind!r}")
        if self.q < 1:
            raise ValueError("dimension q must be at least 1")
        if self.kind == "rr":
            if self.rank is None or not (1 <= self.rank <= self.q):
                raise ValueError(f"rr rank must be in [1, {self.q}], got {self.rank}")

    @property
    def n_params(self):
        return num_params(self.kind, self.q, self.rank)


def num_params(kind: str, q: int, rank: int | None = None) -> int:
    """Free covariance parameters: q(q+1)/2 (us), q (diag), dq - d(d-1)/2 (rr).

    rank 0 is accepted for rr and means the term is absent (0 parameters),
    which is how rank sweeps encode a dropped term.
    """
    if q < 1:
        raise ValueError("dimension q must be at least 1")
    if kind == "us":
        return q * (q + 1) // 2
    if kind == "diag":
        return q
    if kind == "rr":
        if rank is None or not (0 <= rank <= q):
            raise ValueError(f"rr rank must be in [0, {q}], got {rank}")
        return rank * q - rank * (rank - 1) // 2
    raise ValueError(f"unknown covariance structure {kind!r}")


@lru_cache(maxsize=128)
def loading_indices(q: int, d: int):
    """Row/column indices of the free entries, column-major over the
    lower trapezoid."""
    rows = np.concatenate([np.arange(j, q) for j in range(d)])
    cols = np.concatenate([np.full(q - j, j, dtype=int) for j in range(d)])
    return rows, cols


def fill_loading(theta, q: int, d: int) -> np.ndarray:
    """Raw q x d loading array from its free-parameter vector."""
    theta = np.asarray(theta, dtype=float)
    expected = num_params("rr", q, d)
    if theta.shape != (expected,):
        raise ValueError(f"expected {expected} loading parameters, got {theta.shape}")
    L = np.zeros((q, d))
    rows, cols = loading_indices(q, d)
    L[rows, cols] = theta
    return L


def theta_to_loading(theta, q: int, d: int) -> LoadingMatrix:
    """Fill a q x d loading matrix from its free-parameter vector."""
    return LoadingMatrix(q, d, fill_loading(theta, q, d))


def loading_to_theta(L: LoadingMatrix) -> np.ndarray:
    rows, cols = loading_indices(L.q, L.d)
    return L.values[rows, cols].copy()


def loading_to_cov(L: LoadingMatrix) -> np.ndarray:
    """The implied covariance L L^T (rank at most d, PSD by construction)."""
    return L.values @ L.values.T


def cov_factor(cs: CovarianceStructure, theta) -> np.ndarray:
    """A matrix F with realized covariance F F^T.

    For diag/us, F is square lower triangular with positive diagonal, so
    it doubles as a Cholesky factor; for rr it is the q x d loading matrix.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (cs.n_params,):
        raise ValueError(
            f"{cs.kind}(q={cs.q}) expects {cs.n_params} parameters, got {theta.shape}"
        )
    if cs.kind == "rr":
        return theta_to_loading(theta, cs.q, cs.rank).values
    if cs.kind == "diag":
        return np.diag(np.exp(theta))
    q = cs.q
    sd = np.exp(theta[:q])
    L = np.eye(q)
    rows, cols = np.tril_indices(q, k=-1)
    L[rows, cols] = theta[q:]
    L /= np.linalg.norm(L, axis=1, keepdims=True)
    return sd[:, None] * L


def theta_to_cov(cs: CovarianceStructure, theta) -> np.ndarray:
    """Realized covariance matrix for the structure at ``theta``."""
    F = cov_factor(cs, theta)
    return F @ F.T


def cov_to_sd_corr(S):
    """Standard deviations and correlation matrix of a PSD covariance.

    Correlations involving a coordinate whose standard deviation falls
    below 1e-12 are reported as zero; the diagonal is exactly one for
    the non-degenerate coordinates.
    """
    S = np.asarray(S, dtype=float)
    sd = np.sqrt(np.maximum(np.diag(S), 0.0))
    ok = sd > _SD_FLOOR
    denom = np.where(ok, sd, 1.0)
    corr = S / denom[:, None] / denom[None, :]
    corr = np.where(ok[:, None] & ok[None, :], corr, 0.0)
    corr[np.diag_indices_from(corr)] = np.where(ok, 1.0, 0.0)
    return sd, corr
