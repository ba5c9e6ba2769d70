"""Outer maximization of the Laplace marginal likelihood.

The outer loop is BFGS with a cubic-interpolation backtracking line
search on the packed parameter vector; gradients come from central
finite differences of the Laplace objective (valid because the inner
Newton solve is converged far below the differencing step).  Starting
values are either all zeros or the residual-based scheme: a GLM fit
supplies the fixed effects, randomized-quantile (discrete families) or
deviance (gaussian) residuals are averaged per group, and a truncated
SVD of that matrix seeds the factor loadings and latent coordinates.
Multi-start fitting jitters the latent starts and keeps the best
converged restart.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from . import covstruct, families
from .families import Family, Link, canonical_link, get_family
from .formula import ModelSpec, parse_formula
from .laplace import (
    JointModel,
    LatentState,
    ParamVector,
    build_joint_model,
    laplace_nll,
)

_BETA_CAP = 30.0  # logit-scale cap signalling complete separation


class FitError(RuntimeError):
    """No restart produced a usable fit; carries per-restart diagnostics."""

    def __init__(self, message, restarts=()):
        super().__init__(message)
        self.restarts = list(restarts)


@dataclass
class FitControl:
    """Knobs of the fitting pipeline.

    ``start_method`` is ``"zero"`` (all parameters at zero) or ``"res"``
    (GLM plus residual factorization); ``jitter_sd = 0`` makes restarts
    deterministic.
    """

    start_method: str = "zero"
    jitter_sd: float = 0.0
    restarts: int = 1
    outer_tol: float = 1e-5
    max_outer_iter: int = 500
    seed: int = 1
    inner_tol: float = 1e-8
    inner_max_iter: int = 100

    def __post_init__(self):
        if self.start_method not in ("zero", "res"):
            raise ValueError(f"unknown start_method {self.start_method!r}")
        if self.jitter_sd < 0:
            raise ValueError("jitter_sd must be non-negative")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")


@dataclass
class RestartRecord:
    restart: int
    nll: float
    converged: bool
    n_iter: int
    message: str = ""


@dataclass
class FitResult:
    """A fitted model: estimates, latent modes, and diagnostics."""

    psi_hat: ParamVector
    v_hat: LatentState
    nll: float
    converged: bool
    n_outer_iter: int
    gradient_norm: float
    restart_log: list
    model: JointModel
    control: FitControl
    _information: np.ndarray | None = field(default=None, repr=False)

    @property
    def loglik(self):
        return -self.nll

    @property
    def packed(self):
        return self.model.pack(self.psi_hat)


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    converged: bool
    n_iter: int
    grad_norm: float
    n_evals: int
    message: str


# ---------------------------------------------------------------------------
# reference GLM by iteratively reweighted least squares
# ---------------------------------------------------------------------------


def irls_glm(X, y, family: Family, link: Link | None = None, max_iter=50, tol=1e-10):
    """Fit a fixed-effects GLM; returns (beta, mu, phi).

    The gaussian dispersion is the residual mean square.  Diverging
    logit-scale coefficients (complete separation) are capped at +-30
    with a warning.
    """
    if isinstance(family, str):
        family = get_family(family)
    link = link or canonical_link(family)
    X = np.asarray(X, dtype=float)
    y = families.validate_response(family, y)
    n, p = X.shape
    rank = np.linalg.matrix_rank(X) if p else 0
    if rank < p:
        raise np.linalg.LinAlgError(
            f"design matrix is rank deficient (rank {rank} < {p} columns)"
        )
    if family.kind == "gaussian":
        mu0 = y.astype(float)
    elif family.kind == "poisson":
        mu0 = y + 0.5
    else:
        mu0 = (y + 0.5) / 2.0
    eta = link(mu0)
    scale = max(1.0, float(np.max(np.abs(X.T @ y))))
    beta = np.zeros(p)
    for _ in range(max_iter):
        d1, d2 = families.neg_loglik_derivs(family, link, y, eta)
        w = np.maximum(d2, 1e-10)
        z = eta - d1 / w
        sw = np.sqrt(w)
        beta, *_ = sla.lstsq(X * sw[:, None], z * sw, check_finite=False)
        eta = X @ beta
        if family.kind == "bernoulli" and np.max(np.abs(beta)) > _BETA_CAP:
            warnings.warn(
                "GLM coefficients diverged on the logit scale (separation?); capped at +-30",
                RuntimeWarning,
            )
            beta = np.clip(beta, -_BETA_CAP, _BETA_CAP)
            eta = X @ beta
            break
        grad = X.T @ families.neg_loglik_derivs(family, link, y, eta)[0]
        if np.max(np.abs(grad)) <= tol * scale:
            break
    mu = link.inverse(eta)
    if family.dispersion_fixed:
        phi = 1.0
    else:
        rss = float(np.sum((y - mu) ** 2))
        phi = rss / (n - p) if n > p else rss / n
        phi = max(phi, 1e-10)
    return beta, mu, phi


# ---------------------------------------------------------------------------
# starting values
# ---------------------------------------------------------------------------


def glm_start_residuals(model: JointModel, rng):
    """GLM fit plus the residual vector used by the "res" initializer.

    Discrete families use randomized quantile residuals, gaussian uses
    deviance residuals.  Returned as a dict so rank sweeps can reuse one
    residual vector across fits.
    """
    beta, mu, phi = irls_glm(model.design.X, model.y, model.family, model.link)
    if model.family.kind == "gaussian":
        resid = families.deviance_residual(model.family, model.y, mu, phi)
    else:
        resid = families.quantile_residual(model.family, model.y, mu, 1.0, rng)
    return {"beta": beta, "mu": mu, "phi": phi, "resid": np.asarray(resid)}


def _residual_factorization(term, resid, rank):
    """Rank-``rank`` factorization of per-group averaged residuals.

    Returns (latent (m, d), loading (q, d)) with the loading rotated onto
    the zero-upper-triangle pattern; the product latent @ loading.T
    reproduces the rank-d SVD truncation of the residual matrix.
    """
    num = np.zeros((term.m, term.q))
    den = np.zeros((term.m, term.q))
    np.add.at(num, term.group_index, term.Z * resid[:, None])
    np.add.at(den, term.group_index, term.Z**2)
    R = np.where(den > 1e-12, num / np.where(den > 0, den, 1.0), 0.0)
    U, s, Vt = np.linalg.svd(R, full_matrices=False)
    k = min(rank, s.size)
    root = np.sqrt(s[:k])
    latent = np.zeros((term.m, rank))
    loading = np.zeros((term.q, rank))
    latent[:, :k] = U[:, :k] * root
    loading[:, :k] = Vt[:k].T * root
    # rotate so the leading d x d block is lower triangular; the latent
    # coordinates absorb the inverse rotation, leaving the product fixed
    T, _ = np.linalg.qr(loading[:rank, :].T)
    loading = loading @ T
    latent = latent @ T
    rows, cols = np.triu_indices(term.q, k=1)
    keep = cols < rank
    loading[rows[keep], cols[keep]] = 0.0
    return latent, loading


def start_values(model: JointModel, control: FitControl, rng, residual_cache=None):
    """Starting parameters and latent coordinates for one fit.

    ``"zero"`` returns all zeros.  ``"res"`` starts the fixed effects at
    the GLM estimates and seeds each reduced-rank term from a truncated
    SVD of groupwise-averaged GLM residuals; diag/us parameters start at
    zero (unit standard deviations).
    """
    psi = model.zero_params()
    state = LatentState.zeros(model.layout)
    if control.start_method == "zero":
        return psi, state
    for cs, term in zip(model.structures, model.design.terms):
        if cs.kind == "rr" and term.m < cs.rank:
            warnings.warn(
                f"term ({term.group}) has fewer groups ({term.m}) than rank "
                f"({cs.rank}); falling back to zero starts",
                RuntimeWarning,
            )
            return psi, state
    cache = residual_cache or glm_start_residuals(model, rng)
    psi.beta = np.asarray(cache["beta"], dtype=float).copy()
    if model.has_dispersion:
        psi.log_phi = float(np.log(cache["phi"]))
    for t, (cs, term) in enumerate(zip(model.structures, model.design.terms)):
        if cs.kind != "rr":
            continue
        latent, loading = _residual_factorization(term, cache["resid"], cs.rank)
        psi.thetas[t] = covstruct.loading_to_theta(
            covstruct.LoadingMatrix(cs.q, cs.rank, loading)
        )
        state.term_matrix(t)[:] = latent
    return psi, state


def jitter_latents(state: LatentState, sd: float, rng) -> LatentState:
    """Add N(0, sd^2) noise to the reduced-rank latent coordinates only."""
    if sd < 0:
        raise ValueError("jitter sd must be non-negative")
    out = state.copy()
    if sd == 0:
        return out
    for t, kind in enumerate(state.layout.kinds):
        if kind == "rr":
            M = out.term_matrix(t)
            M += rng.normal(0.0, sd, size=M.shape)
    return out


# ---------------------------------------------------------------------------
# finite differences and BFGS
# ---------------------------------------------------------------------------


def fd_step(x) -> np.ndarray:
    """Per-coordinate central-difference step: max(1e-6, 1e-7 |x_k|)."""
    return np.maximum(1e-6, 1e-7 * np.abs(np.asarray(x, dtype=float)))


def fd_gradient(fun, x, f0=None, step=None):
    """Central finite-difference gradient, tolerant of one-sided infinities."""
    x = np.asarray(x, dtype=float)
    h = fd_step(x) if step is None else np.broadcast_to(step, x.shape)
    g = np.empty_like(x)
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[k] += h[k]
        xm[k] -= h[k]
        fp, fm = fun(xp), fun(xm)
        if np.isfinite(fp) and np.isfinite(fm):
            g[k] = (fp - fm) / (2.0 * h[k])
        else:
            if f0 is None:
                f0 = fun(x)
            if np.isfinite(fp):
                g[k] = (fp - f0) / h[k]
            elif np.isfinite(fm):
                g[k] = (f0 - fm) / h[k]
            else:
                g[k] = 0.0
    return g


def _cubic_backtrack(fun, x, f0, g, direction, max_tries=40):
    """Armijo backtracking with quadratic/cubic interpolation.

    Returns (t, x_new, f_new, n_evals) or (None, ...) when no point with a
    strict decrease exists along the direction.
    """
    c1 = 1e-4
    dphi0 = float(g @ direction)
    t, t_prev, f_prev = 1.0, None, None
    n_evals = 0
    for _ in range(max_tries):
        x_new = x + t * direction
        f_new = fun(x_new)
        n_evals += 1
        if np.isfinite(f_new) and f_new <= f0 + c1 * t * dphi0 and f_new < f0:
            return t, x_new, f_new, n_evals
        if not np.isfinite(f_new) or abs(f_new) > 1e100:
            t_next = 0.3 * t
        elif t_prev is None:
            # quadratic interpolation through phi(0), phi'(0), phi(t)
            denom = 2.0 * (f_new - f0 - dphi0 * t)
            t_next = -dphi0 * t * t / denom if denom > 0 else 0.5 * t
        else:
            # cubic through phi(0), phi'(0), phi(t), phi(t_prev)
            with np.errstate(over="ignore", invalid="ignore"):
                r1 = f_new - f0 - dphi0 * t
                r2 = f_prev - f0 - dphi0 * t_prev
                mat = np.array(
                    [
                        [1.0 / t**2, -1.0 / t_prev**2],
                        [-t_prev / t**2, t / t_prev**2],
                    ]
                )
                a, b = mat @ np.array([r1, r2]) / (t - t_prev)
                disc = b * b - 3.0 * a * dphi0
                if a != 0 and np.isfinite(disc) and disc >= 0:
                    t_next = (-b + np.sqrt(disc)) / (3.0 * a)
                else:
                    t_next = 0.5 * t
        if np.isfinite(f_new):
            t_prev, f_prev = t, f_new
        if not np.isfinite(t_next) or t_next <= 0:
            t_next = 0.5 * t
        t = float(np.clip(t_next, 0.05 * t, 0.5 * t))
    return None, x, f0, n_evals


def outer_minimize(objective, x0, control: FitControl | None = None) -> MinimizeResult:
    """Quasi-Newton (BFGS) minimization with finite-difference gradients.

    Converged when the gradient sup-norm drops to ``outer_tol`` or an
    accepted step changes the objective by a relative 1e-10 or less.
    Steps that would increase the objective are never accepted.
    """
    control = control or FitControl()
    x = np.asarray(x0, dtype=float).copy()
    if x.size == 0:
        return MinimizeResult(x, objective(x), True, 0, 0.0, 1, "nothing to optimize")
    f = objective(x)
    n_evals = 1
    if not np.isfinite(f):
        return MinimizeResult(x, f, False, 0, np.inf, n_evals, "objective not finite at start")
    g = fd_gradient(objective, x, f)
    n_evals += 2 * x.size
    Hinv = np.eye(x.size)
    message = "max iterations reached"
    converged = False
    n_iter = 0
    while n_iter < control.max_outer_iter:
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= control.outer_tol:
            converged, message = True, "gradient tolerance reached"
            break
        direction = -Hinv @ g
        if g @ direction >= 0:
            Hinv = np.eye(x.size)
            direction = -g
        t, x_new, f_new, k = _cubic_backtrack(objective, x, f, g, direction)
        n_evals += k
        if t is None:
            message = "line search found no decrease"
            break
        n_iter += 1
        g_new = fd_gradient(objective, x_new, f_new)
        n_evals += 2 * x.size
        s, yk = x_new - x, g_new - g
        sy = float(s @ yk)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yk):
            rho = 1.0 / sy
            V = np.eye(x.size) - rho * np.outer(s, yk)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        rel_change = abs(f - f_new) / max(1.0, abs(f))
        x, f, g = x_new, f_new, g_new
        if rel_change <= 1e-10:
            converged, message = True, "objective change below tolerance"
            break
    gnorm = float(np.max(np.abs(g)))
    if not converged and gnorm <= control.outer_tol:
        converged, message = True, "gradient tolerance reached"
    return MinimizeResult(x, f, converged, n_iter, gnorm, n_evals, message)


# ---------------------------------------------------------------------------
# full fitting pipeline
# ---------------------------------------------------------------------------


def make_objective(model: JointModel, control: FitControl, v_start=None):
    """Laplace-nll objective over packed parameters with warm-started
    latent modes; returns (objective, shared-state dict)."""
    shared = {
        "v": v_start.v.copy() if isinstance(v_start, LatentState) else None,
        "best": np.inf,
    }

    def objective(x):
        psi = model.unpack(x)
        nll, state = laplace_nll(
            model,
            psi,
            warm_start=shared["v"],
            tol=control.inner_tol,
            max_iter=control.inner_max_iter,
        )
        if nll < shared["best"]:
            shared["best"] = nll
            shared["v"] = state.v.copy()
        return nll

    return objective, shared


def fit(
    spec: ModelSpec | str,
    data,
    family,
    control: FitControl | None = None,
    residual_cache=None,
    x0=None,
) -> FitResult:
    """Fit a mixed model by maximizing the Laplace marginal likelihood.

    ``spec`` may be a parsed ModelSpec or a formula string.  Runs
    ``control.restarts`` independently jittered starts (restart r draws
    from stream r of the master seed) and returns the best converged
    restart together with the full restart log.  ``x0`` overrides the
    starting parameters (used by bootstrap refits).
    """
    control = control or FitControl()
    if isinstance(spec, str):
        spec = parse_formula(spec)
    model = spec if isinstance(spec, JointModel) else build_joint_model(spec, data, family)
    return fit_model(model, control, residual_cache=residual_cache, x0=x0)


def fit_model(model: JointModel, control: FitControl, residual_cache=None, x0=None) -> FitResult:
    """Fit an assembled JointModel; see :func:`fit`."""
    root = np.random.SeedSequence(control.seed)
    streams = root.spawn(control.restarts + 1)
    if x0 is not None:
        psi0 = model.unpack(np.asarray(x0, dtype=float))
        v0 = LatentState.zeros(model.layout)
    else:
        rng0 = np.random.default_rng(streams[0])
        psi0, v0 = start_values(model, control, rng0, residual_cache=residual_cache)
    x_start = model.pack(psi0)

    records = []
    best = None
    for r in range(control.restarts):
        rng_r = np.random.default_rng(streams[r + 1])
        v_r = jitter_latents(v0, control.jitter_sd, rng_r)
        objective, shared = make_objective(model, control, v_start=v_r)
        x_r = x_start
        if not np.isfinite(objective(x_r)):
            # bad start (e.g. wild residual loadings): retry from zeros
            x_r = np.zeros(model.n_params)
            shared["v"] = None
            shared["best"] = np.inf
        res = outer_minimize(objective, x_r, control)
        records.append(
            RestartRecord(r, float(res.fun), bool(res.converged), res.n_iter, res.message)
        )
        if np.isfinite(res.fun):
            # converged restarts always beat non-converged; then smallest nll
            key = (not res.converged, res.fun)
            if best is None or key < best[2]:
                best = (res, shared["v"], key)
    if best is None:
        raise FitError("all restarts failed to produce a finite objective", records)
    res, v_best, _ = best
    nll, state = laplace_nll(
        model,
        model.unpack(res.x),
        warm_start=v_best,
        tol=control.inner_tol,
        max_iter=control.inner_max_iter,
    )
    return FitResult(
        psi_hat=model.unpack(res.x),
        v_hat=state,
        nll=float(nll),
        converged=bool(res.converged),
        n_outer_iter=res.n_iter,
        gradient_norm=res.grad_norm,
        restart_log=records,
        model=model,
        control=control,
    )
