"""Post-fit quantities: information matrices, delta-method standard
errors, variance-component reports, information criteria, simulation,
parametric-bootstrap likelihood-ratio tests, ordination, and rank sweeps.

Standard errors are based on the observed information of the Laplace
objective (latents profiled out), computed by central second differences
around the optimum with warm-started inner solves.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg as sla

from . import covstruct
from .families import simulate_response
from .fitting import (
    FitControl,
    FitError,
    FitResult,
    fit,
    fit_model,
    glm_start_residuals,
)
from .formula import ModelSpec, parse_formula
from .laplace import (
    JointModel,
    LatentState,
    ParamVector,
    build_joint_model,
    laplace_nll,
    linear_predictor,
)


# ---------------------------------------------------------------------------
# observed information and delta method
# ---------------------------------------------------------------------------


def _nll_function(fit: FitResult, model: JointModel):
    control = fit.control

    def f(x):
        nll, _ = laplace_nll(
            model,
            model.unpack(x),
            warm_start=fit.v_hat,
            tol=control.inner_tol,
            max_iter=control.inner_max_iter,
        )
        return nll

    return f


def observed_information(fit: FitResult, model: JointModel | None = None) -> np.ndarray:
    """Numeric Hessian of the Laplace nll at the estimate.

    Central second differences with per-coordinate step 1e-3 max(1, |x_k|),
    symmetrized as (H + H^T)/2.  Cached on the fit.
    """
    model = model or fit.model
    if fit._information is not None:
        return fit._information
    f = _nll_function(fit, model)
    x = fit.packed
    k = x.size
    h = 1e-3 * np.maximum(1.0, np.abs(x))
    f0 = f(x)
    H = np.empty((k, k))
    fp = np.empty(k)
    fm = np.empty(k)
    for a in range(k):
        xp, xm = x.copy(), x.copy()
        xp[a] += h[a]
        xm[a] -= h[a]
        fp[a], fm[a] = f(xp), f(xm)
        H[a, a] = (fp[a] - 2.0 * f0 + fm[a]) / h[a] ** 2
    for a in range(k):
        for b in range(a + 1, k):
            xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
            xpp[[a, b]] += [h[a], h[b]]
            xpm[[a, b]] += [h[a], -h[b]]
            xmp[[a, b]] += [-h[a], h[b]]
            xmm[[a, b]] += [-h[a], -h[b]]
            H[a, b] = H[b, a] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4.0 * h[a] * h[b])
    H = 0.5 * (H + H.T)
    fit._information = H
    return H


def param_covariance(fit: FitResult, model: JointModel | None = None):
    """Inverse observed information; returns (V, flagged).

    A non-positive-definite information matrix triggers a warning and a
    pseudo-inverse, with ``flagged = True``.
    """
    H = observed_information(fit, model)
    try:
        c = sla.cho_factor(H, lower=True, check_finite=False)
        V = sla.cho_solve(c, np.eye(H.shape[0]), check_finite=False)
        return V, False
    except np.linalg.LinAlgError:
        warnings.warn(
            "observed information is not positive definite; standard errors "
            "use a pseudo-inverse and are flagged",
            RuntimeWarning,
        )
        return sla.pinvh(H), True


def delta_se(fit: FitResult, transform, model: JointModel | None = None) -> np.ndarray:
    """Delta-method standard errors of ``transform(psi)``.

    ``transform`` maps a ParamVector to a vector; its Jacobian is taken by
    central differences over the packed parameters.  Entries whose
    implied variance is negative are returned as NaN.
    """
    model = model or fit.model
    V, flagged = param_covariance(fit, model)
    x = fit.packed
    h = 1e-6 * np.maximum(1.0, np.abs(x))
    out0 = np.atleast_1d(np.asarray(transform(model.unpack(x)), dtype=float))
    J = np.empty((out0.size, x.size))
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[k] += h[k]
        xm[k] -= h[k]
        op = np.atleast_1d(np.asarray(transform(model.unpack(xp)), dtype=float))
        om = np.atleast_1d(np.asarray(transform(model.unpack(xm)), dtype=float))
        J[:, k] = (op - om) / (2.0 * h[k])
    var = np.einsum("ij,jk,ik->i", J, V, J)
    bad = var < 0
    if bad.any() and not flagged:
        warnings.warn("negative delta-method variances flagged as NaN", RuntimeWarning)
    return np.where(bad, np.nan, np.sqrt(np.maximum(var, 0.0)))


def fixed_effect_table(fit: FitResult, model: JointModel | None = None):
    """Estimates and SEs of the fixed effects from the inverse information."""
    model = model or fit.model
    V, _ = param_covariance(fit, model)
    se = np.sqrt(np.maximum(np.diag(V)[: model.p], 0.0))
    return list(zip(model.design.xnames, fit.psi_hat.beta, se))


# ---------------------------------------------------------------------------
# variance components and information criteria
# ---------------------------------------------------------------------------


@dataclass
class TermVarCorr:
    group: str
    structure: str
    rank: int | None
    names: list
    sd: np.ndarray
    corr: np.ndarray

    def to_dict(self):
        return {
            "group": self.group,
            "structure": self.structure,
            "rank": self.rank,
            "names": list(self.names),
            "sd": [float(v) for v in self.sd],
            "corr": [[float(v) for v in row] for row in self.corr],
        }


@dataclass
class VarCorrReport:
    terms: list

    def to_dict(self):
        return {"terms": [t.to_dict() for t in self.terms]}


def var_corr(fit: FitResult, model: JointModel | None = None) -> VarCorrReport:
    """Per-term standard deviations and correlations of the realized
    covariance (L L^T for reduced-rank terms, singular by design)."""
    model = model or fit.model
    out = []
    for t, (cs, term) in enumerate(zip(model.structures, model.design.terms)):
        S = covstruct.theta_to_cov(cs, fit.psi_hat.thetas[t])
        sd, corr = covstruct.cov_to_sd_corr(S)
        out.append(TermVarCorr(term.group, cs.kind, cs.rank, list(term.colnames), sd, corr))
    return VarCorrReport(out)


@dataclass
class InformationCriteria:
    aic: float
    bic: float
    loglik: float
    df: int

    def __iter__(self):
        return iter((self.aic, self.bic, self.loglik, self.df))


def information_criteria(fit: FitResult) -> InformationCriteria:
    """AIC = 2k - 2l and BIC = k log n - 2l with k the packed-parameter count."""
    k = fit.model.n_params
    n = fit.model.n_obs
    ll = fit.loglik
    return InformationCriteria(2.0 * k - 2.0 * ll, k * np.log(n) - 2.0 * ll, ll, k)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def simulate_from_params(model: JointModel, psi: ParamVector, rng):
    """Draw a response vector: fresh latents from their priors, then
    family draws at the implied linear predictor."""
    state = LatentState.zeros(model.layout)
    for t, cs in enumerate(model.structures):
        m = model.layout.counts[t]
        if cs.kind == "rr":
            state.term_matrix(t)[:] = rng.standard_normal((m, cs.rank))
        else:
            F = covstruct.cov_factor(cs, psi.thetas[t])
            state.term_matrix(t)[:] = rng.standard_normal((m, cs.q)) @ F.T
    eta = linear_predictor(model, psi, state)
    return simulate_response(model.family, model.link, eta, psi.phi, rng)


def simulate_fit(fit: FitResult, model: JointModel | None = None, rng=None):
    """Simulate a response vector from the fitted model."""
    model = model or fit.model
    if rng is None:
        rng = np.random.default_rng()
    return simulate_from_params(model, fit.psi_hat, rng)


# ---------------------------------------------------------------------------
# parametric bootstrap likelihood-ratio test
# ---------------------------------------------------------------------------


@dataclass
class BootstrapResult:
    lr_obs: float
    replicates: np.ndarray
    p_value: float
    R_requested: int
    R_used: int
    n_failed: int

    def to_dict(self):
        return {
            "lr_obs": float(self.lr_obs),
            "p_value": float(self.p_value),
            "R_requested": int(self.R_requested),
            "R_used": int(self.R_used),
            "n_failed": int(self.n_failed),
            "replicates": [float(v) for v in self.replicates],
        }


def bootstrap_pvalue(lr_obs: float, replicates) -> float:
    """p = (#{replicate >= observed} + 1) / (R_used + 1)."""
    replicates = np.asarray(replicates, dtype=float)
    return (float(np.sum(replicates >= lr_obs)) + 1.0) / (replicates.size + 1.0)


def check_nested(null_model: JointModel, alt_model: JointModel) -> bool:
    """Heuristic nesting check: parameter counts, fixed-column subset,
    and per-term structure compatibility."""
    if null_model.n_params > alt_model.n_params:
        return False
    if not set(null_model.design.xnames) <= set(alt_model.design.xnames):
        return False
    alt_terms = {
        (t.group, cs.kind, tuple(t.colnames)): cs
        for cs, t in zip(alt_model.structures, alt_model.design.terms)
    }
    for cs, t in zip(null_model.structures, null_model.design.terms):
        match = alt_terms.get((t.group, cs.kind, tuple(t.colnames)))
        if match is None:
            return False
        if cs.kind == "rr" and cs.rank > match.rank:
            return False
    return True


def embed_params(source: JointModel, source_x, target: JointModel) -> np.ndarray:
    """Map packed parameters of a nested model into a larger model's
    space by name; parameters absent from the source start at zero."""
    values = dict(zip(source.param_names(), np.asarray(source_x, dtype=float)))
    return np.array([values.get(name, 0.0) for name in target.param_names()])


def _replicate_batch(models, x_starts, control, seeds, indices):
    null_model, alt_model = models
    x_null, x_alt = x_starts
    out = []
    for r in indices:
        rng = np.random.default_rng(seeds[r])
        y = simulate_from_params(null_model, null_model.unpack(x_null), rng)
        lr = np.nan
        try:
            f0 = fit_model(null_model.with_response(y), control, x0=x_null)
            f1 = fit_model(alt_model.with_response(y), control, x0=x_alt)
            if f0.converged and f1.converged:
                lr = 2.0 * (f0.nll - f1.nll)
        except (FitError, np.linalg.LinAlgError):
            pass
        out.append((r, lr))
    return out


def bootstrap_lrt(
    null_spec,
    alt_spec,
    data,
    family,
    R: int,
    control: FitControl | None = None,
    rng=None,
    jobs: int = 1,
    require_nested: bool = True,
) -> BootstrapResult:
    """Parametric-bootstrap likelihood-ratio test of nested models.

    Replicates are simulated from the fitted null and both models are
    refitted to each replicate starting from the parent estimates;
    replicates whose refits fail to converge are recorded and excluded.
    """
    control = control or FitControl()
    if isinstance(null_spec, str):
        null_spec = parse_formula(null_spec)
    if isinstance(alt_spec, str):
        alt_spec = parse_formula(alt_spec)
    null_model = build_joint_model(null_spec, data, family)
    alt_model = build_joint_model(alt_spec, data, family)
    if require_nested and not check_nested(null_model, alt_model):
        raise ValueError(
            "null model does not look nested in the alternative "
            "(pass require_nested=False to override)"
        )

    fit0 = fit_model(null_model, control)
    fit1 = fit_model(alt_model, control)
    lr_obs = 2.0 * (fit0.nll - fit1.nll)
    if lr_obs < -1e-6:
        warnings.warn(
            f"observed LR is negative ({lr_obs:.3g}); refitting the "
            "alternative from the null's solution",
            RuntimeWarning,
        )
        x0_embed = embed_params(null_model, fit0.packed, alt_model)
        retry = fit_model(alt_model, control, x0=x0_embed)
        if retry.nll < fit1.nll:
            fit1 = retry
        lr_obs = 2.0 * (fit0.nll - fit1.nll)

    if rng is None:
        root = np.random.SeedSequence(entropy=control.seed, spawn_key=(0xB00,))
    elif isinstance(rng, np.random.SeedSequence):
        root = rng
    elif isinstance(rng, np.random.Generator):
        root = np.random.SeedSequence(int(rng.integers(2**63)))
    else:
        root = np.random.SeedSequence(int(rng))
    seeds = root.spawn(R)

    rep_control = replace(control, restarts=1, jitter_sd=0.0, start_method="zero")
    models = (null_model, alt_model)
    x_starts = (fit0.packed, fit1.packed)
    results = {}
    if jobs > 1 and R > 1:
        batches = np.array_split(np.arange(R), min(4 * jobs, R))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_replicate_batch, models, x_starts, rep_control, seeds, list(b))
                for b in batches
                if len(b)
            ]
            for fut in futures:
                results.update(dict(fut.result()))
    else:
        results = dict(_replicate_batch(models, x_starts, rep_control, seeds, range(R)))
    lrs = np.array([results[r] for r in range(R)])
    ok = np.isfinite(lrs)
    replicates = lrs[ok]
    return BootstrapResult(
        lr_obs=float(lr_obs),
        replicates=replicates,
        p_value=bootstrap_pvalue(lr_obs, replicates),
        R_requested=R,
        R_used=int(ok.sum()),
        n_failed=int(R - ok.sum()),
    )


# ---------------------------------------------------------------------------
# ordination and rank sweep
# ---------------------------------------------------------------------------


@dataclass
class Ordination:
    scores: np.ndarray
    loadings: np.ndarray
    group_labels: list
    var_labels: list
    axis_labels: list


def ordination(fit: FitResult, model: JointModel | None = None, term_index=None) -> Ordination:
    """Latent scores (group modes) and factor loadings of a reduced-rank
    term, ready for a biplot."""
    model = model or fit.model
    kinds = [cs.kind for cs in model.structures]
    if term_index is None:
        if "rr" not in kinds:
            raise ValueError("model has no reduced-rank term to ordinate")
        term_index = kinds.index("rr")
    cs = model.structures[term_index]
    if cs.kind != "rr":
        raise ValueError(f"random term {term_index} is {cs.kind}, not rr")
    term = model.design.terms[term_index]
    lam = covstruct.theta_to_loading(fit.psi_hat.thetas[term_index], cs.q, cs.rank)
    scores = fit.v_hat.term_matrix(term_index).copy()
    return Ordination(
        scores=scores,
        loadings=lam.values.copy(),
        group_labels=list(term.group_levels),
        var_labels=list(term.colnames),
        axis_labels=[f"LV{k + 1}" for k in range(cs.rank)],
    )


def conditional_effects(fit: FitResult, model: JointModel | None = None):
    """Conditional random-effect estimates per (term, group, coordinate).

    For reduced-rank terms the effect is the loading-mapped mode with a
    delta-method band that propagates loading uncertainty at fixed modes
    (an approximation); diag/us effects are the modes themselves.
    Returns a list of row dicts.
    """
    model = model or fit.model
    rows = []
    for t, (cs, term) in enumerate(zip(model.structures, model.design.terms)):
        modes = fit.v_hat.term_matrix(t)
        if cs.kind == "rr":
            U = modes.copy()

            def effect_transform(psi, t=t, cs=cs, U=U):
                lam = covstruct.theta_to_loading(psi.thetas[t], cs.q, cs.rank)
                return (U @ lam.values.T).ravel()

            effects = (U @ covstruct.theta_to_loading(
                fit.psi_hat.thetas[t], cs.q, cs.rank
            ).values.T)
            se = delta_se(fit, effect_transform, model).reshape(effects.shape)
            for g, glabel in enumerate(term.group_levels):
                for j, name in enumerate(term.colnames):
                    rows.append(
                        {
                            "term": t,
                            "structure": cs.kind,
                            "group": glabel,
                            "name": name,
                            "mode": float(effects[g, j]),
                            "se": float(se[g, j]),
                        }
                    )
                for k in range(cs.rank):
                    rows.append(
                        {
                            "term": t,
                            "structure": cs.kind,
                            "group": glabel,
                            "name": f"LV{k + 1}",
                            "mode": float(U[g, k]),
                            "se": float("nan"),
                        }
                    )
        else:
            for g, glabel in enumerate(term.group_levels):
                for j, name in enumerate(term.colnames):
                    rows.append(
                        {
                            "term": t,
                            "structure": cs.kind,
                            "group": glabel,
                            "name": name,
                            "mode": float(modes[g, j]),
                            "se": float("nan"),
                        }
                    )
    return rows


@dataclass
class RankSweepRow:
    d: int
    converged: bool
    loglik: float
    aic: float
    bic: float
    estimates: dict
    error: str = ""


def rank_sweep(
    spec,
    data,
    family,
    d_values,
    control: FitControl | None = None,
    term_index=None,
) -> list:
    """Refit across candidate ranks of one reduced-rank term.

    ``d = 0`` drops the term.  All fits share the control seed and the
    residual starting values (computed once), so rows are comparable.
    Failures are recorded in the row rather than raised.
    """
    control = control or FitControl(start_method="res")
    if isinstance(spec, str):
        spec = parse_formula(spec)
    if term_index is None:
        kinds = [t.structure for t in spec.random_terms]
        if "rr" not in kinds:
            raise ValueError("formula has no reduced-rank term to sweep")
        term_index = kinds.index("rr")

    residual_cache = None
    if control.start_method == "res":
        probe = spec.with_rank(term_index, 1)
        model = build_joint_model(probe, data, family)
        rng = np.random.default_rng(np.random.SeedSequence(control.seed).spawn(1)[0])
        residual_cache = glm_start_residuals(model, rng)

    rows = []
    for d in sorted(int(d) for d in d_values):
        try:
            spec_d = spec.with_rank(term_index, d)
            result = fit(spec_d, data, family, control, residual_cache=residual_cache)
            ic = information_criteria(result)
            table = fixed_effect_table(result)
            estimates = {name: (float(est), float(se)) for name, est, se in table}
            rows.append(
                RankSweepRow(d, result.converged, ic.loglik, ic.aic, ic.bic, estimates)
            )
        except Exception as err:  # failures keep their row, flagged
            rows.append(RankSweepRow(d, False, np.nan, np.nan, np.nan, {}, str(err)))
    return rows
