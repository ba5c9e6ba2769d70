"""Laplace-approximated marginal negative log-likelihood.

The latent vector stacks, for every random term and every group, either
the low-dimensional factor coordinates (reduced-rank terms, standard
normal prior) or the random-effect coordinates themselves (diag/us
terms, N(0, Sigma) prior).  For a packed parameter vector the marginal
negative log-likelihood is approximated by

    nll = Q(v_hat) + 1/2 log det H(v_hat) - dim(v)/2 * log(2 pi)

where Q is the joint negative log-density (conditional likelihood plus
latent prior, normalizing constants included), v_hat its minimizer found
by a safeguarded Newton iteration, and H the Hessian of Q at the mode.
For gaussian responses with identity link the exponent is quadratic and
the value equals the exact marginal negative log-likelihood.

Two factorization paths are used: a batched per-group Cholesky when all
random terms share one grouping factor (the Hessian is block diagonal by
group), and a dense symmetric factorization otherwise.  Evaluations are
deterministic functions of (model, parameters, warm start).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy import sparse

from . import covstruct, families
from .data import DataError, DataTable
from .families import Family, Link, canonical_link, get_family
from .formula import DesignSet, ModelSpec, build_design

_LOG2PI = np.log(2.0 * np.pi)


class InnerNewtonError(RuntimeError):
    """The latent-mode Newton iteration failed to converge."""


# ---------------------------------------------------------------------------
# parameter and latent containers
# ---------------------------------------------------------------------------


@dataclass
class ParamVector:
    """Unpacked model parameters: fixed effects, per-term covariance
    parameters, and (gaussian only) the log dispersion."""

    beta: np.ndarray
    thetas: list
    log_phi: float | None = None

    def copy(self):
        return ParamVector(
            self.beta.copy(), [t.copy() for t in self.thetas], self.log_phi
        )

    @property
    def phi(self):
        return 1.0 if self.log_phi is None else float(np.exp(self.log_phi))


class LatentLayout:
    """Index bookkeeping for the stacked latent vector."""

    def __init__(self, widths, counts, kinds):
        self.widths = list(widths)
        self.counts = list(counts)
        self.kinds = list(kinds)
        self.offsets = []
        off = 0
        for w, m in zip(self.widths, self.counts):
            self.offsets.append(off)
            off += w * m
        self.dim = off

    def term_slice(self, t):
        return slice(self.offsets[t], self.offsets[t] + self.widths[t] * self.counts[t])

    def group_slice(self, t, g):
        start = self.offsets[t] + g * self.widths[t]
        return slice(start, start + self.widths[t])


@dataclass
class LatentState:
    """Stacked latent coordinates plus the layout used to slice them."""

    v: np.ndarray
    layout: LatentLayout

    def term_matrix(self, t) -> np.ndarray:
        """(m_t, s_t) view of term t's coordinates."""
        lay = self.layout
        return self.v[lay.term_slice(t)].reshape(lay.counts[t], lay.widths[t])

    def group_vector(self, t, g) -> np.ndarray:
        return self.v[self.layout.group_slice(t, g)]

    def copy(self):
        return LatentState(self.v.copy(), self.layout)

    @classmethod
    def zeros(cls, layout):
        return cls(np.zeros(layout.dim), layout)


# ---------------------------------------------------------------------------
# joint model
# ---------------------------------------------------------------------------


class _TermIndex:
    """Precomputed grouping indices for one random term."""

    def __init__(self, codes, m):
        self.codes = codes
        self.m = m
        self.order = np.argsort(codes, kind="stable")
        sorted_codes = codes[self.order]
        self.seg_starts = np.searchsorted(sorted_codes, np.arange(m))


class JointModel:
    """A response vector bound to designs, family, and covariance structures.

    Construction validates dimension consistency and the response support,
    and precomputes the index patterns used by repeated likelihood
    evaluations.  Instances are treated as immutable.
    """

    def __init__(self, design: DesignSet, family: Family, link: Link, structures, y):
        self.design = design
        self.family = family
        self.link = link
        self.structures = list(structures)
        if len(self.structures) != len(design.terms):
            raise ValueError("one covariance structure is required per random term")
        for cs, term in zip(self.structures, design.terms):
            if cs.q != term.q:
                raise ValueError(
                    f"structure dimension {cs.q} does not match the "
                    f"{term.q} design columns of ({term.group})"
                )
        self.y = families.validate_response(family, y)
        if self.y.shape != (design.n,):
            raise ValueError("response length does not match the design")

        widths = [
            cs.rank if cs.kind == "rr" else cs.q for cs in self.structures
        ]
        self.layout = LatentLayout(
            widths, [t.m for t in design.terms], [cs.kind for cs in self.structures]
        )
        self._term_index = [_TermIndex(t.group_index, t.m) for t in design.terms]
        self.grouped = bool(design.terms) and all(
            np.array_equal(t.group_index, design.terms[0].group_index)
            for t in design.terms
        )
        if self.grouped:
            self._shared = self._term_index[0]
        # column pattern of the stacked effective design, used on the dense path
        if design.terms and not self.grouped:
            blocks = []
            for t, term in enumerate(design.terms):
                s = self.layout.widths[t]
                cols = (
                    self.layout.offsets[t]
                    + term.group_index[:, None] * s
                    + np.arange(s)[None, :]
                )
                blocks.append(cols)
            self._bcols = np.hstack(blocks).ravel()
            self._bindptr = np.arange(design.n + 1) * sum(self.layout.widths)

        # packed-parameter bookkeeping
        self.p = design.X.shape[1]
        self.theta_slices = []
        off = self.p
        for cs in self.structures:
            self.theta_slices.append(slice(off, off + cs.n_params))
            off += cs.n_params
        self.has_dispersion = not family.dispersion_fixed
        self.n_params = off + (1 if self.has_dispersion else 0)

    # -- packing ------------------------------------------------------------

    def pack(self, psi: ParamVector) -> np.ndarray:
        x = np.empty(self.n_params)
        x[: self.p] = psi.beta
        for sl, theta in zip(self.theta_slices, psi.thetas):
            x[sl] = theta
        if self.has_dispersion:
            x[-1] = psi.log_phi
        return x

    def unpack(self, x) -> ParamVector:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} packed parameters")
        thetas = [x[sl].copy() for sl in self.theta_slices]
        log_phi = float(x[-1]) if self.has_dispersion else None
        return ParamVector(x[: self.p].copy(), thetas, log_phi)

    def zero_params(self) -> ParamVector:
        return self.unpack(np.zeros(self.n_params))

    def param_names(self):
        names = list(self.design.xnames)
        for cs, term in zip(self.structures, self.design.terms):
            label = f"{term.group}.{cs.kind}"
            if cs.kind == "rr":
                rows, cols = covstruct.loading_indices(cs.q, cs.rank)
                names += [
                    f"{label}.L[{term.colnames[r]},{c + 1}]" for r, c in zip(rows, cols)
                ]
            elif cs.kind == "diag":
                names += [f"{label}.logsd[{c}]" for c in term.colnames]
            else:
                names += [f"{label}.logsd[{c}]" for c in term.colnames]
                rows, cols = np.tril_indices(cs.q, k=-1)
                names += [f"{label}.corr[{r + 1},{c + 1}]" for r, c in zip(rows, cols)]
        if self.has_dispersion:
            names.append("log_phi")
        return names

    @property
    def n_obs(self):
        return self.design.n

    def with_response(self, y) -> "JointModel":
        """A copy bound to a new response vector, sharing the designs."""
        other = object.__new__(JointModel)
        other.__dict__.update(self.__dict__)
        other.y = families.validate_response(self.family, np.asarray(y, dtype=float))
        if other.y.shape != (self.design.n,):
            raise ValueError("response length does not match the design")
        return other


def build_joint_model(spec: ModelSpec, data: DataTable, family) -> JointModel:
    """Assemble a JointModel from a parsed formula and a data table."""
    if isinstance(family, str):
        family = get_family(family)
    link = canonical_link(family)
    design = build_design(spec, data)
    if spec.response not in data.names:
        raise DataError(f"no column named {spec.response!r}")
    if data.is_categorical(spec.response):
        raise DataError(f"response column {spec.response!r} must be numeric")
    if data.missing_mask(spec.response).any():
        raise DataError(f"response column {spec.response!r} has missing values")
    y = data.numeric(spec.response)
    structures = [
        covstruct.CovarianceStructure(t.structure, t.q, t.rank) for t in design.terms
    ]
    try:
        return JointModel(design, family, link, structures, y)
    except ValueError as err:
        raise DataError(str(err)) from None


# ---------------------------------------------------------------------------
# per-parameter evaluation context
# ---------------------------------------------------------------------------


class _PsiContext:
    """Caches everything about (model, psi) that does not depend on v."""

    def __init__(self, model: JointModel, psi: ParamVector):
        self.model = model
        self.psi = psi
        self.phi = psi.phi
        self.eta_fixed = model.design.X @ psi.beta
        self.zeff = []
        self.prec = []  # per-term precision; None means identity (rr terms)
        prior_logdet = 0.0
        for t, (cs, term) in enumerate(zip(model.structures, model.design.terms)):
            theta = psi.thetas[t]
            if cs.kind == "rr":
                lam = covstruct.fill_loading(theta, cs.q, cs.rank)
                self.zeff.append(term.Z @ lam)
                self.prec.append(None)
            else:
                F = covstruct.cov_factor(cs, theta)
                Finv = sla.solve_triangular(F, np.eye(cs.q), lower=True)
                self.prec.append(Finv.T @ Finv)
                prior_logdet += 2.0 * term.m * np.sum(np.log(np.diag(F)))
                self.zeff.append(term.Z)
        self.const = 0.5 * prior_logdet + 0.5 * model.layout.dim * _LOG2PI
        self._loglik_sum, self._derivs = families._kernels(model.family, model.y, self.phi)
        self._gaussian_factor = None  # H is constant in v for gaussian models

    # -- pieces -------------------------------------------------------------

    def eta(self, state: LatentState) -> np.ndarray:
        eta = self.eta_fixed.copy()
        for t, term in enumerate(self.model.design.terms):
            V = state.term_matrix(t)
            eta += np.einsum("ns,ns->n", self.zeff[t], V[term.group_index])
        return eta

    def data_nll(self, eta) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            total = self._loglik_sum(eta)
        # a huge-but-finite value still overflows derivative products;
        # treat it as a rejected step like a true overflow
        if not np.isfinite(total) or total < -1e100:
            return np.inf
        return -total

    def prior_quad(self, state: LatentState) -> float:
        quad = 0.0
        for t, prec in enumerate(self.prec):
            V = state.term_matrix(t)
            if prec is None:
                quad += float(np.einsum("ms,ms->", V, V))
            else:
                quad += float(np.einsum("ms,st,mt->", V, prec, V))
        return 0.5 * quad

    def Q(self, state: LatentState) -> float:
        return self.data_nll(self.eta(state)) + self.prior_quad(state) + self.const

    def derivs(self, eta):
        with np.errstate(over="ignore", invalid="ignore"):
            return self._derivs(eta)

    def grad(self, state: LatentState, d1) -> np.ndarray:
        g = np.empty(self.model.layout.dim)
        with np.errstate(over="ignore", invalid="ignore"):
            for t, term in enumerate(self.model.design.terms):
                idx = self.model._term_index[t]
                contrib = (self.zeff[t] * d1[:, None])[idx.order]
                Gt = np.add.reduceat(contrib, idx.seg_starts, axis=0)
                V = state.term_matrix(t)
                Gt += V if self.prec[t] is None else V @ self.prec[t]
                g[self.model.layout.term_slice(t)] = Gt.ravel()
        return g

    def factor(self, d2):
        """Factorize H = Zeff^T diag(d2) Zeff + P at the current weights."""
        if self.model.family.kind == "gaussian" and self._gaussian_factor is not None:
            return self._gaussian_factor
        if self.model.grouped:
            out = self._factor_grouped(d2)
        else:
            out = self._factor_dense(d2)
        if self.model.family.kind == "gaussian":
            self._gaussian_factor = out
        return out

    def _prec_or_eye(self, t):
        prec = self.prec[t]
        return np.eye(self.model.layout.widths[t]) if prec is None else prec

    def _factor_grouped(self, d2):
        idx = self.model._shared
        C = np.hstack(self.zeff) if len(self.zeff) > 1 else self.zeff[0]
        with np.errstate(over="ignore", invalid="ignore"):
            outer = C[:, :, None] * C[:, None, :] * d2[:, None, None]
            blocks = np.add.reduceat(outer[idx.order], idx.seg_starts, axis=0)
        blocks += sla.block_diag(*[self._prec_or_eye(t) for t in range(len(self.prec))])
        if not np.all(np.isfinite(blocks)):
            raise np.linalg.LinAlgError("non-finite Hessian blocks")
        return _BlockFactor(blocks, self.model.layout)

    def _factor_dense(self, d2):
        model = self.model
        n, D = model.design.n, model.layout.dim
        values = (
            np.hstack(self.zeff) if len(self.zeff) > 1 else self.zeff[0]
        ).ravel()
        B = sparse.csr_matrix((values, model._bcols, model._bindptr), shape=(n, D))
        with np.errstate(over="ignore", invalid="ignore"):
            H = (B.T @ B.multiply(d2[:, None])).toarray()
        if not np.all(np.isfinite(H)):
            raise np.linalg.LinAlgError("non-finite Hessian")
        for t, term in enumerate(model.design.terms):
            s = model.layout.widths[t]
            base = model.layout.offsets[t] + np.arange(term.m) * s
            prec = self._prec_or_eye(t)
            for a in range(s):
                for b in range(s):
                    H[base + a, base + b] += prec[a, b]
        return _DenseFactor(H)


class _DenseFactor:
    def __init__(self, H):
        self.H = 0.5 * (H + H.T)
        self.cho = sla.cho_factor(self.H, lower=True, check_finite=False)

    def solve(self, b):
        return sla.cho_solve(self.cho, b, check_finite=False)

    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.cho[0]))))

    def dense(self):
        return self.H.copy()


class _BlockFactor:
    """Block-diagonal Hessian, one block per group of the shared factor."""

    def __init__(self, blocks, layout):
        self.blocks = 0.5 * (blocks + np.transpose(blocks, (0, 2, 1)))
        self.chol = np.linalg.cholesky(self.blocks)  # raises LinAlgError if not PD
        self.layout = layout
        self._S = blocks.shape[1]

    def _stack(self, b):
        """Reorder the term-major latent vector into per-group blocks."""
        lay = self.layout
        m = lay.counts[0]
        out = np.empty((m, self._S))
        col = 0
        for t, s in enumerate(lay.widths):
            out[:, col : col + s] = b[lay.term_slice(t)].reshape(m, s)
            col += s
        return out

    def _unstack(self, Bm):
        lay = self.layout
        out = np.empty(lay.dim)
        col = 0
        for t, s in enumerate(lay.widths):
            out[lay.term_slice(t)] = Bm[:, col : col + s].ravel()
            col += s
        return out

    def solve(self, b):
        rhs = self._stack(b)[:, :, None]
        sol = np.linalg.solve(self.blocks, rhs)[:, :, 0]
        return self._unstack(sol)

    def logdet(self):
        diags = np.diagonal(self.chol, axis1=1, axis2=2)
        return 2.0 * float(np.sum(np.log(diags)))

    def dense(self):
        lay = self.layout
        D = lay.dim
        H = np.zeros((D, D))
        m = lay.counts[0]
        starts = np.cumsum([0] + lay.widths)
        for g in range(m):
            for t1, s1 in enumerate(lay.widths):
                r = lay.group_slice(t1, g)
                for t2, s2 in enumerate(lay.widths):
                    c = lay.group_slice(t2, g)
                    H[r, c] = self.blocks[
                        g, starts[t1] : starts[t1] + s1, starts[t2] : starts[t2] + s2
                    ]
        return H


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def linear_predictor(model: JointModel, psi: ParamVector, state: LatentState):
    """eta = X beta + sum of per-term random-effect contributions."""
    return _PsiContext(model, psi).eta(state)


def joint_neg_logdensity(model: JointModel, psi: ParamVector, state: LatentState):
    """Conditional data nll plus latent prior (quadratic and constants)."""
    return _PsiContext(model, psi).Q(state)


def logdet_psd(H) -> float:
    """Log-determinant of a symmetric positive-definite matrix via Cholesky."""
    H = np.asarray(H, dtype=float)
    if H.size == 0:
        return 0.0
    c, _ = sla.cho_factor(0.5 * (H + H.T), lower=True, check_finite=False)
    return 2.0 * float(np.sum(np.log(np.diag(c))))


@dataclass
class _InnerResult:
    state: LatentState
    Q: float
    grad_norm: float
    factor: object
    converged: bool
    n_iter: int


def _solve_inner(ctx: _PsiContext, v0, tol, max_iter):
    """Safeguarded Newton minimization of Q over the latent vector.

    Iterates toward a gradient sup-norm well below the requested
    tolerance (quadratic convergence makes the extra digits nearly free),
    which keeps the mode a numerically smooth function of the outer
    parameters, as finite-difference outer gradients require.
    """
    layout = ctx.model.layout
    state = LatentState(np.asarray(v0, dtype=float).copy(), layout)
    eta = ctx.eta(state)
    Q = ctx.data_nll(eta) + ctx.prior_quad(state) + ctx.const
    if not np.isfinite(Q):
        return None
    scale = max(1.0, abs(Q))
    accept_tol = tol * scale
    # aim far below the acceptance tolerance: quadratic convergence makes
    # the extra digits cheap, and downstream finite differences of the
    # objective need the mode resolved to near machine precision
    target = max(accept_tol * 1e-6, 1e-14 * scale)
    n_iter = 0
    while True:
        d1, d2 = ctx.derivs(eta)
        g = ctx.grad(state, d1)
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= target or n_iter >= max_iter:
            break
        try:
            factor = ctx.factor(d2)
            step = factor.solve(-g)
        except np.linalg.LinAlgError:
            return None
        t, accepted = 1.0, False
        for _ in range(30):
            trial = LatentState(state.v + t * step, layout)
            eta_new = ctx.eta(trial)
            Q_new = ctx.data_nll(eta_new) + ctx.prior_quad(trial) + ctx.const
            if Q_new < Q:
                state, eta, Q = trial, eta_new, Q_new
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # near the mode the decrease in Q sits below float resolution
            # and the line search cannot see it; accept one full Newton
            # step when it clearly shrinks the gradient without raising Q
            trial = LatentState(state.v + step, layout)
            eta_new = ctx.eta(trial)
            Q_new = ctx.data_nll(eta_new) + ctx.prior_quad(trial) + ctx.const
            if np.isfinite(Q_new) and Q_new <= Q + 1e-12 * scale:
                d1n, _ = ctx.derivs(eta_new)
                if float(np.max(np.abs(ctx.grad(trial, d1n)))) < 0.5 * gnorm:
                    state, eta, Q = trial, eta_new, Q_new
                    accepted = True
        if not accepted:
            break
        n_iter += 1
    try:
        factor = ctx.factor(d2)
    except np.linalg.LinAlgError:
        return None
    return _InnerResult(state, Q, gnorm, factor, gnorm <= accept_tol, n_iter)


def inner_newton(model: JointModel, psi: ParamVector, v0=None, tol=1e-8, max_iter=100):
    """Find the latent mode and the Hessian of Q there.

    Returns ``(state, H)`` with H dense.  Raises InnerNewtonError when the
    iteration cannot reach the tolerance (callers wanting a soft failure
    use :func:`laplace_nll`, which reports a non-finite objective instead).
    """
    ctx = _PsiContext(model, psi)
    if model.layout.dim == 0:
        return LatentState.zeros(model.layout), np.empty((0, 0))
    if v0 is None:
        v0 = np.zeros(model.layout.dim)
    elif isinstance(v0, LatentState):
        v0 = v0.v
    res = _solve_inner(ctx, v0, tol, max_iter)
    if res is None or not res.converged:
        detail = "non-finite objective" if res is None else f"gradient norm {res.grad_norm:.3g}"
        raise InnerNewtonError(f"inner Newton failed to converge: {detail}")
    return res.state, res.factor.dense()


def laplace_nll(model: JointModel, psi: ParamVector, warm_start=None, tol=1e-8, max_iter=100):
    """Laplace-approximated marginal negative log-likelihood.

    Returns ``(nll, state)``.  Inner failures (overflowing linear
    predictor, non-PD Hessian, no convergence) yield ``nll = +inf`` so an
    outer optimizer can reject the step and backtrack.
    """
    ctx = _PsiContext(model, psi)
    layout = model.layout
    if layout.dim == 0:
        return ctx.data_nll(ctx.eta_fixed), LatentState.zeros(layout)
    v0 = warm_start.v if isinstance(warm_start, LatentState) else warm_start
    res = None
    if v0 is not None and np.any(v0):
        res = _solve_inner(ctx, v0, tol, max_iter)
    if res is None or not res.converged:
        retry = _solve_inner(ctx, np.zeros(layout.dim), tol, max_iter)
        if retry is not None and (res is None or retry.Q <= res.Q or retry.converged):
            res = retry
    if res is None:
        return np.inf, LatentState.zeros(layout)
    if not res.converged:
        return np.inf, res.state
    nll = res.Q + 0.5 * res.factor.logdet() - 0.5 * layout.dim * _LOG2PI
    return float(nll), res.state
