"""Laplace objective: latent modes, Hessians, and the marginal nll."""

import numpy as np
import pytest

import rrglmm as rr
from rrglmm import (
    DataTable,
    InnerNewtonError,
    LatentState,
    build_joint_model,
    inner_newton,
    joint_neg_logdensity,
    laplace_nll,
    linear_predictor,
    logdet_psd,
    parse_formula,
)
from rrglmm.laplace import _PsiContext

from oracles import (
    bisect,
    eigen_logdet,
    fd_gradient_of,
    fd_hessian_of,
    gaussian_marginal_nll,
)
from simulators import random_gaussian_model


def one_cluster_gaussian():
    data = DataTable({"y": [0.0], "g": ["a"]}, categorical=["g"])
    return build_joint_model(parse_formula("y ~ 1 + rr(1 | g, 1)"), data, "gaussian")


def poisson_glvm(seed=0, q=4, m=25, n=200):
    rng = np.random.default_rng(seed)
    data = DataTable(
        {
            "y": rng.poisson(2.0, n).astype(float),
            "x": rng.normal(size=n),
            "sp": [f"s{v}" for v in rng.integers(0, q, n)],
            "g": [f"g{v}" for v in rng.integers(0, m, n)],
        },
        categorical=["sp", "g"],
    )
    return build_joint_model(
        parse_formula("y ~ x + diag(x | sp) + rr(sp + 0 | g, 2)"), data, "poisson"
    )


class TestLinearPredictor:
    def test_no_random_terms(self):
        data = DataTable({"y": [1.0, 2.0], "x": [0.5, -1.0]})
        model = build_joint_model(parse_formula("y ~ x"), data, "gaussian")
        psi = model.unpack(np.array([1.0, 2.0, 0.0]))
        eta = linear_predictor(model, psi, LatentState.zeros(model.layout))
        assert np.allclose(eta, [2.0, -1.0])

    def test_zero_loading_ignores_latents(self):
        model = one_cluster_gaussian()
        psi = model.unpack(np.array([0.7, 0.0, 0.0]))
        state = LatentState(np.array([5.0]), model.layout)
        assert np.allclose(linear_predictor(model, psi, state), [0.7])

    def test_scalar_contribution(self):
        model = one_cluster_gaussian()
        psi = model.unpack(np.array([0.0, 2.0, 0.0]))
        state = LatentState(np.array([3.0]), model.layout)
        assert np.allclose(linear_predictor(model, psi, state), [6.0])


class TestJointNegLogDensity:
    def test_zero_latents_equal_glm_plus_prior_constants(self):
        model = poisson_glvm()
        x = np.zeros(model.n_params)
        x[0] = 0.4
        psi = model.unpack(x)
        q0 = joint_neg_logdensity(model, psi, LatentState.zeros(model.layout))
        eta = model.design.X @ psi.beta
        glm = -np.sum(rr.log_density(model.family, model.link, model.y, eta))
        D = model.layout.dim
        # diag thetas are zero so the prior constants are pure 2-pi terms
        assert q0 == pytest.approx(glm + 0.5 * D * np.log(2 * np.pi), rel=1e-12)

    def test_gaussian_perfect_fit(self):
        data = DataTable({"y": [1.0, 2.0], "x": [1.0, 2.0], "g": ["a", "b"]}, categorical=["g"])
        model = build_joint_model(parse_formula("y ~ 0 + x + rr(1 | g, 1)"), data, "gaussian")
        psi = model.unpack(np.array([1.0, 0.5, 0.0]))
        q0 = joint_neg_logdensity(model, psi, LatentState.zeros(model.layout))
        assert q0 == pytest.approx(2 * 0.5 * np.log(2 * np.pi) + 0.5 * 2 * np.log(2 * np.pi))

    def test_prior_quadratic_scales_with_latents(self):
        model = one_cluster_gaussian()
        psi = model.unpack(np.array([0.0, 0.0, 0.0]))
        base = joint_neg_logdensity(model, psi, LatentState(np.zeros(1), model.layout))
        q1 = joint_neg_logdensity(model, psi, LatentState(np.array([1.0]), model.layout))
        q2 = joint_neg_logdensity(model, psi, LatentState(np.array([2.0]), model.layout))
        assert (q2 - base) == pytest.approx(4 * (q1 - base), rel=1e-12)


class TestInnerNewton:
    def test_gaussian_single_step(self):
        model, psi = random_gaussian_model(11, max_n=150)
        state, H = inner_newton(model, psi)
        ctx = _PsiContext(model, psi)
        d1, _ = ctx.derivs(ctx.eta(state))
        g = ctx.grad(state, d1)
        assert np.max(np.abs(g)) < 1e-9

    def test_symmetric_posterior_mode_is_zero(self):
        model = one_cluster_gaussian()
        psi = model.unpack(np.array([0.0, 1.0, 0.0]))
        state, H = inner_newton(model, psi)
        assert state.v[0] == pytest.approx(0.0, abs=1e-12)
        assert H[0, 0] == pytest.approx(2.0)

    def test_poisson_mode_matches_bisection_oracle(self):
        data = DataTable({"y": [2.0], "g": ["a"]}, categorical=["g"])
        model = build_joint_model(parse_formula("y ~ 0 + rr(1 | g, 1)"), data, "poisson")
        psi = model.unpack(np.array([1.0]))
        state, H = inner_newton(model, psi)
        root = bisect(lambda u: np.exp(u) - 2.0 + u, -5.0, 5.0)
        assert root == pytest.approx(0.4428544010023886, abs=1e-10)
        assert state.v[0] == pytest.approx(root, abs=1e-9)
        assert H[0, 0] == pytest.approx(np.exp(root) + 1.0, rel=1e-9)

    def test_descent_from_remote_start(self):
        model = poisson_glvm(3)
        x = np.zeros(model.n_params)
        x[model.p :] = 0.3
        psi = model.unpack(x)
        v0 = LatentState(np.full(model.layout.dim, 2.5), model.layout)
        state, _ = inner_newton(model, psi, v0=v0)
        assert joint_neg_logdensity(model, psi, state) < joint_neg_logdensity(model, psi, v0)

    def test_failure_raises(self):
        data = DataTable({"y": [200.0], "g": ["a"]}, categorical=["g"])
        model = build_joint_model(parse_formula("y ~ 0 + rr(1 | g, 1)"), data, "poisson")
        psi = model.unpack(np.array([1e60]))
        with pytest.raises(InnerNewtonError):
            inner_newton(model, psi, max_iter=3)

    def test_hessian_matches_fd_of_gradient_at_random_points(self):
        # stacked Hessian = Zeff^T W Zeff + P against second differences of Q
        model = poisson_glvm(5, q=3, m=8, n=60)
        rng = np.random.default_rng(0)
        x = rng.normal(0, 0.3, model.n_params)
        psi = model.unpack(x)
        ctx = _PsiContext(model, psi)
        for _ in range(20):
            v = rng.normal(0, 0.5, model.layout.dim)

            def q_of(vv):
                return joint_neg_logdensity(model, psi, LatentState(vv, model.layout))

            d1, d2 = ctx.derivs(ctx.eta(LatentState(v, model.layout)))
            H = ctx.factor(d2).dense()
            g = ctx.grad(LatentState(v, model.layout), d1)
            g_fd = fd_gradient_of(q_of, v, 1e-6)
            assert np.allclose(g, g_fd, rtol=1e-4, atol=1e-6)
            H_fd = fd_hessian_of(q_of, v, 1e-4)
            denom = np.maximum(np.abs(H), 1.0)
            assert np.max(np.abs(H - H_fd) / denom) < 1e-4


class TestLaplaceNll:
    def test_one_cluster_gaussian_closed_form(self):
        model = one_cluster_gaussian()
        psi = model.unpack(np.array([0.0, 1.0, 0.0]))
        nll, state = laplace_nll(model, psi)
        assert nll == pytest.approx(0.5 * np.log(4 * np.pi), abs=1e-12)
        assert state.v[0] == 0.0

    def test_zero_loading_reduces_to_glm(self):
        rng = np.random.default_rng(7)
        n = 80
        data = DataTable(
            {
                "y": rng.poisson(2.0, n).astype(float),
                "x": rng.normal(size=n),
                "g": [f"g{v}" for v in rng.integers(0, 10, n)],
            },
            categorical=["g"],
        )
        model = build_joint_model(parse_formula("y ~ x + rr(1 | g, 1)"), data, "poisson")
        psi = model.unpack(np.array([0.3, 0.1, 0.0]))  # zero loading
        nll, _ = laplace_nll(model, psi)
        only_fixed = build_joint_model(parse_formula("y ~ x"), data, "poisson")
        nll_fixed, _ = laplace_nll(only_fixed, only_fixed.unpack(np.array([0.3, 0.1])))
        assert nll == pytest.approx(nll_fixed, abs=1e-10)

    def test_gaussian_exactness_random_models(self):
        for seed in range(5):
            model, psi = random_gaussian_model(seed, max_n=160)
            nll, _ = laplace_nll(model, psi)
            exact = gaussian_marginal_nll(model, psi)
            assert nll == pytest.approx(exact, rel=1e-10)

    def test_warm_start_does_not_change_converged_value(self):
        model = poisson_glvm(9)
        rng = np.random.default_rng(2)
        psi = model.unpack(rng.normal(0, 0.3, model.n_params))
        nll_cold, state = laplace_nll(model, psi)
        warm = LatentState(state.v + rng.normal(0, 0.1, state.v.size), model.layout)
        nll_warm, _ = laplace_nll(model, psi, warm_start=warm)
        assert nll_warm == pytest.approx(nll_cold, abs=1e-8)

    def test_inner_failure_returns_inf(self):
        data = DataTable({"y": [200.0], "g": ["a"]}, categorical=["g"])
        model = build_joint_model(parse_formula("y ~ 0 + rr(1 | g, 1)"), data, "poisson")
        nll, _ = laplace_nll(model, model.unpack(np.array([1e60])))
        assert nll == np.inf

    def test_cluster_additivity(self):
        # a single grouping factor: stacked nll equals the sum of
        # independently computed per-cluster nlls
        rng = np.random.default_rng(12)
        m, per = 6, 7
        g = np.repeat([f"g{i}" for i in range(m)], per)
        x = rng.normal(size=m * per)
        y = rng.poisson(2.0, m * per).astype(float)
        data = DataTable({"y": y, "x": x, "g": list(g)}, categorical=["g"])
        formula = "y ~ 0 + x + rr(1 + x | g, 1)"
        model = build_joint_model(parse_formula(formula), data, "poisson")
        x_par = np.array([0.2, 0.5, -0.3])
        total, _ = laplace_nll(model, model.unpack(x_par))
        parts = 0.0
        for i in range(m):
            mask = g == f"g{i}"
            sub = DataTable(
                {"y": y[mask], "x": x[mask], "g": [f"g{i}"] * per}, categorical=["g"]
            )
            sub_model = build_joint_model(parse_formula(formula), sub, "poisson")
            nll_i, _ = laplace_nll(sub_model, sub_model.unpack(x_par))
            parts += nll_i
        assert total == pytest.approx(parts, abs=1e-10)

    def test_rr_full_rank_matches_unstructured(self):
        # at matched covariance (loading = Cholesky factor), nll values agree
        rng = np.random.default_rng(21)
        n, m, q = 90, 12, 2
        data = DataTable(
            {
                "y": rng.poisson(2.0, n).astype(float),
                "sp": [f"s{v}" for v in rng.integers(0, q, n)],
                "g": [f"g{v}" for v in rng.integers(0, m, n)],
            },
            categorical=["sp", "g"],
        )
        m_rr = build_joint_model(parse_formula("y ~ 1 + rr(sp + 0 | g, 2)"), data, "poisson")
        m_us = build_joint_model(parse_formula("y ~ 1 + (sp + 0 | g)"), data, "poisson")
        A = rng.normal(0, 0.6, (q, q))
        S = A @ A.T + 0.2 * np.eye(q)
        L = np.linalg.cholesky(S)
        theta_rr = rr.loading_to_theta(rr.LoadingMatrix(q, q, L))
        sd = np.sqrt(np.diag(S))
        corr = S / np.outer(sd, sd)
        Lc = np.linalg.cholesky(corr)
        theta_us = np.concatenate([np.log(sd), [Lc[1, 0] / Lc[1, 1]]])
        beta = np.array([0.4])
        nll_rr, _ = laplace_nll(m_rr, m_rr.unpack(np.concatenate([beta, theta_rr])))
        nll_us, _ = laplace_nll(m_us, m_us.unpack(np.concatenate([beta, theta_us])))
        assert nll_rr == pytest.approx(nll_us, abs=1e-10)


class TestLogDetPsd:
    def test_identity(self):
        assert logdet_psd(np.eye(5)) == pytest.approx(0.0, abs=1e-14)

    def test_diagonal(self):
        assert logdet_psd(np.diag([2.0, 8.0])) == pytest.approx(np.log(16.0))

    def test_matches_eigenvalue_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            A = rng.normal(size=(8, 8))
            H = A.T @ A + np.eye(8)
            assert logdet_psd(H) == pytest.approx(eigen_logdet(H), abs=1e-9)

    def test_rejects_indefinite(self):
        with pytest.raises(np.linalg.LinAlgError):
            logdet_psd(np.diag([1.0, -1.0]))
