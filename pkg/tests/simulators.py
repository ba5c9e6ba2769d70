"""Shared data generators for the test suite.

Each generator builds a covariate frame, assembles the model, sets an
interior true parameter vector by name, and simulates the response from
it, so that fitted models are compared against a known truth.
"""

from __future__ import annotations

import numpy as np

import rrglmm as rr
from rrglmm.inference import simulate_from_params

GLVM_FORMULA = "y ~ Species + 0 + rr(Species + 0 | ID, 2)"

WINDFARM_FORMULA = (
    "abundance ~ Zone * Year + diag(Zone * Year | Species) + (1 | Station) "
    "+ rr(Species + 0 | ID, 2)"
)

WINDFARM_NULL_FORMULA = (
    "abundance ~ Zone + Year + diag(Zone + Year | Species) + (1 | Station) "
    "+ rr(Species + 0 | ID, 2)"
)


def lower_trapezoid(rng, q, d, scale):
    """Random loading matrix with the identifiability zeros in place."""
    L = np.zeros((q, d))
    rows, cols = np.tril_indices(q)
    keep = cols < d
    L[rows[keep], cols[keep]] = rng.normal(0.0, scale, int(keep.sum()))
    return L


def glvm_counts(seed, q=9, d=2, m=300, beta_sd=0.4, loading_sd=0.45):
    """Multi-species count data with a rank-d species covariance.

    One observation per (group, species); fixed species intercepts.
    Returns (data, truth) where truth holds beta, the loading matrix,
    and the packed true parameter vector for the GLVM_FORMULA model.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x61)))
    L = lower_trapezoid(rng, q, d, loading_sd)
    beta = rng.normal(1.0, beta_sd, q)
    gi = np.repeat(np.arange(m), q)
    si = np.tile(np.arange(q), m)
    frame = {
        "y": np.zeros(m * q),
        "Species": [f"s{j}" for j in si],
        "ID": [f"id{i:04d}" for i in gi],
    }
    data = rr.DataTable(frame, categorical=["Species", "ID"])
    formula = f"y ~ Species + 0 + rr(Species + 0 | ID, {d})"
    model = rr.build_joint_model(rr.parse_formula(formula), data, "poisson")
    psi = model.zero_params()
    psi.beta[:] = beta
    psi.thetas[0][:] = rr.loading_to_theta(rr.LoadingMatrix(q, d, L))
    y = simulate_from_params(model, psi, rng)
    data = data.with_column("y", y)
    truth = {"beta": beta, "loading": L, "psi": psi, "x": model.pack(psi)}
    return data, truth


def windfarm_frame(stations_per_zone=6, q=9):
    """Covariate frame with the before-after-control-impact layout:
    three zones, two years, stations nested in zones, one row per
    (station, year, species); ID labels the station-year pair."""
    zones = ["WF", "N", "S"]
    years = ["2003", "2010"]
    rows = {"abundance": [], "Zone": [], "Year": [], "Station": [], "Species": [], "ID": []}
    for z in zones:
        for s in range(stations_per_zone):
            st = f"{z}st{s}"
            for yr in years:
                iid = f"{st}y{yr}"
                for j in range(q):
                    rows["abundance"].append(0.0)
                    rows["Zone"].append(z)
                    rows["Year"].append(yr)
                    rows["Station"].append(st)
                    rows["Species"].append(f"sp{j}")
                    rows["ID"].append(iid)
    return rr.DataTable(
        rows, categorical=["Zone", "Year", "Station", "Species", "ID"]
    )


def windfarm_counts(seed, stations_per_zone=6, q=9, loading_sd=0.35):
    """Simulated analogue of the wind-farm study: fixed Zone*Year effects,
    species-specific (diagonal) deviations from them, station intercepts,
    and a rank-2 species covariance on the station-year pairs."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x57)))
    data = windfarm_frame(stations_per_zone, q)
    model = rr.build_joint_model(rr.parse_formula(WINDFARM_FORMULA), data, "poisson")
    psi = model.zero_params()
    names = model.param_names()
    beta = {
        "(Intercept)": 0.8,
        "ZoneN": 0.1,
        "ZoneS": -0.35,
        "Year2010": 0.3,
        "ZoneN:Year2010": 0.25,
        "ZoneS:Year2010": -0.2,
    }
    for name, value in beta.items():
        psi.beta[model.design.xnames.index(name)] = value
    # interior variance parameters: all diagonal sds well away from zero,
    # station sd 0.3, rank-2 loadings of moderate size
    for t, (cs, term) in enumerate(zip(model.structures, model.design.terms)):
        if cs.kind == "diag":
            psi.thetas[t][:] = np.log(rng.uniform(0.35, 0.55, cs.q))
        elif cs.kind == "us":
            psi.thetas[t][: cs.q] = np.log(0.3)
        else:
            L = lower_trapezoid(rng, cs.q, cs.rank, loading_sd)
            psi.thetas[t][:] = rr.loading_to_theta(rr.LoadingMatrix(cs.q, cs.rank, L))
    y = simulate_from_params(model, psi, rng)
    data = data.with_column("abundance", y)
    return data, {"psi": psi, "x": model.pack(psi), "beta": beta, "names": names}


def two_species_pairs(seed, m=142):
    """Two-response poisson data over m station-year pairs, mirroring the
    two-species subset design: Zone and Year fixed effects plus a
    2-dimensional species random effect per pair."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x2a)))
    zones = rng.choice(["WF", "N", "S"], m, p=[0.4, 0.3, 0.3])
    years = np.tile(["2003", "2010"], (m + 1) // 2)[:m]
    frame = {
        "abundance": np.zeros(2 * m),
        "Zone": np.repeat(zones, 2),
        "Year": np.repeat(years, 2),
        "Species": ["Torsk", "Tanglake"] * m,
        "ID": np.repeat([f"id{i:03d}" for i in range(m)], 2),
    }
    data = rr.DataTable(frame, categorical=["Zone", "Year", "Species", "ID"])
    formula = "abundance ~ Zone + Year + rr(Species + 0 | ID, 2)"
    model = rr.build_joint_model(rr.parse_formula(formula), data, "poisson")
    psi = model.zero_params()
    psi.beta[:] = [0.6, 0.07, -0.55, 0.55]
    L = np.array([[0.85, 0.0], [-0.6, 0.55]])
    psi.thetas[0][:] = rr.loading_to_theta(rr.LoadingMatrix(2, 2, L))
    y = simulate_from_params(model, psi, rng)
    return data.with_column("abundance", y), {"psi": psi, "loading": L}


def single_latent_clusters(seed, m=50, n_per=5, beta0=0.4, lam=0.8):
    """Poisson clusters with one latent dimension: eta = beta0 + lam * u_g."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x11)))
    g = np.repeat(np.arange(m), n_per)
    frame = {"y": np.zeros(m * n_per), "g": [f"g{i:03d}" for i in g]}
    data = rr.DataTable(frame, categorical=["g"])
    model = rr.build_joint_model(rr.parse_formula("y ~ 1 + rr(1 | g, 1)"), data, "poisson")
    psi = model.zero_params()
    psi.beta[:] = [beta0]
    psi.thetas[0][:] = [lam]
    y = simulate_from_params(model, psi, rng)
    return data.with_column("y", y), {"beta0": beta0, "lam": lam}


def gaussian_null_clusters(seed, m=30, n_per=3, sd_g=0.6, sd_e=1.0):
    """Gaussian data with a cluster intercept and a pure-noise covariate x
    (true x effect is zero), for size simulations."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x99)))
    g = np.repeat(np.arange(m), n_per)
    x = rng.normal(size=m * n_per)
    u = rng.normal(size=m)
    y = 0.5 + sd_g * u[g] + rng.normal(0.0, sd_e, m * n_per)
    return rr.DataTable(
        {"y": y, "x": x, "g": [f"g{i:02d}" for i in g]}, categorical=["g"]
    )


def random_gaussian_model(seed, max_n=500):
    """A random identity-link gaussian mixed model with a mixture of
    diag/us/rr terms, random designs, and random interior parameters.
    Returns (model, psi) ready for likelihood evaluation."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x6a)))
    n = int(rng.integers(40, max_n + 1))
    p = int(rng.integers(1, 4))
    frame = {"y": rng.normal(size=n)}
    for j in range(p):
        frame[f"x{j}"] = rng.normal(size=n)
    fixed = " + ".join(["1"] + [f"x{j}" for j in range(p)])
    n_terms = int(rng.integers(1, 4))
    terms = []
    categorical = []
    for t in range(n_terms):
        m = int(rng.integers(4, 13))
        frame[f"g{t}"] = [f"lev{v}" for v in rng.integers(0, m, n)]
        categorical.append(f"g{t}")
        kind = ["diag", "us", "rr"][int(rng.integers(0, 3))]
        q_expr = ["1", "x0", "1 + x0"][int(rng.integers(0, 3))] if p > 0 else "1"
        if kind == "rr":
            q_cols = 1 + q_expr.count("x")
            d = int(rng.integers(1, q_cols + 1))
            terms.append(f"rr({q_expr} | g{t}, {d})")
        elif kind == "diag":
            terms.append(f"diag({q_expr} | g{t})")
        else:
            terms.append(f"({q_expr} | g{t})")
    formula = f"y ~ {fixed} + " + " + ".join(terms)
    data = rr.DataTable(frame, categorical=categorical)
    model = rr.build_joint_model(rr.parse_formula(formula), data, "gaussian")
    x = rng.normal(0.0, 0.5, model.n_params)
    x[-1] = rng.normal(0.0, 0.3)  # log dispersion near zero
    return model, model.unpack(x)
