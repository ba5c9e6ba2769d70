"""Command-line interface.

Subcommands: ``fit`` (estimate a model and write machine-readable
artifacts), ``bootstrap`` (parametric-bootstrap likelihood-ratio test of
nested formulas), ``ranksweep`` (refit across reduced ranks), and
``simulate`` (draw responses from a previously fitted model).

Artifacts are deterministic given the seed: JSON is written with sorted
keys, and all stochastic steps derive from the recorded seed, so a fit
can be reproduced exactly from ``fit.json``.  Exit codes: 0 success,
2 formula syntax error, 3 data error, 4 non-convergence (artifacts are
still written, flagged).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

import numpy as np
from scipy import stats

from .data import DataError, DataTable
from .fitting import FitControl, FitError, fit
from .formula import FormulaError, parse_formula
from .inference import (
    bootstrap_lrt,
    conditional_effects,
    information_criteria,
    ordination,
    param_covariance,
    rank_sweep,
    simulate_from_params,
    var_corr,
)
from .laplace import build_joint_model

SCHEMA_VERSION = "1"

EXIT_OK = 0
EXIT_FORMULA = 2
EXIT_DATA = 3
EXIT_NOCONV = 4


def _num(x):
    """Floats for JSON: non-finite becomes null."""
    x = float(x)
    return x if np.isfinite(x) else None


def _write_json(path: Path, payload):
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return value


def _read_table(args) -> DataTable:
    categorical = [c for c in (args.categorical or "").split(",") if c]
    try:
        return DataTable.from_csv(args.data, categorical=categorical)
    except FileNotFoundError:
        raise DataError(f"data file not found: {args.data}") from None


def _control(args) -> FitControl:
    return FitControl(
        start_method=args.start_method,
        jitter_sd=args.jitter_sd,
        restarts=args.restarts,
        seed=args.seed,
    )


def _config_dict(args) -> dict:
    return {
        "data": str(args.data),
        "formula": args.formula,
        "family": args.family,
        "start_method": args.start_method,
        "jitter_sd": float(args.jitter_sd),
        "restarts": int(args.restarts),
        "seed": int(args.seed),
        "categorical": [c for c in (args.categorical or "").split(",") if c],
    }


# ---------------------------------------------------------------------------
# summary printing, shaped like the host package's summary block
# ---------------------------------------------------------------------------


def _stars(p):
    if p is None:
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    if p < 0.1:
        return "."
    return ""


def _fmt_p(p):
    if p is None:
        return "NA"
    if p < 2e-16:
        return "< 2e-16"
    if p < 1e-4:
        return f"{p:.2e}"
    return f"{p:.5f}"


def print_summary(result, report, fixed_rows, config, file=sys.stdout):
    model = result.model
    ic = information_criteria(result)
    out = []
    out.append(f" Family: {model.family.kind}  ( {model.link.kind} )")
    out.append(f"Formula: {config['formula']}")
    out.append(f"Data: {config['data']}")
    out.append("")
    dfres = model.n_obs - model.n_params
    out.append(f"{'AIC':>9}{'BIC':>9}{'logLik':>9}{'deviance':>9}{'df.resid':>9}")
    out.append(
        f"{ic.aic:>9.1f}{ic.bic:>9.1f}{ic.loglik:>9.1f}{-2 * ic.loglik:>9.1f}{dfres:>9d}"
    )
    out.append("")
    if report.terms:
        out.append("Random effects:")
        out.append("")
        out.append("Conditional model:")
        name_w = max(
            12, max(len(n) for t in report.terms for n in t.names) + 1
        )
        out.append(f" {'Groups':<10} {'Name':<{name_w}} {'Variance':>9} {'Std.Dev.':>9}  Corr")
        for term in report.terms:
            label = f"{term.group}"
            if term.structure != "us":
                label += f" [{term.structure}{term.rank if term.structure == 'rr' else ''}]"
            for i, name in enumerate(term.names):
                grp = label if i == 0 else ""
                sd = term.sd[i]
                corr = " ".join(f"{term.corr[i, j]:>5.2f}" for j in range(i))
                out.append(
                    f" {grp:<10} {name:<{name_w}} {sd**2:>9.4f} {sd:>9.4f}  {corr}"
                )
        groups = ", ".join(
            f"{t.group}, {len(model.design.terms[i].group_levels)}"
            for i, t in enumerate(report.terms)
        )
        out.append(f"Number of obs: {model.n_obs}, groups: {groups}")
        out.append("")
    if model.has_dispersion:
        out.append(f"Residual dispersion (phi): {result.psi_hat.phi:.5g}")
        out.append("")
    out.append("Conditional model:")
    name_w = max(12, max((len(r['name']) for r in fixed_rows), default=12) + 1)
    out.append(
        f"{'':<{name_w}} {'Estimate':>10} {'Std. Error':>11} {'z value':>8} {'Pr(>|z|)':>9}"
    )
    for row in fixed_rows:
        se = f"{row['se']:>11.5f}" if row["se"] is not None else f"{'NA':>11}"
        z = f"{row['z']:>8.3f}" if row["z"] is not None else f"{'NA':>8}"
        out.append(
            f"{row['name']:<{name_w}} {row['estimate']:>10.5f} {se} {z} "
            f"{_fmt_p(row['p']):>9} {_stars(row['p'])}"
        )
    out.append("---")
    out.append("Signif. codes:  0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1")
    if not result.converged:
        out.append("")
        out.append("WARNING: fit did not converge; see restart log in fit.json")
    print("\n".join(out), file=file)


# ---------------------------------------------------------------------------
# artifact assembly
# ---------------------------------------------------------------------------


def _fixed_rows(result, se_vector):
    rows = []
    for name, est, se in zip(
        result.model.design.xnames, result.psi_hat.beta, se_vector
    ):
        se = float(se)
        if np.isfinite(se) and se > 0:
            z = float(est) / se
            p = float(2.0 * stats.norm.sf(abs(z)))
            rows.append(
                {"name": name, "estimate": float(est), "se": se, "z": z, "p": p}
            )
        else:
            rows.append(
                {"name": name, "estimate": float(est), "se": None, "z": None, "p": None}
            )
    return rows


def _fit_artifacts(result, config, out_dir: Path):
    model = result.model
    ic = information_criteria(result)
    report = var_corr(result)

    se_flagged = False
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        V, flagged = param_covariance(result)
        se_flagged = bool(flagged) or any(
            issubclass(w.category, RuntimeWarning) for w in caught
        )
    se = np.sqrt(np.maximum(np.diag(V), 0.0))
    fixed_rows = _fixed_rows(result, se[: model.p])

    payload = {
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "converged": bool(result.converged),
        "n_outer_iter": int(result.n_outer_iter),
        "gradient_norm": _num(result.gradient_norm),
        "n_obs": int(model.n_obs),
        "n_params": int(model.n_params),
        "loglik": _num(ic.loglik),
        "aic": _num(ic.aic),
        "bic": _num(ic.bic),
        "deviance": _num(-2.0 * ic.loglik),
        "fixed_effects": fixed_rows,
        "dispersion": _num(result.psi_hat.phi) if model.has_dispersion else None,
        "parameters": {
            "names": model.param_names(),
            "values": [float(v) for v in result.packed],
        },
        "random_terms": [t.to_dict() for t in report.terms],
        "restart_log": [
            {
                "restart": r.restart,
                "nll": _num(r.nll),
                "converged": bool(r.converged),
                "n_iter": int(r.n_iter),
                "message": r.message,
            }
            for r in result.restart_log
        ],
        "se_flagged": se_flagged,
    }
    _write_json(out_dir / "fit.json", payload)
    _write_json(
        out_dir / "varcorr.json",
        {"schema_version": SCHEMA_VERSION, "terms": [t.to_dict() for t in report.terms]},
    )

    kinds = [cs.kind for cs in model.structures]
    if "rr" in kinds:
        ord_ = ordination(result)
        header = ["kind", "label"] + ord_.axis_labels
        rows = [
            ["score", label] + [_fmt_cell(float(v)) for v in ord_.scores[i]]
            for i, label in enumerate(ord_.group_labels)
        ]
        rows += [
            ["loading", label] + [_fmt_cell(float(v)) for v in ord_.loadings[i]]
            for i, label in enumerate(ord_.var_labels)
        ]
        _write_csv(out_dir / "ordination.csv", header, rows)

    eff = conditional_effects(result)
    _write_csv(
        out_dir / "latents.csv",
        ["term", "structure", "group", "name", "mode", "se"],
        [
            [
                r["term"],
                r["structure"],
                r["group"],
                r["name"],
                _fmt_cell(r["mode"]),
                _fmt_cell(r["se"]) if np.isfinite(r["se"]) else "",
            ]
            for r in eff
        ],
    )
    return report, fixed_rows


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def run_fit(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = _read_table(args)
    spec = parse_formula(args.formula)
    control = _control(args)
    config = _config_dict(args)
    try:
        result = fit(spec, data, args.family, control)
    except FitError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NOCONV
    report, fixed_rows = _fit_artifacts(result, config, out_dir)
    print_summary(result, report, fixed_rows, config)
    return EXIT_OK if result.converged else EXIT_NOCONV


def run_bootstrap(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = _read_table(args)
    alt_spec = parse_formula(args.formula)
    null_spec = parse_formula(args.null)
    control = _control(args)
    result = bootstrap_lrt(
        null_spec,
        alt_spec,
        data,
        args.family,
        R=args.R,
        control=control,
        jobs=args.jobs,
    )
    payload = {
        "schema_version": SCHEMA_VERSION,
        "config": {
            "data": str(args.data),
            "formula": args.formula,
            "null_formula": args.null,
            "family": args.family,
            "seed": int(args.seed),
            "R": int(args.R),
        },
        **result.to_dict(),
    }
    _write_json(out_dir / "bootstrap.json", payload)
    print(
        f"LR = {result.lr_obs:.4f}, p = {result.p_value:.6g} "
        f"({result.R_used} of {result.R_requested} replicates converged)"
    )
    return EXIT_OK


def run_ranksweep(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = _read_table(args)
    spec = parse_formula(args.formula)
    control = _control(args)
    d_values = _parse_d_range(args.d)
    rows = rank_sweep(spec, data, args.family, d_values, control)
    names = []
    for row in rows:
        for name in row.estimates:
            if name not in names:
                names.append(name)
    header = ["d", "converged", "loglik", "aic", "bic", "error"]
    for name in names:
        header += [f"{name}.est", f"{name}.se", f"{name}.lo", f"{name}.hi"]
    csv_rows = []
    for row in rows:
        rec = [
            row.d,
            row.converged,
            _fmt_cell(float(row.loglik)) if np.isfinite(row.loglik) else "",
            _fmt_cell(float(row.aic)) if np.isfinite(row.aic) else "",
            _fmt_cell(float(row.bic)) if np.isfinite(row.bic) else "",
            row.error,
        ]
        for name in names:
            if name in row.estimates:
                est, se = row.estimates[name]
                rec += [
                    _fmt_cell(est),
                    _fmt_cell(se),
                    _fmt_cell(est - 1.96 * se),
                    _fmt_cell(est + 1.96 * se),
                ]
            else:
                rec += ["", "", "", ""]
        csv_rows.append(rec)
    _write_csv(out_dir / "ranksweep.csv", header, csv_rows)
    for row in rows:
        status = "ok" if row.converged else (row.error or "not converged")
        ll = f"{row.loglik:.4f}" if np.isfinite(row.loglik) else "NA"
        aic = f"{row.aic:.1f}" if np.isfinite(row.aic) else "NA"
        print(f"d={row.d}: loglik={ll} AIC={aic} [{status}]")
    return EXIT_OK


def run_simulate(args) -> int:
    src = Path(getattr(args, "from"))
    try:
        payload = json.loads(src.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"fit file not found: {src}") from None
    config = payload["config"]
    data = DataTable.from_csv(config["data"], categorical=config.get("categorical", []))
    spec = parse_formula(config["formula"])
    model = build_joint_model(spec, data, config["family"])
    x = np.asarray(payload["parameters"]["values"], dtype=float)
    psi = model.unpack(x)
    rng = np.random.default_rng(args.seed)
    y = simulate_from_params(model, psi, rng)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    sim = data.with_column(spec.response, y)
    path = out_dir / "simulated.csv"
    sim.to_csv(path)
    print(f"wrote {path}")
    return EXIT_OK


def _parse_d_range(text):
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v.strip() != ""]


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(sub, with_formula=True):
    sub.add_argument("--data", required=True, help="CSV file (RFC 4180, header row)")
    if with_formula:
        sub.add_argument("--formula", required=True, help='model formula, e.g. "y ~ x + rr(x | g, 2)"')
        sub.add_argument(
            "--family",
            required=True,
            choices=["gaussian", "poisson", "bernoulli"],
        )
    sub.add_argument("--start-method", choices=["zero", "res"], default="zero")
    sub.add_argument("--jitter-sd", type=float, default=0.0)
    sub.add_argument("--restarts", type=int, default=1)
    sub.add_argument("--seed", type=int, default=1)
    sub.add_argument("--jobs", type=int, default=1)
    sub.add_argument("--out", default=".", help="output directory")
    sub.add_argument(
        "--categorical",
        default="",
        help="comma-separated columns to force categorical",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rrglmm",
        description="Mixed models with reduced-rank multivariate random effects",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_fit = subs.add_parser("fit", help="fit a model and write artifacts")
    _add_common(p_fit)

    p_boot = subs.add_parser("bootstrap", help="parametric-bootstrap LRT")
    _add_common(p_boot)
    p_boot.add_argument("--null", required=True, help="null-model formula")
    p_boot.add_argument("--R", type=int, default=1000, help="bootstrap replicates")

    p_sweep = subs.add_parser("ranksweep", help="refit across reduced ranks")
    _add_common(p_sweep)
    p_sweep.add_argument("--d", required=True, help="ranks, e.g. '0..4' or '0,2,4'")

    p_sim = subs.add_parser("simulate", help="simulate responses from a fit")
    p_sim.add_argument("--from", required=True, help="path to a fit.json")
    p_sim.add_argument("--seed", type=int, default=1)
    p_sim.add_argument("--out", default=".", help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    runners = {
        "fit": run_fit,
        "bootstrap": run_bootstrap,
        "ranksweep": run_ranksweep,
        "simulate": run_simulate,
    }
    try:
        return runners[args.command](args)
    except FormulaError as err:
        print(f"formula error: {err}", file=sys.stderr)
        return EXIT_FORMULA
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except FitError as err:
        print(f"fit error: {err}", file=sys.stderr)
        return EXIT_NOCONV


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
