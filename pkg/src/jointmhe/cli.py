"""Command line interface: certification, runs, analysis, CSV export.

Configuration is a single YAML document; every run echoes the resolved
configuration next to its outputs so it can be repeated exactly.  All
artifacts are CSV files with fixed, versioned column sets (see the
``*_COLUMNS`` constants).  Exit codes: 0 success, 2 certificate
verification failure, 3 solver non-convergence beyond the allowed
fraction of steps, 4 I/O or configuration error.
"""

from __future__ import annotations

import csv
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__
from .analysis import (
    error_series,
    nstep_decrease_check,
    rges_constants,
    rges_envelope_check,
)
from .certificate import (
    build_certificate,
    certificate_from_dict,
    certificate_to_dict,
    verify_contraction,
    verify_parameter_bound,
)
from .errors import JointMheError
from .estimator import MheConfig, MheEstimator, SolverConfig
from .excitation import PeConfig
from .model import chua_model, simulate

CSV_SCHEMA_VERSION = 1

TRUTH_COLUMNS = ["t", "x1", "x2", "x3", "y1", "d1", "d2", "d3", "d4"]
ESTIMATE_COLUMNS = [
    "t",
    "x1_hat",
    "x2_hat",
    "x3_hat",
    "theta_hat",
    "cost",
    "iterations",
    "converged",
    "constraint_violation",
]
CONDITION_COLUMNS = ["t", "kappa_value", "kappa_pass", "pe_value", "pe_pass"]
ANALYSIS_COLUMNS = [
    "t",
    "e_norm",
    "envelope",
    "envelope_pass",
    "ex1",
    "ex2",
    "ex3",
    "etheta",
]
VERDICT_COLUMNS = ["check", "passed", "value"]


EXIT_VERIFICATION = 2
EXIT_NONCONVERGENCE = 3
EXIT_IO = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        _fail(EXIT_IO, f"cannot read config: {exc}")
    except yaml.YAMLError as exc:
        _fail(EXIT_IO, f"malformed config: {exc}")
    if not isinstance(data, dict):
        _fail(EXIT_IO, "config root must be a mapping")
    return data


def chua_defaults() -> dict:
    """The built-in scenario configuration (all values overridable)."""
    return {
        "model": "chua",
        "certificate": {
            "target_mu": 0.9,
            "eta": 0.911,
            "eps1": 1e-3,
            "eps2": 1e-3,
            "grid_density": 5,
        },
        "mhe": {
            "N": 200,
            "kappa": 1.0e7,
            "alpha": 1.0e-12,
            "gamma_mode": "online-M0",
            "theta_freeze_threshold": 0.1,
        },
        "solver": {},
        "excitation": {"S0": 0.02, "T": 200},
        "simulation": {
            "steps": 2000,
            "seed": 1,
            "x0": [2.0, 0.1, -2.0],
            "theta": [0.45],
            "x0_hat": [0.0, 0.0, 0.0],
            "theta0_hat": [0.5],
            "disturbance_bounds": [1e-3, 1e-3, 1e-3, 0.1],
        },
        "analysis": {"rate_mode": "per-block"},
        "nonconvergence_threshold": 0.1,
    }


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def _build_model(config: dict):
    name = config.get("model", "chua")
    if name != "chua":
        _fail(EXIT_IO, f"unknown model {name!r}; only the built-in 'chua' is shipped")
    return chua_model()


def _certificate(config: dict, model, out_dir: Path | None):
    spec = config.get("certificate", {})
    if isinstance(spec, str):
        try:
            with open(spec) as fh:
                cert = certificate_from_dict(yaml.safe_load(fh), model)
        except OSError as exc:
            _fail(EXIT_IO, f"cannot read certificate: {exc}")
    else:
        cert = build_certificate(
            model,
            target_mu=spec.get("target_mu", 0.9),
            eta=spec.get("eta", 0.911),
            eps1=spec.get("eps1", 1e-3),
            eps2=spec.get("eps2", 1e-3),
            grid_density=spec.get("grid_density", 5),
        )
    if out_dir is not None:
        with open(out_dir / "certificate.yaml", "w") as fh:
            yaml.safe_dump(certificate_to_dict(cert), fh)
    return cert


def _write_csv(path: Path, columns: list[str], rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def _simulate_truth(model, sim: dict):
    steps = int(sim["steps"])
    seed = int(sim["seed"])
    bounds = np.asarray(sim["disturbance_bounds"], dtype=float)
    rng = np.random.Generator(np.random.Philox(seed))
    d_seq = rng.uniform(-1.0, 1.0, (steps, model.q)) * bounds
    u_seq = np.zeros((steps, model.m))
    truth = simulate(
        model,
        np.asarray(sim["x0"], dtype=float),
        np.asarray(sim["theta"], dtype=float),
        u_seq,
        d_seq,
    )
    return truth


def _run_estimator(model, cert, config: dict, truth, progress: bool = False):
    mhe_spec = config.get("mhe", {})
    solver = SolverConfig(**config.get("solver", {}))
    mhe = MheConfig(
        N=int(mhe_spec["N"]),
        lam=cert.lam,
        Q=cert.Q,
        R=cert.R,
        kappa=mhe_spec.get("kappa"),
        alpha=mhe_spec.get("alpha"),
        gamma_mode=mhe_spec.get("gamma_mode", "online-M0"),
        solver=solver,
        theta_freeze_threshold=mhe_spec.get("theta_freeze_threshold"),
    )
    exc = config.get("excitation", {})
    pe = PeConfig(
        Y0=np.zeros((model.n, model.o)),
        S0=np.eye(model.o) * float(exc.get("S0", 0.02)),
        eta=cert.eta,
        alpha=float(mhe_spec.get("alpha", 1e-12)),
        T=int(exc.get("T", mhe.N)),
    )
    sim = config["simulation"]
    est = MheEstimator(
        model,
        cert,
        mhe,
        np.asarray(sim["x0_hat"], dtype=float),
        np.asarray(sim["theta0_hat"], dtype=float),
        pe,
    )
    est.step()
    steps = int(sim["steps"])
    for t in range(1, steps + 1):
        u_prev = truth.u_seq[t - 1] if model.m else None
        est.step(u_prev, truth.y_seq[t - 1])
        if progress and t % 200 == 0:
            click.echo(f"  step {t}/{steps}", err=True)
    return est, mhe, pe


def _write_bundle(out: Path, config: dict, model, cert, truth, est, mhe, pe) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    steps = int(config["simulation"]["steps"])

    truth_rows = []
    for t in range(steps + 1):
        row = [str(t)] + [_fmt(v) for v in truth.x_seq[t]]
        if t < steps:
            row += [_fmt(v) for v in truth.y_seq[t]]
            row += [_fmt(v) for v in truth.d_seq[t]]
        else:
            row += [""] * (model.p + model.q)
        truth_rows.append(row)
    _write_csv(out / "truth.csv", TRUTH_COLUMNS, truth_rows)

    est_rows = []
    cond_rows = []
    for rec in est.history:
        est_rows.append(
            [
                rec.t,
                *(_fmt(v) for v in rec.x_hat),
                *(_fmt(v) for v in rec.theta_hat),
                _fmt(rec.cost),
                rec.iterations,
                rec.converged,
                _fmt(rec.constraint_violation),
            ]
        )
        cond_rows.append(
            [
                rec.t,
                _fmt(rec.cond_kappa_value),
                "" if rec.cond_kappa_pass is None else bool(rec.cond_kappa_pass),
                _fmt(rec.cond_pe_value),
                "" if rec.cond_pe_pass is None else bool(rec.cond_pe_pass),
            ]
        )
    _write_csv(out / "estimates.csv", ESTIMATE_COLUMNS, est_rows)
    _write_csv(out / "conditions.csv", CONDITION_COLUMNS, cond_rows)

    bundle = {
        "version": __version__,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "config": config,
        "files": ["truth.csv", "estimates.csv", "conditions.csv", "certificate.yaml"],
    }
    with open(out / "bundle.yaml", "w") as fh:
        yaml.safe_dump(bundle, fh)
    return bundle


def _analyze_bundle(out: Path, config: dict, model, cert, truth, est, mhe, pe):
    x_hats = np.array([rec.x_hat for rec in est.history])
    theta_hats = np.array([rec.theta_hat for rec in est.history])
    report = error_series(truth, x_hats, theta_hats)
    constants = rges_constants(
        Mbar=np.eye(model.n + model.o),
        Munder=np.eye(model.n + model.o),
        Q=cert.Q,
        lam=cert.lam,
        N=mhe.N,
        kappa=mhe.kappa,
    )
    env, env_pass = rges_envelope_check(
        report.e_norm,
        constants,
        truth.d_seq,
        N=mhe.N,
        rate_mode=config.get("analysis", {}).get("rate_mode", "per-block"),
    )
    rows = []
    for t in range(report.e_norm.size):
        rows.append(
            [
                t,
                _fmt(report.e_norm[t]),
                _fmt(env[t]),
                bool(env_pass[t]),
                *(_fmt(v) for v in report.e_x[t]),
                *(_fmt(v) for v in report.e_theta[t]),
            ]
        )
    _write_csv(out / "analysis.csv", ANALYSIS_COLUMNS, rows)

    cond_k = [r.cond_kappa_pass for r in est.history if r.cond_kappa_pass is not None]
    cond_p = [r.cond_pe_pass for r in est.history if r.cond_pe_pass is not None]
    verdicts = [
        ["envelope_all", bool(env_pass.all()), _fmt(float(env_pass.mean()))],
        ["kappa_condition_all", bool(all(cond_k)) if cond_k else "", ""],
        ["pe_condition_all", bool(all(cond_p)) if cond_p else "", ""],
        [
            "final_relative_error",
            bool(report.e_norm[-1] <= 0.1 * report.e_norm[0]),
            _fmt(report.e_norm[-1] / report.e_norm[0]),
        ],
    ]
    _write_csv(out / "verdicts.csv", VERDICT_COLUMNS, verdicts)
    return env_pass


@click.group()
@click.version_option(__version__)
def main():
    """Joint state/parameter moving horizon estimation toolbox."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default="certify-out")
def certify(config_path, out_dir):
    """Synthesize and verify a detectability certificate."""
    config = _merge(chua_defaults(), _load_config(config_path))
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    model = _build_model(config)
    try:
        cert = _certificate(config, model, out)
    except JointMheError as exc:
        _fail(EXIT_VERIFICATION, f"synthesis failed: {exc}")
    spec = config.get("certificate", {})
    density = spec.get("grid_density", 5) if isinstance(spec, dict) else 5
    contraction = verify_contraction(cert, model, grid_density=density)
    parameter = verify_parameter_bound(cert, model, grid_density=density)
    rows = [
        ["contraction", contraction.passed, _fmt(contraction.worst_value)],
        ["parameter_bound", parameter.passed, _fmt(parameter.worst_value)],
    ]
    _write_csv(out / "verification.csv", VERDICT_COLUMNS, rows)
    click.echo(
        f"contraction: {'pass' if contraction.passed else 'FAIL'} "
        f"(worst {contraction.worst_value:.6g}); "
        f"parameter bound: {'pass' if parameter.passed else 'FAIL'} "
        f"(worst {parameter.worst_value:.6g})"
    )
    if not (contraction.passed and parameter.passed):
        sys.exit(EXIT_VERIFICATION)


def _run_pipeline(config: dict, out: Path, progress: bool = False) -> int:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    model = _build_model(config)
    try:
        cert = _certificate(config, model, out)
    except JointMheError as exc:
        _fail(EXIT_VERIFICATION, f"certificate unavailable: {exc}")
    truth = _simulate_truth(model, config["simulation"])
    est, mhe, pe = _run_estimator(model, cert, config, truth, progress=progress)
    _write_bundle(out, config, model, cert, truth, est, mhe, pe)
    _analyze_bundle(out, config, model, cert, truth, est, mhe, pe)

    solved = [r for r in est.history if r.t > 0]
    frac_bad = sum(not r.converged for r in solved) / max(len(solved), 1)
    threshold = float(config.get("nonconvergence_threshold", 0.1))
    click.echo(
        f"run complete: {len(solved)} steps, "
        f"{frac_bad:.1%} non-converged solves (threshold {threshold:.0%}), "
        f"outputs in {out}"
    )
    if frac_bad > threshold:
        return EXIT_NONCONVERGENCE
    return 0


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default="run-out")
@click.option("--horizon", type=int, default=None)
@click.option("--steps", type=int, default=None)
@click.option(
    "--mode", type=click.Choice(["online-M0", "fixed-Mbar"]), default=None
)
def run(config_path, seed, out_dir, horizon, steps, mode):
    """Simulate, estimate, and analyze one experiment."""
    config = _merge(chua_defaults(), _load_config(config_path))
    if seed is not None:
        config["simulation"]["seed"] = seed
    if horizon is not None:
        config["mhe"]["N"] = horizon
    if steps is not None:
        config["simulation"]["steps"] = steps
    if mode is not None:
        config["mhe"]["gamma_mode"] = mode
    sys.exit(_run_pipeline(config, Path(out_dir)))


@main.command()
@click.argument("bundle_dir", type=click.Path(exists=False))
def analyze(bundle_dir):
    """Re-run the analysis checks on an existing run bundle."""
    out = Path(bundle_dir)
    bundle_file = out / "bundle.yaml"
    if not bundle_file.exists():
        _fail(EXIT_IO, f"no bundle.yaml under {out}")
    with open(bundle_file) as fh:
        bundle = yaml.safe_load(fh)
    config = bundle["config"]
    model = _build_model(config)
    cert_file = out / "certificate.yaml"
    if not cert_file.exists():
        _fail(EXIT_IO, f"missing certificate.yaml under {out}")
    with open(cert_file) as fh:
        cert = certificate_from_dict(yaml.safe_load(fh), model)
    # deterministic replay from the stored config: cheaper than re-parsing
    # the CSVs and bitwise-identical to the original run
    truth = _simulate_truth(model, config["simulation"])
    est, mhe, pe = _run_estimator(model, cert, config, truth)
    env_pass = _analyze_bundle(out, config, model, cert, truth, est, mhe, pe)
    click.echo(
        f"analysis rewritten: {int(env_pass.sum())}/{env_pass.size} envelope rows pass"
    )


@main.command("reproduce-chua")
@click.option("--seed", type=int, default=1)
@click.option("--out", "out_dir", type=click.Path(), default="chua-out")
@click.option("--steps", type=int, default=2000)
def reproduce_chua(seed, out_dir, steps):
    """Run the built-in chaotic-circuit scenario end to end."""
    config = chua_defaults()
    config["simulation"]["seed"] = seed
    config["simulation"]["steps"] = steps
    sys.exit(_run_pipeline(config, Path(out_dir), progress=True))


if __name__ == "__main__":
    main()
