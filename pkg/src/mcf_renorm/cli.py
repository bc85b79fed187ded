"""Command-line driver: ``mcf-renorm <pipeline> --config FILE --out DIR``.

Pipelines: ``approximate`` (continued-fraction steps), ``diagnose``
(Diophantine and envelope diagnostics), ``renorm-vf`` (vector-field
conjugacy), ``renorm-ham`` (invariant torus) and ``report`` (summary of
finished runs).  Configurations are TOML or JSON; every run writes a
``manifest.json`` echoing the resolved configuration.  Numeric artifacts are
deterministic apart from the ``timings`` entry of the manifest.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, MCFError
from .lattice_flow import (
    FrequencyVector,
    Schedule,
    calibrate_lambda,
    continued_fraction_run,
    delta_floor,
    diophantine_scan,
    norm_envelopes,
    step_discrepancies,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEED_ENV = "MCF_RENORM_SEED"

# defaults of every accepted key; unknown keys are rejected
DEFAULTS = {
    "d": 2,
    "precision_bits": 256,
    "permissive": False,
    "frequency": {"named": None, "values": None, "random_seed": None},
    "schedule": {
        "mode": "fixed-gap", "n_max": 10, "theta": 0.0, "xi": 1.0, "c": 2.0, "phi": 1.0,
        "t1": 1.0, "sigma0": None, "dt_min": 0.25, "dt_max": 16.0, "target": 0.5,
    },
    "truncation": {"K": None, "D": 3},
    "flow": {"kappa": 0.75, "completion": "lll", "enumeration_bound": 8, "contraction_samples": 256},
    "diagnose": {"theta": 0.0, "epsilon": 0.0, "k_max": 100, "stability": 1.5},
    "renorm_vf": {
        "steps": 5, "nu": 0.5, "delta": 0.5, "lam": 0.5, "rho0": None, "b0": 0.2, "working_rho": None,
        "s": 0.0, "grid_exp": None, "method": "newton", "tol": 1e-13, "max_iter": 12, "homotopy_steps": 16,
        "perturbation": [],
    },
    "renorm_ham": {
        "steps": 4, "nu": 0.5, "delta": 0.5, "r": 0.04, "r_prime": 0.06, "mu": None, "mu_rule": "budget",
        "rho0": None, "working_rho": None, "grid_exp": None, "tol": 1e-14, "max_iter": 8,
        "Q": None, "perturbation": [],
    },
}


# --------------------------------------------------------------------------
# configuration


def _merge(defaults: dict, given: dict, where: str) -> dict:
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'top level'}: {', '.join(unknown)}", keys=unknown)
    out = {}
    for key, default in defaults.items():
        val = given.get(key, default)
        if isinstance(default, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where + '.' if where else ''}{key} must be a table")
            val = _merge(default, val, f"{where + '.' if where else ''}{key}")
        out[key] = val
    return out


def load_config(path: str | os.PathLike) -> dict:
    """Read a TOML or JSON configuration file (unvalidated)."""
    p = Path(path)
    try:
        text = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {p}: {exc}") from exc
    try:
        if p.suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse configuration {p}: {exc}") from exc


def resolve_config(raw: dict, *, precision_bits: int | None = None, permissive: bool = False) -> dict:
    """Validate keys, fill defaults and materialize the frequency."""
    cfg = _merge(DEFAULTS, raw, "")
    cfg["permissive"] = bool(cfg["permissive"] or permissive)
    if precision_bits is not None:
        cfg["precision_bits"] = int(precision_bits)
    d = cfg["d"]
    if not isinstance(d, int) or d < 2:
        raise ConfigError("d must be an integer >= 2")
    if not isinstance(cfg["precision_bits"], int) or cfg["precision_bits"] < 53:
        raise ConfigError("precision_bits must be an integer >= 53")
    fr = cfg["frequency"]
    chosen = [k for k in ("named", "values", "random_seed") if fr[k] is not None]
    if chosen == ["values", "random_seed"]:
        # a resolved echo carries the seed and the values it produced
        chosen = ["random_seed"]
        echoed, fr["values"] = fr["values"], None
    else:
        echoed = None
    if len(chosen) > 1:
        raise ConfigError("give exactly one of frequency.named, frequency.values, frequency.random_seed")
    if not chosen:
        env = os.environ.get(SEED_ENV)
        if env is None:
            raise ConfigError(f"no frequency given (set frequency.* or {SEED_ENV})")
        try:
            fr["random_seed"] = int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    if fr["random_seed"] is not None:
        rng = np.random.default_rng(int(fr["random_seed"]))
        fr["values"] = [repr(float(x)) for x in rng.random(d - 1)]
        if echoed is not None and [str(v) for v in echoed] != fr["values"]:
            raise ConfigError("frequency.values do not match frequency.random_seed")
    if fr["values"] is not None:
        if len(fr["values"]) != d - 1:
            raise ConfigError(f"frequency.values needs {d - 1} entries")
        fr["values"] = [str(v) for v in fr["values"]]
    return cfg


def frequency_from(cfg: dict) -> FrequencyVector:
    fr, prec = cfg["frequency"], cfg["precision_bits"]
    if fr["named"] is not None:
        alpha = FrequencyVector.named(fr["named"], prec)
    else:
        alpha = FrequencyVector.from_strings(fr["values"], prec)
    if alpha.d != cfg["d"]:
        raise ConfigError(f"frequency has dimension {alpha.d}, config says d = {cfg['d']}")
    return alpha


def schedule_from(cfg: dict, n_max: int | None = None) -> Schedule:
    sc = dict(cfg["schedule"], d=cfg["d"])
    if n_max is not None:
        sc["n_max"] = n_max
    mode = sc.pop("mode")
    return Schedule(mode, **sc)


# --------------------------------------------------------------------------
# artifacts


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text, encoding="utf-8")


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x) -> str:
    return repr(float(x))


def _manifest(cfg: dict, pipeline: str, constants: dict, losses: dict, timings: dict) -> dict:
    echo = json.loads(json.dumps(cfg, sort_keys=True))
    digest = hashlib.sha256(json.dumps(echo, sort_keys=True).encode()).hexdigest()[:16]
    return {
        "pipeline": pipeline,
        "version": __version__,
        "config": echo,
        "config_hash": digest,
        "calibrated_constants": constants,
        "truncation_loss": losses,
        "timings": timings,
    }


# --------------------------------------------------------------------------
# pipelines


def run_approximate(cfg: dict, out: Path) -> dict:
    """Continued-fraction steps and their diagnostics."""
    alpha = frequency_from(cfg)
    sched = schedule_from(cfg)
    fl = cfg["flow"]
    run = continued_fraction_run(alpha, sched, **fl)
    lines = [json.dumps(s.to_record(), sort_keys=True) for s in run]
    _write(out, "steps.jsonl", "\n".join(lines) + "\n")
    prev = None
    disc = []
    for s in run:
        disc.append({k: _num(v) for k, v in sorted(step_discrepancies(s, prev, alpha).items())})
        prev = s
    diag = {
        "delta_floor": _num(delta_floor(run)),
        "A": [_num(s.A_n) for s in run],
        "sigma": [_num(s.sigma) for s in run],
        "discrepancies": disc,
        "merged_steps": run.merged,
    }
    constants = {"C_prime": diag["delta_floor"]}
    if len(run) >= 3:
        env = norm_envelopes(run, sched.theta)
        diag["envelopes"] = {k: _num(v) for k, v in sorted(env.constants_full.items())}
        diag["envelope_violations"] = list(env.violations)
        constants["Lambda"] = _num(calibrate_lambda(run))
    _write(out, "diagnostics.json", _dump(diag))
    return {"constants": constants, "losses": {}}


def run_diagnose(cfg: dict, out: Path) -> dict:
    """Diophantine floor stability, small-divisor scan and envelope constants."""
    alpha = frequency_from(cfg)
    dg = cfg["diagnose"]
    n = cfg["schedule"]["n_max"]
    short = continued_fraction_run(alpha, schedule_from(cfg, n))
    long = continued_fraction_run(alpha, schedule_from(cfg, 2 * n))
    f1, f2 = delta_floor(short, dg["theta"]), delta_floor(long, dg["theta"])
    scan = diophantine_scan(alpha, dg["epsilon"], dg["k_max"])
    env = norm_envelopes(long, dg["theta"], dg["stability"])
    diag = {
        "delta_floor": {"n": n, "value": _num(f1), "n_doubled": 2 * n, "value_doubled": _num(f2),
                        "drift": _num(abs(f2 - f1) / f1 if f1 > 0 else math.inf)},
        "delta": [_num(s.delta_M) for s in long],
        "scan": {"min": _num(scan.min_value), "argmin": list(scan.argmin),
                 "min_omega_form": _num(scan.min_omega_form), "argmin_omega": list(scan.argmin_omega)},
        "envelopes": {k: _num(v) for k, v in sorted(env.constants_full.items())},
        "envelope_violations": list(env.violations),
        "Lambda": _num(calibrate_lambda(long)),
    }
    _write(out, "diagnostics.json", _dump(diag))
    return {"constants": {"C_prime": _num(f2), "Lambda": diag["Lambda"]}, "losses": {}}


def _perturbation_modes(entries, d, ncomp, where):
    modes = {}
    for e in entries:
        if not isinstance(e, dict) or "k" not in e:
            raise ConfigError(f"{where} entries need a Fourier index k")
        unknown = set(e) - {"k", "nu", "component", "re", "im"}
        if unknown:
            raise ConfigError(f"unknown keys in {where}: {', '.join(sorted(unknown))}")
        k = tuple(int(x) for x in e["k"])
        nu = tuple(int(x) for x in e.get("nu", [0] * d))
        if len(k) != d or len(nu) != d:
            raise ConfigError(f"{where} indices need {d} entries")
        val = complex(float(e.get("re", 0.0)), float(e.get("im", 0.0)))
        if ncomp == 1:
            modes[(k, nu)] = modes.get((k, nu), 0) + val
        else:
            vec = np.array(modes.get((k, nu), np.zeros(ncomp, dtype=complex)))
            vec[int(e.get("component", 0))] += val
            modes[(k, nu)] = vec
    return modes


def run_renorm_vf(cfg: dict, out: Path) -> dict:
    """Vector-field renormalization and conjugacy."""
    from .renorm_vf import EliminationConfig, VfRenormConfig, renorm_run, residual_points
    from .torus_field import TorusSeries, Truncation

    alpha = frequency_from(cfg)
    d = alpha.d
    rv = cfg["renorm_vf"]
    steps = int(rv["steps"])
    sched = schedule_from(cfg, steps + 1)
    trunc = Truncation.default(d, cfg["truncation"]["K"], cfg["truncation"]["D"])
    omega = alpha.as_array()
    modes = _perturbation_modes(rv["perturbation"], d, d, "renorm_vf.perturbation")
    zero = ((0,) * d, (0,) * d)
    modes[zero] = modes.get(zero, np.zeros(d)) + omega
    v = TorusSeries.from_modes(trunc, modes, ncomp=d)
    conf = VfRenormConfig(
        sched, nu=rv["nu"], delta=rv["delta"], lam=rv["lam"],
        elimination=EliminationConfig(rv["method"], rv["tol"], rv["max_iter"], rv["homotopy_steps"]),
        K=trunc.K, D=trunc.D, rho0=rv["rho0"], b0=rv["b0"], permissive=cfg["permissive"],
        precision_bits=cfg["precision_bits"], working_rho=rv["working_rho"],
    )
    run = renorm_run(v, alpha, conf, steps, s=rv["s"], grid_exp=rv["grid_exp"])
    lines = [json.dumps(st.to_record(), sort_keys=True) for st in run.states]
    _write(out, "states.jsonl", "\n".join(lines) + "\n")
    conj = run.conjugacy
    body = conj.to_json()
    body["theta"] = [_num(t) for t in run.budget.theta]
    body["envelope_ok"] = run.envelope_ok
    _write(out, "conjugacy.json", _dump(body))
    x, res, _ = residual_points(v, conj.h, conj.p, omega, conj.s, conj.residual_report["grid"])
    rows = [[_num(c) for c in xi] + [_num(r)] for xi, r in zip(x, res)]
    _write(out, "residuals.csv", _csv(rows, [f"x{i + 1}" for i in range(d)] + ["residual"]))
    return {
        "constants": {"K": _num(run.calibrated_K)},
        "losses": {"total": _num(sum(st.X.f.loss for st in run.states))},
    }


def run_renorm_ham(cfg: dict, out: Path) -> dict:
    """Hamiltonian renormalization and invariant torus."""
    from .renorm_ham import HamEliminationConfig, HamRenormConfig, renorm_run_ham, residual_points
    from .torus_field import AnalyticityWindow, FlatBase, HamiltonianSeries, TorusSeries, Truncation

    alpha = frequency_from(cfg)
    d = alpha.d
    rh = cfg["renorm_ham"]
    steps = int(rh["steps"])
    sched = schedule_from(cfg, steps + 1)
    trunc = Truncation.default(d, cfg["truncation"]["K"], cfg["truncation"]["D"])
    Q = np.eye(d) if rh["Q"] is None else np.array(rh["Q"], dtype=float)
    if Q.shape != (d, d):
        raise ConfigError(f"renorm_ham.Q must be {d} x {d}")
    modes = _perturbation_modes(rh["perturbation"], d, 1, "renorm_ham.perturbation")
    f = TorusSeries.from_modes(trunc, modes) if modes else TorusSeries.zeros(trunc)
    conf = HamRenormConfig(
        sched, nu=rh["nu"], delta=rh["delta"], r=rh["r"], r_prime=rh["r_prime"],
        elimination=HamEliminationConfig(tol=rh["tol"], max_iter=rh["max_iter"]),
        K=trunc.K, D=trunc.D, mu=rh["mu"], mu_rule=rh["mu_rule"], rho0=rh["rho0"],
        permissive=cfg["permissive"], working_rho=rh["working_rho"],
    )
    H = HamiltonianSeries(f, AnalyticityWindow(conf.solver_rho(trunc), conf.r), FlatBase(alpha.as_array(), Q))
    run = renorm_run_ham(H, alpha, conf, steps, grid_exp=rh["grid_exp"])
    lines = [json.dumps(st.to_record(), sort_keys=True) for st in run.states]
    _write(out, "states.jsonl", "\n".join(lines) + "\n")
    body = run.torus.to_json()
    body["theta"] = [_num(t) for t in run.budget.theta]
    body["envelope_ok"] = run.envelope_ok
    body["q_consistency"] = _num(run.q_consistency)
    _write(out, "torus.json", _dump(body))
    x, res, energy = residual_points(H, run.torus, H.base.omega, run.torus.residual_report["grid"])
    rows = [[_num(c) for c in xi] + [_num(r), _num(e)] for xi, r, e in zip(x, res, energy)]
    _write(out, "residuals.csv", _csv(rows, [f"x{i + 1}" for i in range(d)] + ["residual", "energy"]))
    return {
        "constants": {"K": _num(run.calibrated_K)},
        "losses": {"total": _num(sum(st.H.f.loss for st in run.states))},
    }


PIPELINES = {
    "approximate": run_approximate,
    "diagnose": run_diagnose,
    "renorm-vf": run_renorm_vf,
    "renorm-ham": run_renorm_ham,
}


# --------------------------------------------------------------------------
# report


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return None


def _summarize_run(run_dir: Path) -> dict:
    manifest = _read_json(run_dir / "manifest.json")
    sec = {"directory": run_dir.name, "complete": manifest is not None}
    if manifest is None:
        err = _read_json(run_dir / "error.json")
        if err is not None:
            sec["error"] = err
        return sec
    sec["pipeline"] = manifest["pipeline"]
    sec["config_hash"] = manifest["config_hash"]
    sec["calibrated_constants"] = manifest["calibrated_constants"]
    states = run_dir / "states.jsonl"
    if states.exists():
        recs = [json.loads(line) for line in states.read_text().splitlines() if line.strip()]
        sec["theta"] = [r["theta"] for r in recs]
        sec["theta_monotone"] = all(float(b) <= float(a) for a, b in zip(sec["theta"], sec["theta"][1:]))
        sec["perturbation_norms"] = [r["perturbation_norm"] for r in recs]
        slopes = []
        for r in recs:
            ds = [float(x) for x in r["elimination"]["defects"] if float(x) > 0]
            if len(ds) >= 3 and ds[1] != ds[0]:
                slopes.append(_num((math.log(ds[2]) - math.log(ds[1])) / (math.log(ds[1]) - math.log(ds[0]))))
        sec["defect_slopes"] = slopes
    for name in ("conjugacy.json", "torus.json"):
        body = _read_json(run_dir / name)
        if body is not None:
            sec["residual"] = body["residual"]
    diag = _read_json(run_dir / "diagnostics.json")
    if diag is not None:
        sec["delta_floor"] = diag["delta_floor"]
    return sec


def emit_report(out_dirs) -> dict:
    """Aggregate one or more finished runs into ``report.json`` sections keyed by config hash."""
    sections, partial = {}, False
    for d in out_dirs:
        d = Path(d)
        runs = [d] if (d / "manifest.json").exists() or (d / "error.json").exists() else sorted(
            p for p in d.iterdir() if p.is_dir()
        ) if d.is_dir() else []
        if not runs:
            partial = True
            sections[f"missing:{d.name}"] = {"directory": d.name, "complete": False}
        for r in runs:
            sec = _summarize_run(r)
            partial |= not sec["complete"]
            sections[sec.get("config_hash", f"incomplete:{r.name}")] = sec
    return {"partial": partial, "runs": sections}


def _summary_text(report: dict) -> str:
    lines = [f"report: {len(report['runs'])} run(s){' (partial)' if report['partial'] else ''}"]
    for key, sec in sorted(report["runs"].items()):
        if not sec["complete"]:
            lines.append(f"  {key}: incomplete")
            continue
        msg = f"  {key}: {sec['pipeline']}"
        if "residual" in sec:
            msg += f", residual max {float(sec['residual']['max']):.3e}"
        if "theta_monotone" in sec:
            msg += f", theta monotone {sec['theta_monotone']}"
        lines.append(msg)
    return "\n".join(lines)


# --------------------------------------------------------------------------
# entry point


def _error_record(exc: MCFError, stage: str) -> dict:
    details = {k: (v if isinstance(v, (int, float, str, bool, list, type(None))) else repr(v)) for k, v in exc.details.items()}
    return {"error": exc.tag, "kind": exc.kind, "stage": stage, "message": str(exc), "details": details}


def execute(pipeline: str, config_path: str, out: str, *, precision_bits=None, permissive=False) -> int:
    """Run one pipeline; returns the exit code."""
    t_start = time.perf_counter()
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        cfg = resolve_config(load_config(config_path), precision_bits=precision_bits, permissive=permissive)
        t0 = time.perf_counter()
        info = PIPELINES[pipeline](cfg, out_dir)
        t1 = time.perf_counter()
    except MCFError as exc:
        rec = _error_record(exc, pipeline)
        _write(out_dir, "error.json", _dump(rec))
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        return 2 if exc.kind == "config" else 3
    timings = {"wall_clock_seconds": round(time.perf_counter() - t_start, 3), "stages": {pipeline: round(t1 - t0, 3)}}
    _write(out_dir, "manifest.json", _dump(_manifest(cfg, pipeline, info["constants"], info["losses"], timings)))
    return 0


def _job(args):
    pipeline, cfg, out, prec, perm = args
    return execute(pipeline, cfg, out, precision_bits=prec, permissive=perm)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcf-renorm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in PIPELINES:
        p = sub.add_parser(name)
        p.add_argument("--config", action="append", required=True, help="TOML or JSON file; repeat for a sweep")
        p.add_argument("--out", required=True, help="output directory (one subdirectory per config in a sweep)")
        p.add_argument("--precision-bits", type=int, default=None)
        p.add_argument("--permissive", action="store_true", help="warn instead of failing on conservative bounds")
        p.add_argument("--jobs", type=int, default=1, help="run sweep configs in this many processes")
    rep = sub.add_parser("report")
    rep.add_argument("--out", action="append", required=True, help="run directory or directory of runs")
    rep.add_argument("--json", action="store_true", help="print the report JSON instead of the summary")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        report = emit_report(args.out)
        target = Path(args.out[0])
        if target.is_dir():
            _write(target, "report.json", _dump(report))
        print(_dump(report) if args.json else _summary_text(report))
        return 0
    configs = args.config
    if len(configs) == 1:
        return execute(args.command, configs[0], args.out, precision_bits=args.precision_bits, permissive=args.permissive)
    jobs = [
        (args.command, c, str(Path(args.out) / Path(c).stem), args.precision_bits, args.permissive) for c in configs
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(_job, jobs))
    else:
        codes = [_job(j) for j in jobs]
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
