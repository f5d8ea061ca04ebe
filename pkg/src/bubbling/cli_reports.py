"""Batch command line: regime reports, reduced-function landscapes, radial pipeline.

Usage::

    bubbling regimes   --config FILE [--out DIR] [--seed N] [--workers K]
    bubbling landscape --config FILE ...
    bubbling pipeline  --config FILE ...

Exit status: 0 when every verdict passes, 1 when a verdict fails, 2 on a
validation error (config, admissibility, missing input), 3 on a numerical
diagnostic.  Outputs contain no timestamps, so identical inputs give
byte-identical files.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from .bubble_core import CutoffSpec
from .errors import BubblingError, InadmissibleAlphaError, MissingInputError, NumericalDiagnostic
from .radial_reduction import (ModelProblem, fit_loglog_slope, model_theta,
                               nonlinear_reduction_solve, reduced_energy_numeric,
                               u0_solve_and_eigen)
from .reduced_energy import (expansion_constants, landscape_rows, theta_critical_point,
                             theta_newton, theta_spec_for)
from .regimes import (FlatnessProfile, GeometryData, as_fraction, classify_regime,
                      energy_exponent, error_exponent, fraction_str, regime_table)

SCHEMA = 1
TAU_OFFSETS = tuple(float(v) for v in np.linspace(-1.0, 1.0, 9))
T_FACTORS = tuple(float(v) for v in np.linspace(0.25, 2.0, 15))


class ConfigError(BubblingError):
    """Invalid configuration file."""


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class RunConfig:
    n: int
    alpha: Fraction
    a: tuple
    problem: str = "multiplicity"
    R_g: float = 0.0
    weyl_sq: float = 0.0
    lcf: bool = False
    u0_xi: Optional[float] = None
    mass: Optional[float] = None
    A1: Optional[float] = None
    lambda_min: float = 1e-3
    lambda_max: float = 1e-1
    lambdas_per_decade: int = 6
    t_values: tuple = ("1.0",)
    R_max: float = 2.0
    panels_per_decade: int = 24
    cutoff_radius: float = 1.0
    h_scale: float = 1.0
    seed: int = 0
    out_dir: str = "out"

    def geometry(self) -> GeometryData:
        return GeometryData(n=self.n, R_g=self.R_g, weyl_sq=self.weyl_sq, lcf=self.lcf,
                            u0_at_xi=0.0 if self.u0_xi is None else self.u0_xi, mass=self.mass)

    def profile(self) -> FlatnessProfile:
        return FlatnessProfile.from_alpha(self.alpha, self.a)

    def lambdas(self) -> np.ndarray:
        lo, hi = math.log10(self.lambda_min), math.log10(self.lambda_max)
        count = int(round((hi - lo) * self.lambdas_per_decade)) + 1
        return np.logspace(lo, hi, count)

    def model(self) -> ModelProblem:
        return ModelProblem(geometry=self.geometry(), profile=self.profile(), R_max=self.R_max,
                            cutoff=CutoffSpec(r=self.cutoff_radius), h_scale=self.h_scale,
                            panels_per_decade=self.panels_per_decade)


# section -> keys, in emission order
SECTIONS = {
    "problem": ("problem", "n", "alpha", "a"),
    "geometry": ("R_g", "weyl_sq", "lcf", "u0_xi", "mass", "A1"),
    "sweep": ("lambda_min", "lambda_max", "lambdas_per_decade", "t_values"),
    "grid": ("R_max", "panels_per_decade"),
    "model": ("cutoff_radius", "h_scale"),
    "run": ("seed", "out_dir"),
}
REQUIRED = ("n", "alpha", "a")
_FLOATS = {"R_g", "weyl_sq", "u0_xi", "mass", "A1", "lambda_min", "lambda_max", "R_max",
           "cutoff_radius", "h_scale"}
_INTS = {"n", "lambdas_per_decade", "panels_per_decade", "seed"}


def _key_line(text: str, key: str) -> int:
    for i, line in enumerate(text.splitlines(), 1):
        head = line.split("=", 1)[0].strip()
        if head == key:
            return i
    return 0


def _t_token(tok: str) -> str:
    tok = tok.strip().replace(" ", "")
    if tok.endswith("*t0"):
        return f"{float(tok[:-3])!r}*t0"
    if tok == "t0":
        return "1.0*t0"
    return repr(float(tok))


def _convert(key: str, raw: str):
    raw = raw.strip()
    if key in _FLOATS:
        if key in ("mass", "A1", "u0_xi") and raw.lower() == "none":
            return None
        return float(raw)
    if key in _INTS:
        return int(raw)
    if key == "alpha":
        return as_fraction(raw)
    if key == "a":
        return tuple(float(v) for v in raw.split(","))
    if key == "lcf":
        low = raw.lower()
        if low not in ("true", "false"):
            raise ValueError("expected true or false")
        return low == "true"
    if key == "t_values":
        return tuple(_t_token(v) for v in raw.split(","))
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse the sectioned key = value format; the first problem aborts."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"line {_key_line(text, '[' + section + ']')}: unknown section [{section}]")
        for key, raw in cp.items(section):
            line = _key_line(text, key)
            if key not in SECTIONS[section]:
                raise ConfigError(f"line {line}: unknown key '{key}' in section [{section}]")
            try:
                values[key] = _convert(key, raw)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"line {line}: field '{key}': cannot parse {raw!r} ({exc})") from exc
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(f"missing required field '{key}'")
    cfg = RunConfig(**values)
    validate_config(cfg, text)
    return cfg


def validate_config(cfg: RunConfig, text: str = "") -> None:
    def fail(key, msg):
        line = _key_line(text, key) if text else 0
        where = f"line {line}: " if line else ""
        raise ConfigError(f"{where}field '{key}': {msg}")

    if cfg.problem not in ("multiplicity", "positive"):
        fail("problem", "must be 'multiplicity' or 'positive'")
    if cfg.n < 3:
        fail("n", "dimension must be >= 3")
    if len(cfg.a) != cfg.n:
        fail("a", f"needs {cfg.n} comma-separated coefficients, got {len(cfg.a)}")
    if not (0 < cfg.lambda_min < cfg.lambda_max):
        fail("lambda_min", "need 0 < lambda_min < lambda_max")
    if cfg.lambdas_per_decade < 1:
        fail("lambdas_per_decade", "must be >= 1")
    if not cfg.t_values:
        fail("t_values", "at least one t value is needed")
    for tok in cfg.t_values:
        if float(tok.split("*")[0]) <= 0:
            fail("t_values", "t values must be positive")
    if cfg.R_max <= 0:
        fail("R_max", "must be positive")
    if not cfg.cutoff_radius > 0:
        fail("cutoff_radius", "must be positive (inf switches the cutoff off)")
    if math.isfinite(cfg.cutoff_radius) and cfg.cutoff_radius > cfg.R_max:
        fail("cutoff_radius", f"exceeds R_max = {cfg.R_max}")
    if cfg.h_scale < 0:
        fail("h_scale", "must be >= 0")
    # geometry and profile invariants
    try:
        cfg.geometry()
        cfg.profile()
    except BubblingError as exc:
        raise ConfigError(str(exc)) from exc


def emit_config(cfg: RunConfig) -> str:
    """Inverse of parse_config: parse_config(emit_config(c)) == c."""
    data = asdict(cfg)
    out = []
    for section, keys in SECTIONS.items():
        out.append(f"[{section}]")
        for key in keys:
            val = data[key]
            if val is None:
                continue
            if key == "alpha":
                text = fraction_str(val)
            elif key == "a":
                text = ", ".join(repr(float(v)) for v in val)
            elif key == "lcf":
                text = "true" if val else "false"
            elif key == "t_values":
                text = ", ".join(val)
            elif isinstance(val, float):
                text = repr(val)
            else:
                text = str(val)
            out.append(f"{key} = {text}")
        out.append("")
    return "\n".join(out)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# output helpers

def _json_default(obj):
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Fraction):
        return fraction_str(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, default=_json_default, allow_nan=True)
        fh.write("\n")


def write_csv(path: str, header, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# schema={SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path: str):
    """Read a schema-tagged CSV back into (header, rows of floats)."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != f"# schema={SCHEMA}":
            raise ConfigError(f"{path}: unsupported schema line {first!r}")
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in r] for r in reader]
    return header, rows


# ---------------------------------------------------------------------------
# regimes

def _selection(cfg: RunConfig):
    return classify_regime(cfg.geometry(), cfg.profile(), problem=cfg.problem)


def format_table(rows) -> str:
    cols = ("problem", "geometry", "law", "ansatz", "alpha_window", "beta")
    width = {c: max(len(c), *(len(str(r[c])) for r in rows)) if rows else len(c) for c in cols}
    lines = ["  ".join(c.ljust(width[c]) for c in cols).rstrip()]
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(width[c]) for c in cols).rstrip())
    return "\n".join(lines) + "\n"


def cmd_regimes(cfg: RunConfig, out_dir: str) -> dict:
    sel = _selection(cfg)
    report = sel.to_report()
    table = regime_table(cfg.n)
    report["table"] = table
    write_json(os.path.join(out_dir, "regime.json"), report)
    with open(os.path.join(out_dir, "regime_table.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_table(table))
    return {"ok": True, "report": report}


# ---------------------------------------------------------------------------
# landscape

def model_u0_center(cfg: RunConfig) -> float:
    """Background value at the blow-up point computed from the radial model."""
    return float(u0_solve_and_eigen(cfg.model()).u0.at_center)


def landscape_spec(cfg: RunConfig):
    """Reduced function for the config; u0 at the point comes from the model when not given."""
    sel = _selection(cfg)
    geometry = cfg.geometry()
    if sel.energy_branch == "u0" and cfg.u0_xi is None:
        if not cfg.R_g < 0:
            raise MissingInputError("u0_xi is required when R_g >= 0 (the model background vanishes)")
        geometry = replace(geometry, u0_at_xi=model_u0_center(cfg))
    const = expansion_constants(cfg.n, A1=cfg.A1, require_A1=sel.energy_branch == "weyl")
    spec, coef = theta_spec_for(sel, const, geometry, cfg.profile())
    return sel, spec, coef


def cmd_landscape(cfg: RunConfig, out_dir: str, seed: int) -> dict:
    sel, spec, coef = landscape_spec(cfg)
    cp = theta_critical_point(spec)
    t_grid = [cp.t0 * f for f in T_FACTORS]
    if cp.t0 not in t_grid:
        t_grid = sorted(t_grid + [cp.t0])
    rows = landscape_rows(spec, t_grid, TAU_OFFSETS)
    header = ["t"] + [f"tau_{i + 1}" for i in range(cfg.n)] + [
        "theta", "grad_norm", "min_eig_hess", "max_eig_hess"]
    out_rows = [[t, *tau, th, g, lo, hi] for (t, tau, th, g, lo, hi) in rows]
    write_csv(os.path.join(out_dir, "landscape.csv"), header, out_rows)
    # multistart Newton from a seeded set of starts
    rng = np.random.default_rng(seed)
    found = []
    starts = 8
    for _ in range(starts):
        t_start = cp.t0 * rng.uniform(0.6, 1.4)
        tau_start = rng.uniform(-0.3, 0.3, size=cfg.n)
        try:
            t, tau, ok = theta_newton(spec, t_start, tau_start)
        except BubblingError:
            continue
        # Theta flattens as t -> 0 and |tau| -> inf, so Newton can stall far
        # out with a tiny gradient; only points in a bounded window count
        if ok and 1e-3 * cp.t0 < t < 1e3 * cp.t0 and np.linalg.norm(tau) <= 10.0:
            found.append([float(t)] + [float(v) for v in tau])
    distinct = []
    for pt in found:
        if not any(np.allclose(pt, q, rtol=1e-8, atol=1e-8) for q in distinct):
            distinct.append(pt)
    best = min(rows, key=lambda r: r[3])
    ev = cp.eigenvalues
    verdict = f"{cp.kind}, {'nondegenerate' if cp.nondegenerate else 'degenerate'}"
    summary = {
        "branch": sel.energy_branch,
        "beta": spec.beta,
        "gamma": spec.gamma,
        "weight_amplitude": spec.weight_amplitude,
        "scale_factor": coef,
        "t0": cp.t0,
        "tau0": [0.0] * cfg.n,
        "hessian_eigenvalues": sorted(float(v) for v in ev),
        "nondegenerate": cp.nondegenerate,
        "verdict": verdict,
        "grid_min_grad": {"t": best[0], "tau": [float(v) for v in best[1]], "grad_norm": best[3]},
        "multistart": {"seed": seed, "starts": starts, "converged": len(found),
                       "critical_points": distinct},
    }
    write_json(os.path.join(out_dir, "landscape_summary.json"), summary)
    return {"ok": bool(cp.nondegenerate), "summary": summary}


# ---------------------------------------------------------------------------
# pipeline

def resolve_t_values(cfg: RunConfig, sel) -> list:
    out = []
    t0 = None
    for tok in cfg.t_values:
        if tok.endswith("*t0"):
            if t0 is None:
                _, spec, _ = landscape_spec(cfg)
                t0 = theta_critical_point(spec).t0
            out.append(float(tok[:-3]) * t0)
        else:
            out.append(float(tok))
    return out


def run_single(cfg: RunConfig, t: float, lam: float) -> dict:
    """One (t, lambda) pipeline run; returns plain data (picklable)."""
    model = cfg.model()
    sel = _selection(cfg)
    state = nonlinear_reduction_solve(model, sel, t, lam)
    energy = reduced_energy_numeric(model, sel, t, lam, state)
    e = energy_exponent(sel)
    scaled = -energy.deviation * lam ** (-float(e))
    # the flat radial model only carries the u0 and flatness terms; with a
    # Weyl or mass leading term there is no model reduced function to match
    theta, rel, match = None, None, None
    # the flat model also keeps c R_g int W^2 / 2 ~ lam^{2 beta - (n-2)}; when
    # that term is not of higher order than the balanced ones it dominates
    # the deviation and there is again nothing to compare with
    self_order = 2 * sel.beta - (cfg.n - 2)
    self_dominates = bool(cfg.R_g != 0.0 and self_order <= e)
    if sel.energy_branch == "u0" and not self_dominates:
        theta = model_theta(model, sel, t, state.fields.background.at_center)
        if theta == 0.0:
            match = energy.deviation == 0.0
            rel = 0.0 if match else float("inf")
        else:
            rel = abs(scaled - theta) / abs(theta)
            match = rel <= 0.1
    diag = state.diagnostics()
    diag.update({
        "energy": {"J": energy.J, "reference": energy.reference, "deviation": energy.deviation,
                   "deviation_without_phi": energy.deviation_without_phi,
                   "phi_part": energy.phi_part, "cutoff_part": energy.cutoff_part,
                   "energy_exponent": fraction_str(e), "theta_model": theta,
                   "scaled_deviation": scaled, "relative_mismatch": rel,
                   "self_energy_order": fraction_str(self_order),
                   "self_energy_dominates": self_dominates},
        "h_exact": model.h_exact,
    })
    return {
        "t": t, "lambda": lam, "mu": state.mu, "norm_E": state.norm_E, "norm_phi": state.norm_phi,
        "c": [float(v) for v in state.c], "contraction_ratio": state.contraction_ratio,
        "iterations": state.iterations, "J_num": energy.J, "min_u": state.min_u,
        "energy_match": match, "diagnostics": diag,
    }


def _run_star(args):
    return run_single(*args)


def cmd_pipeline(cfg: RunConfig, out_dir: str, workers: int = 1) -> dict:
    sel = _selection(cfg)
    cfg.model()  # validate model construction before spawning work
    ts = resolve_t_values(cfg, sel)
    lams = cfg.lambdas()
    jobs = [(cfg, t, float(lam)) for t in ts for lam in lams]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_star, jobs))
    else:
        results = [_run_star(j) for j in jobs]
    header = ["lambda", "mu", "norm_E", "norm_phi"] + [f"c{i}" for i in range(cfg.n + 1)] + [
        "contraction_ratio", "J_num", "min_u"]
    rows = [[r["lambda"], r["mu"], r["norm_E"], r["norm_phi"], *r["c"], r["contraction_ratio"],
             r["J_num"], r["min_u"]] for r in results]
    write_csv(os.path.join(out_dir, "sweep.csv"), header, rows)
    run_dir = os.path.join(out_dir, "runs")
    os.makedirs(run_dir, exist_ok=True)
    for k, r in enumerate(results):
        write_json(os.path.join(run_dir, f"run_{k:03d}.json"), r["diagnostics"])
    theo = float(error_exponent(sel))
    slopes = []
    slope_ok = True
    for t in ts:
        sub = [r for r in results if r["t"] == t]
        x = np.array([r["lambda"] for r in sub])
        y = np.array([r["norm_E"] for r in sub])
        if np.all(y == 0.0):
            slopes.append({"t": t, "slope": None})
            continue
        if np.any(y <= 0.0):
            slope_ok = False
            slopes.append({"t": t, "slope": None})
            continue
        s, _ = fit_loglog_slope(x, y)
        slopes.append({"t": t, "slope": s})
        slope_ok = slope_ok and s >= 0.9 * theo
    verdicts = {
        "slope_ok": bool(slope_ok),
        "contraction_ok": bool(all(r["contraction_ratio"] < 0.8 for r in results)),
        "positivity_ok": bool(all(r["min_u"] > 0.0 for r in results)),
        "energy_match_ok": _energy_verdict(results),
    }
    block = {
        "verdicts": verdicts,
        "theoretical_error_exponent": theo,
        "slope_threshold": 0.9 * theo,
        "slopes": slopes,
        "t_values": ts,
        "lambdas": [float(v) for v in lams],
        "regime": sel.to_report(),
        "rows": [{"index": k, "t": r["t"], "lambda": r["lambda"]} for k, r in enumerate(results)],
    }
    write_json(os.path.join(out_dir, "verdicts.json"), block)
    ok = all(v is not False for v in verdicts.values())
    return {"ok": ok, "verdicts": verdicts, "results": results}


def _energy_verdict(results):
    """True/False over the runs where a model reduced function exists, None if none does."""
    flags = [r["energy_match"] for r in results if r["energy_match"] is not None]
    if not flags:
        return None
    return bool(all(flags))


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bubbling", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("regimes", "landscape", "pipeline"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="configuration file")
        p.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, default=None, help="seed (overrides the config)")
        p.add_argument("--workers", type=int, default=1, help="worker processes for sweeps")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        out_dir = args.out if args.out is not None else cfg.out_dir
        os.makedirs(out_dir, exist_ok=True)
        if args.command == "regimes":
            res = cmd_regimes(cfg, out_dir)
        elif args.command == "landscape":
            res = cmd_landscape(cfg, out_dir, cfg.seed)
        else:
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            res = cmd_pipeline(cfg, out_dir, args.workers)
    except NumericalDiagnostic as exc:
        print(f"numerical diagnostic: {exc}", file=sys.stderr)
        return 3
    except InadmissibleAlphaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (BubblingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if "verdicts" in res:
        print(json.dumps(res["verdicts"], sort_keys=True))
    return 0 if res["ok"] else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
