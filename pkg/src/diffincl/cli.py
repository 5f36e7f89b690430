"""Command line entry point: config parsing, dispatch and deterministic output.

Configs are YAML (JSON is accepted as a subset).  Every key is optional::

    F: F0                      # model spec, see function_model.model_from_spec
    G: {name: G0, p: 2}
    p: 2
    lambda: 0.5
    lambda_fraction: 0.5       # run at this fraction of the computed threshold
    regime: origin             # or infinity
    target_count: 4
    mesh: {dim: 1, extent: [0, 1], resolution: 2048}
    bump: {center: 0.5, radius: 0.49}
    shift: auto
    window: [1.0e-5, 1.0]
    margin: null
    tolerances: {stop_tol: 1.0e-7, max_iters: 20000, distinct_linf: 1.0e-8, distinct_energy: 1.0e-10}
    max_skips: 12
    workers: 1
    seed: 0                    # calculus-check only
    samples: 1000              # calculus-check only
    eta: null                  # solve only; first stability interval when null
    delta: null                # solve only
    nodal: false               # also dump nodal values per record

Exit codes: 0 pass, 2 verification fail, 3 precondition or hypothesis
violation, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .cascade import (
    CascadeConfig, HypothesisError, LevelResult, SolutionFamily, VerificationReport, build_effective_model,
    run_cascade, verify_theorem_predictions,
)
from .discretization import MeshError, build_mesh, bump, bump_geometry, write_nodal_csv
from .energy_minimizer import EnergyContext, MinimizeOptions, NumericalFailure, energy, minimize_over_ball
from .function_model import ModelError, builtin, lebourg_check, model_from_spec, truncate
from .oscillation_analysis import (
    AnalysisError, Regime, StabilityInterval, estimate_limits, find_stability_intervals,
)

log = logging.getLogger(__name__)

__all__ = ["ConfigError", "RunConfig", "SUBCOMMANDS", "FAMILY_COLUMNS", "parse_config", "emit_family", "main"]

SUBCOMMANDS = ("solve", "cascade", "intervals", "lambda-threshold", "calculus-check")

FAMILY_COLUMNS = ("index", "case_id", "lambda", "p", "eta", "delta", "energy", "linf", "h01", "l2",
                  "residual", "iterations")

EXIT_OK, EXIT_VERIFY, EXIT_HYPOTHESIS, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


_SCHEMA: dict = {
    "F": "model", "G": "model", "p": "number", "lambda": "number", "lambda_fraction": "number",
    "regime": "string", "target_count": "integer", "shift": "shift", "window": "pair",
    "margin": "number", "max_skips": "integer", "workers": "integer", "seed": "integer",
    "samples": "integer", "eta": "number", "delta": "number", "nodal": "boolean",
    "mesh": {"dim": "integer", "extent": "any", "resolution": "integer"},
    "bump": {"center": "any", "radius": "number"},
    "tolerances": {"stop_tol": "number", "max_iters": "integer", "distinct_linf": "number",
                   "distinct_energy": "number"},
}


def _check_type(kind: str, value, path: str):
    if value is None or kind in ("any", "model"):
        return
    ok = {
        "number": isinstance(value, (int, float)) and not isinstance(value, bool),
        "integer": isinstance(value, int) and not isinstance(value, bool),
        "string": isinstance(value, str),
        "boolean": isinstance(value, bool),
        "shift": value == "auto" or (isinstance(value, (int, float)) and not isinstance(value, bool)),
        "pair": isinstance(value, (list, tuple)) and len(value) == 2,
    }[kind]
    if not ok:
        raise ConfigError(f"{path}: expected {kind}, got {value!r}")


def _validate_keys(node: dict, schema: dict, prefix: str = ""):
    if not isinstance(node, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    for key, value in node.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in schema:
            raise ConfigError(f"{path}: unknown key")
        sub = schema[key]
        if isinstance(sub, dict):
            _validate_keys(value, sub, path)
        else:
            _check_type(sub, value, path)


@dataclass
class RunConfig:
    subcommand: str
    cascade: CascadeConfig
    seed: int = 0
    samples: int = 1000
    eta: float | None = None
    delta: float | None = None
    nodal: bool = False
    normalized: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        blob = json.dumps({"config": self.normalized, "version": __version__}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def parse_config(text: str, subcommand: str = "cascade", workers: int | None = None) -> RunConfig:
    """Parse and validate a config document; raises before any heavy computation."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    try:
        raw = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML/JSON: {exc}") from None
    raw = raw or {}
    _validate_keys(raw, _SCHEMA)
    mesh = raw.get("mesh") or {}
    bump_node = raw.get("bump") or {}
    tol = raw.get("tolerances") or {}
    regime = raw.get("regime", "origin")
    if regime not in ("origin", "infinity"):
        raise ConfigError(f"regime: expected 'origin' or 'infinity', got {regime!r}")
    p = raw.get("p", 1.0)
    if not p > 0:
        raise HypothesisError("p > 0 required")
    lam = raw.get("lambda", 0.0)
    if not lam >= 0:
        raise HypothesisError("lambda >= 0 required")
    F_spec = raw.get("F", "F0" if regime == "origin" else "Finf")
    G_spec = raw.get("G")
    F = model_from_spec(F_spec)
    G = model_from_spec(G_spec) if G_spec is not None else None
    dim = mesh.get("dim", 1)
    default_extent = [0.0, 1.0] if regime == "origin" else [0.0, 32.0]
    extent = mesh.get("extent", default_extent if dim == 1 else [default_extent] * dim)
    resolution = mesh.get("resolution", 2048 if dim == 1 else 128)
    n_workers = workers if workers is not None else raw.get("workers", 1)
    if n_workers < 1:
        raise ConfigError("workers: must be >= 1")
    cfg = CascadeConfig(
        F=F_spec, G=G_spec, p=float(p), lam=float(lam), regime=regime,
        target_count=raw.get("target_count", 4), dim=dim, extent=extent, resolution=resolution,
        bump_center=bump_node.get("center"), bump_radius=bump_node.get("radius"),
        shift=raw.get("shift", "auto"), window=raw.get("window"), margin_req=raw.get("margin"),
        lambda_fraction=raw.get("lambda_fraction"), max_skips=raw.get("max_skips", 12),
        stop_tol=tol.get("stop_tol", 1e-7), max_iters=tol.get("max_iters", 20000),
        distinct_linf=tol.get("distinct_linf", 1e-8), distinct_energy=tol.get("distinct_energy", 1e-10),
        workers=n_workers,
    )
    # geometry and theorem hypotheses, checked up front
    m = build_mesh(cfg.dim, cfg.extent, cfg.resolution)
    bump_geometry(m, cfg.bump_center, cfg.bump_radius)
    if cfg.window is not None and not 0 < cfg.window[0] < cfg.window[1]:
        raise ConfigError("window: expected 0 < a < b")
    if subcommand != "calculus-check":
        build_effective_model(F, G, cfg.p, cfg.lam, cfg.regime, cfg.shift,
                              estimate_limits(F, G, cfg.p, Regime(cfg.regime)))
    if subcommand == "lambda-threshold" and not cfg.needs_threshold():
        raise HypothesisError("lambda thresholds apply to origin with p < 1 and infinity with p > 1")
    if subcommand == "lambda-threshold" and G is None:
        raise HypothesisError("lambda thresholds need a perturbation G")
    eta, delta = raw.get("eta"), raw.get("delta")
    if eta is not None and not eta > 0:
        raise ConfigError("eta: must be positive")
    if delta is not None and not (delta > 0 and (eta is None or delta < eta)):
        raise ConfigError("delta: must satisfy 0 < delta < eta")
    samples = raw.get("samples", 1000)
    if samples < 2:
        raise ConfigError("samples: must be >= 2")
    # workers is left out: it never changes the results
    normalized = {
        "subcommand": subcommand, "F": F_spec, "G": G_spec, "p": cfg.p, "lambda": cfg.lam,
        "lambda_fraction": cfg.lambda_fraction, "regime": cfg.regime, "target_count": cfg.target_count,
        "mesh": {"dim": cfg.dim, "extent": cfg.extent, "resolution": cfg.resolution},
        "bump": {"center": cfg.bump_center, "radius": cfg.bump_radius}, "shift": cfg.shift,
        "window": cfg.window, "margin": cfg.margin_req, "max_skips": cfg.max_skips,
        "tolerances": {"stop_tol": cfg.stop_tol, "max_iters": cfg.max_iters,
                       "distinct_linf": cfg.distinct_linf, "distinct_energy": cfg.distinct_energy},
        "seed": raw.get("seed", 0), "samples": samples, "eta": eta,
        "delta": delta, "nodal": bool(raw.get("nodal", False)),
    }
    return RunConfig(subcommand, cfg, raw.get("seed", 0), samples, eta, delta,
                     bool(raw.get("nodal", False)), normalized)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    return x


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _write_manifest(path: Path, payload: dict):
    with open(path, "w") as fh:
        fh.write(json.dumps(_jsonable(payload), sort_keys=True, indent=2))
        fh.write("\n")


def family_rows(family: SolutionFamily) -> list:
    rows = []
    for lv in family.levels:
        r = lv.record
        rows.append([lv.index, family.case.case_id.value, family.lam, family.config.p, r.eta, r.delta,
                     r.energy, r.linf, r.h01, r.l2, r.residual, r.iterations])
    return rows


def emit_family(family: SolutionFamily, out_dir, run: RunConfig | None = None, nodal: bool = False) -> dict:
    """Write ``family.csv``, ``manifest.json`` and optional nodal dumps; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"family": out / "family.csv", "manifest": out / "manifest.json"}
    _write_csv(paths["family"], FAMILY_COLUMNS, family_rows(family))
    if nodal:
        for lv in family.levels:
            p = out / f"record_{lv.index}.csv"
            write_nodal_csv(p, family.mesh, lv.record.u)
            paths[f"record_{lv.index}"] = p
    ver = family.verification or verify_theorem_predictions(family)
    th = family.thresholds
    manifest = {
        "version": __version__,
        "config": run.normalized if run else None,
        "input_sha256": run.digest if run else None,
        "case_id": family.case.case_id.value,
        "k": family.case.k,
        "shift": family.case.shift,
        "lambda": family.lam,
        "records": len(family.levels),
        "levels": [{"index": lv.index, "delta": lv.interval.delta, "eta": lv.interval.eta,
                    "s_tilde": lv.s_tilde, "bump_energy": lv.bump_energy, "start": lv.record.start}
                   for lv in family.levels],
        "flags": list(family.flags),
        "thresholds": None if th is None else th.__dict__,
        "verification": ver.as_dict(),
        "verdict": "pass" if ver.verdict else "fail",
    }
    _write_manifest(paths["manifest"], manifest)
    return paths


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_cascade(run: RunConfig, out: Path) -> int:
    fam = run_cascade(run.cascade)
    emit_family(fam, out, run, nodal=run.nodal)
    return EXIT_OK if fam.verification.verdict else EXIT_VERIFY


def _cmd_solve(run: RunConfig, out: Path) -> int:
    cfg = run.cascade
    regime = Regime(cfg.regime)
    F = model_from_spec(cfg.F)
    G = model_from_spec(cfg.G) if cfg.G is not None else None
    case = build_effective_model(F, G, cfg.p, cfg.lam, regime, cfg.shift)
    mesh = build_mesh(cfg.dim, cfg.extent, cfg.resolution)
    geom = bump_geometry(mesh, cfg.bump_center, cfg.bump_radius)
    eta, delta = run.eta, run.delta
    iv = None
    if eta is None:
        found = find_stability_intervals(case.A, cfg.default_window(), 1, margin_req=cfg.margin_req,
                                         regime=regime)
        if not len(found):
            raise HypothesisError("no stability interval in the search window")
        iv = found[0]
        eta, delta = iv.eta, iv.delta
    ctx = EnergyContext(mesh, truncate(case.A, eta), case.k)
    opts = MinimizeOptions(max_iters=cfg.max_iters, stop_tol=cfg.stop_tol)
    rec = minimize_over_ball(ctx, eta, opts, delta=delta, geometry=geom, case_id=case.case_id.value,
                             workers=cfg.workers)
    fam = SolutionFamily(cfg, case, mesh, geom, [], cfg.lam)
    if iv is None:
        lo = delta if delta is not None else 0.5 * eta
        iv = StabilityInterval(lo, eta, 0.5 * (lo + eta), 0.0)
    top = min(iv.delta, eta)
    fam.levels.append(LevelResult(1, iv, top, energy(ctx, bump(mesh, geom, top)), rec))
    ver = VerificationReport()
    ver.residual_pass.append(bool(rec.residual <= cfg.stop_tol))
    if delta is not None:
        tol = 1e-8 * delta
        ver.localization_pass.append(bool(np.all(rec.u >= -tol) and np.all(rec.u <= delta + tol)))
    ver.energy_negative.append(bool(rec.energy <= 0))
    ver.nonzero.append(bool(rec.linf >= 0))
    fam.verification = ver
    emit_family(fam, out, run, nodal=run.nodal)
    return EXIT_OK if ver.verdict else EXIT_VERIFY


def _cmd_intervals(run: RunConfig, out: Path) -> int:
    cfg = run.cascade
    regime = Regime(cfg.regime)
    F = model_from_spec(cfg.F)
    G = model_from_spec(cfg.G) if cfg.G is not None else None
    case = build_effective_model(F, G, cfg.p, cfg.lam, regime, cfg.shift)
    found = find_stability_intervals(case.A, cfg.default_window(), cfg.target_count,
                                     margin_req=cfg.margin_req, regime=regime)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[i + 1, iv.delta, iv.eta, iv.witness, iv.margin] for i, iv in enumerate(found)]
    _write_csv(out / "intervals.csv", ("index", "delta", "eta", "witness", "margin"), rows)
    _write_manifest(out / "manifest.json", {
        "version": __version__, "config": run.normalized, "input_sha256": run.digest,
        "case_id": case.case_id.value, "k": case.k, "requested": cfg.target_count,
        "found": len(found), "verdict": "fail" if found.shortfall else "pass",
    })
    return EXIT_VERIFY if found.shortfall else EXIT_OK


def _cmd_lambda_threshold(run: RunConfig, out: Path) -> int:
    cfg = replace(run.cascade, lam=0.0, lambda_fraction=None)
    fam = run_cascade(cfg)
    out.mkdir(parents=True, exist_ok=True)
    th = fam.thresholds
    rows = []
    if th is not None:
        for i in range(len(th.lambda_prime)):
            rows.append([i + 1, th.theta[i], th.theta[i + 1], th.s_tilde[i], th.lambda_prime[i],
                         th.lambda_dprime[i], th.lambda_caps[i]])
    _write_csv(out / "thresholds.csv",
               ("index", "theta_i", "theta_next", "s_tilde", "lambda_prime", "lambda_dprime", "lambda_cap"),
               rows)
    ok = th is not None and th.lambda_k > 0
    _write_manifest(out / "manifest.json", {
        "version": __version__, "config": run.normalized, "input_sha256": run.digest,
        "lambda_k": None if th is None else th.lambda_k, "G_sup": None if th is None else th.G_sup,
        "L0": None if th is None else th.L0, "flags": fam.flags, "verdict": "pass" if ok else "fail",
    })
    return EXIT_OK if ok else EXIT_VERIFY


_CHECK_RANGES = {"F0": (0.0, 0.5), "G0": (0.0, 0.5), "Finf": (0.0, 60.0), "Ginf": (0.0, 60.0)}


def _cmd_calculus_check(run: RunConfig, out: Path) -> int:
    rng = np.random.default_rng(run.seed)
    p = run.cascade.p
    rows = []
    for name, (a, b) in _CHECK_RANGES.items():
        model = builtin(name, p) if name.startswith("G") else builtin(name)
        passed = 0
        for _ in range(run.samples):
            x, y = np.sort(rng.uniform(a, b, 2))
            if not x < y:
                passed += 1
                continue
            passed += lebourg_check(model, float(x), float(y), samples=200)
        rows.append([name, run.samples, passed])
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "calculus.csv", ("model", "checks", "passed"), rows)
    ok = all(r[1] == r[2] for r in rows)
    _write_manifest(out / "manifest.json", {
        "version": __version__, "config": run.normalized, "input_sha256": run.digest,
        "verdict": "pass" if ok else "fail",
    })
    return EXIT_OK if ok else EXIT_VERIFY


_DISPATCH = {"solve": _cmd_solve, "cascade": _cmd_cascade, "intervals": _cmd_intervals,
             "lambda-threshold": _cmd_lambda_threshold, "calculus-check": _cmd_calculus_check}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffincl", description=__doc__.split("\n")[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", type=Path, help="YAML or JSON config file (defaults when omitted)")
    ap.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    ap.add_argument("--workers", type=int, default=None, help="parallel restarts (default 1)")
    ap.add_argument("--verbose", "-v", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = args.config.read_text() if args.config else ""
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        run = parse_config(text, args.subcommand, args.workers)
        code = _DISPATCH[args.subcommand](run, args.out)
    except (ConfigError, HypothesisError, ModelError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except (NumericalFailure, AnalysisError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.verbose:
        print(f"{args.subcommand}: exit {code}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
