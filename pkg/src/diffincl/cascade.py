"""Theorem pipelines: effective models, interval cascades, thresholds, verification.

A cascade walks stability intervals [delta_i, eta_i] toward the limit point
(0 or infinity), minimizes the energy truncated at eta_i over the sup-norm
ball of radius eta_i, and keeps the minimizer when it is a new, certified
solution.  Levels are chosen adaptively: the next interval must lie below
(origin) or above (infinity) the previous record's sup norm, so that each
accepted record is distinct from the ones before it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Sequence

import numpy as np

from .discretization import Mesh, BumpGeometry, build_mesh, bump, bump_geometry
from .energy_minimizer import (
    EnergyContext, MinimizeOptions, SolutionRecord, energy, inclusion_residual, minimize_over_ball,
)
from .function_model import FunctionModel, add_quadratic, model_from_spec, scale, sum_models, truncate
from .oscillation_analysis import (
    AnalysisError, LimitEstimates, Regime, StabilityInterval, ThresholdReport,
    compute_L0, compute_lambda_thresholds, estimate_limits, find_stability_intervals,
    find_test_amplitudes, gradient_sup, lambda_interval_cap, make_theta, quadratic_lower_bound,
    value_sup,
)

log = logging.getLogger(__name__)

__all__ = [
    "CaseId",
    "HypothesisError",
    "EffectiveModelCase",
    "CascadeConfig",
    "LevelResult",
    "VerificationReport",
    "SolutionFamily",
    "build_effective_model",
    "run_cascade",
    "verify_theorem_predictions",
    "common_level_energies",
]


class HypothesisError(ValueError):
    """A theorem hypothesis does not hold for the requested parameters."""


class CaseId(str, Enum):
    ORIGIN_P_EQ_1 = "origin_p_eq_1"
    ORIGIN_P_GT_1 = "origin_p_gt_1"
    ORIGIN_P_LT_1 = "origin_p_lt_1"
    INFINITY_P_EQ_1 = "infinity_p_eq_1"
    INFINITY_P_LT_1 = "infinity_p_lt_1"
    INFINITY_P_GT_1 = "infinity_p_gt_1"


@dataclass(frozen=True, eq=False)
class EffectiveModelCase:
    case_id: CaseId
    k: float
    A: FunctionModel
    shift: float
    limits: LimitEstimates | None = None

    def __post_init__(self):
        if not self.k > 0:
            raise HypothesisError(f"effective model needs k > 0, got {self.k}")


def _case_id(regime: Regime, p: float) -> CaseId:
    tag = "eq_1" if p == 1 else ("gt_1" if p > 1 else "lt_1")
    return CaseId(f"{regime.value}_p_{tag}")


def build_effective_model(F: FunctionModel, G: FunctionModel | None, p: float, lam: float,
                          regime: Regime | str, shift: float | str = "auto",
                          limits: LimitEstimates | None = None) -> EffectiveModelCase:
    """(case, k, A) with A = F + lam G + k s^2/2.

    For p = 1 the shift is the tilde-lambda of the theorem and
    k = shift - lam c_hi; otherwise k = shift.
    """
    regime = Regime(regime)
    if not p > 0:
        raise HypothesisError("p > 0 required")
    if not lam >= 0:
        raise HypothesisError("lambda >= 0 required")
    if limits is None:
        limits = estimate_limits(F, G, p, regime)
    case = _case_id(regime, p)
    l = limits.l
    neg_l = -l
    if not neg_l > 0:
        raise HypothesisError(f"requires l < 0 (estimated l = {l:.6g})")
    c_hi = limits.c_hi if G is not None else 0.0
    if p == 1:
        lc = lam * c_hi
        if regime is Regime.ORIGIN and not lc < neg_l:
            raise HypothesisError(f"requires λ c̄ < −l₀ (λ c̄ = {lc:.6g}, −l₀ = {neg_l:.6g})")
        if regime is Regime.INFINITY and not lc <= neg_l:
            raise HypothesisError(f"requires λ c̄ ≤ −l_∞ (λ c̄ = {lc:.6g}, −l_∞ = {neg_l:.6g})")
        if lc == neg_l:
            # admitted by the infinity statement, but the construction needs a
            # shift strictly between the two
            raise HypothesisError(f"λ c̄ = −l = {lc:.6g}: no shift λ̃ with λ c̄ < λ̃ < −l exists")
        if shift == "auto":
            shift = lc + 1.0 if math.isinf(neg_l) else 0.5 * (lc + neg_l)
        shift = float(shift)
        if not lc < shift < neg_l:
            raise HypothesisError(f"shift must lie in (λ c̄, −l) = ({lc:.6g}, {neg_l:.6g})")
        k = shift - lc
    else:
        if shift == "auto":
            shift = 1.0 if math.isinf(neg_l) else 0.5 * neg_l
        shift = float(shift)
        if not 0 < shift < neg_l:
            raise HypothesisError(f"shift must lie in (0, −l) = (0, {neg_l:.6g})")
        k = shift
    A = F
    if G is not None and lam != 0:
        A = sum_models(A, scale(G, lam))
    A = add_quadratic(A, k)
    return EffectiveModelCase(case, float(k), A, shift, limits)


# ---------------------------------------------------------------------------
# configuration and results
# ---------------------------------------------------------------------------


@dataclass
class CascadeConfig:
    F: Any = "F0"
    G: Any = None
    p: float = 1.0
    lam: float = 0.0
    regime: str = "origin"
    target_count: int = 4
    dim: int = 1
    extent: Any = (0.0, 1.0)
    resolution: int = 2048
    bump_center: Any = None
    bump_radius: float | None = None
    shift: Any = "auto"
    window: Any = None
    margin_req: float | None = None
    lambda_fraction: float | None = None
    max_skips: int = 12
    stop_tol: float = 1e-7
    max_iters: int = 20000
    distinct_linf: float = 1e-8
    distinct_energy: float = 1e-10
    workers: int = 1

    def __post_init__(self):
        self.regime = Regime(self.regime).value
        if not self.p > 0:
            raise HypothesisError("p > 0 required")
        if not self.lam >= 0:
            raise HypothesisError("lambda >= 0 required")
        if self.target_count < 0:
            raise HypothesisError("target_count must be non-negative")
        if self.lambda_fraction is not None and not 0 < self.lambda_fraction <= 1:
            raise HypothesisError("lambda_fraction must lie in (0, 1]")

    def default_window(self) -> tuple:
        if self.window is not None:
            return tuple(float(x) for x in self.window)
        return (1e-5, 1.0) if self.regime == "origin" else (1e-2, 1e3)

    def needs_threshold(self) -> bool:
        return (self.regime == "origin" and self.p < 1) or (self.regime == "infinity" and self.p > 1)


@dataclass
class LevelResult:
    index: int
    interval: StabilityInterval
    s_tilde: float
    bump_energy: float
    record: SolutionRecord
    attempts: int = 1


@dataclass
class VerificationReport:
    residual_pass: list = field(default_factory=list)
    localization_pass: list = field(default_factory=list)
    energy_negative: list = field(default_factory=list)
    nonzero: list = field(default_factory=list)
    distinct: bool = True
    linf_monotone: bool = True
    h01_monotone: bool = True
    bounds_pass: bool = True
    energy_ordered: bool = True
    zero_certified: bool = True
    energy_window_pass: bool = True
    complete: bool = True
    common_energies: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def verdict(self) -> bool:
        return (all(self.residual_pass) and all(self.localization_pass) and all(self.energy_negative)
                and all(self.nonzero) and self.distinct and self.linf_monotone and self.h01_monotone
                and self.bounds_pass and self.energy_ordered and self.zero_certified
                and self.energy_window_pass and self.complete)

    def as_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items()}
        out["verdict"] = self.verdict
        return out


@dataclass
class SolutionFamily:
    config: CascadeConfig
    case: EffectiveModelCase
    mesh: Mesh
    geometry: BumpGeometry
    levels: list
    lam: float
    thresholds: ThresholdReport | None = None
    verification: VerificationReport | None = None
    flags: list = field(default_factory=list)
    baseline: "SolutionFamily | None" = None

    @property
    def records(self) -> list:
        return [lv.record for lv in self.levels]

    @property
    def shortfall(self) -> bool:
        return len(self.levels) < self.config.target_count


# ---------------------------------------------------------------------------
# cascade
# ---------------------------------------------------------------------------


def _minimize_level(ctx: EnergyContext, iv: StabilityInterval, geom: BumpGeometry, s_tilde: float,
                    cfg: CascadeConfig, extra_starts=(), case_id: str = "") -> SolutionRecord:
    mesh = ctx.mesh
    starts = [np.zeros(mesh.size), bump(mesh, geom, s_tilde), bump(mesh, geom, iv.delta),
              bump(mesh, geom, 0.5 * iv.delta)]
    labels = ["zero", "bump(s~)", "bump(delta)", "bump(delta/2)"]
    for name, u0 in extra_starts:
        starts.append(np.clip(u0, -iv.eta, iv.eta))
        labels.append(name)
    opts = MinimizeOptions(max_iters=cfg.max_iters, stop_tol=cfg.stop_tol, restarts=starts)
    return minimize_over_ball(ctx, iv.eta, opts, delta=iv.delta, geometry=geom, case_id=case_id,
                              labels=labels, workers=cfg.workers)


def _delta_cap(cfg: CascadeConfig, F: FunctionModel, G: FunctionModel | None, measure: float):
    """Cap on delta_i used by the p < 1 origin path."""
    if not (cfg.regime == "origin" and cfg.p < 1):
        return None
    dF = gradient_sup(F, 0.0, 1.0)
    dG = gradient_sup(G, 0.0, 1.0) if G is not None else 0.0

    def cap(i):
        return min(1.0 / i, 0.5 / i ** 2 / (1.0 + measure * (dF + dG)))
    return cap


def _next_interval(A: FunctionModel, regime: Regime, window, bound: float, cap, index: int,
                   margin_req, skip: int):
    """The (skip+1)-th certified interval strictly beyond ``bound``."""
    a, b = window
    if regime is Regime.ORIGIN:
        win = (a, min(b, bound))
    else:
        win = (max(a, bound), b)
    if not win[0] < win[1]:
        return None
    found = find_stability_intervals(A, win, skip + 1, margin_req=margin_req, regime=regime,
                                     delta_cap=(lambda j: cap(index)) if cap else None)
    if len(found) <= skip:
        return None
    iv = found[skip]
    # strictly beyond the bound
    if regime is Regime.ORIGIN and not iv.eta < bound:
        return None
    if regime is Regime.INFINITY and not iv.delta > bound:
        return None
    return iv


def _interleave_bound(A: FunctionModel, k: float, measure: float, level: float, top: float,
                      bottom: float, per_decade: int = 2000) -> float:
    """Largest s <= top with measure * max_{[0, s]} (A - k t^2/2)_+ < |level|.

    Any minimizer with sup norm below this s has energy above ``level``.
    """
    if not top > bottom > 0:
        return top
    n = max(int(per_decade * math.log10(top / bottom)), 2)
    s = np.geomspace(bottom, top, n)
    f = np.maximum(np.asarray(A.value(s), dtype=float) - 0.5 * k * s * s, 0.0)
    run = np.maximum.accumulate(f)
    ok = measure * run < abs(level)
    if ok.all():
        return top
    bad = int(np.argmin(ok))
    return float(s[bad - 1]) if bad > 0 else bottom


def _test_amplitude(A, iv, L0, regime, lower, mesh, geom, ctx) -> float:
    try:
        return find_test_amplitudes(A, [iv], L0, regime, lower=[lower])[0]
    except AnalysisError:
        # fall back to the bump amplitude of lowest energy inside the window
        s = np.linspace(max(lower, iv.delta * 1e-3), iv.delta, 64)
        e = [energy(ctx, bump(mesh, geom, x)) for x in s]
        return float(s[int(np.argmin(e))])


def run_cascade(config: CascadeConfig) -> SolutionFamily:
    """Run the pipeline for ``config``; see the module docstring."""
    cfg = config
    regime = Regime(cfg.regime)
    F = model_from_spec(cfg.F)
    G = model_from_spec(cfg.G) if cfg.G is not None else None
    mesh = build_mesh(cfg.dim, cfg.extent, cfg.resolution)
    geom = bump_geometry(mesh, cfg.bump_center, cfg.bump_radius)
    limits = estimate_limits(F, G, cfg.p, regime)
    if cfg.needs_threshold() and G is not None:
        base_cfg = replace(cfg, lam=0.0, lambda_fraction=None)
        base = _cascade_at(base_cfg, F, G, mesh, geom, limits, lam=0.0)
        fam = _threshold_rerun(cfg, base, F, G, limits)
    else:
        fam = _cascade_at(cfg, F, G, mesh, geom, limits, lam=cfg.lam)
    fam.verification = verify_theorem_predictions(fam, cfg)
    return fam


def _cascade_at(cfg: CascadeConfig, F, G, mesh: Mesh, geom: BumpGeometry, limits, lam: float,
                intervals: Sequence[StabilityInterval] | None = None,
                s_tildes: Sequence[float] | None = None, warm: Sequence[np.ndarray] | None = None) -> SolutionFamily:
    regime = Regime(cfg.regime)
    case = build_effective_model(F, G, cfg.p, lam, regime, cfg.shift, limits)
    fam = SolutionFamily(cfg, case, mesh, geom, [], lam)
    if cfg.target_count == 0:
        return fam
    window = cfg.default_window()
    cap = _delta_cap(cfg, F, G, mesh.measure)
    A = case.A
    fixed = intervals is not None
    bound = window[1] if regime is Regime.ORIGIN else window[0]
    L0 = None
    prev_bump_energy = None
    index = 0
    while index < cfg.target_count:
        index += 1
        accepted = None
        attempts = 0
        for skip in range(1 if fixed else cfg.max_skips + 1):
            attempts += 1
            if fixed:
                if index > len(intervals):
                    break
                iv = intervals[index - 1]
            else:
                iv = _next_interval(A, regime, window, bound, cap, index, cfg.margin_req, skip)
                if iv is None:
                    break
            ctx = EnergyContext(mesh, truncate(A, iv.eta), case.k)
            if L0 is None:
                zeta = iv.eta
                l_bound = quadratic_lower_bound(A, 0.0, zeta)
                L0 = compute_L0(l_bound, case.k, mesh.measure, geom.r, mesh.dim, geom.Crn)
                fam.flags.append(f"L0={L0:.17g} zeta={zeta:.17g}")
            if s_tildes is not None:
                st = s_tildes[index - 1]
            else:
                lower = 0.0 if regime is Regime.ORIGIN else (
                    fam.levels[-1].interval.eta if fam.levels else 0.0)
                st = _test_amplitude(A, iv, L0, regime, lower, mesh, geom, ctx)
            Tw = energy(ctx, bump(mesh, geom, st))
            extra = [("warm", warm[index - 1])] if warm is not None else []
            rec = _minimize_level(ctx, iv, geom, st, cfg, extra, case.case_id.value)
            ok, why = _acceptable(fam, rec, iv, Tw, prev_bump_energy, cfg, regime)
            if ok or fixed:
                if not ok:
                    fam.flags.append(f"level {index}: {why}")
                accepted = LevelResult(index, iv, st, Tw, rec, attempts)
                break
            log.info("level %d: interval [%.6g, %.6g] rejected (%s)", index, iv.delta, iv.eta, why)
            # the next candidate must also clear this record
            if regime is Regime.ORIGIN:
                bound = min(bound, iv.delta)
            else:
                bound = max(bound, iv.eta)
        if accepted is None:
            fam.flags.append(f"level {index}: no acceptable interval (shortfall)")
            break
        fam.levels.append(accepted)
        prev_bump_energy = accepted.bump_energy
        rec = accepted.record
        log.info("level %d: linf=%.6g energy=%.6g residual=%.2e", index, rec.linf, rec.energy, rec.residual)
        if regime is Regime.ORIGIN:
            bound = min(accepted.interval.delta, rec.linf)
            if cfg.needs_threshold() and not fixed:
                bound = _interleave_bound(A, case.k, mesh.measure, accepted.bump_energy, bound, window[0])
        else:
            bound = max(accepted.interval.eta, rec.linf)
    return fam


def _acceptable(fam: SolutionFamily, rec: SolutionRecord, iv: StabilityInterval, Tw: float,
                prev_bump_energy, cfg: CascadeConfig, regime: Regime):
    if not rec.residual <= cfg.stop_tol:
        return False, f"residual {rec.residual:.3e}"
    if not rec.energy < 0 or not rec.linf > 0:
        return False, "trivial or non-negative energy"
    if not rec.energy <= Tw:
        return False, "minimizer above bump energy"
    if not fam.levels:
        return True, ""
    prev = fam.levels[-1].record
    if regime is Regime.ORIGIN:
        if not rec.linf < prev.linf or not rec.energy > prev.energy:
            return False, "not below previous record"
        if cfg.needs_threshold() and not rec.energy > prev_bump_energy:
            return False, "energy interleaving"
    else:
        if not rec.linf > prev.linf or not rec.energy < prev.energy:
            return False, "not above previous record"
        if cfg.needs_threshold() and not Tw < prev.energy:
            return False, "energy interleaving"
    for lv in fam.levels:
        if not _distinct(lv.record, rec, cfg):
            return False, f"duplicate of level {lv.index}"
    return True, ""


def _distinct(a: SolutionRecord, b: SolutionRecord, cfg: CascadeConfig) -> bool:
    scale = max(abs(a.energy), abs(b.energy), 1e-300)
    return (float(np.max(np.abs(a.u - b.u))) > cfg.distinct_linf
            and abs(a.energy - b.energy) > cfg.distinct_energy * scale)


def _threshold_rerun(cfg: CascadeConfig, base: SolutionFamily, F, G, limits) -> SolutionFamily:
    regime = Regime(cfg.regime)
    k = len(base.levels)
    if k < cfg.target_count:
        base.flags.append("threshold skipped: baseline shortfall")
        return base
    Tu = [lv.record.energy for lv in base.levels]
    Tw = [lv.bump_energy for lv in base.levels]
    theta = make_theta(Tu, Tw, regime)
    if regime is Regime.ORIGIN:
        G_sup = value_sup(G, 0.0, 1.0)
    else:
        G_sup = value_sup(G, 0.0, base.levels[-1].interval.eta)
    A0 = base.case.A
    caps = [lambda_interval_cap(A0, G, lv.interval) for lv in base.levels]
    L0 = next((float(f.split()[0].split("=")[1]) for f in base.flags if f.startswith("L0=")), float("nan"))
    rep = compute_lambda_thresholds(Tw, Tu, theta, G_sup, base.mesh.measure, k, regime, caps,
                                    L0=L0, zeta=base.levels[0].interval.eta,
                                    s_tilde=[lv.s_tilde for lv in base.levels])
    if cfg.lambda_fraction is not None:
        lam = cfg.lambda_fraction * rep.lambda_k
    else:
        lam = cfg.lam
        if lam > rep.lambda_k:
            raise HypothesisError(f"λ = {lam:.6g} exceeds the computed threshold λ_{k} = {rep.lambda_k:.6g}")
    if lam == 0:
        base.thresholds = rep
        return base
    fam = _cascade_at(cfg, F, G, base.mesh, base.geometry, limits, lam,
                      intervals=[lv.interval for lv in base.levels],
                      s_tildes=[lv.s_tilde for lv in base.levels],
                      warm=[lv.record.u for lv in base.levels])
    fam.thresholds = rep
    fam.baseline = base
    return fam


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def common_level_energies(family: SolutionFamily) -> list:
    """Energies of all records under the truncation of the widest level."""
    if not family.levels:
        return []
    if Regime(family.config.regime) is Regime.ORIGIN:
        eta = family.levels[0].interval.eta
    else:
        eta = family.levels[-1].interval.eta
    ctx = EnergyContext(family.mesh, truncate(family.case.A, eta), family.case.k)
    return [energy(ctx, r.u) for r in family.records]


def verify_theorem_predictions(family: SolutionFamily, config: CascadeConfig | None = None) -> VerificationReport:
    cfg = config or family.config
    regime = Regime(cfg.regime)
    rep = VerificationReport()
    recs = family.records
    for lv in family.levels:
        r = lv.record
        rep.residual_pass.append(bool(r.residual <= cfg.stop_tol))
        tol = 1e-8 * lv.interval.delta
        rep.localization_pass.append(bool(np.all(r.u >= -tol) and np.all(r.u <= lv.interval.delta + tol)))
        rep.energy_negative.append(bool(r.energy < 0))
        rep.nonzero.append(bool(r.linf > 0))
    for i in range(len(recs)):
        for j in range(i):
            if not _distinct(recs[i], recs[j], cfg):
                rep.distinct = False
                rep.notes.append(f"records {j + 1} and {i + 1} are not distinct")
    linf = [r.linf for r in recs]
    h01 = [r.h01 for r in recs]
    E = common_level_energies(family)
    rep.common_energies = E
    pairs = list(zip(range(len(recs) - 1), range(1, len(recs))))
    if regime is Regime.ORIGIN:
        rep.linf_monotone = all(linf[j] < linf[i] for i, j in pairs)
        rep.h01_monotone = all(h01[j] < h01[i] for i, j in pairs)
        rep.energy_ordered = all(E[i] < E[j] for i, j in pairs) and all(e < 0 for e in E)
        if cfg.p < 1:
            rep.bounds_pass = all(h01[i] < 1.0 / (i + 1) and linf[i] < 1.0 / (i + 1) for i in range(len(recs)))
    else:
        rep.linf_monotone = all(linf[j] > linf[i] for i, j in pairs)
        rep.energy_ordered = all(E[j] < E[i] for i, j in pairs) and all(e < 0 for e in E)
        if cfg.p > 1:
            rep.bounds_pass = all(linf[i] > i for i in range(len(recs)))
        rep.notes.append("H1_0 growth reported, not asserted")
    if family.thresholds is not None and family.lam > 0:
        th = family.thresholds.theta
        for i, r in enumerate(recs):
            lo, hi = (th[i], th[i + 1]) if regime is Regime.ORIGIN else (th[i + 1], th[i])
            if not lo < r.energy < hi:
                rep.energy_window_pass = False
                rep.notes.append(f"record {i + 1} energy outside its theta window")
    if family.levels:
        ctx = EnergyContext(family.mesh, family.case.A, family.case.k)
        rep.zero_certified = inclusion_residual(ctx, np.zeros(family.mesh.size)) == 0.0
    if len(recs) < cfg.target_count:
        rep.complete = False
        rep.notes.append(f"shortfall: {len(recs)} of {cfg.target_count} records")
    return rep
