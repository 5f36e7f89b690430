"""Truncated nonsmooth energy on a grid, box-constrained descent and residuals.

The discrete energy is

    T(u) = 1/2 u.Ku + k/2 sum_i w_i u_i^2 - sum_i w_i A(u_i)

with ``K`` the stiffness matrix and ``w`` the nodal quadrature weights.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import Mesh, BumpGeometry, bump, bump_geometry, h01_norm_sq, l2_norm_sq, linf_norm
from .function_model import FunctionModel

log = logging.getLogger(__name__)

__all__ = [
    "Strategy",
    "EnergyContext",
    "MinimizeOptions",
    "SolutionRecord",
    "NumericalFailure",
    "energy",
    "energy_difference",
    "subgradient",
    "select_subgradient",
    "gamma_truncate",
    "inclusion_residual",
    "minimize_over_ball",
]


class NumericalFailure(RuntimeError):
    pass


class Strategy(str, Enum):
    SMOOTH_POINT = "smooth_point"
    INTERVAL_MIDPOINT = "interval_midpoint"
    ZERO_IF_CONTAINS_ZERO = "zero_if_contains_zero"


@dataclass(frozen=True, eq=False)
class EnergyContext:
    mesh: Mesh
    A: FunctionModel
    k: float

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("EnergyContext requires k > 0")

    def with_model(self, A: FunctionModel) -> "EnergyContext":
        return replace(self, A=A)


@dataclass
class MinimizeOptions:
    max_iters: int = 20000
    step_init: float | None = None
    armijo_c: float = 1e-4
    shrink: float = 0.5
    stop_tol: float = 1e-7
    step_tol: float = 1e-13
    max_backtracks: int = 60
    restarts: Sequence[np.ndarray] | None = None
    subgradient_strategy: Strategy = Strategy.SMOOTH_POINT
    precondition: bool = True
    newton: bool = True
    newton_below: float = 1e-3
    memory: int = 8

    def __post_init__(self):
        self.subgradient_strategy = Strategy(self.subgradient_strategy)
        for name in ("armijo_c", "stop_tol", "step_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")


@dataclass
class SolutionRecord:
    u: np.ndarray = field(repr=False)
    eta: float
    energy: float
    linf: float
    h01: float
    l2: float
    residual: float
    iterations: int
    case_id: str = ""
    delta: float | None = None
    converged: bool = False
    start: str = ""


# ---------------------------------------------------------------------------
# energy, subgradients, residual
# ---------------------------------------------------------------------------


def energy(ctx: EnergyContext, u) -> float:
    m = ctx.mesh
    u = m.check(u)
    w = m.weights
    val = 0.5 * u @ (m.stiffness @ u) + 0.5 * ctx.k * (w @ (u * u)) - w @ ctx.A.value(u)
    return float(val)


def energy_difference(ctx: EnergyContext, u, v) -> float:
    """T(v) - T(u), evaluated from the increment v - u to avoid cancellation."""
    m = ctx.mesh
    u, v = m.check(u), m.check(v)
    d = v - u
    mid = u + 0.5 * d
    w = m.weights
    val = d @ (m.stiffness @ mid) + ctx.k * (w @ (d * mid)) - w @ ctx.A.increment(u, v)
    return float(val)


def select_subgradient(lo: np.ndarray, hi: np.ndarray, strategy: Strategy | str = Strategy.SMOOTH_POINT) -> np.ndarray:
    strategy = Strategy(strategy)
    has0 = (lo <= 0) & (hi >= 0)
    nearest = np.where(hi < 0, hi, lo)  # endpoint closest to 0 when 0 is excluded
    if strategy is Strategy.SMOOTH_POINT:
        return np.where(lo == hi, lo, np.where(has0, 0.0, nearest))
    if strategy is Strategy.INTERVAL_MIDPOINT:
        return 0.5 * (lo + hi)
    return np.where(has0, 0.0, 0.5 * (lo + hi))


def subgradient(ctx: EnergyContext, u, strategy: Strategy | str = Strategy.SMOOTH_POINT) -> np.ndarray:
    """Element of the discrete Clarke gradient: Ku + k w u - w xi(u)."""
    m = ctx.mesh
    u = m.check(u)
    lo, hi = ctx.A.grad(u)
    xi = select_subgradient(lo, hi, strategy)
    return m.stiffness @ u + m.weights * (ctx.k * u - xi)


def gamma_truncate(u, delta: float) -> np.ndarray:
    """Nodal min(max(u, 0), delta)."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    return np.minimum(np.maximum(np.asarray(u, dtype=float), 0.0), delta)


def inclusion_residual(ctx: EnergyContext, u) -> float:
    """Relative weighted-L2 distance of (Ku + k w u)/w to the nodal intervals of ∂A(u)."""
    m = ctx.mesh
    u = m.check(u)
    w = m.weights
    r = (m.stiffness @ u) / w + ctx.k * u
    lo, hi = ctx.A.grad(u)
    dist = np.maximum(np.maximum(lo - r, r - hi), 0.0)
    num = np.sqrt(w @ (dist * dist))
    if num == 0.0:
        return 0.0
    mid = 0.5 * (lo + hi)
    scale = max(np.sqrt(w @ (r * r)), np.sqrt(w @ (mid * mid)))
    return float(num / scale)


# ---------------------------------------------------------------------------
# projected descent
# ---------------------------------------------------------------------------


class _Preconditioner:
    def __init__(self, ctx: EnergyContext):
        m = ctx.mesh
        self.P = sp.csc_matrix(m.stiffness + sp.diags(ctx.k * m.weights))
        self._lu = spla.splu(self.P)

    def solve(self, g):
        return self._lu.solve(g)


def _curvature(A: FunctionModel, u: np.ndarray) -> np.ndarray:
    """Central difference of the gradient midpoint; 0 at nonpositive nodes."""
    pos = u > 0
    eps = np.maximum(1e-7 * np.abs(u), 1e-14)
    lo_p, hi_p = A.grad(u + eps)
    lo_m, hi_m = A.grad(u - eps)
    c = ((lo_p + hi_p) - (lo_m + hi_m)) / (4 * np.maximum(eps, 1e-300))
    return np.where(pos & np.isfinite(c), c, 0.0)


def _newton_direction(ctx: EnergyContext, u: np.ndarray, g: np.ndarray, curv: np.ndarray,
                      convexify: bool = False):
    m = ctx.mesh
    diag = ctx.k - curv
    if convexify:
        diag = np.maximum(diag, ctx.k)
    H = sp.csc_matrix(m.stiffness + sp.diags(m.weights * diag))
    try:
        d = -spla.splu(H).solve(g)
    except RuntimeError:  # singular
        return None
    if not np.all(np.isfinite(d)) or g @ d >= 0:
        return None
    return d


def _two_loop(g: np.ndarray, pairs: list, h0) -> np.ndarray:
    """L-BFGS product H g with initial inverse Hessian ``h0``."""
    q = g.copy()
    alphas = []
    for s_, y_, rho in reversed(pairs):
        a = rho * (s_ @ q)
        q -= a * y_
        alphas.append(a)
    r = h0(q)
    for (s_, y_, rho), a in zip(pairs, reversed(alphas)):
        r += (a - rho * (y_ @ r)) * s_
    return r


def _descend(ctx: EnergyContext, u0: np.ndarray, eta: float, opts: MinimizeOptions,
             precond: _Preconditioner | None):
    """Projected quasi-Newton descent with Armijo backtracking.

    Far from a critical point the direction comes from limited-memory BFGS
    seeded with the inverse of ``K + k W``; once the residual drops below
    ``opts.newton_below`` a Newton step on the nodal curvature is tried
    first.  Energy decreases are evaluated with :func:`energy_difference`.

    Returns (u, energy, residual, iterations, converged, energy_trace).
    """
    m = ctx.mesh
    w = m.weights
    u = np.clip(u0, -eta, eta)
    E = energy(ctx, u)
    g = subgradient(ctx, u, opts.subgradient_strategy)
    t = opts.step_init if opts.step_init is not None else (
        1.0 if precond is not None else 1.0 / (m.stiffness_bound() / w[0] + ctx.k))
    h0 = precond.solve if precond is not None else (lambda q: q / w)
    pairs: list = []
    gamma = 1.0
    trace = [E]
    res = inclusion_residual(ctx, u)
    it = 0
    while it < opts.max_iters:
        if res <= opts.stop_tol:
            return u, E, res, it, True, trace
        if not np.isfinite(E):
            raise NumericalFailure("energy became non-finite during descent")
        candidates = []
        if opts.newton and res < opts.newton_below:
            curv = _curvature(ctx.A, u)
            dn = _newton_direction(ctx, u, g, curv)
            if dn is not None:
                candidates.append((dn, 1.0))
                un = np.clip(u + dn, -eta, eta)
                dE = energy_difference(ctx, u, un)
                # energy changes at rounding level: the full Newton step is
                # taken when it does not raise the energy measurably and
                # halves the residual
                if (opts.armijo_c * (g @ (un - u)) < dE <= 64 * np.finfo(float).eps * abs(E)
                        and inclusion_residual(ctx, un) < 0.5 * res):
                    candidates[-1] = (dn, 1.0, min(dE, 0.0))
        if opts.memory > 0:
            dq = -_two_loop(g, pairs, lambda q: gamma * h0(q))
            if g @ dq < 0:
                candidates.append((dq, 1.0))
        candidates += [(-h0(g), t), (-g / w, t)]
        accepted = False
        for cand in candidates:
            direction, tt = cand[:2]
            if len(cand) == 3:
                un = np.clip(u + direction, -eta, eta)
                du = un - u
                En, accepted = E + cand[2], True
                break
            for _ in range(opts.max_backtracks):
                un = np.clip(u + tt * direction, -eta, eta)
                du = un - u
                slope = g @ du
                if not np.any(du):
                    break
                if slope < 0:
                    dE = energy_difference(ctx, u, un)
                    if dE <= opts.armijo_c * slope:
                        En = E + dE
                        accepted = True
                        break
                tt *= opts.shrink
            if accepted:
                break
        if not accepted:
            log.debug("descent stalled at iteration %d (residual %.3e)", it, res)
            return u, E, res, it, False, trace
        gn = subgradient(ctx, un, opts.subgradient_strategy)
        y = gn - g
        sy = du @ y
        if sy > max(1e-12 * np.sqrt((du @ du) * (y @ y)), 1e-280):
            pairs.append((du, y, 1.0 / sy))
            del pairs[:-opts.memory or None]
            hy = h0(y)
            gamma = sy / (y @ hy)
            t = float(np.clip(sy / (y @ hy) if precond is not None else (du @ (w * du)) / sy, 1e-12, 1e12))
        else:
            pairs.clear()
            gamma = 1.0
            t = float(np.clip(2.0 * tt, 1e-12, 1e12))
        step = np.sqrt(du @ (w * du))
        u, E, g = un, En, gn
        trace.append(E)
        it += 1
        res = inclusion_residual(ctx, u)
        scale = max(np.sqrt(u @ (w * u)), 1e-300)
        if step <= opts.step_tol * scale and res > opts.stop_tol:
            log.debug("step below tolerance at iteration %d (residual %.3e)", it, res)
            return u, E, res, it, False, trace
    return u, E, res, it, res <= opts.stop_tol, trace


def minimize_over_ball(ctx: EnergyContext, eta: float, opts: MinimizeOptions | None = None,
                       delta: float | None = None, geometry: BumpGeometry | None = None,
                       case_id: str = "", labels: Sequence[str] | None = None,
                       workers: int = 1) -> SolutionRecord:
    """Multi-start projected descent of the energy over {|u_i| <= eta}.

    When ``delta`` is given, each converged point is replaced by its
    gamma-truncation and descended again.  The lowest-energy result is
    returned; its energy never exceeds that of any start.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    opts = opts or MinimizeOptions()
    mesh = ctx.mesh
    starts = list(opts.restarts) if opts.restarts is not None else None
    if starts is None:
        geom = geometry or bump_geometry(mesh)
        top = min(delta, eta) if delta else eta
        starts = [np.zeros(mesh.size), bump(mesh, geom, top), bump(mesh, geom, 0.5 * top)]
        labels = ["zero", "bump", "half-bump"]
    labels = list(labels) if labels is not None else [f"start{i}" for i in range(len(starts))]
    precond = _Preconditioner(ctx) if opts.precondition else None

    def run(label, u0):
        u0 = mesh.check(u0)
        u, E, res, its, ok, trace = _descend(ctx, u0, eta, opts, precond)
        # the descent accumulates increments; starts are compared on direct values
        E = energy(ctx, u)
        if delta is not None:
            v = gamma_truncate(u, delta)
            if np.any(v != u):
                Ev = energy(ctx, v)
                if Ev <= E:
                    u2, E2, res2, its2, ok2, _ = _descend(ctx, v, eta, opts, precond)
                    E2 = energy(ctx, u2)
                    if E2 <= E:
                        u, E, res, ok = u2, E2, res2, ok2
                        its += its2
        if not np.isfinite(E):
            raise NumericalFailure(f"non-finite energy from start {label!r}")
        return (E, res, its, ok, u, label)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, labels, starts))
    else:
        results = [run(label, u0) for label, u0 in zip(labels, starts)]
    # ties go to the earliest start so the result does not depend on workers
    best = None
    for cand in results:
        if best is None or cand[0] < best[0]:
            best = cand
    E, res, its, ok, u, label = best
    return SolutionRecord(
        u=u, eta=float(eta), energy=E, linf=linf_norm(mesh, u),
        h01=float(np.sqrt(max(h01_norm_sq(mesh, u), 0.0))),
        l2=float(np.sqrt(l2_norm_sq(mesh, u))), residual=res, iterations=its,
        case_id=case_id, delta=delta, converged=ok, start=label,
    )
