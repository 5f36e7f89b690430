"""Limit constants, stability intervals, test amplitudes and lambda thresholds.

Everything here is a pure function of immutable models.  Oscillation near
the origin is scanned on grids uniform in ``1/s``; oscillation at infinity on
grids uniform in ``s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .function_model import FunctionModel

__all__ = [
    "Regime",
    "GridSpec",
    "LimitEstimates",
    "StabilityInterval",
    "IntervalSearch",
    "ThresholdReport",
    "AnalysisError",
    "estimate_limits",
    "quadratic_lower_bound",
    "find_stability_intervals",
    "certify_interval",
    "lambda_interval_cap",
    "compute_L0",
    "find_test_amplitudes",
    "make_theta",
    "compute_lambda_thresholds",
    "gradient_sup",
    "value_sup",
]

DIVERGENCE_FLOOR = 1e6


class AnalysisError(ValueError):
    """Raised when a numerical search cannot produce what was asked for."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class Regime(str, Enum):
    ORIGIN = "origin"
    INFINITY = "infinity"


@dataclass(frozen=True)
class GridSpec:
    """Geometric sample grid; ``windows`` decades nearest the limit point are used."""

    s_min: float
    s_max: float
    per_decade: int = 400
    windows: int = 3

    def __post_init__(self):
        if not 0 < self.s_min < self.s_max:
            raise AnalysisError("grid needs 0 < s_min < s_max")
        if self.per_decade < 2 or self.windows < 1:
            raise AnalysisError("grid needs per_decade >= 2 and windows >= 1")

    @classmethod
    def default(cls, regime: Regime | str) -> "GridSpec":
        if Regime(regime) is Regime.ORIGIN:
            return cls(1e-7, 1e-1)
        return cls(1e-2, 1e4)

    def decades(self) -> int:
        return max(1, int(round(math.log10(self.s_max / self.s_min))))

    def points(self) -> np.ndarray:
        n = self.decades() * self.per_decade + 1
        return np.geomspace(self.s_min, self.s_max, n)


@dataclass(frozen=True)
class LimitEstimates:
    l: float
    c_lo: float
    c_hi: float
    ratio_liminf_F_over_s2: float
    ratio_limsup_F_over_s2: float
    divergent: dict = field(default_factory=dict)

    def is_divergent(self, name: str) -> bool:
        return bool(self.divergent.get(name, False))


def _window_extremes(values: np.ndarray, per_decade: int, windows: int, from_left: bool, kind: str):
    """Per-decade extremes of the ``windows`` decades nearest the limit point."""
    n = (len(values) - 1) // per_decade
    n = max(1, min(n, windows))
    chunks = []
    for w in range(n):
        if from_left:
            chunk = values[w * per_decade:(w + 1) * per_decade + 1]
        else:
            stop = len(values) - w * per_decade
            chunk = values[max(0, stop - per_decade - 1):stop]
        chunk = chunk[np.isfinite(chunk)]
        chunks.append(chunk.min() if kind == "min" else chunk.max())
    return np.array(chunks)  # nearest-to-limit first


def _running_extremum(values, grid: GridSpec, from_left: bool, kind: str):
    ext = _window_extremes(values, grid.per_decade, grid.windows, from_left, kind)
    # the estimate is the extreme of the window nearest the limit point; the
    # other windows only feed the divergence test
    best = float(ext[0])
    # divergent: beyond the floor, or magnitudes growing steadily toward the limit
    mags = np.abs(ext)
    growing = len(ext) >= 2 and bool(np.all(mags[:-1] > 1.5 * mags[1:]))
    same_sign = bool(np.all(np.sign(ext) == np.sign(best)))
    best = float(ext.min() if kind == "min" else ext.max()) if abs(best) > DIVERGENCE_FLOOR else best
    divergent = abs(best) > DIVERGENCE_FLOOR or (growing and same_sign and best != 0)
    if divergent:
        best = -math.inf if best < 0 else math.inf
    return best, divergent


def estimate_limits(F: FunctionModel, G: FunctionModel | None, p: float,
                    regime: Regime | str, grid: GridSpec | None = None) -> LimitEstimates:
    """Windowed liminf/limsup of max∂F/s, ∂G/s^p and F/s^2 toward 0 or infinity."""
    regime = Regime(regime)
    if not p > 0:
        raise AnalysisError("p > 0 required")
    grid = grid or GridSpec.default(regime)
    if regime is Regime.ORIGIN and grid.s_min > 1.0:
        raise AnalysisError("origin regime needs a grid reaching toward 0")
    if regime is Regime.INFINITY and grid.s_max < 1.0:
        raise AnalysisError("infinity regime needs a grid reaching toward infinity")
    s = grid.points()
    if s.size == 0:
        raise AnalysisError("empty grid")
    left = regime is Regime.ORIGIN
    _, f_hi = F.grad(s)
    Fv = F.value(s)
    l, l_div = _running_extremum(f_hi / s, grid, left, "min")
    rlo, rlo_div = _running_extremum(Fv / s ** 2, grid, left, "min")
    rhi, rhi_div = _running_extremum(Fv / s ** 2, grid, left, "max")
    if G is not None:
        g_lo, g_hi = G.grad(s)
        c_lo, clo_div = _running_extremum(g_lo / s ** p, grid, left, "min")
        c_hi, chi_div = _running_extremum(g_hi / s ** p, grid, left, "max")
    else:
        c_lo = c_hi = 0.0
        clo_div = chi_div = False
    return LimitEstimates(
        l=l, c_lo=c_lo, c_hi=c_hi,
        ratio_liminf_F_over_s2=rlo, ratio_limsup_F_over_s2=rhi,
        divergent={"l": l_div, "c_lo": clo_div, "c_hi": chi_div,
                   "ratio_liminf_F_over_s2": rlo_div, "ratio_limsup_F_over_s2": rhi_div},
    )


def quadratic_lower_bound(A: FunctionModel, a: float, b: float, samples: int = 20001) -> float:
    """Smallest l >= 0 with A(s) >= -l s^2 on sampled (a, b]."""
    s = np.geomspace(max(a, 1e-300), b, samples) if a > 0 else np.linspace(b / samples, b, samples)
    return float(max(0.0, np.max(-A.value(s) / s ** 2)))


# ---------------------------------------------------------------------------
# stability intervals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityInterval:
    delta: float
    eta: float
    witness: float
    margin: float

    def __post_init__(self):
        if not 0 < self.delta < self.witness < self.eta:
            raise AnalysisError(f"invalid stability interval {self}")
        if self.margin < 0:
            raise AnalysisError("negative margin")


@dataclass
class IntervalSearch:
    """Result of :func:`find_stability_intervals`; behaves like a list."""

    intervals: list
    requested: int
    margin_req: float

    @property
    def shortfall(self) -> bool:
        return len(self.intervals) < self.requested

    def __len__(self):
        return len(self.intervals)

    def __getitem__(self, i):
        return self.intervals[i]

    def __iter__(self):
        return iter(self.intervals)


def _hi(A: FunctionModel, s) -> np.ndarray:
    return A.grad(np.asarray(s, dtype=float))[1]


def certify_interval(A: FunctionModel, a: float, b: float, margin_req: float,
                     max_samples: int = 200_000) -> float:
    """Certified margin -max hi(∂A) on [a, b] by dense sampling.

    The spacing is at most margin_req / (Lipschitz hint of ∂A's upper envelope),
    capped at ``max_samples`` points.
    """
    s = np.linspace(a, b, 2001)
    h = _hi(A, s)
    slope = np.abs(np.diff(h)) / (s[1] - s[0])
    lip = 1.1 * float(slope.max()) + 1e-300
    n = int(min(max_samples, max(2001, math.ceil((b - a) * lip / margin_req) + 1)))
    if n > 2001:
        s = np.linspace(a, b, n)
        h = _hi(A, s)
    return float(-h.max())


def _scan_grid(window, regime: Regime, step: float) -> np.ndarray:
    a, b = window
    if regime is Regime.ORIGIN:
        y = np.arange(1.0 / b, 1.0 / a + step, step)
        return np.sort(1.0 / y)[::-1]  # decreasing toward 0
    return np.arange(a, b + step, step)


def _local_scale(A: FunctionModel, a: float, b: float) -> float:
    lo, hi = A.grad(np.linspace(a, b, 257))
    return float(max(np.max(np.abs(lo)), np.max(np.abs(hi)), 1e-300))


def find_stability_intervals(A: FunctionModel, window: Sequence[float], count: int,
                             margin_req: float | None = None, regime: Regime | str = Regime.ORIGIN,
                             delta_cap=None, step: float = 0.05,
                             margin_rel: float = 1e-5) -> IntervalSearch:
    """Disjoint intervals [delta, eta] on which hi(∂A) <= -margin.

    ``window`` is (a, b).  The origin regime walks from b down toward a on a
    grid uniform in 1/s, the infinity regime from a upward on a grid uniform
    in s.  When ``margin_req`` is None it defaults to ``margin_rel`` times the
    local gradient scale of each interval.  ``delta_cap`` (a number or a
    callable of the 1-based index) drops intervals whose lower end exceeds
    the cap.
    """
    regime = Regime(regime)
    a, b = float(window[0]), float(window[1])
    if not 0 < a < b:
        raise AnalysisError("window must satisfy 0 < a < b")
    if margin_req is not None and not margin_req > 0:
        raise AnalysisError("margin_req must be positive")
    found: list[StabilityInterval] = []
    if count <= 0:
        return IntervalSearch(found, count, margin_req or 0.0)
    s = _scan_grid((a, b), regime, step)
    h = _hi(A, s)
    neg = h < 0
    # runs of consecutive negative samples, in scan order
    edges = np.flatnonzero(np.diff(np.concatenate([[0], neg.astype(np.int8), [0]])))
    runs = list(zip(edges[::2], edges[1::2] - 1))
    for i0, i1 in runs:
        if len(found) >= count:
            break
        lo_s, hi_s = sorted((s[i0], s[i1]))
        # outer neighbours bracket the sign change (or the window edge)
        outer_lo = s[i1 + 1] if regime is Regime.ORIGIN and i1 + 1 < len(s) else (
            s[i0 - 1] if regime is Regime.INFINITY and i0 > 0 else lo_s)
        outer_hi = s[i0 - 1] if regime is Regime.ORIGIN and i0 > 0 else (
            s[i1 + 1] if regime is Regime.INFINITY and i1 + 1 < len(s) else hi_s)
        m = margin_req if margin_req is not None else margin_rel * _local_scale(A, outer_lo, outer_hi)
        run_s = s[min(i0, i1):max(i0, i1) + 1]
        run_h = h[min(i0, i1):max(i0, i1) + 1]
        k = int(np.argmin(run_h))
        witness = float(run_s[k])
        if run_h[k] > -m:
            continue

        def fn(x):
            return float(_hi(A, [x])[0]) + m

        delta = brentq(fn, outer_lo, witness, xtol=1e-15, rtol=4 * np.finfo(float).eps) if fn(outer_lo) > 0 else outer_lo
        eta = brentq(fn, witness, outer_hi, xtol=1e-15, rtol=4 * np.finfo(float).eps) if fn(outer_hi) > 0 else outer_hi
        # the run may hide a positive bump between samples; certify
        cert = -math.inf
        for _ in range(60):
            cert = certify_interval(A, delta, eta, m)
            if cert >= m * (1 - 1e-9):
                break
            shrink = 1e-10 * (eta - delta) + 4 * np.finfo(float).eps * eta
            delta, eta = delta + shrink, eta - shrink
        if cert < m * (1 - 1e-9) or not delta < witness < eta:
            continue
        idx = len(found) + 1
        cap = delta_cap(idx) if callable(delta_cap) else delta_cap
        if cap is not None and delta > cap:
            continue
        found.append(StabilityInterval(float(delta), float(eta), witness, float(cert)))
    return IntervalSearch(found, count, margin_req if margin_req is not None else margin_rel)


def lambda_interval_cap(A0: FunctionModel, G: FunctionModel, interval: StabilityInterval,
                        samples: int = 20001) -> float:
    """Largest lambda <= 1 keeping hi∂A0 + lambda·hi∂G <= 0 on the interval (sampled)."""
    s = np.linspace(interval.delta, interval.eta, samples)
    a = _hi(A0, s)
    g = _hi(G, s)
    pos = g > 0
    if not np.any(pos):
        return 1.0
    return float(min(1.0, np.min(-a[pos] / g[pos])))


# ---------------------------------------------------------------------------
# L0, test amplitudes, thresholds
# ---------------------------------------------------------------------------


def compute_L0(l_bound: float, k: float, mesh_measure: float, r: float, n: int, Crn: float,
               headroom: float = 1.1) -> float:
    """Smallest L0 with 1/2 C + (k/2 + l) m < L0 (r/2)^n w_n, times ``headroom``."""
    if not r > 0 or not mesh_measure > 0:
        raise AnalysisError("compute_L0 needs r > 0 and a positive measure")
    omega = math.pi ** (n / 2) / math.gamma(n / 2 + 1)
    lhs = 0.5 * Crn + (0.5 * k + l_bound) * mesh_measure
    return max(headroom * lhs / ((r / 2) ** n * omega), np.finfo(float).tiny)


def _amplitude_in(A: FunctionModel, lo: float, hi: float, L0: float, regime: Regime,
                  step: float, chunk: int, max_chunks: int) -> float | None:
    """Largest s in (lo, hi] at a local maximum of A/s^2 with A(s) > L0 s^2."""
    if regime is Regime.ORIGIN:
        y0 = 1.0 / hi
        for c in range(max_chunks):
            y = y0 + step * np.arange(c * chunk, (c + 1) * chunk + 2)
            s = 1.0 / y
            s = s[s > lo]
            if s.size < 3:
                return None
            q = A.value(s) / s ** 2
            ok = q > L0
            peak = np.zeros(s.size, dtype=bool)
            peak[1:-1] = (q[1:-1] >= q[:-2]) & (q[1:-1] >= q[2:])
            if c == 0:
                peak[0] = q[0] >= q[1]  # the right end of the window
            hit = np.flatnonzero(ok & peak)
            if hit.size:
                return float(s[hit[0]])
        return None
    s = np.arange(hi, lo, -step)
    if s.size < 3:
        s = np.linspace(hi, lo, 3, endpoint=False)
    q = A.value(s) / s ** 2
    peak = np.zeros(s.size, dtype=bool)
    peak[1:-1] = (q[1:-1] >= q[:-2]) & (q[1:-1] >= q[2:])
    peak[0] = q[0] >= q[1]
    hit = np.flatnonzero(peak & (q > L0))
    return float(s[hit[0]]) if hit.size else None


def find_test_amplitudes(A: FunctionModel, intervals: Sequence[StabilityInterval], L0: float,
                         regime: Regime | str = Regime.ORIGIN, lower: Sequence[float] | None = None,
                         step: float = 0.05, chunk: int = 20000, max_chunks: int = 50) -> list:
    """One s~ per interval with A(s~) > L0 s~^2.

    Origin: s~_i <= delta_i, searched downward from delta_i.  Infinity:
    s~_i in (lower_i, delta_i], where ``lower`` defaults to the previous eta.
    """
    regime = Regime(regime)
    intervals = list(intervals)
    if not intervals:
        raise AnalysisError("no intervals to pair with test amplitudes")
    out = []
    for i, iv in enumerate(intervals):
        if lower is not None:
            lo = lower[i]
        elif regime is Regime.INFINITY:
            lo = intervals[i - 1].eta if i > 0 else 0.0
        else:
            lo = 0.0
        s = _amplitude_in(A, lo, iv.delta, L0, regime, step, chunk, max_chunks)
        if s is None:
            raise AnalysisError(
                f"no test amplitude with A(s) > L0 s^2 for interval {i + 1} "
                f"(delta={iv.delta:.6g}, L0={L0:.6g})", index=i + 1)
        out.append(s)
    return out


@dataclass
class ThresholdReport:
    L0: float
    zeta: float
    s_tilde: list
    theta: list
    lambda_prime: list
    lambda_dprime: list
    lambda_k: float
    lambda_caps: list = field(default_factory=list)
    G_sup: float = float("nan")


def make_theta(energies_at_minimizers: Sequence[float], energies_at_bumps: Sequence[float],
               regime: Regime | str = Regime.ORIGIN) -> list:
    """Negative interleaving levels: geometric means between neighbouring energies."""
    regime = Regime(regime)
    Tu = list(map(float, energies_at_minimizers))
    Tw = list(map(float, energies_at_bumps))
    k = len(Tu)
    if k == 0:
        return []
    if regime is Regime.ORIGIN:
        theta = [2.0 * Tu[0]]
        for i in range(k - 1):
            theta.append(-math.sqrt(abs(Tw[i]) * abs(Tu[i + 1])))
        theta.append(0.5 * Tw[-1])
    else:
        theta = [0.5 * Tw[0]]
        for i in range(k - 1):
            theta.append(-math.sqrt(abs(Tu[i]) * abs(Tw[i + 1])))
        theta.append(2.0 * Tu[-1])
    return theta


def compute_lambda_thresholds(energies_at_bumps: Sequence[float], energies_at_minimizers: Sequence[float],
                              theta: Sequence[float], G_sup: float, mesh_measure: float, k: int,
                              regime: Regime | str = Regime.ORIGIN, lambda_caps: Sequence[float] | None = None,
                              L0: float = float("nan"), zeta: float = float("nan"),
                              s_tilde: Sequence[float] = ()) -> ThresholdReport:
    """lambda'_i, lambda''_i and lambda_k = min(1, caps, lambda', lambda'').

    ``theta`` has k + 1 entries.  Origin ordering:
    theta_i < T_i(u_i) <= T_i(w_i) < theta_{i+1}; infinity ordering:
    theta_{i+1} < T(u_i) <= T(w_i) < theta_i.
    """
    regime = Regime(regime)
    Tw = np.asarray(energies_at_bumps, dtype=float)[:k]
    Tu = np.asarray(energies_at_minimizers, dtype=float)[:k]
    th = np.asarray(theta, dtype=float)
    if len(Tw) < k or len(Tu) < k or len(th) < k + 1:
        raise AnalysisError(f"need {k} energies of each kind and {k + 1} theta values")
    if np.any(th[:k + 1] >= 0):
        raise AnalysisError("theta values must be negative")
    denom = mesh_measure * G_sup + 1.0
    lp, ldp = [], []
    for i in range(k):
        if regime is Regime.ORIGIN:
            ok = th[i] < Tu[i] <= Tw[i] < th[i + 1]
            a, b = th[i + 1] - Tw[i], Tu[i] - th[i]
        else:
            ok = th[i + 1] < Tu[i] <= Tw[i] < th[i]
            a, b = th[i] - Tw[i], Tu[i] - th[i + 1]
        if not ok:
            raise AnalysisError(f"energy interleaving violated at index {i + 1}", index=i + 1)
        lp.append(a / denom)
        ldp.append(b / denom)
    caps = list(lambda_caps[:k]) if lambda_caps is not None else []
    lam = min([1.0] + caps + lp + ldp)
    if not lam > 0:
        raise AnalysisError("non-positive lambda threshold")
    return ThresholdReport(L0=L0, zeta=zeta, s_tilde=list(s_tilde), theta=list(th[:k + 1]),
                           lambda_prime=lp, lambda_dprime=ldp, lambda_k=float(lam),
                           lambda_caps=caps, G_sup=float(G_sup))


def _sup_abs(vals_fn, lip_fn, a: float, b: float, resolution: float) -> float:
    n = max(2, int(math.ceil((b - a) / resolution)) + 1)
    s = np.linspace(a, b, n)
    v = vals_fn(s)
    return float(np.max(np.abs(v)) + 0.5 * lip_fn(a, b) * (s[1] - s[0]))


def value_sup(G: FunctionModel, a: float, b: float, resolution: float = 1e-4) -> float:
    """max |G| on [a, b] by sampling plus a Lipschitz bound on the gap."""
    return _sup_abs(G.value, G.lipschitz_hint, a, b, resolution)


def gradient_sup(G: FunctionModel, a: float, b: float, resolution: float = 1e-4) -> float:
    """max |∂G| on [a, b] (sampled)."""
    def vals(s):
        lo, hi = G.grad(s)
        return np.maximum(np.abs(lo), np.abs(hi))
    return float(np.max(vals(np.linspace(a, b, max(2, int(math.ceil((b - a) / resolution)) + 1)))))
