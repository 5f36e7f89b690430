"""Locally Lipschitz scalar functions with Clarke-gradient interval hulls.

Every model is zero-extended: ``value(s) = 0`` and ``grad(s) = [0, 0]`` for
``s < 0``, and the gradient at ``s = 0`` is the hull of ``0`` with the
right-limit interval.  Evaluation is vectorised over numpy arrays; the scalar
helpers :func:`eval_model` and :func:`grad_interval` wrap it.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GradInterval",
    "FunctionModel",
    "ModelError",
    "eval_model",
    "grad_interval",
    "sum_models",
    "scale",
    "add_quadratic",
    "truncate",
    "lebourg_check",
    "builtin",
    "model_from_spec",
    "zero_model",
    "linear_model",
    "quadratic_model",
    "F0",
    "G0",
    "Finf",
    "Ginf",
]

# relative distance to an analytic kink below which a point counts as the kink
BREAKPOINT_RTOL = 1e-13


class ModelError(ValueError):
    """Raised for malformed model definitions or non-finite evaluations."""


@dataclass(frozen=True)
class GradInterval:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ModelError(f"invalid gradient interval [{self.lo}, {self.hi}]")

    def contains(self, x: float, tol: float = 0.0) -> bool:
        return self.lo - tol <= x <= self.hi + tol

    def __iter__(self):
        yield self.lo
        yield self.hi


def _as_array(s) -> np.ndarray:
    return np.asarray(s, dtype=float)


class FunctionModel:
    """Base class.

    Subclasses implement ``_value_pos`` and ``_grad_pos`` for ``s >= 0``;
    ``_grad_pos`` at ``s == 0`` must return the right-limit interval.
    Combinators override :meth:`value` and :meth:`grad` directly.
    """

    name = "model"
    breakpoints: Sequence[float] | None = None

    # -- leaf hooks -------------------------------------------------------
    def _value_pos(self, s: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def _grad_pos(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:  # pragma: no cover
        raise NotImplementedError

    # -- public vectorised API -------------------------------------------
    def value(self, s) -> np.ndarray:
        s = _as_array(s)
        out = np.zeros_like(s)
        pos = s > 0
        if np.any(pos):
            out[pos] = self._value_pos(s[pos])
        return out

    def grad(self, s) -> tuple[np.ndarray, np.ndarray]:
        s = _as_array(s)
        lo = np.zeros_like(s)
        hi = np.zeros_like(s)
        nonneg = s >= 0
        if np.any(nonneg):
            l, h = self._grad_pos(s[nonneg])
            at0 = s[nonneg] == 0
            l = np.where(at0, np.minimum(l, 0.0), l)
            h = np.where(at0, np.maximum(h, 0.0), h)
            lo[nonneg] = l
            hi[nonneg] = h
        return lo, hi

    def increment(self, a, b) -> np.ndarray:
        """``value(b) - value(a)``; subclasses compute it without cancellation."""
        return self.value(b) - self.value(a)

    def lipschitz_hint(self, a: float, b: float, samples: int = 2001) -> float:
        """Upper estimate of max |grad| on [a, b] (sampled, 10% headroom)."""
        s = np.linspace(a, b, samples)
        lo, hi = self.grad(s)
        return 1.1 * float(np.max(np.maximum(np.abs(lo), np.abs(hi)))) + 1e-300

    # -- sugar ------------------------------------------------------------
    def __add__(self, other: "FunctionModel") -> "FunctionModel":
        return sum_models(self, other)

    def __rmul__(self, c: float) -> "FunctionModel":
        return scale(self, c)

    def __repr__(self):
        return self.name


def eval_model(model: FunctionModel, s: float) -> float:
    v = float(model.value(np.array([s]))[0])
    if not math.isfinite(v):
        raise ModelError(f"{model!r} produced non-finite value at s={s}")
    return v


def grad_interval(model: FunctionModel, s: float) -> GradInterval:
    lo, hi = model.grad(np.array([s]))
    return GradInterval(float(lo[0]), float(hi[0]))


# ---------------------------------------------------------------------------
# simple leaves
# ---------------------------------------------------------------------------


class _Zero(FunctionModel):
    name = "zero"

    def _value_pos(self, s):
        return np.zeros_like(s)

    def _grad_pos(self, s):
        z = np.zeros_like(s)
        return z, z


class _Linear(FunctionModel):
    def __init__(self, c: float):
        self.c = float(c)
        self.name = f"linear({self.c:g})"

    def _value_pos(self, s):
        return self.c * s

    def _grad_pos(self, s):
        g = np.full_like(s, self.c)
        return g, g


def zero_model() -> FunctionModel:
    return _Zero()


def linear_model(c: float) -> FunctionModel:
    """s -> c*s on s >= 0 (zero-extended, so a kink at the origin)."""
    return _Linear(c)


def quadratic_model(a: float) -> FunctionModel:
    """s -> a*s^2/2 on s >= 0."""
    return add_quadratic(zero_model(), a)


# ---------------------------------------------------------------------------
# combinators
# ---------------------------------------------------------------------------


class _Sum(FunctionModel):
    def __init__(self, f: FunctionModel, g: FunctionModel):
        self.f, self.g = f, g
        self.name = f"({f!r} + {g!r})"

    def value(self, s):
        return self.f.value(s) + self.g.value(s)

    def grad(self, s):
        fl, fh = self.f.grad(s)
        gl, gh = self.g.grad(s)
        return fl + gl, fh + gh

    def increment(self, a, b):
        return self.f.increment(a, b) + self.g.increment(a, b)


class _Scale(FunctionModel):
    def __init__(self, f: FunctionModel, c: float):
        self.f, self.c = f, float(c)
        self.name = f"{self.c:g}*{f!r}"

    def value(self, s):
        return self.c * self.f.value(s)

    def grad(self, s):
        lo, hi = self.f.grad(s)
        a, b = self.c * lo, self.c * hi
        return np.minimum(a, b), np.maximum(a, b)

    def increment(self, a, b):
        return self.c * self.f.increment(a, b)


class _AddQuadratic(FunctionModel):
    def __init__(self, f: FunctionModel, a: float):
        self.f, self.a = f, float(a)
        self.name = f"({f!r} + {self.a:g}*s^2/2)"

    def value(self, s):
        s = _as_array(s)
        sp = np.maximum(s, 0.0)
        return self.f.value(s) + 0.5 * self.a * sp * sp

    def grad(self, s):
        s = _as_array(s)
        lo, hi = self.f.grad(s)
        shift = self.a * np.maximum(s, 0.0)
        return lo + shift, hi + shift

    def increment(self, a, b):
        a, b = np.maximum(_as_array(a), 0.0), np.maximum(_as_array(b), 0.0)
        return self.f.increment(a, b) + 0.5 * self.a * (b - a) * (b + a)


class _Truncate(FunctionModel):
    def __init__(self, f: FunctionModel, eta: float):
        self.f, self.eta = f, float(eta)
        self.name = f"{f!r}∘min(·,{self.eta:g})"

    def value(self, s):
        return self.f.value(np.minimum(_as_array(s), self.eta))

    def grad(self, s):
        s = _as_array(s)
        lo, hi = self.f.grad(np.minimum(s, self.eta))
        at = s == self.eta
        above = s > self.eta
        lo = np.where(at, np.minimum(lo, 0.0), np.where(above, 0.0, lo))
        hi = np.where(at, np.maximum(hi, 0.0), np.where(above, 0.0, hi))
        return lo, hi

    def increment(self, a, b):
        return self.f.increment(np.minimum(_as_array(a), self.eta), np.minimum(_as_array(b), self.eta))


def sum_models(f: FunctionModel, g: FunctionModel) -> FunctionModel:
    return _Sum(f, g)


def scale(f: FunctionModel, c: float) -> FunctionModel:
    return _Scale(f, c)


def add_quadratic(f: FunctionModel, a: float) -> FunctionModel:
    """Add ``a*s^2/2`` on ``s >= 0``; the zero extension is kept."""
    return _AddQuadratic(f, a)


def truncate(A: FunctionModel, eta: float) -> FunctionModel:
    """``s -> A(min(eta, s))`` with the chain-rule gradient at ``s = eta``."""
    if not eta > 0:
        raise ModelError("truncation level must be positive")
    return _Truncate(A, eta)


# ---------------------------------------------------------------------------
# Lebourg mean-value containment
# ---------------------------------------------------------------------------


def lebourg_check(f: FunctionModel, a: float, b: float, samples: int = 1000,
                  rtol: float = 1e-8) -> bool:
    """Check that the difference quotient on [a, b] lies in the sampled gradient hull."""
    if samples < 2:
        raise ValueError("lebourg_check needs at least 2 samples")
    if not a < b:
        raise ValueError("lebourg_check needs a < b")
    fa, fb = f.value(np.array([a, b]))
    q = (fb - fa) / (b - a)
    lo, hi = f.grad(np.linspace(a, b, samples))
    lip = f.lipschitz_hint(a, b, samples=min(samples, 2001))
    tol = rtol * lip + 8 * np.finfo(float).eps * (abs(fa) + abs(fb)) / (b - a)
    return bool(lo.min() - tol <= q <= hi.max() + tol)


# ---------------------------------------------------------------------------
# primitives of oscillatory integrands
# ---------------------------------------------------------------------------


class _PanelPrimitive:
    """Memoised primitive ``s -> ∫_0^s f(t) dt`` for ``s >= 0``.

    Integrates in ``x = sqrt(t)`` (removing the sqrt singularity at 0) with
    fixed-order Gauss-Legendre on panels whose edges follow the oscillation;
    cumulative panel sums are cached and extended on demand under a lock.
    Below ``cut`` an optional closed-form ``tail`` is used.
    """

    def __init__(self, integrand: Callable[[np.ndarray], np.ndarray],
                 edge_gen: Callable[[float], np.ndarray], s_max: float,
                 tail: Callable[[np.ndarray], np.ndarray] | None = None,
                 cut: float = 0.0, order: int = 20):
        self._f = integrand
        self._edge_gen = edge_gen
        self._tail = tail
        self.cut = cut
        xg, wg = np.polynomial.legendre.leggauss(order)
        self._xg = (xg + 1.0) / 2.0
        self._wg = wg / 2.0
        xs, ws = np.polynomial.legendre.leggauss(6)
        self._short = ((xs + 1.0) / 2.0, ws / 2.0)
        self._lock = threading.Lock()
        self._edges = np.empty(0)
        self._cum = np.empty(0)
        self._build(s_max)

    def _gl(self, x0: np.ndarray, x1: np.ndarray, rule=None) -> np.ndarray:
        # ∫_{x0}^{x1} 2x f(x^2) dx, vectorised over panel pairs
        xg, wg = rule if rule is not None else (self._xg, self._wg)
        width = (x1 - x0)[..., None]
        x = x0[..., None] + width * xg
        vals = 2.0 * x * self._f(x * x)
        return (vals @ wg) * width[..., 0]

    def _build(self, s_max: float):
        edges = np.sqrt(self._edge_gen(s_max))
        start = self._tail(np.array([self.cut]))[0] if self._tail else 0.0
        pieces = self._gl(edges[:-1], edges[1:])
        self._cum = np.concatenate([[start], start + np.cumsum(pieces)])
        self._edges = edges
        self.s_max = float(edges[-1] ** 2)

    def _ensure(self, s_top: float):
        if s_top <= self.s_max:
            return
        with self._lock:
            if s_top > self.s_max:
                self._build(max(s_top, 2.0 * self.s_max))

    def increment(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """∫_a^b f for a, b >= 0; direct quadrature when both lie in one panel."""
        a, b = np.broadcast_arrays(_as_array(a), _as_array(b))
        out = np.zeros(a.shape)
        self._ensure(float(max(a.max(initial=0.0), b.max(initial=0.0))))
        xa, xb = np.sqrt(a), np.sqrt(b)
        edges = self._edges
        ja = np.searchsorted(edges, xa, side="right")
        jb = np.searchsorted(edges, xb, side="right")
        same = (ja == jb) & (a >= self.cut) & (b >= self.cut) & (ja > 0) & (ja < len(edges))
        same &= a != b
        if np.any(same):
            j = ja[same]
            xa_s, xb_s = xa[same], xb[same]
            # a 6-point rule is exact to rounding on a short sub-panel
            short = np.abs(xb_s - xa_s) < 0.05 * (edges[j] - edges[j - 1])
            vals = np.empty(xa_s.shape)
            if np.any(short):
                vals[short] = self._gl(xa_s[short], xb_s[short], self._short)
            if not np.all(short):
                vals[~short] = self._gl(xa_s[~short], xb_s[~short])
            out[same] = vals
        other = ~same & (a != b)
        if np.any(other):
            out[other] = self(b[other]) - self(a[other])
        return out

    def __call__(self, s: np.ndarray) -> np.ndarray:
        s = _as_array(s)
        out = np.empty_like(s)
        if s.size == 0:
            return out
        self._ensure(float(s.max()))
        low = s < self.cut
        out[low] = 0.0
        pos = low & (s > 0)
        if self._tail and np.any(pos):
            out[pos] = self._tail(s[pos])
        hi_mask = ~low
        if np.any(hi_mask):
            x = np.sqrt(s[hi_mask])
            edges, cum = self._edges, self._cum
            j = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, len(edges) - 2)
            out[hi_mask] = cum[j] + self._gl(edges[j], x)
        return out


def _sin_inv_tail(s: np.ndarray, terms: int = 4) -> np.ndarray:
    """∫_0^s t^{1/2} sin(1/t) dt via repeated integration by parts (small s)."""
    s = _as_array(s)
    # below 1e-100 the sum is under 1e-250; skip it so 1/s cannot overflow
    s = np.where(s > 1e-100, s, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        c, sn = np.cos(1.0 / s), np.sin(1.0 / s)
    c = np.where(s > 0, c, 0.0)
    sn = np.where(s > 0, sn, 0.0)
    total = np.zeros_like(s)
    a, coef = 0.5, 1.0
    for m in range(terms):
        total += coef * (s ** (a + 2) * c + (a + 2) * s ** (a + 3) * sn)
        coef *= -(a + 2) * (a + 3)
        a += 2.0
    return total


# ---------------------------------------------------------------------------
# built-in nonlinearities
# ---------------------------------------------------------------------------


def _f0(t: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        v = np.sqrt(t) * (0.5 + np.sin(1.0 / t))
    # |f0(t)| <= 1.5 sqrt(t); below 1e-250 that is under 1e-124 and sin(1/t) is unreliable
    return np.where(t > 1e-250, v, 0.0)


def _finf(t: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(t, 0.0)) * (0.5 + np.sin(t))


_F0_CUT = 1e-4


def _f0_edges(s_max: float) -> np.ndarray:
    # zeros of sin(1/t) between the series cut-off and 1/pi, then a uniform
    # grid in sqrt(t)
    jmax = int(math.floor(1.0 / (math.pi * _F0_CUT)))
    osc = 1.0 / (math.pi * np.arange(jmax, 0, -1))
    osc = osc[osc > _F0_CUT]
    x_top = math.sqrt(max(s_max, 1.0))
    x_uniform = np.arange(math.sqrt(osc[-1]), x_top + 0.02, 0.02)[1:]
    return np.concatenate([[_F0_CUT], osc, x_uniform ** 2])


def _finf_edges(s_max: float) -> np.ndarray:
    n = int(math.ceil(s_max / (math.pi / 2))) + 1
    return (math.pi / 2) * np.arange(n + 1, dtype=float)


class _OscPrimitiveModel(FunctionModel):
    """F(s) = ∫_0^s f(t) dt with continuous integrand f, f(0) = 0."""

    def __init__(self, name: str, integrand, primitive: _PanelPrimitive):
        self.name = name
        self._f = integrand
        self._F = primitive

    def _value_pos(self, s):
        return self._F(s)

    def _grad_pos(self, s):
        g = self._f(s)
        return g, g

    def increment(self, a, b):
        a, b = np.broadcast_arrays(np.maximum(_as_array(a), 0.0), np.maximum(_as_array(b), 0.0))
        return self._F.increment(a, b)

    def lipschitz_hint(self, a, b, samples=2001):
        return 1.5 * math.sqrt(max(abs(a), abs(b))) + 1e-300


def _make_F0() -> FunctionModel:
    prim = _PanelPrimitive(
        _f0, _f0_edges, s_max=16.0,
        tail=lambda s: s ** 1.5 / 3.0 + _sin_inv_tail(s), cut=_F0_CUT,
    )
    return _OscPrimitiveModel("F0", _f0, prim)


def _make_Finf() -> FunctionModel:
    prim = _PanelPrimitive(_finf, _finf_edges, s_max=1.0e3)
    return _OscPrimitiveModel("Finf", _finf, prim)


class _G0(FunctionModel):
    """ln(1 + s^{p+2}) max{0, cos(1/s)}."""

    def __init__(self, p: float):
        if not p > 0:
            raise ModelError("G0 requires p > 0")
        self.p = float(p)
        self.name = f"G0({self.p:g})"

    # below this the value and gradient are under s^p * 1e-100 and taken as 0
    tiny = 1e-100

    def _value_pos(self, s):
        big = s > self.tiny
        out = np.zeros_like(s)
        sb = s[big]
        out[big] = np.log1p(sb ** (self.p + 2)) * np.maximum(0.0, np.cos(1.0 / sb))
        return out

    def _kink(self, s):
        # analytic zeros of cos(1/s): 1/s = pi/2 + j*pi
        with np.errstate(divide="ignore"):
            y = 1.0 / s
        j = np.round((y - math.pi / 2) / math.pi)
        yj = math.pi / 2 + j * math.pi
        is_kink = (s > 0) & (j >= 0) & (np.abs(y - yj) <= BREAKPOINT_RTOL * y)
        return is_kink, j

    def _grad_pos(self, s):
        p = self.p
        lo = np.zeros_like(s)
        hi = np.zeros_like(s)
        pos = s > self.tiny
        sp = s[pos]
        c, sn = np.cos(1.0 / sp), np.sin(1.0 / sp)
        L = np.log1p(sp ** (p + 2))
        d = (p + 2) * sp ** (p + 1) / (1 + sp ** (p + 2)) * c + L * sn / sp ** 2
        kink, j = self._kink(sp)
        # at a kink cos = 0 and sin = (-1)^j exactly
        d_kink = L * np.where(j % 2 == 0, 1.0, -1.0) / sp ** 2
        g = np.where(c > 0, d, 0.0)
        l = np.where(kink, np.minimum(0.0, d_kink), g)
        h = np.where(kink, np.maximum(0.0, d_kink), g)
        lo[pos], hi[pos] = l, h
        return lo, hi

    def breakpoints_in(self, a: float, b: float) -> np.ndarray:
        a = max(a, 1e-300)
        j0 = max(0, math.ceil((1.0 / b - math.pi / 2) / math.pi))
        j1 = math.floor((1.0 / a - math.pi / 2) / math.pi)
        j = np.arange(j0, j1 + 1)
        return np.sort(1.0 / (math.pi / 2 + j * math.pi))


class _Ginf(FunctionModel):
    """s^p max{0, sin s}."""

    def __init__(self, p: float):
        if not p > 0:
            raise ModelError("Ginf requires p > 0")
        self.p = float(p)
        self.name = f"Ginf({self.p:g})"

    def _value_pos(self, s):
        return s ** self.p * np.maximum(0.0, np.sin(s))

    def _grad_pos(self, s):
        p = self.p
        sn, c = np.sin(s), np.cos(s)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(s > 0, p * s ** (p - 1) * sn, 0.0) + s ** p * c
        j = np.round(s / math.pi)
        kink = np.abs(s - j * math.pi) <= BREAKPOINT_RTOL * np.maximum(s, 1.0)
        d_kink = s ** p * np.where(j % 2 == 0, 1.0, -1.0)
        g = np.where(sn > 0, d, 0.0)
        lo = np.where(kink, np.minimum(0.0, d_kink), g)
        hi = np.where(kink, np.maximum(0.0, d_kink), g)
        return lo, hi

    def breakpoints_in(self, a: float, b: float) -> np.ndarray:
        j = np.arange(math.ceil(a / math.pi), math.floor(b / math.pi) + 1)
        return j * math.pi


_F0_SINGLETON: FunctionModel | None = None
_FINF_SINGLETON: FunctionModel | None = None
_SINGLETON_LOCK = threading.Lock()


def F0() -> FunctionModel:
    """Primitive of sqrt(t)(1/2 + sin(1/t)); shared, immutable, cached."""
    global _F0_SINGLETON
    with _SINGLETON_LOCK:
        if _F0_SINGLETON is None:
            _F0_SINGLETON = _make_F0()
    return _F0_SINGLETON


def Finf() -> FunctionModel:
    """Primitive of sqrt(t)(1/2 + sin t)."""
    global _FINF_SINGLETON
    with _SINGLETON_LOCK:
        if _FINF_SINGLETON is None:
            _FINF_SINGLETON = _make_Finf()
    return _FINF_SINGLETON


def G0(p: float) -> FunctionModel:
    return _G0(p)


def Ginf(p: float) -> FunctionModel:
    return _Ginf(p)


_BUILTINS = {"F0": F0, "Finf": Finf, "G0": G0, "Ginf": Ginf,
             "zero": zero_model}


def builtin(name: str, p: float | None = None) -> FunctionModel:
    if name not in _BUILTINS:
        raise ModelError(f"unknown model name {name!r}")
    if name in ("G0", "Ginf"):
        if p is None:
            raise ModelError(f"{name} requires parameter p")
        return _BUILTINS[name](p)
    return _BUILTINS[name]()


def model_from_spec(spec) -> FunctionModel:
    """Build a model from a config node.

    Accepted forms: ``"F0"``, ``{"name": "G0", "p": 2}``, and the combinators
    ``{"sum": [a, b, ...]}``, ``{"scale": [c, m]}``,
    ``{"add_quadratic": [a, m]}``, ``{"truncate": [eta, m]}``.
    """
    if isinstance(spec, str):
        return builtin(spec)
    if not isinstance(spec, dict) or len(spec) == 0:
        raise ModelError(f"cannot build a model from {spec!r}")
    if "name" in spec:
        extra = set(spec) - {"name", "p"}
        if extra:
            raise ModelError(f"unknown model keys {sorted(extra)}")
        return builtin(spec["name"], spec.get("p"))
    if len(spec) != 1:
        raise ModelError(f"combinator node must have exactly one key: {spec!r}")
    (op, args), = spec.items()
    if op == "sum":
        models = [model_from_spec(a) for a in args]
        if not models:
            raise ModelError("empty sum")
        out = models[0]
        for m in models[1:]:
            out = sum_models(out, m)
        return out
    if op in ("scale", "add_quadratic", "truncate"):
        if not isinstance(args, (list, tuple)) or len(args) != 2:
            raise ModelError(f"{op} expects [number, model]")
        c, inner = float(args[0]), model_from_spec(args[1])
        return {"scale": scale, "add_quadratic": add_quadratic, "truncate": truncate}[op](inner, c)
    raise ModelError(f"unknown combinator {op!r}")
