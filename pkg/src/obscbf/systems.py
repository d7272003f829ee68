"""Plant models, region algebra and the benchmark systems.

Sets are conjunctions of linear inequalities (:class:`PolySet`); unions of
those cover the non-convex cases. All membership tests are vectorized over a
batch of states of shape ``(N, n)``.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import linprog

CONSTANT_NAMES = ("L_x", "L_u", "L_h", "M_f", "M_h")


@dataclass(frozen=True)
class PolySet:
    """``{x : A x <= b}``, with per-row strict ``<`` where flagged."""

    A: np.ndarray
    b: np.ndarray
    strict: tuple = ()

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise ValueError("PolySet: A and b row counts differ")
        strict = tuple(bool(s) for s in self.strict) or (False,) * len(b)
        if len(strict) != len(b):
            raise ValueError("PolySet: strict flags must match rows")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "strict", strict)

    @classmethod
    def box(cls, lo, hi):
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        eye = np.eye(len(lo))
        return cls(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))

    @property
    def dim(self):
        return self.A.shape[1]

    def contains(self, x):
        x = np.atleast_2d(x)
        lhs = x @ self.A.T
        strict = np.array(self.strict)
        ok = np.where(strict, lhs < self.b, lhs <= self.b)
        return ok.all(axis=1)

    def to_dict(self):
        return {"A": self.A.tolist(), "b": self.b.tolist(), "strict": list(self.strict)}

    @classmethod
    def from_dict(cls, d):
        if "box" in d:
            return cls.box(d["box"]["lo"], d["box"]["hi"])
        return cls(d["A"], d["b"], tuple(d.get("strict", ())))


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError(f"invalid box lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return len(self.lo)

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def half_diagonal(self):
        return 0.5 * float(np.linalg.norm(self.hi - self.lo))

    def contains(self, x):
        x = np.atleast_2d(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)

    def vertices(self):
        return np.array(list(itertools.product(*zip(self.lo, self.hi))))

    def as_polyset(self):
        return PolySet.box(self.lo, self.hi)

    def sample(self, rng, size):
        return rng.uniform(self.lo, self.hi, size=(size, self.dim))

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


def _union_contains(sets, x):
    x = np.atleast_2d(x)
    out = np.zeros(x.shape[0], dtype=bool)
    for s in sets:
        out |= s.contains(x)
    return out


@dataclass(frozen=True)
class RegionSpec:
    """State-space sets of the safety problem.

    ``domain`` is D and ``inner`` is X. The unsafe part of X is given either
    directly as a union of polytopes (``unsafe``, intersected with X) or as
    the complement in X of a union of safe polytopes (``safe``).
    """

    domain: Box
    inner: Box
    init: tuple
    unsafe: tuple = ()
    safe: tuple | None = None

    def __post_init__(self):
        if self.domain.dim != self.inner.dim:
            raise ValueError("D and X dimensions differ")
        object.__setattr__(self, "init", tuple(self.init))
        object.__setattr__(self, "unsafe", tuple(self.unsafe))
        if self.safe is not None:
            object.__setattr__(self, "safe", tuple(self.safe))
            if self.unsafe:
                raise ValueError("give either unsafe or safe sets, not both")

    @property
    def n(self):
        return self.domain.dim

    @property
    def rho(self):
        """Distance from X to the boundary of D (box-in-box)."""
        return float(min(np.min(self.inner.lo - self.domain.lo), np.min(self.domain.hi - self.inner.hi)))

    def in_init(self, x):
        return _union_contains(self.init, x)

    def in_unsafe(self, x):
        """Membership in X_u (a subset of X)."""
        x = np.atleast_2d(x)
        in_x = self.inner.contains(x)
        if self.safe is not None:
            return in_x & ~_union_contains(self.safe, x)
        return in_x & _union_contains(self.unsafe, x)

    def in_safe(self, x):
        """Membership in X minus X_u."""
        x = np.atleast_2d(x)
        return self.inner.contains(x) & ~self.in_unsafe(x)

    def membership(self, s):
        """Labels for augmented points ``s = [x, xhat]`` of shape (N, 2n).

        Returns ``(in_init, in_aug_unsafe)`` boolean arrays.
        """
        s = np.atleast_2d(s)
        n = self.n
        x, xh = s[:, :n], s[:, n:]
        in_init = self.in_init(x) & self.in_init(xh)
        in_aug_unsafe = ~(self.in_safe(x) & self.inner.contains(xh))
        return in_init, in_aug_unsafe

    def check(self):
        """Verify the structural invariants; raise ``ValueError`` on failure."""
        if not np.all(self.inner.lo > self.domain.lo) or not np.all(self.inner.hi < self.domain.hi):
            raise ValueError("X must lie strictly inside D")
        if self.rho <= 0:
            raise ValueError("margin rho must be positive")
        x_poly = self.inner.as_polyset()
        for p in self.init:
            if not _polytope_subset(p, x_poly):
                raise ValueError("X0 is not contained in X")
            if self.safe is not None:
                if not any(_polytope_subset(p, s) for s in self.safe):
                    raise ValueError("X0 intersects the unsafe set")
            else:
                for u in self.unsafe:
                    if _polytopes_intersect(p, u):
                        raise ValueError("X0 intersects the unsafe set")
        return True

    def to_dict(self):
        d = {
            "domain": self.domain.to_dict(),
            "inner": self.inner.to_dict(),
            "init": [p.to_dict() for p in self.init],
        }
        if self.safe is not None:
            d["safe"] = [p.to_dict() for p in self.safe]
        else:
            d["unsafe"] = [p.to_dict() for p in self.unsafe]
        return d

    @classmethod
    def from_dict(cls, d):
        safe = d.get("safe")
        return cls(
            Box(d["domain"]["lo"], d["domain"]["hi"]),
            Box(d["inner"]["lo"], d["inner"]["hi"]),
            tuple(PolySet.from_dict(p) for p in d["init"]),
            tuple(PolySet.from_dict(p) for p in d.get("unsafe", [])),
            None if safe is None else tuple(PolySet.from_dict(p) for p in safe),
        )


def _polytope_subset(inner: PolySet, outer: PolySet):
    """``inner`` within ``outer``: max of each outer row over ``inner`` stays below its bound."""
    for a, b, strict in zip(outer.A, outer.b, outer.strict):
        res = linprog(-a, A_ub=inner.A, b_ub=inner.b, bounds=(None, None), method="highs")
        if res.status != 0:
            raise ValueError(f"subset check failed: {res.message}")
        top = -res.fun
        if top > b + 1e-12 or (strict and top >= b):
            return False
    return True


def _polytopes_intersect(p: PolySet, q: PolySet):
    A = np.vstack([p.A, q.A])
    b = np.concatenate([p.b, q.b])
    res = linprog(np.zeros(p.dim), A_ub=A, b_ub=b, bounds=(None, None), method="highs")
    return res.status == 0


@dataclass
class SystemModel:
    """``xdot = f(x, u)``, ``y = h(x)`` with vectorized callables.

    ``f`` and ``h`` take batches (N, n) / (N, m); ``jac_u`` returns the input
    Jacobian of ``f`` with shape (N, n, m). ``constants`` holds L_x, L_u, L_h,
    M_f and M_h, with their provenance in ``constant_sources``.
    """

    name: str
    n: int
    m: int
    p: int
    f: Callable
    h: Callable
    jac_u: Callable
    u_lb: np.ndarray
    u_ub: np.ndarray
    constants: dict
    constant_sources: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u_lb = np.asarray(self.u_lb, dtype=np.float64).reshape(-1)
        self.u_ub = np.asarray(self.u_ub, dtype=np.float64).reshape(-1)
        for k in CONSTANT_NAMES:
            v = self.constants.get(k)
            if v is None or not math.isfinite(v) or v < 0:
                raise ValueError(f"{self.name}: constant {k}={v!r} must be finite and nonnegative")
            self.constant_sources.setdefault(k, "analytic")

    @property
    def input_box(self):
        return Box(self.u_lb, self.u_ub)


def eval_dynamics(sys: SystemModel, x, u):
    """``f(x, u)`` with a finiteness check; accepts single vectors or batches."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    single = x.ndim == 1
    xb, ub = np.atleast_2d(x), np.atleast_2d(u)
    if xb.shape[1] != sys.n or ub.shape[1] != sys.m:
        raise ValueError(f"{sys.name}: expected state dim {sys.n} and input dim {sys.m}")
    with np.errstate(invalid="ignore"):
        out = sys.f(xb, ub)
    bad = ~np.all(np.isfinite(out), axis=1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise FloatingPointError(f"{sys.name}: non-finite dynamics at x={xb[i].tolist()}, u={ub[i].tolist()}")
    return out[0] if single else out


def output_box(sys: SystemModel, domain: Box):
    """Interval enclosure of h over D by vertex enumeration (h must be linear)."""
    vals = sys.h(domain.vertices())
    return Box(vals.min(axis=0), vals.max(axis=0))


# -- plants ---------------------------------------------------------------


def linear_plant(name, A, B, C, u_lb, u_ub, domain: Box, params=None):
    """Plant ``xdot = A x + B u``, ``y = C x`` with analytic constants."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    n, m, p = A.shape[0], B.shape[1], C.shape[0]
    ubox = Box(u_lb, u_ub)
    # ||Ax + Bu|| is convex, so its max over the box D x U sits at a vertex
    verts = np.array([np.concatenate(v) for v in itertools.product(domain.vertices(), ubox.vertices())])
    M_f = float(np.max(np.linalg.norm(verts[:, :n] @ A.T + verts[:, n:] @ B.T, axis=1)))
    M_h = float(np.max(np.linalg.norm(domain.vertices() @ C.T, axis=1)))
    constants = {
        "L_x": float(np.linalg.norm(A, 2)),
        "L_u": float(np.linalg.norm(B, 2)),
        "L_h": float(np.linalg.norm(C, 2)),
        "M_f": M_f,
        "M_h": M_h,
    }
    params = dict(params or {})
    params.update({"A": A.tolist(), "B": B.tolist(), "C": C.tolist()})
    return SystemModel(
        name, n, m, p,
        f=lambda x, u: x @ A.T + u @ B.T,
        h=lambda x: x @ C.T,
        jac_u=lambda x, u: np.broadcast_to(B, (x.shape[0], n, m)),
        u_lb=u_lb, u_ub=u_ub,
        constants=constants,
        params=params,
    )


def dc_motor_matrices(R=1.0, L=0.5, K_dc=0.01, J=0.01, b=0.1):
    A = np.array([[-R / L, -K_dc / L], [K_dc / J, -b / J]])
    B = np.array([[1.0 / L], [0.0]])
    C = np.array([[0.0, 1.0]])
    return A, B, C


def dc_motor(params=None):
    """Armature current / speed model with only the speed measured."""
    prm = {"R": 1.0, "L": 0.5, "K_dc": 0.01, "J": 0.01, "b": 0.1}
    prm.update(params or {})
    domain = Box([-0.125, -0.525], [0.125, 0.525])
    region = RegionSpec(
        domain=domain,
        inner=Box([-0.1, -0.5], [0.1, 0.5]),
        init=(PolySet.box([-0.03, -0.2], [0.03, 0.2]),),
        # first box reaches past X on axis 0; RegionSpec intersects with X
        unsafe=(
            PolySet.box([-0.5, -0.5], [-0.05, -0.3]),
            PolySet.box([0.05, 0.3], [0.1, 0.5]),
        ),
    )
    A, B, C = dc_motor_matrices(**prm)
    sys = linear_plant("dc_motor", A, B, C, [-1.0], [1.0], domain, params=prm)
    return sys, region


def pendulum(params=None, rho=0.02):
    """Damped pendulum with the angle measured; D is X inflated by ``rho``."""
    prm = {"m": 1.0, "l": 1.0, "b": 1.0, "g": 9.8}
    prm.update(params or {})
    deg = math.pi / 180.0
    inner = Box([-2.7 * deg, -0.5], [10.0 * deg, 0.5])
    domain = Box(inner.lo - rho, inner.hi + rho)
    region = RegionSpec(
        domain=domain,
        inner=inner,
        init=(PolySet.box([5 * deg, -0.3], [7 * deg, 0.3]),),
        safe=(PolySet.box([-1 * deg, -0.4], [8 * deg, 0.4]),),
    )
    mass, length, damp, grav = prm["m"], prm["l"], prm["b"], prm["g"]
    inertia = mass * length**2

    def f(x, u):
        return np.stack(
            [x[:, 1], u[:, 0] / inertia - grav / length * np.sin(x[:, 0]) - damp / inertia * x[:, 1]],
            axis=1,
        )

    bu = np.array([[0.0], [1.0 / inertia]])
    lo, hi = domain.lo, domain.hi
    # max |cos x1| over the angle interval
    if math.floor(lo[0] / math.pi) != math.floor(hi[0] / math.pi) or lo[0] % math.pi == 0:
        cmax = 1.0
    else:
        cmax = max(abs(math.cos(lo[0])), abs(math.cos(hi[0])))
    c, d = grav / length * cmax, damp / inertia
    # spectral norm of [[0, 1], [-c, -d]] is increasing in |c|
    L_x = float(np.linalg.norm(np.array([[0.0, 1.0], [-c, -d]]), 2))
    sin_rng = np.sin([lo[0], hi[0]])  # sin is monotone on |x1| < pi/2
    u_lb, u_ub = np.array([-1.0]), np.array([1.0])
    f2_max = u_ub[0] / inertia - grav / length * sin_rng.min() - d * lo[1]
    f2_min = u_lb[0] / inertia - grav / length * sin_rng.max() - d * hi[1]
    M_f = math.hypot(max(abs(lo[1]), abs(hi[1])), max(abs(f2_max), abs(f2_min)))
    sys = SystemModel(
        "pendulum", 2, 1, 1,
        f=f,
        h=lambda x: x[:, :1].copy(),
        jac_u=lambda x, u: np.broadcast_to(bu, (x.shape[0], 2, 1)),
        u_lb=u_lb, u_ub=u_ub,
        constants={"L_x": L_x, "L_u": 1.0 / inertia, "L_h": 1.0, "M_f": M_f,
                   "M_h": float(max(abs(lo[0]), abs(hi[0])))},
        params=prm,
    )
    return sys, region


def three_tank_coefficients(A=0.0154, S_n=5e-5, az=(0.5, 0.5, 0.5), g=9.81):
    """Torricelli outflow coefficients ``a_i = az_i * S_n * sqrt(2 g) / A``."""
    return [float(a * S_n * math.sqrt(2.0 * g) / A) for a in az]


def three_tank(params=None, sqrt_floor=1e-3):
    """Three coupled tanks; levels of tanks 1 and 2 are measured.

    The square-root flow law is not Lipschitz at zero head difference; L_x is
    reported for the part of D where every head difference and x3 is at least
    ``sqrt_floor``.
    """
    prm = {"A": 0.0154, "S_n": 5e-5, "az": [0.5, 0.5, 0.5], "g": 9.81}
    prm.update(params or {})
    a1, a2, a3 = prm.get("a") or three_tank_coefficients(prm["A"], prm["S_n"], prm["az"], prm["g"])
    area = prm["A"]
    prm.update({"a": [a1, a2, a3], "sqrt_floor": sqrt_floor})

    def f(x, u):
        d12 = x[:, 0] - x[:, 1]
        d23 = x[:, 1] - x[:, 2]
        q12 = a1 * np.sign(d12) * np.sqrt(np.abs(d12))
        q23 = a2 * np.sign(d23) * np.sqrt(np.abs(d23))
        return np.stack(
            [-q12 + u[:, 0] / area, q12 - q23, q23 - a3 * np.sqrt(x[:, 2]) + u[:, 1] / area], axis=1
        )

    domain = Box([0.0] * 3, [0.7] * 3)
    inner = Box([0.1] * 3, [0.63] * 3)
    # x2 < x1 is strict in the safe set
    safe = PolySet(
        A=[[0, -1, 0], [-1, 1, 0], [1, 0, 0], [0, 0, -1], [0, 0, 1]],
        b=[-0.2, 0.0, 0.63, -0.2, 0.63],
        strict=(False, True, False, False, False),
    )
    init = PolySet(
        A=[[0, -1, 0], [0, 1, 0], [-1, 1, 0], [1, 0, 0], [0, 0, -1], [0, 0, 1]],
        b=[-0.4, 0.5, -0.05, 0.55, -0.4, 0.5],
    )
    region = RegionSpec(domain, inner, (init,), safe=(safe,))
    bu = np.array([[1.0 / area, 0.0], [0.0, 0.0], [0.0, 1.0 / area]])
    c1, c2, c3 = (a / (2.0 * math.sqrt(sqrt_floor)) for a in (a1, a2, a3))
    # entrywise bound of |df/dx|; the spectral norm is monotone in nonnegative entries
    jmax = np.array([[c1, c1, 0.0], [c1, c1 + c2, c2], [0.0, c2, c2 + c3]])
    u_max = 1e-4
    span = 0.7
    M_f = math.sqrt(
        (a1 * math.sqrt(span) + u_max / area) ** 2
        + (a1 * math.sqrt(span) + a2 * math.sqrt(span)) ** 2
        + (a2 * math.sqrt(span) + a3 * math.sqrt(span) + u_max / area) ** 2
    )
    sys = SystemModel(
        "three_tank", 3, 2, 2,
        f=f,
        h=lambda x: x[:, :2].copy(),
        jac_u=lambda x, u: np.broadcast_to(bu, (x.shape[0], 3, 2)),
        u_lb=[0.0, 0.0], u_ub=[u_max, u_max],
        constants={"L_x": float(np.linalg.norm(jmax, 2)), "L_u": 1.0 / area, "L_h": 1.0,
                   "M_f": M_f, "M_h": span * math.sqrt(2.0)},
        constant_sources={"L_x": f"analytic on head differences >= {sqrt_floor}"},
        params=prm,
    )
    return sys, region


BENCHMARKS = {"dc_motor": dc_motor, "pendulum": pendulum, "three_tank": three_tank}
# physical parameters each factory accepts
BENCHMARK_PARAMS = {
    "dc_motor": ("R", "L", "K_dc", "J", "b"),
    "pendulum": ("m", "l", "b", "g"),
    "three_tank": ("A", "S_n", "az", "g"),
}


def benchmark(name, params=None):
    """Return ``(SystemModel, RegionSpec, (u_lb, u_ub))`` for a named benchmark."""
    try:
        factory = BENCHMARKS[name]
    except KeyError:
        raise ValueError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}") from None
    sys, region = factory(params)
    return sys, region, (sys.u_lb.copy(), sys.u_ub.copy())


# -- config files -----------------------------------------------------------


def plant_from_config(cfg: dict):
    """Build ``(SystemModel, RegionSpec)`` from a plant config mapping.

    ``kind`` is a benchmark name or ``"linear"`` (then ``params`` carries
    ``A``, ``B``, ``C``, ``u_lb``, ``u_ub`` and ``region`` is required).
    ``constants`` entries may override system constants as
    ``{"value": v, "source": "..."}``.
    """
    kind = cfg["kind"]
    params = dict(cfg.get("params", {}))
    if kind == "linear":
        region = RegionSpec.from_dict(cfg["region"])
        sys = linear_plant(
            cfg.get("name", "linear"), params["A"], params["B"], params["C"],
            params["u_lb"], params["u_ub"], region.domain,
        )
    else:
        if kind not in BENCHMARKS:
            raise ValueError(f"unknown plant kind {kind!r}")
        sys, region, _ = benchmark(kind, params)
        if "region" in cfg:
            region = RegionSpec.from_dict(cfg["region"])
    for name, entry in cfg.get("constants", {}).items():
        if name not in CONSTANT_NAMES:
            raise ValueError(f"unknown system constant {name!r}")
        if isinstance(entry, dict):
            sys.constants[name] = float(entry["value"])
            sys.constant_sources[name] = entry.get("source", "config")
        else:
            sys.constants[name] = float(entry)
            sys.constant_sources[name] = "config"
    region.check()
    return sys, region


def load_plant_config(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"plant config not found: {path}")
    return plant_from_config(json.loads(path.read_text()))


def plant_config_dict(sys: SystemModel, region: RegionSpec, kind=None):
    """A config mapping that rebuilds ``(sys, region)`` through :func:`plant_from_config`."""
    kind = kind or sys.name
    cfg = {"kind": kind, "region": region.to_dict(),
           "constants": {k: {"value": sys.constants[k], "source": sys.constant_sources.get(k, "analytic")}
                         for k in CONSTANT_NAMES}}
    if kind == "linear":
        cfg["params"] = {k: sys.params[k] for k in ("A", "B", "C")}
        cfg["params"].update({"u_lb": sys.u_lb.tolist(), "u_ub": sys.u_ub.tolist()})
    else:
        keys = BENCHMARK_PARAMS.get(kind, ())
        cfg["params"] = {k: sys.params[k] for k in keys if k in sys.params}
    return cfg
