"""Certificate check, brute-force grid oracle, closed-loop simulation and audit."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .lipschitz import LipschitzBundle, compute_l_max
from .losses import LossConfig, Nets, closed_loop, q_values
from .sampling import augmented_box, EpsilonGrid
from .systems import RegionSpec, SystemModel


@dataclass
class Certificate:
    eta_star: float
    eps: float
    L_max: float
    breakdown: dict
    margin: float
    verdict: str
    strict: bool = False
    tau: float = 0.0
    sources: dict = field(default_factory=dict)
    digests: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    oracle: dict | None = None

    @property
    def certified(self):
        return self.verdict == "certified"

    def to_dict(self):
        return {
            "eta_star": self.eta_star,
            "eps": self.eps,
            "L_max": self.L_max,
            "breakdown": self.breakdown,
            "margin": self.margin,
            "verdict": self.verdict,
            "strict": self.strict,
            "tau": self.tau,
            "sources": self.sources,
            "digests": self.digests,
            "notes": self.notes,
            "oracle": self.oracle,
        }


def check_certificate(eta_star, eps, bundle: LipschitzBundle, strict=False, tau=0.0, rho=None,
                      reference_margin=None):
    """Evaluate ``L_max * eps + eta_star <= 0``.

    In strict mode the residual loss tolerance ``tau`` is added to the margin.
    When ``rho`` is given, ``eps < rho`` is also required for a certificate.
    A ``reference_margin`` (e.g. a previously reported value) that disagrees
    with the computed margin is recorded in the notes; the computed value
    stands.
    """
    L_max, breakdown = compute_l_max(bundle)
    margin = L_max * eps + eta_star
    ok = margin <= 0.0 and (not strict or margin + tau <= 0.0)
    notes = []
    if rho is not None and not eps < rho:
        ok = False
        notes.append(f"eps={eps!r} is not below rho={rho!r}; the net does not support the validity argument")
    if reference_margin is not None and not math.isclose(margin, reference_margin, rel_tol=1e-9, abs_tol=1e-15):
        notes.append(f"reference margin {reference_margin!r} differs from computed margin {margin!r}")
    return Certificate(
        eta_star=float(eta_star), eps=float(eps), L_max=L_max, breakdown=breakdown, margin=margin,
        verdict="certified" if ok else "not_certified", strict=strict, tau=float(tau),
        sources=dict(bundle.sources), notes=notes,
    )


@dataclass
class OracleResult:
    maxima: tuple  # max q1 over X0xX0, max q2 over the augmented unsafe set, max q3 overall
    argmax: tuple
    n_samples: int
    eps: float

    def satisfied(self, eta, tol=0.0):
        return all(m <= eta + tol for m in self.maxima)

    def to_dict(self):
        return {
            "max_q": list(self.maxima),
            "argmax": [None if a is None else list(a) for a in self.argmax],
            "n_samples": self.n_samples,
            "eps": self.eps,
        }


def grid_oracle(nets: Nets, sys: SystemModel, region: RegionSpec, cfg: LossConfig, fine_eps,
                train_eps=None, max_samples=50_000_000, chunk=200_000):
    """Exhaustive evaluation of q1..q3 on a fresh epsilon-grid over D x D.

    Maxima are taken over the subsets where each condition applies; an
    empty subset reports ``-inf``.
    """
    if train_eps is not None and fine_eps > train_eps:
        raise ValueError(f"oracle eps {fine_eps} must not exceed the training eps {train_eps}")
    grid = EpsilonGrid.over(augmented_box(region), fine_eps)
    if grid.size > max_samples:
        raise ValueError(f"oracle grid would hold {grid.size} points (cap {max_samples})")
    best = [-math.inf] * 3
    where = [None] * 3
    for start in range(0, grid.size, chunk):
        flat = np.arange(start, min(start + chunk, grid.size))
        pts = grid.node(np.stack(np.unravel_index(flat, grid.counts), axis=1))
        q1, q2, q3, in_init, in_unsafe = q_values(pts, nets, sys, region, cfg)
        for k, (q, mask) in enumerate(((q1, in_init), (q2, in_unsafe), (q3, None))):
            vals = q if mask is None else np.where(mask, q, -np.inf)
            i = int(np.argmax(vals))
            if vals[i] > best[k]:
                best[k] = float(vals[i])
                where[k] = pts[i].tolist()
    return OracleResult(tuple(best), tuple(where), grid.size, float(fine_eps))


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    xhat: np.ndarray
    u: np.ndarray
    B: np.ndarray
    residual: np.ndarray  # dB/dt + alpha * B, i.e. -q3
    safe: np.ndarray  # x in X minus X_u and xhat in X
    in_domain: np.ndarray
    exited_domain: bool = False

    def to_csv(self, path, header_lines=()):
        n, m = self.x.shape[1], self.u.shape[1]
        cols = (["t"] + [f"x{i + 1}" for i in range(n)] + [f"xhat{i + 1}" for i in range(n)]
                + [f"u{i + 1}" for i in range(m)] + ["B", "residual", "safe"])
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(cols)
            for i in range(len(self.t)):
                row = [self.t[i], *self.x[i], *self.xhat[i], *self.u[i], self.B[i], self.residual[i]]
                w.writerow([repr(float(v)) for v in row] + [int(self.safe[i])])


def _field(nets, sys, x, xh, u_hold=None):
    if u_hold is None:
        u, fx, fo, _, _ = closed_loop(nets, sys, x, xh)
        return fx, fo, u
    with np.errstate(invalid="ignore"):
        fx = sys.f(x, u_hold)
    zo = np.concatenate([xh, u_hold, sys.h(x) - sys.h(xh)], axis=1)
    return fx, nets.observer.forward(zo), u_hold


def _record(nets, sys, region, cfg, x, xh):
    s = np.concatenate([x, xh], axis=1)
    fx, fo, u = _field(nets, sys, x, xh)
    b = nets.barrier.forward(s)[:, 0]
    grad = nets.barrier.input_gradient(s)
    n = sys.n
    resid = np.sum(grad[:, :n] * fx, axis=1) + np.sum(grad[:, n:] * fo, axis=1) + cfg.alpha * b
    safe = region.in_safe(x) & region.inner.contains(xh)
    dom = region.domain.contains(x) & region.domain.contains(xh)
    return u, b, resid, safe, dom


def simulate_batch(nets: Nets, sys: SystemModel, region: RegionSpec, x0, xh0, T, dt, cfg: LossConfig | None = None,
                   zoh_period=None, require_init=True):
    """RK4 integration of the augmented closed loop for a batch of initial pairs.

    The controller is re-evaluated inside every RK4 stage unless
    ``zoh_period`` is set, in which case ``u`` is held between samples.
    A trajectory whose state leaves D is frozen at the first outside point.
    """
    cfg = cfg or LossConfig()
    if not dt > 0 or not T > 0:
        raise ValueError("need dt > 0 and T > 0")
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64)).copy()
    xh = np.atleast_2d(np.asarray(xh0, dtype=np.float64)).copy()
    if require_init and not (np.all(region.in_init(x)) and np.all(region.in_init(xh))):
        raise ValueError("initial plant and observer states must lie in X0")
    n_steps = int(round(T / dt))
    N = x.shape[0]
    hold_every = None if zoh_period is None else max(1, int(round(zoh_period / dt)))
    rec = {k: [] for k in ("x", "xh", "u", "B", "r", "safe", "dom")}
    active = np.ones(N, dtype=bool)
    stop_len = np.full(N, n_steps + 1)
    u_hold = None
    for step in range(n_steps + 1):
        u, b, r, safe, dom = _record(nets, sys, region, cfg, x, xh)
        for k, v in zip(rec, (x.copy(), xh.copy(), u, b, r, safe, dom)):
            rec[k].append(v)
        newly_out = active & ~dom
        stop_len[newly_out] = step + 1
        active &= dom
        if step == n_steps or not active.any():
            break
        if hold_every is not None and step % hold_every == 0:
            u_hold = u
        xa, xha = x[active], xh[active]
        uh = None if u_hold is None else u_hold[active]

        def F(xx, hh):
            fx, fo, _ = _field(nets, sys, xx, hh, uh)
            return fx, fo

        k1x, k1h = F(xa, xha)
        k2x, k2h = F(xa + 0.5 * dt * k1x, xha + 0.5 * dt * k1h)
        k3x, k3h = F(xa + 0.5 * dt * k2x, xha + 0.5 * dt * k2h)
        k4x, k4h = F(xa + dt * k3x, xha + dt * k3h)
        x[active] = xa + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        xh[active] = xha + dt / 6.0 * (k1h + 2 * k2h + 2 * k3h + k4h)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xh))):
            bad = int(np.argmax(~(np.isfinite(x).all(1) & np.isfinite(xh).all(1))))
            raise FloatingPointError(f"non-finite state in trajectory {bad} at t={(step + 1) * dt}")
    arr = {k: np.stack(v, axis=0) for k, v in rec.items()}
    n_rec = arr["x"].shape[0]
    t = np.arange(n_rec) * dt
    out = []
    for i in range(N):
        L = min(stop_len[i], n_rec)
        out.append(Trajectory(
            t=t[:L], x=arr["x"][:L, i], xhat=arr["xh"][:L, i], u=arr["u"][:L, i], B=arr["B"][:L, i],
            residual=arr["r"][:L, i], safe=arr["safe"][:L, i], in_domain=arr["dom"][:L, i],
            exited_domain=bool(not arr["dom"][L - 1, i]),
        ))
    return out


def simulate(nets: Nets, sys: SystemModel, region: RegionSpec, x0, xh0, T, dt, cfg: LossConfig | None = None,
             zoh_period=None, require_init=True):
    """Single-trajectory form of :func:`simulate_batch`."""
    return simulate_batch(nets, sys, region, [x0], [xh0], T, dt, cfg, zoh_period, require_init)[0]


@dataclass
class AuditReport:
    checks: dict  # name -> {"passed": bool, "first_violation_t": float | None}
    tol: float

    @property
    def passed(self):
        return all(c["passed"] for c in self.checks.values())

    def to_dict(self):
        return {"passed": self.passed, "tol": self.tol, "checks": self.checks}


def _first(mask, t):
    idx = np.flatnonzero(mask)
    return None if idx.size == 0 else float(t[idx[0]])


def audit(traj: Trajectory, tol=None):
    """Barrier-condition audit of one trajectory.

    Checks: ``B(0) >= 0``; ``B(t) >= -tol``; ``dB/dt + alpha B >= -tol``;
    ``x`` stays in X minus X_u and ``xhat`` in X; the state stays in D.
    """
    if tol is None:
        tol = 1e-9 * (1.0 + abs(float(traj.B[0])))
    t = traj.t
    fails = {
        "initial_barrier_nonnegative": np.array([traj.B[0] < 0.0]),
        "barrier_nonnegative": traj.B < -tol,
        "derivative_condition": traj.residual < -tol,
        "state_safe": ~traj.safe,
        "stays_in_domain": ~traj.in_domain,
    }
    checks = {name: {"passed": not bool(m.any()), "first_violation_t": _first(m, t)} for name, m in fails.items()}
    return AuditReport(checks, float(tol))
