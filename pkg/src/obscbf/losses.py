"""Constraint functions q1..q3 and the training losses.

For an augmented sample ``s = (x, xhat)``::

    q1 = -B(s)                       on X0 x X0
    q2 =  B(s) + delta               on the augmented unsafe set
    q3 = -dB/dx f(x, g(xhat)) - dB/dxhat fhat(xhat, g(xhat), h(x) - h(xhat)) - alpha B(s)

The hinge losses are ``sum ReLU(q_k - eta)`` over the matching subsets, so a
zero loss at margin ``eta`` is the same statement as ``max q_k <= eta``.

Two evaluation routes exist on purpose. :func:`q_values` and :func:`eval_q`
take the barrier gradient by reverse accumulation; the training path in
:func:`loss_and_grads` takes the Lie derivative in forward mode
(:meth:`Mlp.jvp`). They agree to rounding and check each other.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .nn import Mlp
from .systems import RegionSpec, SystemModel


@dataclass
class LossConfig:
    k1: float = 1.0
    k2: float = 1.0
    k3: float = 1.0
    k4: float = 1.0
    delta: float = 0.01
    alpha: float = 0.1  # alpha(b) = alpha * b
    beta: float = 0.1
    mean: bool = False  # divide each sum by its subset size
    obs_hinge: bool = False  # ReLU on each observer term (off = literal sum)
    hinge_power: int = 1  # 2: gradients follow the squared hinge (same zero set, no kinks)

    def __post_init__(self):
        if min(self.k1, self.k2, self.k3, self.k4) <= 0:
            raise ValueError("loss weights must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.alpha < 0 or not self.beta > 0:
            raise ValueError("need alpha >= 0 and beta > 0")
        if self.hinge_power not in (1, 2):
            raise ValueError("hinge_power must be 1 or 2")


@dataclass
class Nets:
    barrier: Mlp
    controller: Mlp
    observer: Mlp

    def copy(self):
        return Nets(self.barrier.copy(), self.controller.copy(), self.observer.copy())

    def check(self, sys: SystemModel):
        n, m, p = sys.n, sys.m, sys.p
        if self.barrier.in_dim != 2 * n or self.barrier.out_dim != 1 or self.barrier.clamped:
            raise ValueError(f"barrier must map R^{2 * n} -> R without clamp")
        if self.controller.in_dim != n or self.controller.out_dim != m:
            raise ValueError(f"controller must map R^{n} -> R^{m}")
        if self.observer.in_dim != n + m + p or self.observer.out_dim != n:
            raise ValueError(f"observer must map R^{n + m + p} -> R^{n}")


@dataclass
class LossReport:
    L1: float
    L2: float
    L3: float
    L4: float
    L_cbf: float
    L_obs: float
    L_p: float = float("nan")
    max_q: tuple = (float("nan"),) * 3  # per-k maxima over the relevant subsets
    objective: float = float("nan")  # value whose gradient is returned (differs from L_cbf + L_obs if hinge_power=2)

    @property
    def max_violation(self):
        return max(self.max_q)


def relu(z):
    return np.maximum(z, 0.0)


def tree_sum(terms):
    """Order-independent deterministic sum: sort, then pairwise-sum."""
    terms = np.asarray(terms, dtype=np.float64).reshape(-1)
    if terms.size == 0:
        return 0.0
    return float(np.sum(np.sort(terms)))


def _max_or_ninf(a):
    return float(np.max(a)) if a.size else float("-inf")


def closed_loop(nets: Nets, sys: SystemModel, x, xh):
    """Control, plant derivative, innovation and observer derivative for a batch."""
    u, ccache = nets.controller.forward_cached(xh)
    with np.errstate(invalid="ignore"):
        fx = sys.f(x, u)
    innov = sys.h(x) - sys.h(xh)
    zo = np.concatenate([xh, u, innov], axis=1)
    fo, ocache = nets.observer.forward_cached(zo)
    return u, fx, fo, ccache, ocache


def _check_finite(arr, samples, what):
    bad = ~np.isfinite(arr)
    if bad.ndim > 1:
        bad = bad.any(axis=1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise FloatingPointError(f"non-finite {what} at sample {np.asarray(samples)[i].tolist()}")


def q_values(samples, nets: Nets, sys: SystemModel, region: RegionSpec, cfg: LossConfig, labels=None):
    """``(q1, q2, q3, in_init, in_unsafe)`` for a batch, barrier gradient by reverse mode.

    q1 and q2 carry the indicator factors, so they are 0 off their subsets.
    """
    s = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = sys.n
    in_init, in_unsafe = labels if labels is not None else region.membership(s)
    x, xh = s[:, :n], s[:, n:]
    _, fx, fo, _, _ = closed_loop(nets, sys, x, xh)
    bval = nets.barrier.forward(s)[:, 0]
    grad = nets.barrier.input_gradient(s)
    bdot = np.sum(grad[:, :n] * fx, axis=1) + np.sum(grad[:, n:] * fo, axis=1)
    q1 = np.where(in_init, -bval, 0.0)
    q2 = np.where(in_unsafe, bval + cfg.delta, 0.0)
    q3 = -bdot - cfg.alpha * bval
    _check_finite(q3, s, "q3")
    return q1, q2, q3, in_init, in_unsafe


def eval_q(k, s, nets: Nets, sys: SystemModel, region: RegionSpec, cfg: LossConfig):
    """Single-sample ``q_k(s)`` for ``k`` in {1, 2, 3}."""
    if k not in (1, 2, 3):
        raise ValueError("k must be 1, 2 or 3")
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    n = sys.n
    if s.shape != (2 * n,):
        raise ValueError(f"augmented point must have length {2 * n}")
    b = float(nets.barrier.forward(s)[0])
    if k == 1:
        in_init, _ = region.membership(s[None])
        return -b if in_init[0] else 0.0
    if k == 2:
        _, in_unsafe = region.membership(s[None])
        return b + cfg.delta if in_unsafe[0] else 0.0
    x, xh = s[:n], s[n:]
    u = nets.controller.forward(xh)
    fx = sys.f(x[None], u[None])[0]
    zo = np.concatenate([xh, u, sys.h(x[None])[0] - sys.h(xh[None])[0]])
    fo = nets.observer.forward(zo)
    grad = nets.barrier.input_gradient(s)
    q = -float(grad[:n] @ fx) - float(grad[n:] @ fo) - cfg.alpha * b
    if not math.isfinite(q):
        raise FloatingPointError(f"non-finite q3 at sample {s.tolist()}")
    return q


def loss_p(eta, L_max, eps):
    """Validity loss ``ReLU(L_max * eps + eta)``."""
    if L_max < 0 or not eps > 0:
        raise ValueError("need L_max >= 0 and eps > 0")
    return max(L_max * eps + eta, 0.0)


def _subset_scale(cfg, count):
    return 1.0 / count if (cfg.mean and count) else 1.0


def loss_and_grads(samples, in_init, in_unsafe, nets: Nets, sys: SystemModel, cfg: LossConfig, eta,
                   need_grads=True):
    """Losses over a batch and their gradients w.r.t. all three networks.

    Returns ``(report, grads)`` where ``grads`` maps ``"barrier"``,
    ``"controller"`` and ``"observer"`` to lists aligned with ``Mlp.params``
    (``None`` when ``need_grads`` is false). The gradient is that of
    ``report.objective``; ReLU kinks take subgradient 0.
    """
    s = np.asarray(samples, dtype=np.float64)
    n = sys.n
    x, xh = s[:, :n], s[:, n:]
    u, fx, fo, ccache, ocache = closed_loop(nets, sys, x, xh)
    v = np.concatenate([fx, fo], axis=1)
    bval, bdot, bcache = nets.barrier.jvp(s, v)

    q1 = -bval
    q2 = bval + cfg.delta
    q3 = -bdot - cfg.alpha * bval
    _check_finite(q3, s, "q3")
    e = x - xh
    obs_terms = np.sum(e * (fx - fo), axis=1) + 0.5 * cfg.beta * np.sum(e * e, axis=1)
    _check_finite(obs_terms, s, "observer loss")
    if cfg.obs_hinge:
        obs_terms_used = relu(obs_terms)
    else:
        obs_terms_used = obs_terms

    n_init, n_unsafe, n_all = int(in_init.sum()), int(in_unsafe.sum()), s.shape[0]
    w1, w2 = _subset_scale(cfg, n_init), _subset_scale(cfg, n_unsafe)
    w3 = w4 = _subset_scale(cfg, n_all)
    h1 = relu(q1[in_init] - eta)
    h2 = relu(q2[in_unsafe] - eta)
    h3 = relu(q3 - eta)
    L1, L2, L3 = w1 * tree_sum(h1), w2 * tree_sum(h2), w3 * tree_sum(h3)
    L4 = w4 * tree_sum(obs_terms_used)
    L_cbf = cfg.k1 * L1 + cfg.k2 * L2 + cfg.k3 * L3
    L_obs = cfg.k4 * L4
    if cfg.hinge_power == 2:
        objective = (cfg.k1 * w1 * tree_sum(h1 * h1) + cfg.k2 * w2 * tree_sum(h2 * h2)
                     + cfg.k3 * w3 * tree_sum(h3 * h3) + L_obs)
    else:
        objective = L_cbf + L_obs
    report = LossReport(
        L1, L2, L3, L4, L_cbf, L_obs,
        max_q=(_max_or_ninf(q1[in_init]), _max_or_ninf(q2[in_unsafe]), _max_or_ninf(q3)),
        objective=objective,
    )
    if not need_grads:
        return report, None

    if cfg.hinge_power == 2:
        a1 = np.zeros(n_all)
        a2 = np.zeros(n_all)
        a1[in_init] = 2.0 * cfg.k1 * w1 * h1
        a2[in_unsafe] = 2.0 * cfg.k2 * w2 * h2
        a3 = 2.0 * cfg.k3 * w3 * h3
    else:
        a1 = cfg.k1 * w1 * (in_init & (q1 - eta > 0))
        a2 = cfg.k2 * w2 * (in_unsafe & (q2 - eta > 0))
        a3 = cfg.k3 * w3 * (q3 - eta > 0)
    bbar = -a1 + a2 - cfg.alpha * a3
    bdotbar = -a3
    gb, vbar = nets.barrier.jvp_backward(bcache, bbar, bdotbar)

    act4 = cfg.k4 * w4 * ((obs_terms > 0) if cfg.obs_hinge else np.ones(n_all))
    fxbar = vbar[:, :n] + act4[:, None] * e
    fobar = vbar[:, n:] - act4[:, None] * e
    go, zobar = nets.observer.backward(ocache, fobar)
    ubar = zobar[:, n:n + sys.m] + np.einsum("ni,nij->nj", fxbar, sys.jac_u(x, u))
    gc, _ = nets.controller.backward(ccache, ubar)
    return report, {"barrier": gb, "controller": gc, "observer": go}


def evaluate(dataset, nets: Nets, sys: SystemModel, cfg: LossConfig, eta, batch=65536):
    """Full-dataset :class:`LossReport` (no gradients), chunked for memory."""
    if not dataset.in_init.any():
        warnings.warn("empty initial subset; L1 is trivially zero", stacklevel=2)
    if not dataset.in_unsafe.any():
        warnings.warn("empty unsafe subset; L2 is trivially zero", stacklevel=2)
    if len(dataset) <= batch:
        rep, _ = loss_and_grads(dataset.samples, dataset.in_init, dataset.in_unsafe, nets, sys, cfg, eta,
                                need_grads=False)
        return rep
    # chunked: collect raw hinge terms so the reduction matches the one-shot path
    parts = {"h1": [], "h2": [], "h3": [], "h4": [], "q1": [], "q2": [], "q3": []}
    sub = LossConfig(**{**cfg.__dict__, "mean": False})
    for i in range(0, len(dataset), batch):
        sl = slice(i, i + batch)
        _collect(parts, dataset.samples[sl], dataset.in_init[sl], dataset.in_unsafe[sl], nets, sys, sub, eta)
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    n_init, n_unsafe, n_all = int(dataset.in_init.sum()), int(dataset.in_unsafe.sum()), len(dataset)
    L1 = _subset_scale(cfg, n_init) * tree_sum(cat["h1"])
    L2 = _subset_scale(cfg, n_unsafe) * tree_sum(cat["h2"])
    L3 = _subset_scale(cfg, n_all) * tree_sum(cat["h3"])
    L4 = _subset_scale(cfg, n_all) * tree_sum(cat["h4"])
    return LossReport(
        L1, L2, L3, L4, cfg.k1 * L1 + cfg.k2 * L2 + cfg.k3 * L3, cfg.k4 * L4,
        max_q=(_max_or_ninf(cat["q1"]), _max_or_ninf(cat["q2"]), _max_or_ninf(cat["q3"])),
    )


def _collect(parts, s, in_init, in_unsafe, nets, sys, cfg, eta):
    n = sys.n
    x, xh = s[:, :n], s[:, n:]
    _, fx, fo, _, _ = closed_loop(nets, sys, x, xh)
    bval, bdot, _ = nets.barrier.jvp(s, np.concatenate([fx, fo], axis=1))
    q1, q2, q3 = -bval[in_init], bval[in_unsafe] + cfg.delta, -bdot - cfg.alpha * bval
    _check_finite(q3, s, "q3")
    e = x - xh
    t4 = np.sum(e * (fx - fo), axis=1) + 0.5 * cfg.beta * np.sum(e * e, axis=1)
    parts["h1"].append(relu(q1 - eta))
    parts["h2"].append(relu(q2 - eta))
    parts["h3"].append(relu(q3 - eta))
    parts["h4"].append(relu(t4) if cfg.obs_hinge else t4)
    parts["q1"].append(q1)
    parts["q2"].append(q2)
    parts["q3"].append(q3)


def loss_cbf(dataset, nets: Nets, sys: SystemModel, cfg: LossConfig, eta):
    """``(L1, L2, L3, L_cbf)`` over the full labeled dataset."""
    rep = evaluate(dataset, nets, sys, cfg, eta)
    return rep.L1, rep.L2, rep.L3, rep.L_cbf


def loss_obs(dataset, nets: Nets, sys: SystemModel, cfg: LossConfig):
    """``(L4, L_obs)`` over the full dataset."""
    rep = evaluate(dataset, nets, sys, cfg, 0.0)
    return rep.L4, rep.L_obs
