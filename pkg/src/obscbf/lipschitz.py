"""Sound Lipschitz and sup-norm bounds for the validity condition.

Network constants come from products of layer spectral norms (activation
slopes are at most 1 for Softplus, Tanh and the HardTanh clamp). This is
looser than an SDP-based estimate but never optimistic; tighter constants
computed elsewhere can be supplied through an overrides file.

Gradient Lipschitz bound (``L_dB``) of a scalar network
``B = w_L sigma(W_{L-1} ... sigma(W_0 z))``. Write the backward vectors
``v_{L-1} = w_L^T`` and ``v_k = W_k^T D_k v_{k+1}`` with
``D_k = diag(sigma'(pre_k))``, so that ``grad B = v_0``. With ``M_k`` the
Lipschitz bound of the k-th activation vector (``M_0 = 1``,
``M_{k+1} = M_k ||W_k||``), ``s2 = sup|sigma''|`` and ``G_k`` a Lipschitz
bound of ``v_k``::

    G_{L-1} = 0
    G_k     = ||W_k|| * (s2 * M_k * min(Vinf_{k+1} ||W_k||, V2_{k+1} r(W_k)) + G_{k+1})

where ``r(W)`` is the largest row 2-norm, ``V2`` and ``Vinf`` bound the 2- and
inf-norms of ``v`` over all inputs::

    V2_k   = ||W_k|| V2_{k+1}
    Vinf_k = min(c1(W_k) Vinf_{k+1}, c2(W_k) V2_{k+1})

and ``c1``/``c2`` are the largest column 1-/2-norms. The min picks the
tighter of two valid estimates of ``||(D_k - D_k') v_{k+1}||``. For one
hidden layer this is at most ``s2 ||w_2||_inf ||W_0||^2``. ``L_dB = G_0``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import SECOND_DERIVATIVE_BOUND, Mlp
from .systems import Box, RegionSpec, SystemModel, output_box

# relative padding on the power-iteration estimate, which converges from below
POWER_ITERATION_PAD = 1e-6


def spectral_norm(W, tol=1e-9, max_iter=100_000):
    """Largest singular value by power iteration on ``W^T W``.

    The start vector is fixed, so the result is deterministic.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if not np.any(W):
        return 0.0
    v = np.random.default_rng(12345).standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = W @ v
        new_sigma = float(np.linalg.norm(w))
        v = W.T @ w
        nv = np.linalg.norm(v)
        if nv == 0.0:
            # start vector fell in the null space; restart from a fixed alternative
            v = np.full(W.shape[1], 1.0 / math.sqrt(W.shape[1]))
            sigma = 0.0
            continue
        v /= nv
        if abs(new_sigma - sigma) <= tol * new_sigma:
            return new_sigma * (1.0 + POWER_ITERATION_PAD)
        sigma = new_sigma
    raise RuntimeError(f"power iteration did not converge in {max_iter} iterations")


def mlp_lipschitz(net: Mlp):
    """Upper bound on the global Lipschitz constant (2-norm) of ``net``."""
    return float(math.prod(spectral_norm(w) for w in net.weights))


def gradient_lipschitz_bound(net: Mlp):
    """Upper bound on the Lipschitz constant of the input gradient of a scalar net."""
    if net.out_dim != 1 or net.clamped:
        raise ValueError("gradient bound needs a scalar-output network without clamp")
    if net.activation not in SECOND_DERIVATIVE_BOUND:
        raise ValueError(f"activation {net.activation!r} is not twice differentiable")
    Ws = net.weights
    if len(Ws) == 1:
        return 0.0
    s2 = SECOND_DERIVATIVE_BOUND[net.activation]
    norms = [spectral_norm(w) for w in Ws]
    M = [1.0]
    for k in range(len(Ws) - 1):
        M.append(M[-1] * norms[k])
    last = Ws[-1].reshape(-1)
    v2, vinf = float(np.linalg.norm(last)), float(np.max(np.abs(last)))
    G = 0.0
    for k in range(len(Ws) - 2, -1, -1):
        W = Ws[k]
        row2 = float(np.max(np.linalg.norm(W, axis=1)))
        col1 = float(np.max(np.sum(np.abs(W), axis=0)))
        col2 = float(np.max(np.linalg.norm(W, axis=0)))
        G = norms[k] * (s2 * M[k] * min(vinf * norms[k], v2 * row2) + G)
        vinf = min(col1 * vinf, col2 * v2)
        v2 = norms[k] * v2
    return float(G)


def sup_gradient_bound(net: Mlp):
    """``sup ||grad net||`` is at most the global Lipschitz constant."""
    return mlp_lipschitz(net)


def sup_output_bound(net: Mlp, box: Box):
    """``sup ||net(z)||`` over ``box``: value at the centre plus L times the half-diagonal."""
    center = net.forward(box.center)
    return float(np.linalg.norm(center)) + mlp_lipschitz(net) * box.half_diagonal


def sup_bounds(net: Mlp, box: Box | None = None):
    """M_B for a scalar barrier (``box`` unused) or M_o for a vector net over ``box``."""
    if box is None:
        return sup_gradient_bound(net)
    return sup_output_bound(net, box)


def observer_input_box(sys: SystemModel, region: RegionSpec):
    """Box holding every observer input ``(xhat, u, y - yhat)`` with states in D."""
    ybox = output_box(sys, region.domain)
    span = ybox.hi - ybox.lo
    return Box(
        np.concatenate([region.domain.lo, sys.u_lb, -span]),
        np.concatenate([region.domain.hi, sys.u_ub, span]),
    )


BUNDLE_FIELDS = ("L_b", "L_dB", "L_c", "L_o", "M_B", "M_o", "L_x", "L_u", "L_h", "M_f", "M_h", "alpha")


@dataclass
class LipschitzBundle:
    L_b: float
    L_dB: float
    L_c: float
    L_o: float
    M_B: float
    M_o: float
    L_x: float
    L_u: float
    L_h: float
    M_f: float
    M_h: float
    alpha: float
    L_max_override: float | None = None
    sources: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def compute_l_max(bundle: LipschitzBundle):
    """Composite constant of the three constraint functions.

    Returns ``(L_max, breakdown)``; ``breakdown`` holds ``L1 = L2 = L_b``,
    ``L3`` and the five summands of ``L3``. With ``L_max_override`` set the
    individual constants may be missing, and the breakdown is then ``None``.
    """
    vals = {}
    for name in BUNDLE_FIELDS:
        v = getattr(bundle, name)
        if v is None or not math.isfinite(v):
            if bundle.L_max_override is not None:
                return float(bundle.L_max_override), None
            raise ValueError(f"bundle constant {name} is missing or non-finite")
        vals[name] = float(v)
    b = vals
    terms = {
        "M_f*L_dB": b["M_f"] * b["L_dB"],
        "M_B*(L_x+L_u*L_c)": b["M_B"] * (b["L_x"] + b["L_u"] * b["L_c"]),
        "M_B*L_o*sqrt(1+L_c^2+2*M_h^2)": b["M_B"] * b["L_o"] * math.sqrt(1.0 + b["L_c"] ** 2 + 2.0 * b["M_h"] ** 2),
        "M_o*L_dB": b["M_o"] * b["L_dB"],
        "alpha*L_b": b["alpha"] * b["L_b"],
    }
    L3 = sum(terms.values())
    L_max = max(b["L_b"], L3)
    if bundle.L_max_override is not None:
        L_max = float(bundle.L_max_override)
    return L_max, {"L1": b["L_b"], "L2": b["L_b"], "L3": L3, "terms": terms}


def compute_bundle(nets, sys: SystemModel, region: RegionSpec, alpha, overrides=None):
    """Evaluate every constant for the current networks and plant."""
    vals = {
        "L_b": mlp_lipschitz(nets.barrier),
        "L_dB": gradient_lipschitz_bound(nets.barrier),
        "L_c": mlp_lipschitz(nets.controller),
        "L_o": mlp_lipschitz(nets.observer),
        "M_B": sup_gradient_bound(nets.barrier),
        "M_o": sup_output_bound(nets.observer, observer_input_box(sys, region)),
        "alpha": float(alpha),
    }
    sources = {k: "internal" for k in vals}
    for k in ("L_x", "L_u", "L_h", "M_f", "M_h"):
        vals[k] = float(sys.constants[k])
        sources[k] = sys.constant_sources.get(k, "analytic")
    bundle = LipschitzBundle(**vals, sources=sources)
    if overrides:
        apply_overrides(bundle, overrides)
    return bundle


def apply_overrides(bundle: LipschitzBundle, overrides: dict):
    """Replace constants with externally computed ones.

    ``overrides`` maps a bundle field (or ``"L_max"``) to
    ``{"value": v, "source": "..."}`` or a bare number.
    """
    for name, entry in overrides.items():
        value, source = (entry["value"], entry.get("source", "override")) if isinstance(entry, dict) else (entry, "override")
        if name == "L_max":
            bundle.L_max_override = float(value)
        elif name in BUNDLE_FIELDS:
            setattr(bundle, name, float(value))
        else:
            raise ValueError(f"unknown override {name!r}")
        bundle.sources[name] = f"override: {source}"
    return bundle


def load_overrides(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"overrides file not found: {path}")
    data = json.loads(path.read_text())
    return data.get("constants", data)
