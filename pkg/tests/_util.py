"""Shared fixtures-as-functions for the test modules."""
import numpy as np

from obscbf.losses import Nets
from obscbf.nn import Mlp
from obscbf.systems import plant_from_config


def random_nets(sys, rng, hidden=(8,), activation="softplus", scale=1.0):
    n, m, p = sys.n, sys.m, sys.p
    b = Mlp.init([2 * n, *hidden, 1], activation, rng=rng)
    c = Mlp.init([n, *hidden, m], activation, lb=sys.u_lb, ub=sys.u_ub, rng=rng)
    o = Mlp.init([n + m + p, *hidden, n], activation, rng=rng)
    for net in (b, c, o):
        for w in net.weights:
            w *= scale
    return Nets(b, c, o)


def constant_mlp(in_dim, value, out_dim=1, lb=None, ub=None):
    """Single affine layer with zero weights: output is ``value`` everywhere."""
    value = np.broadcast_to(np.asarray(value, dtype=np.float64), (out_dim,))
    return Mlp([in_dim, out_dim], [np.zeros((out_dim, in_dim))], [value.copy()], lb=lb, ub=ub)


def affine_mlp(W, b, lb=None, ub=None):
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    return Mlp([W.shape[1], W.shape[0]], [W], [np.asarray(b, dtype=np.float64)], lb=lb, ub=ub)


def integrator_plant(a=0.0, half=1.0, inner=0.8, init=0.2):
    """Scalar plant ``xdot = a x + u`` with full output, on D = [-half, half]."""
    cfg = {
        "kind": "linear",
        "params": {"A": [[a]], "B": [[1.0]], "C": [[1.0]], "u_lb": [-1.0], "u_ub": [1.0]},
        "region": {
            "domain": {"lo": [-half], "hi": [half]},
            "inner": {"lo": [-inner], "hi": [inner]},
            "init": [{"box": {"lo": [-init], "hi": [init]}}],
            "unsafe": [],
        },
    }
    return plant_from_config(cfg)
