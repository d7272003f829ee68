"""Dense feed-forward networks in NumPy.

All three learned objects (barrier, controller, observer) are instances of
:class:`Mlp`. Inputs may be a single vector of shape ``(d,)`` or a batch of
shape ``(N, d)``; outputs follow the same convention.

Besides plain forward/backward passes the network supports a forward-mode
directional derivative (:meth:`Mlp.jvp`) together with its reverse pass
(:meth:`Mlp.jvp_backward`). The barrier's Lie derivative along the augmented
vector field is exactly such a directional derivative, and training needs its
gradient with respect to the barrier weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("softplus", "tanh")

# sup |sigma''| per activation
SECOND_DERIVATIVE_BOUND = {
    "softplus": 0.25,
    "tanh": 4.0 / (3.0 * np.sqrt(3.0)),
}


def softplus(z):
    # stable for large |z|
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def activate(name, z, order=1):
    """Activation and its derivatives up to ``order`` as a tuple."""
    if name == "softplus":
        e = np.exp(-np.abs(z))
        a = np.maximum(z, 0.0) + np.log1p(e)
        if order == 0:
            return (a,)
        r = 1.0 / (1.0 + e)
        d1 = np.where(z >= 0.0, r, e * r)
        if order == 1:
            return a, d1
        return a, d1, d1 * (1.0 - d1)
    a = np.tanh(z)
    if order == 0:
        return (a,)
    d1 = 1.0 - a * a
    if order == 1:
        return a, d1
    return a, d1, -2.0 * a * d1


@dataclass
class Mlp:
    """Fully connected network ``z_{k+1} = sigma(W_k z_k + b_k)``.

    The last layer is affine. With ``lb``/``ub`` set, its output is passed
    through a HardTanh clamp so that ``lb <= y <= ub`` holds for every input.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "softplus"
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"layer_dims must hold >= 2 positive ints, got {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in self.biases]
        n_layers = len(self.layer_dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ValueError(f"expected {n_layers} weight/bias pairs")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[k + 1], self.layer_dims[k])
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(
                    f"layer {k}: weight {w.shape} / bias {b.shape}, expected {shape} / ({shape[0]},)"
                )
        if (self.lb is None) != (self.ub is None):
            raise ValueError("lb and ub must be given together")
        if self.lb is not None:
            self.lb = np.array(self.lb, dtype=np.float64).reshape(-1)
            self.ub = np.array(self.ub, dtype=np.float64).reshape(-1)
            if self.lb.shape != (self.out_dim,) or self.ub.shape != (self.out_dim,):
                raise ValueError("clamp bounds must match the output dimension")
            if not np.all(self.lb < self.ub):
                raise ValueError("clamp requires lb < ub element-wise")

    @classmethod
    def init(cls, layer_dims, activation="softplus", lb=None, ub=None, rng=None, input_scale=None):
        """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialization.

        ``input_scale`` (one positive entry per input) divides the columns of
        the first weight matrix, so inputs of that typical magnitude reach the
        first activation at unit scale.
        """
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = np.sqrt(1.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        if input_scale is not None:
            scale = np.asarray(input_scale, dtype=np.float64).reshape(-1)
            if scale.shape != (layer_dims[0],) or not np.all(scale > 0):
                raise ValueError("input_scale needs one positive entry per input")
            weights[0] = weights[0] / scale
        return cls(list(layer_dims), weights, biases, activation, lb, ub)

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    @property
    def clamped(self):
        return self.lb is not None

    @property
    def params(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live parameter arrays."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        return Mlp(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            None if self.lb is None else self.lb.copy(),
            None if self.ub is None else self.ub.copy(),
        )

    # -- evaluation -------------------------------------------------------

    def _as_batch(self, x, dim, what="input"):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if xb.ndim != 2 or xb.shape[1] != dim:
            raise ValueError(f"{what} has shape {x.shape}; expected (..., {dim})")
        return xb, single

    def _forward(self, xb, order=1):
        acts, pres, d1s = [xb], [], []
        a = xb
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            pres.append(z)
            if k == last:
                a = z
            else:
                vals = activate(self.activation, z, order)
                a = vals[0]
                acts.append(a)
                if order:
                    d1s.append(vals[1])
        out = a
        if self.clamped:
            out = np.clip(out, self.lb, self.ub)
        return out, {"acts": acts, "pres": pres, "d1": d1s}

    def forward(self, x):
        xb, single = self._as_batch(x, self.in_dim)
        out, _ = self._forward(xb, order=0)
        return out[0] if single else out

    __call__ = forward

    def forward_cached(self, x):
        """Forward pass on a batch, also returning the cache for :meth:`backward`."""
        xb, _ = self._as_batch(x, self.in_dim)
        return self._forward(xb)

    def backward(self, cache, upstream):
        """Reverse pass for ``sum_i <upstream_i, y_i>``.

        Returns ``(grads, input_grad)`` with ``grads`` aligned to
        :attr:`params`. The clamp passes gradient where
        ``lb <= pre-clamp <= ub`` (boundary included) and blocks it elsewhere.
        """
        acts, pres = cache["acts"], cache["pres"]
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != pres[-1].shape:
            raise ValueError(f"upstream has shape {g.shape}; expected {pres[-1].shape}")
        if self.clamped:
            z = pres[-1]
            g = g * ((z >= self.lb) & (z <= self.ub))
        n_layers = len(self.weights)
        grads = [None] * (2 * n_layers)
        for k in range(n_layers - 1, -1, -1):
            if k != n_layers - 1:
                g = g * cache["d1"][k]
            grads[2 * k] = g.T @ acts[k]
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.weights[k]
        return grads, g

    def param_gradients(self, upstream, x):
        """Gradients of ``<upstream, forward(x)>`` for every weight and bias.

        For a batch, contributions of all rows are summed.
        """
        xb, single = self._as_batch(x, self.in_dim)
        up = np.asarray(upstream, dtype=np.float64)
        up = up[None, :] if single else up
        if up.shape != (xb.shape[0], self.out_dim):
            raise ValueError(f"upstream has shape {np.shape(upstream)}; expected output dim {self.out_dim}")
        _, cache = self._forward(xb)
        grads, _ = self.backward(cache, up)
        return grads

    def input_gradient(self, x):
        """Exact gradient of a scalar, unclamped network w.r.t. its input."""
        if self.out_dim != 1 or self.clamped:
            raise ValueError("input_gradient needs a scalar-output network without clamp")
        xb, single = self._as_batch(x, self.in_dim)
        _, cache = self._forward(xb)
        _, grad = self.backward(cache, np.ones((xb.shape[0], 1)))
        return grad[0] if single else grad

    def jvp(self, x, v):
        """Value and directional derivative ``dB(x)[v]`` of a scalar network.

        Returns ``(y, ydot, cache)`` for batches ``x``, ``v`` of shape (N, d).
        """
        if self.out_dim != 1 or self.clamped:
            raise ValueError("jvp needs a scalar-output network without clamp")
        xb, _ = self._as_batch(x, self.in_dim)
        vb, _ = self._as_batch(v, self.in_dim, "direction")
        acts, tans, tpres, d1s, d2s = [xb], [vb], [], [], []
        a, t = xb, vb
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            tz = t @ w.T
            tpres.append(tz)
            if k == last:
                a, t = z, tz
            else:
                a, d1, d2 = activate(self.activation, z, order=2)
                t = d1 * tz
                acts.append(a)
                tans.append(t)
                d1s.append(d1)
                d2s.append(d2)
        cache = {"acts": acts, "tans": tans, "tpres": tpres, "d1": d1s, "d2": d2s}
        return a[:, 0], t[:, 0], cache

    def jvp_backward(self, cache, ybar, ydotbar):
        """Reverse pass of :meth:`jvp` for ``sum(ybar*y + ydotbar*ydot)``.

        Returns ``(grads, vbar)`` where ``vbar`` is the gradient with respect
        to the direction ``v``. Gradients flowing into ``x`` are not needed by
        the callers and are not returned.
        """
        acts, tans, tpres = cache["acts"], cache["tans"], cache["tpres"]
        n_layers = len(self.weights)
        abar = np.asarray(ybar, dtype=np.float64).reshape(-1, 1)
        tbar = np.asarray(ydotbar, dtype=np.float64).reshape(-1, 1)
        grads = [None] * (2 * n_layers)
        for k in range(n_layers - 1, -1, -1):
            w = self.weights[k]
            if k == n_layers - 1:
                zbar, tzbar = abar, tbar
            else:
                d1, d2 = cache["d1"][k], cache["d2"][k]
                tzbar = tbar * d1
                zbar = abar * d1 + tbar * tpres[k] * d2
            grads[2 * k] = zbar.T @ acts[k] + tzbar.T @ tans[k]
            grads[2 * k + 1] = zbar.sum(axis=0)
            tbar = tzbar @ w
            abar = zbar @ w
        return grads, tbar

    # -- serialization ----------------------------------------------------

    def to_dict(self):
        return {
            "layer_dims": list(self.layer_dims),
            "activation": self.activation,
            "output_transform": "hardtanh" if self.clamped else "linear",
            "lb": None if self.lb is None else self.lb.tolist(),
            "ub": None if self.ub is None else self.ub.tolist(),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        transform = d.get("output_transform", "linear")
        if transform not in ("linear", "hardtanh"):
            raise ValueError(f"unknown output transform {transform!r}")
        lb = d.get("lb") if transform == "hardtanh" else None
        ub = d.get("ub") if transform == "hardtanh" else None
        return cls(d["layer_dims"], d["weights"], d["biases"], d.get("activation", "softplus"), lb, ub)

    def to_json(self):
        # float repr is the shortest string that round-trips exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class Adam:
    """Bias-corrected Adam over a fixed list of parameter arrays."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def step(self, params, grads):
        """Update ``params`` in place."""
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        for p, g in zip(params, grads):
            if np.shape(p) != np.shape(g):
                raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {np.shape(p)}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient; training diverged")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
        }

    @classmethod
    def from_state_dict(cls, d):
        return cls(
            d["lr"], d["beta1"], d["beta2"], d["eps"], d["step_count"],
            [np.array(a, dtype=np.float64) for a in d["m"]],
            [np.array(a, dtype=np.float64) for a in d["v"]],
        )
