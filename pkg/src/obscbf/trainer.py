"""Joint training of barrier, controller and observer with the margin eta.

Each epoch: evaluate the full-dataset losses (the stopping test always uses
full-dataset values), take Adam steps on ``L_cbf + L_obs`` over the batches
(or one short L-BFGS run on the full batch), refresh the Lipschitz bundle,
then take one projected gradient step on eta against
``ReLU(L_max * eps + eta)``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import __version__
from .lipschitz import LipschitzBundle, compute_bundle, compute_l_max, observer_input_box
from .losses import LossConfig, LossReport, Nets, evaluate, loss_and_grads, loss_p
from .nn import Adam, Mlp
from .sampling import Dataset
from .systems import RegionSpec, SystemModel

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "obscbf-checkpoint"
CHECKPOINT_VERSION = 1
NET_NAMES = ("barrier", "controller", "observer")
HISTORY_COLUMNS = ("epoch", "L1", "L2", "L3", "L4", "L_cbf", "L_obs", "L_p", "eta", "max_violation")


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(FloatingPointError):
    """Non-finite loss or gradient; ``last_good`` holds the state before the failing epoch."""

    def __init__(self, msg, last_good):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int | None = None  # None: full batch
    lr: float = 1e-3
    lr_controller: float | None = None
    lr_observer: float | None = None
    lr_eta: float = 1e-3
    loss: LossConfig = field(default_factory=LossConfig)
    tol: float = 1e-4
    lipschitz_every: int = 1
    seed: int = 0
    eta_init: float = 0.0
    eta_pull: float = 0.0
    eta_floor: float | None = None
    strict: bool = False
    stop_when: str = "certified"  # or "sop": stop once L_cbf <= tol and L_obs has settled
    freeze_observer: bool = False
    obs_window: int = 50
    obs_rtol: float = 1e-3
    barrier_hidden: list = field(default_factory=lambda: [32, 32])
    controller_hidden: list = field(default_factory=lambda: [32, 32])
    observer_hidden: list = field(default_factory=lambda: [32, 32])
    barrier_activation: str = "softplus"
    controller_activation: str = "softplus"
    observer_activation: str = "softplus"
    lr_decay: float = 1.0  # multiplicative per-epoch factor on the network learning rates
    lr_min: float = 0.0
    scale_inputs: bool = True  # first-layer init scaled to the input ranges
    optimizer: str = "adam"  # or "lbfgs": full batch, lbfgs_iters iterations per epoch at fixed eta
    lbfgs_iters: int = 25
    lbfgs_memory: int = 10

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.epochs < 0 or self.lipschitz_every < 1:
            raise ValueError("need epochs >= 0 and lipschitz_every >= 1")
        if self.stop_when not in ("certified", "sop"):
            raise ValueError("stop_when must be 'certified' or 'sop'")
        if self.eta_init > 0:
            raise ValueError("eta must start nonpositive")
        if self.optimizer not in ("adam", "lbfgs"):
            raise ValueError("optimizer must be 'adam' or 'lbfgs'")
        if self.optimizer == "lbfgs" and (self.lbfgs_iters < 1 or self.lbfgs_memory < 1):
            raise ValueError("need lbfgs_iters >= 1 and lbfgs_memory >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainResult:
    nets: Nets
    eta: float
    history: list
    converged: bool
    status: str  # converged | sop_satisfied | not_found
    epochs_used: int
    bundle: LipschitzBundle
    L_max: float
    report: LossReport

    @property
    def message(self):
        if self.status == "not_found":
            return "No suitable barrier and controller found"
        if self.status == "sop_satisfied":
            return "Sampled conditions satisfied; validity condition not met"
        return "Converged"


def update_eta(eta, L_max, eps, lr_eta, pull=0.0, floor=None):
    """One projected (sub)gradient step on ``ReLU(L_max*eps + eta) + pull*eta``.

    The ReLU subgradient at 0 is 0. The result is clipped to ``eta <= 0``
    and, if given, ``eta >= floor``.
    """
    grad = (1.0 if L_max * eps + eta > 0.0 else 0.0) + pull
    new = min(eta - lr_eta * grad, 0.0)
    if floor is not None:
        new = max(new, floor)
    return new


def input_scales(sys: SystemModel, region: RegionSpec):
    """Typical input magnitudes of the three nets, from the half-widths of D, U and the output range."""
    half = lambda box: np.maximum(0.5 * (box.hi - box.lo), 1e-12)
    xs = half(region.domain)
    obs = observer_input_box(sys, region)
    return {"barrier": np.concatenate([xs, xs]), "controller": xs, "observer": 0.5 * half(obs)}


def build_nets(sys: SystemModel, cfg: TrainConfig, rng, region: RegionSpec | None = None):
    n, m, p = sys.n, sys.m, sys.p
    sc = input_scales(sys, region) if cfg.scale_inputs and region is not None else {}
    barrier = Mlp.init([2 * n, *cfg.barrier_hidden, 1], cfg.barrier_activation, rng=rng,
                       input_scale=sc.get("barrier"))
    controller = Mlp.init([n, *cfg.controller_hidden, m], cfg.controller_activation,
                          lb=sys.u_lb, ub=sys.u_ub, rng=rng, input_scale=sc.get("controller"))
    observer = Mlp.init([n + m + p, *cfg.observer_hidden, n], cfg.observer_activation, rng=rng,
                        input_scale=sc.get("observer"))
    return Nets(barrier, controller, observer)


def _rng_from_state(state):
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng


class Trainer:
    """Stateful training loop; :func:`train` is the one-call form."""

    def __init__(self, dataset: Dataset, sys: SystemModel, region: RegionSpec, cfg: TrainConfig, nets=None,
                 overrides=None):
        if not dataset.in_init.any():
            raise ValueError("dataset has no sample in X0 x X0; the initial-set condition is ill-posed")
        if not dataset.in_unsafe.any():
            raise ValueError("dataset has no sample in the augmented unsafe set")
        self.dataset, self.sys, self.region, self.cfg = dataset, sys, region, cfg
        self.overrides = overrides
        self.rng = np.random.default_rng(cfg.seed)
        self.nets = nets if nets is not None else build_nets(sys, cfg, self.rng, region)
        self.nets.check(sys)
        lrs = {"barrier": cfg.lr, "controller": cfg.lr_controller or cfg.lr, "observer": cfg.lr_observer or cfg.lr}
        self.opt = {k: Adam(lr=lrs[k]) for k in NET_NAMES}
        self.eta = float(cfg.eta_init)
        self.epoch = 0
        self.history = []
        self.bundle = self._bundle()
        self.L_max, _ = compute_l_max(self.bundle)
        self.bundle_epoch = 0

    def _bundle(self):
        return compute_bundle(self.nets, self.sys, self.region, self.cfg.loss.alpha, self.overrides)

    def _refresh_bundle(self):
        self.bundle = self._bundle()
        self.L_max, _ = compute_l_max(self.bundle)
        self.bundle_epoch = self.epoch

    def _obs_settled(self):
        w = self.cfg.obs_window
        if len(self.history) <= w:
            return False
        now, then = self.history[-1]["L_obs"], self.history[-1 - w]["L_obs"]
        return abs(now - then) <= self.cfg.obs_rtol * max(abs(now), 1e-12)

    def _validity_ok(self):
        margin = self.L_max * self.dataset.eps + self.eta
        if self.cfg.strict:
            margin += self.cfg.tol
        return margin <= 0.0

    def _log(self, rep: LossReport):
        lp = loss_p(self.eta, self.L_max, self.dataset.eps)
        rep.L_p = lp
        row = {"epoch": self.epoch, "L1": rep.L1, "L2": rep.L2, "L3": rep.L3, "L4": rep.L4,
               "L_cbf": rep.L_cbf, "L_obs": rep.L_obs, "L_p": lp, "eta": self.eta,
               "max_violation": rep.max_violation}
        self.history.append(row)
        return row

    def _stop_status(self, rep):
        if rep.L_cbf > self.cfg.tol:
            return None
        if self.bundle_epoch != self.epoch:
            self._refresh_bundle()
            rep.L_p = loss_p(self.eta, self.L_max, self.dataset.eps)
            self.history[-1]["L_p"] = rep.L_p
        if not self._obs_settled():
            return None
        if self._validity_ok():
            return "converged"
        if self.cfg.stop_when == "sop":
            return "sop_satisfied"
        return None

    def _snapshot(self):
        return {"nets": self.nets.copy(), "eta": self.eta, "epoch": self.epoch}

    def _apply(self, grads):
        for name in self._trainable():
            self.opt[name].step(getattr(self.nets, name).params, grads[name])

    def _trainable(self):
        return [n for n in NET_NAMES if not (n == "observer" and self.cfg.freeze_observer)]

    def _lbfgs(self):
        """A fresh L-BFGS-B run of ``lbfgs_iters`` iterations on the full batch at the current eta.

        No optimizer state survives the epoch, so checkpoints taken between
        epochs resume exactly.
        """
        ds, cfg = self.dataset, self.cfg
        names = self._trainable()
        params = [p for n in names for p in getattr(self.nets, n).params]

        def unpack(v):
            o = 0
            for p in params:
                p[...] = v[o:o + p.size].reshape(p.shape)
                o += p.size

        def fun(v):
            unpack(v)
            rep, grads = loss_and_grads(ds.samples, ds.in_init, ds.in_unsafe, self.nets, self.sys, cfg.loss,
                                        self.eta)
            g = np.concatenate([a.ravel() for n in names for a in grads[n]])
            if not (math.isfinite(rep.objective) and np.all(np.isfinite(g))):
                raise FloatingPointError(f"non-finite loss or gradient at epoch {self.epoch}")
            return rep.objective, g

        x0 = np.concatenate([p.ravel() for p in params])
        res = minimize(fun, x0, jac=True, method="L-BFGS-B",
                       options={"maxiter": cfg.lbfgs_iters, "maxcor": cfg.lbfgs_memory, "maxfun": 20 * cfg.lbfgs_iters})
        unpack(res.x)

    def _epoch(self):
        ds, cfg = self.dataset, self.cfg
        if cfg.optimizer == "lbfgs":
            rep = evaluate(ds, self.nets, self.sys, cfg.loss, self.eta)
            if not (math.isfinite(rep.L_cbf) and math.isfinite(rep.L_obs)):
                raise FloatingPointError(f"non-finite loss at epoch {self.epoch}")
            self._log(rep)
            status = self._stop_status(rep)
            if status is not None:
                return status, rep
            self._lbfgs()
            return self._end_epoch(rep)
        full = cfg.batch_size is None or cfg.batch_size >= len(ds)
        if full:
            rep, grads = loss_and_grads(ds.samples, ds.in_init, ds.in_unsafe, self.nets, self.sys, cfg.loss,
                                        self.eta)
        else:
            rep = evaluate(ds, self.nets, self.sys, cfg.loss, self.eta)
        if not (math.isfinite(rep.L_cbf) and math.isfinite(rep.L_obs)):
            raise FloatingPointError(f"non-finite loss at epoch {self.epoch}")
        self._log(rep)
        status = self._stop_status(rep)
        if status is not None:
            return status, rep
        if full:
            self._apply(grads)
        else:
            order = self.rng.permutation(len(ds))
            for i in range(0, len(ds), cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                _, grads = loss_and_grads(ds.samples[idx], ds.in_init[idx], ds.in_unsafe[idx], self.nets,
                                          self.sys, cfg.loss, self.eta)
                self._apply(grads)
        return self._end_epoch(rep)

    def _end_epoch(self, rep):
        ds, cfg = self.dataset, self.cfg
        self.epoch += 1
        if cfg.optimizer == "adam" and cfg.lr_decay != 1.0:
            for opt in self.opt.values():
                opt.lr = max(opt.lr * cfg.lr_decay, cfg.lr_min)
        if self.epoch % cfg.lipschitz_every == 0:
            self._refresh_bundle()
        self.eta = update_eta(self.eta, self.L_max, ds.eps, cfg.lr_eta, cfg.eta_pull, cfg.eta_floor)
        return None, rep

    def run(self, until_epoch=None):
        """Train until a stop condition or ``until_epoch`` (default: the epoch cap).

        Returns a :class:`TrainResult` when training finished, ``None`` when
        paused at ``until_epoch`` before the cap.
        """
        cap = self.cfg.epochs
        stop_at = cap if until_epoch is None else min(until_epoch, cap)
        if self.history and self.history[-1]["epoch"] == self.epoch and self.epoch < stop_at:
            # terminal row of an earlier run with a lower cap; the next epoch logs it afresh
            self.history.pop()
        while self.epoch < stop_at:
            last_good = self._snapshot()
            try:
                status, rep = self._epoch()
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), last_good) from exc
            if status is not None:
                return self._result(status, rep)
            if self.epoch % 100 == 0:
                h = self.history[-1]
                log.info("epoch %d  L_cbf=%.3e  L_obs=%.3e  L_p=%.3e  eta=%.4f", h["epoch"], h["L_cbf"],
                         h["L_obs"], h["L_p"], h["eta"])
        if self.epoch < cap:
            return None
        # final state after the last update
        rep = evaluate(self.dataset, self.nets, self.sys, self.cfg.loss, self.eta)
        if self.bundle_epoch != self.epoch:
            self._refresh_bundle()
        self._log(rep)
        status = self._stop_status(rep) or "not_found"
        return self._result(status, rep)

    def _result(self, status, rep):
        return TrainResult(
            nets=self.nets, eta=self.eta, history=list(self.history), converged=status == "converged",
            status=status, epochs_used=self.epoch, bundle=self.bundle, L_max=self.L_max, report=rep,
        )

    # -- checkpointing -------------------------------------------------------

    def state_dict(self):
        return {
            "config": self.cfg.to_dict(),
            "nets": {k: getattr(self.nets, k).to_dict() for k in NET_NAMES},
            "optimizers": {k: self.opt[k].state_dict() for k in NET_NAMES},
            "eta": self.eta,
            "epoch": self.epoch,
            "bundle_epoch": self.bundle_epoch,
            "bundle": self.bundle.to_dict(),
            "L_max": self.L_max,
            "rng": self.rng.bit_generator.state,
            "history": self.history,
        }

    def load_state_dict(self, state):
        self.nets = Nets(*(Mlp.from_dict(state["nets"][k]) for k in NET_NAMES))
        self.opt = {k: Adam.from_state_dict(state["optimizers"][k]) for k in NET_NAMES}
        self.eta = float(state["eta"])
        self.epoch = int(state["epoch"])
        self.bundle_epoch = int(state["bundle_epoch"])
        self.bundle = LipschitzBundle.from_dict(state["bundle"])
        self.L_max = float(state["L_max"])
        self.rng = _rng_from_state(state["rng"])
        self.history = [dict(r) for r in state["history"]]

    def save(self, path):
        save_checkpoint(self.state_dict(), path)

    @classmethod
    def restore(cls, path, dataset, sys, region, overrides=None):
        state = load_checkpoint(path)
        cfg = TrainConfig.from_dict(state["config"])
        tr = cls(dataset, sys, region, cfg, overrides=overrides)
        tr.load_state_dict(state)
        return tr


def train(dataset: Dataset, sys: SystemModel, region: RegionSpec, cfg: TrainConfig, nets=None, overrides=None):
    """Run the full training loop and return a :class:`TrainResult`."""
    return Trainer(dataset, sys, region, cfg, nets, overrides).run()


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(state, path):
    payload = _dumps(state)
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "toolkit": __version__,
           "sha256": hashlib.sha256(payload.encode()).hexdigest(), "payload": state}
    Path(path).write_text(_dumps(doc))


def load_checkpoint(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')} unsupported (expected {CHECKPOINT_VERSION})")
    state = doc.get("payload")
    if hashlib.sha256(_dumps(state).encode()).hexdigest() != doc.get("sha256"):
        raise CheckpointError(f"checkpoint {path} failed its integrity check")
    return state


def write_history_csv(history, path, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])
