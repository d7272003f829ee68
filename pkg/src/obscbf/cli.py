"""Command-line entry point: ``obscbf {train,verify,simulate,oracle,report}``.

Exit codes: 0 success or certified, 2 honest non-convergence or
non-certification, 1 operational error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_ERROR, EXIT_NEGATIVE = 0, 1, 2
WEIGHT_FILES = {"barrier": "barrier.json", "controller": "controller.json", "observer": "observer.json"}
RESULT_FILE = "result.json"
PLANT_FILE = "plant.json"

log = logging.getLogger("obscbf")


class UsageError(Exception):
    pass


def _limit_threads(n):
    # must run before numpy loads its BLAS
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def sha256_bytes(data: bytes):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    return sha256_bytes(Path(path).read_bytes())


def digest_obj(obj):
    return sha256_bytes(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode())


def _meta(config_digest):
    from . import __version__
    return {"toolkit": "obscbf", "version": __version__, "config_digest": config_digest}


def _header_lines(config_digest):
    m = _meta(config_digest)
    return [f"toolkit {m['toolkit']} {m['version']}", f"config_digest {config_digest}"]


def write_json(path, obj):
    # json writes floats with repr, the shortest exact round-trip form
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def read_json(path, what="file"):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from exc


def load_plant(spec):
    """``spec`` is a benchmark name or a plant config path. Returns ``(sys, region, cfg_dict)``."""
    from .systems import BENCHMARKS, benchmark, plant_config_dict, plant_from_config
    if spec in BENCHMARKS and not Path(spec).exists():
        sys_, region, _ = benchmark(spec)
        return sys_, region, plant_config_dict(sys_, region, spec)
    cfg = read_json(spec, "plant config")
    if "kind" not in cfg:
        raise UsageError(f"plant config {spec} lacks 'kind'")
    sys_, region = plant_from_config(cfg)
    return sys_, region, cfg


TRAIN_EXTRA_KEYS = ("eps", "require_below_rho")


def load_train_config(path, overrides):
    from dataclasses import fields
    from .trainer import TrainConfig
    raw = {} if path is None else read_json(path, "train config")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(TrainConfig)} | set(TRAIN_EXTRA_KEYS)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"unknown train config keys: {unknown}")
    if "eps" not in raw:
        raise UsageError("train config needs 'eps' (grid covering radius)")
    eps = float(raw.pop("eps"))
    below_rho = bool(raw.pop("require_below_rho", True))
    return TrainConfig(**raw), eps, below_rho


def _nets_from_dir(run_dir):
    from .losses import Nets
    from .nn import Mlp
    nets = {}
    for name, fname in WEIGHT_FILES.items():
        path = Path(run_dir) / fname
        if not path.is_file():
            raise FileNotFoundError(f"weight file not found: {path}")
        nets[name] = Mlp.from_json(path.read_text())
    return Nets(nets["barrier"], nets["controller"], nets["observer"])


def load_run(run_dir, check_digests=True):
    """Nets and TrainResult JSON of a training run; weight digests must match."""
    run_dir = Path(run_dir)
    result = read_json(run_dir / RESULT_FILE, "train result")
    if check_digests:
        for name, fname in WEIGHT_FILES.items():
            want = result.get("digests", {}).get(fname)
            got = sha256_file(run_dir / fname)
            if want != got:
                raise UsageError(f"digest mismatch for {run_dir / fname}: result records {want}, file has {got}")
    return _nets_from_dir(run_dir), result


def _plant_for_run(args, run_dir):
    spec = args.plant or str(Path(run_dir) / PLANT_FILE)
    return load_plant(spec)


# -- subcommands ----------------------------------------------------------


def cmd_train(args):
    from .sampling import build_epsilon_net
    from .trainer import Trainer, write_history_csv

    sys_, region, plant_cfg = load_plant(args.plant)
    cfg, eps, below_rho = load_train_config(args.config, {"epochs": args.epochs, "seed": args.seed,
                                                          "strict": True if args.strict else None})
    if args.eps is not None:
        eps = args.eps
    if args.allow_eps_above_rho:
        below_rho = False
    overrides = None
    if args.overrides:
        from .lipschitz import load_overrides
        overrides = load_overrides(args.overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_cfg = {"plant": plant_cfg, "train": cfg.to_dict(), "eps": eps, "require_below_rho": below_rho,
               "overrides": overrides}
    cdig = digest_obj(run_cfg)

    ds = build_epsilon_net(region, eps, require_below_rho=below_rho)
    log.info("dataset: %d samples (%d init, %d unsafe), eps=%g", len(ds), ds.in_init.sum(), ds.in_unsafe.sum(), eps)
    if args.resume:
        trainer = Trainer.restore(args.resume, ds, sys_, region, overrides)
        # the epoch cap may change on resume; anything else must match the checkpoint
        saved, now = trainer.cfg.to_dict(), cfg.to_dict()
        diff = sorted(k for k in now if k != "epochs" and now[k] != saved[k])
        if diff:
            raise UsageError(f"train config differs from the checkpoint in {diff}")
        trainer.cfg.epochs = cfg.epochs
    else:
        trainer = Trainer(ds, sys_, region, cfg, overrides=overrides)
    res = None
    ckpt = out / "checkpoint.json"
    every = args.checkpoint_every
    while res is None:
        target = None if not every else trainer.epoch + every
        res = trainer.run(until_epoch=target)
        trainer.save(ckpt)

    write_json(out / PLANT_FILE, plant_cfg)
    digests = {}
    for name, fname in WEIGHT_FILES.items():
        text = getattr(res.nets, name).to_json()
        (out / fname).write_text(text)
        digests[fname] = sha256_bytes(text.encode())
    digests[PLANT_FILE] = sha256_file(out / PLANT_FILE)
    write_history_csv(res.history, out / "history.csv", _header_lines(cdig))

    from .verify import check_certificate
    cert = check_certificate(res.eta, eps, res.bundle, strict=cfg.strict, tau=cfg.tol, rho=region.rho)
    ok = res.status == "converged" or (cfg.stop_when == "sop" and res.status == "sop_satisfied")
    summary = {
        "meta": _meta(cdig),
        "run_config": run_cfg,
        "status": res.status,
        "message": res.message,
        "converged": res.converged,
        "epochs_used": res.epochs_used,
        "eta": res.eta,
        "eps": eps,
        "rho": region.rho,
        "L_max": res.L_max,
        "bundle": res.bundle.to_dict(),
        "report": res.report.__dict__ | {"max_q": list(res.report.max_q)},
        "certificate": cert.to_dict(),
        "digests": digests,
        "dataset": {"n_samples": len(ds), "n_init": int(ds.in_init.sum()), "n_unsafe": int(ds.in_unsafe.sum()),
                    "counts": [int(c) for c in ds.grid.counts]},
    }
    write_json(out / RESULT_FILE, summary)
    print(f"{res.message} after {res.epochs_used} epochs: L_cbf={res.report.L_cbf:.6g} eta={res.eta:.6g} "
          f"L_max={res.L_max:.6g} margin={cert.margin:.6g} ({cert.verdict})")
    return EXIT_OK if ok else EXIT_NEGATIVE


def cmd_verify(args):
    from .lipschitz import LipschitzBundle, apply_overrides, compute_bundle, load_overrides
    from .verify import check_certificate

    overrides = load_overrides(args.overrides) if args.overrides else {}
    eta, eps, rho, digests, cdig = args.eta, args.eps, None, {}, None
    nets = region = sys_ = None
    if args.run:
        nets, result = load_run(args.run)
        sys_, region, plant_cfg = _plant_for_run(args, args.run)
        eta = result["eta"] if eta is None else eta
        eps = result["eps"] if eps is None else eps
        digests = dict(result.get("digests", {}))
        cdig = result.get("meta", {}).get("config_digest")
        alpha = result["run_config"]["train"]["loss"]["alpha"]
        bundle = compute_bundle(nets, sys_, region, alpha, overrides)
        rho = region.rho
    else:
        # arithmetic-only mode: every constant (or L_max) comes from the overrides file
        if not overrides:
            raise UsageError("verify needs --run or an --overrides file with the constants")
        bundle = LipschitzBundle(*([float("nan")] * 12))
        bundle.sources = {}
        apply_overrides(bundle, overrides)
    if eta is None or eps is None:
        raise UsageError("eta and eps are required (from --run or the command line)")
    cert = check_certificate(eta, eps, bundle, strict=args.strict, tau=args.tau, rho=rho,
                             reference_margin=args.reference_margin)
    cert.digests = digests
    if args.oracle_eps is not None:
        if nets is None:
            raise UsageError("--oracle-eps needs --run")
        from .losses import LossConfig
        from .verify import grid_oracle
        lcfg = LossConfig(**result["run_config"]["train"]["loss"])
        orc = grid_oracle(nets, sys_, region, lcfg, args.oracle_eps, train_eps=eps)
        cert.oracle = orc.to_dict() | {"satisfied": orc.satisfied(eta, args.tau)}
    doc = cert.to_dict() | {"meta": _meta(cdig or digest_obj(overrides))}
    if args.out:
        write_json(args.out, doc)
    print(f"margin = {cert.margin!r}  L_max = {cert.L_max!r}  verdict: {cert.verdict}")
    for note in cert.notes:
        print(f"note: {note}")
    return EXIT_OK if cert.certified else EXIT_NEGATIVE


def cmd_simulate(args):
    import numpy as np
    from .losses import LossConfig
    from .verify import audit, simulate_batch

    if args.n_traj < 1:
        raise UsageError("--n-traj must be >= 1")
    nets, result = load_run(args.run)
    sys_, region, _ = _plant_for_run(args, args.run)
    lcfg = LossConfig(**result["run_config"]["train"]["loss"])
    cdig = result["meta"]["config_digest"]
    x0, xh0 = initial_pairs(region, args.n_traj, args.seed, center=args.center)
    trajs = simulate_batch(nets, sys_, region, x0, xh0, args.T, args.dt, lcfg, zoh_period=args.zoh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _header_lines(cdig) + [f"seed {args.seed}", f"dt {args.dt!r}", f"T {args.T!r}"]
    reports = []
    for i, tr in enumerate(trajs):
        tr.to_csv(out / f"traj_{i:03d}.csv", header)
        rep = audit(tr)
        reports.append({"index": i, "x0": x0[i].tolist(), "xhat0": xh0[i].tolist(),
                        "exited_domain": tr.exited_domain, "min_B": float(np.min(tr.B)),
                        "min_residual": float(np.min(tr.residual))} | rep.to_dict())
    n_fail = sum(not r["passed"] for r in reports)
    n_unsafe = sum(not r["checks"]["state_safe"]["passed"] for r in reports)
    summary = {"meta": _meta(cdig), "seed": args.seed, "n_traj": args.n_traj, "T": args.T, "dt": args.dt,
               "zoh_period": args.zoh, "n_failed": n_fail, "n_unsafe_entries": n_unsafe,
               "min_B": min(r["min_B"] for r in reports), "trajectories": reports}
    write_json(out / "audit.json", summary)
    print(f"{args.n_traj} trajectories: {n_fail} failed audits, {n_unsafe} with unsafe entries")
    return EXIT_OK if n_fail == 0 else EXIT_NEGATIVE


def init_box_center(region):
    """Centre of the bounding box of X0 (a union of polytopes), by one LP per axis and side."""
    import numpy as np
    from scipy.optimize import linprog
    n = region.n
    lo, hi = np.full(n, np.inf), np.full(n, -np.inf)
    bounds = list(zip(region.domain.lo, region.domain.hi))
    for P in region.init:
        for i in range(n):
            for sign in (1.0, -1.0):
                c = np.zeros(n)
                c[i] = sign
                res = linprog(c, A_ub=P.A, b_ub=P.b, bounds=bounds, method="highs")
                if res.status != 0:
                    break
                lo[i], hi[i] = (min(lo[i], res.x[i]), hi[i]) if sign > 0 else (lo[i], max(hi[i], res.x[i]))
    if not np.all(np.isfinite(lo)):
        raise UsageError("X0 is empty inside D")
    return 0.5 * (lo + hi)


def initial_pairs(region, n, seed, center=False):
    """Seeded uniform draws of ``(x0, xhat0)`` over X0 x X0.

    Draws are uniform over D and rejected outside X0, which is uniform over
    any union of polytopes. ``center`` starts everything at the centre of
    the bounding box of X0 instead.
    """
    import numpy as np
    if center:
        c = init_box_center(region)
        if not region.in_init(c[None])[0]:
            raise UsageError("the centre of the X0 bounding box is not in X0; drop --center")
        return np.tile(c, (n, 1)), np.tile(c, (n, 1))
    rng = np.random.default_rng(seed)
    lo, hi = region.domain.lo, region.domain.hi

    def draw():
        got = []
        total = 0
        for _ in range(10_000):
            cand = rng.uniform(lo, hi, size=(max(4 * n, 256), lo.size))
            keep = cand[region.in_init(cand)]
            got.append(keep)
            total += len(keep)
            if total >= n:
                return np.concatenate(got)[:n]
        raise UsageError("X0 is too small to sample by rejection")

    return draw(), draw()


def cmd_oracle(args):
    from .losses import LossConfig
    from .verify import grid_oracle

    nets, result = load_run(args.run)
    sys_, region, _ = _plant_for_run(args, args.run)
    lcfg = LossConfig(**result["run_config"]["train"]["loss"])
    eta = result["eta"] if args.eta is None else args.eta
    orc = grid_oracle(nets, sys_, region, lcfg, args.eps, train_eps=result["eps"], max_samples=args.max_samples)
    ok = orc.satisfied(eta, args.tol)
    doc = orc.to_dict() | {"eta": eta, "tol": args.tol, "satisfied": ok, "meta": _meta(result["meta"]["config_digest"])}
    if args.out:
        write_json(args.out, doc)
    print(f"max q = {[float(m) for m in orc.maxima]} on {orc.n_samples} points; eta = {eta!r}; "
          f"{'satisfied' if ok else 'violated'}")
    return EXIT_OK if ok else EXIT_NEGATIVE


def cmd_report(args):
    import csv
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    run = Path(args.run)
    out = Path(args.out or run / "plots")
    out.mkdir(parents=True, exist_ok=True)
    written = []

    hist = run / "history.csv"
    if hist.is_file():
        with open(hist) as fh:
            rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
        ep = np.array([float(r["epoch"]) for r in rows])
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in ("L_cbf", "L_obs", "L_p"):
            ax.semilogy(ep, np.maximum([abs(float(r[key])) for r in rows], 1e-16), label=key)
        ax.set_xlabel("epoch")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "losses.png", dpi=120)
        plt.close(fig)
        written.append("losses.png")

    sim = Path(args.sim) if args.sim else None
    if sim is not None and sim.is_dir():
        trajs = []
        for path in sorted(sim.glob("traj_*.csv")):
            with open(path) as fh:
                rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
            trajs.append({k: np.array([float(r[k]) for r in rows]) for k in rows[0]})
        if trajs:
            fig, axes = plt.subplots(1, 3, figsize=(14, 4))
            planar = "x2" in trajs[0]
            for tr in trajs:
                # phase portrait when n >= 2, otherwise x1 against time
                a, b = ("x1", "x2") if planar else ("t", "x1")
                axes[0].plot(tr[a], tr[b], lw=0.8)
                axes[0].plot(tr["xhat1"] if planar else tr["t"], tr["xhat2"] if planar else tr["xhat1"],
                             lw=0.6, ls="--")
                axes[1].plot(tr["t"], tr["B"], lw=0.8)
                axes[2].plot(tr["t"], tr["residual"], lw=0.8)
            axes[0].set(xlabel="x1" if planar else "t [s]", ylabel="x2" if planar else "x1",
                        title="state (solid) and estimate (dashed)")
            axes[1].set(xlabel="t [s]", title="B(x, xhat)")
            axes[2].set(xlabel="t [s]", title="dB/dt + alpha B")
            for ax in axes[1:]:
                ax.axhline(0.0, color="k", lw=0.5)
            fig.tight_layout()
            fig.savefig(out / "trajectories.png", dpi=120)
            plt.close(fig)
            written.append("trajectories.png")
    if not written:
        raise UsageError(f"nothing to plot in {run}")
    print("wrote " + ", ".join(str(out / w) for w in written))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="obscbf", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="build the epsilon-net and train the three networks")
    t.add_argument("--plant", required=True, help="plant config JSON or benchmark name")
    t.add_argument("--config", help="train config JSON (TrainConfig fields plus 'eps')")
    t.add_argument("--out", required=True)
    t.add_argument("--eps", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--strict", action="store_true")
    t.add_argument("--overrides", help="Lipschitz constants override JSON")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--allow-eps-above-rho", action="store_true")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="check the validity condition")
    v.add_argument("--run", help="training output directory")
    v.add_argument("--plant")
    v.add_argument("--eta", type=float)
    v.add_argument("--eps", type=float)
    v.add_argument("--overrides")
    v.add_argument("--strict", action="store_true")
    v.add_argument("--tau", type=float, default=0.0)
    v.add_argument("--reference-margin", type=float)
    v.add_argument("--oracle-eps", type=float)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("simulate", help="closed-loop RK4 simulation and audit")
    s.add_argument("--run", required=True)
    s.add_argument("--plant")
    s.add_argument("--n-traj", type=int, default=10)
    s.add_argument("--T", type=float, default=10.0)
    s.add_argument("--dt", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--zoh", type=float, help="zero-order-hold sample period")
    s.add_argument("--center", action="store_true", help="start every trajectory at the centre of X0")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("oracle", help="evaluate q1..q3 on a fine grid")
    o.add_argument("--run", required=True)
    o.add_argument("--plant")
    o.add_argument("--eps", type=float, required=True)
    o.add_argument("--eta", type=float)
    o.add_argument("--tol", type=float, default=0.0)
    o.add_argument("--max-samples", type=int, default=50_000_000)
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)

    r = sub.add_parser("report", help="render plots")
    r.add_argument("--run", required=True)
    r.add_argument("--sim")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _limit_threads(args.threads)
        return args.func(args)
    except (UsageError, FileNotFoundError, ValueError, FloatingPointError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
