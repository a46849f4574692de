"""Batch command line: ``simulate``, ``train``, ``register``, ``evaluate``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data, energy, evaluation
from .baseline import BaselineConfig, optimize
from .errors import DivergenceError, InvalidParameterError, ParseError, ShapeError
from .gan import GanConfig, infer, read_run_config, train, write_run_config
from .nets import load_generator

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
OUT_ENV = "LDDMMGAN_OUT"
TRACE_COLUMNS = ["step", "energy", "mse_rel", "wall_ms"]

log = logging.getLogger("lddmm_gan")


class UsageProblem(Exception):
    pass


class DataProblem(Exception):
    pass


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV)
    if not root:
        raise UsageProblem(f"--out is required (or set {OUT_ENV})")
    return Path(root) / command


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = _out_dir(args, "simulate")
    try:
        spec = data.TorusSpec(args.inner_mean, args.inner_std, args.outer_mean, args.outer_std,
                              args.size, args.count, args.seed)
    except InvalidParameterError as exc:
        raise UsageProblem(str(exc)) from None
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, sample in enumerate(data.simulate_torus(spec)):
        name = f"torus_{i:05d}.raw"
        data.save_raw(sample.image, out / "images" / name)
        data.save_raw(sample.labels, out / "labels" / name)
        rows.append({"index": i, "image": f"images/{name}", "labels": f"labels/{name}",
                     "inner_a": f"{sample.inner_axes[0]:.6f}", "inner_b": f"{sample.inner_axes[1]:.6f}",
                     "outer_a": f"{sample.outer_axes[0]:.6f}", "outer_b": f"{sample.outer_axes[1]:.6f}"})
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    write_run_config(out / "run_config.txt", spec, {"command": "simulate"})
    print(f"wrote {len(rows)} images to {out}")
    return EXIT_OK


def load_dataset(path) -> tuple[np.ndarray, list[dict]]:
    path = Path(path)
    manifest = path / "manifest.csv"
    if not manifest.exists():
        raise DataProblem(f"{manifest} not found (run `simulate` first)")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) < 2:
        raise DataProblem(f"{manifest} lists fewer than two images")
    images = np.stack([data.load_raw(path / r["image"]) for r in rows])
    return images, rows


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def _check_flags(args):
    checks = [("--beta", 0 < args.beta < 1, "must lie strictly inside (0, 1)"),
              ("--lambda", args.lam > 0, "must be positive"),
              ("--sigma2", args.sigma2 > 0, "must be positive"),
              ("--alpha", args.alpha > 0, "must be positive"),
              ("--steps", args.steps >= 1, "must be >= 1"),
              ("--squarings", args.squarings >= 1, "must be >= 1"),
              ("--epochs", args.epochs >= 0, "must be >= 0"),
              ("--batch", args.batch >= 1, "must be >= 1"),
              ("--lr-g", args.lr_g > 0, "must be positive"),
              ("--lr-d", args.lr_d > 0, "must be positive"),
              ("--iterations", args.iterations >= 1, "must be >= 1"),
              ("--lr", args.lr > 0, "must be positive")]
    for flag, ok, why in checks:
        if not ok:
            raise UsageProblem(f"invalid {flag}: {why}")


def cmd_train(args) -> int:
    _check_flags(args)
    out = _out_dir(args, "train")
    images, rows = load_dataset(args.data)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode.startswith("baseline"):
        return _train_baseline(args, images, rows, out)
    cfg = GanConfig(beta=args.beta, lam=args.lam, lr_g=args.lr_g, lr_d=args.lr_d, epochs=args.epochs,
                    batch_size=args.batch, seed=args.seed,
                    parameterization="epdiff" if args.mode == "epdiff-gan" else "stationary",
                    sigma2=args.sigma2, alpha=args.alpha, s=args.s, T=args.steps,
                    squarings=args.squarings, head=args.head)

    def progress(rec):
        log.info("epoch %d step %d L_G=%.4f L_adv=%.4f lamE=%.4f p+=%.3f p-=%.3f mse_rel=%.3f",
                 rec.epoch, rec.step, rec.loss_g, rec.loss_adv, rec.lambda_energy,
                 rec.p_pos, rec.p_neg, rec.mse_rel)
    result = train(images, cfg, out_dir=out, progress=progress)
    print(f"trained {len(result.records)} steps ({len(result.skipped)} skipped); outputs in {out}")
    return EXIT_OK


def _train_baseline(args, images, rows, out) -> int:
    i, j = (int(k) for k in args.pair.split(","))
    if not (0 <= i < len(images) and 0 <= j < len(images)):
        raise UsageProblem(f"invalid --pair: indices must be below {len(images)}")
    cfg = BaselineConfig(iterations=args.iterations, lr=args.lr,
                         parameterization="epdiff" if args.mode == "baseline-epdiff" else "stationary",
                         T=args.steps, squarings=args.squarings, alpha=args.alpha, s=args.s,
                         sigma2=args.sigma2)
    write_run_config(out / "run_config.txt", cfg, {"mode": args.mode, "seed": args.seed,
                                                   "source": rows[i]["image"], "target": rows[j]["image"]})
    I0, I1 = images[i], images[j]
    fh = open(out / "energy_trace.csv", "w", newline="")
    writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
    writer.writeheader()
    t0 = [time.perf_counter()]

    def callback(k, e, warped):
        try:
            rel = energy.mse_rel(I0, I1, warped)
        except Exception:
            rel = float("nan")
        now = time.perf_counter()
        writer.writerow({"step": k, "energy": e, "mse_rel": rel, "wall_ms": (now - t0[0]) * 1e3})
        t0[0] = now
    try:
        res = optimize(I0, I1, cfg, callback=callback)
    finally:
        fh.close()
    data.save_raw(res.velocity, out / "velocity.raw")
    data.save_raw(res.displacement, out / "displacement.raw")
    data.save_raw(res.warped, out / "warped.raw")
    print(f"baseline energy {res.energies[0]:.6g} -> {res.energy:.6g}; outputs in {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# register / evaluate
# --------------------------------------------------------------------------

def load_model(path) -> tuple:
    """``(generator, GanConfig)`` from a training directory or a generator checkpoint."""
    path = Path(path)
    ckpt = path / "generator.ckpt" if path.is_dir() else path
    if not ckpt.exists():
        raise DataProblem(f"model checkpoint {ckpt} not found")
    conf_path = ckpt.parent / "run_config.txt"
    if not conf_path.exists():
        raise DataProblem(f"{conf_path} not found next to the checkpoint")
    gen, meta = load_generator(ckpt)
    conf = read_run_config(conf_path)
    cfg = GanConfig(epochs=0, sigma2=float(conf["sigma2"]), alpha=float(conf["alpha"]), s=float(conf["s"]),
                    T=int(conf["T"]), squarings=int(conf["squarings"]),
                    parameterization=conf["parameterization"], exp_method=conf.get("exp_method", "squaring"),
                    head=meta.get("head", conf.get("head", "smooth")), gain=gen.gain, channels=gen.channels)
    return gen, cfg


def _register(model, I0, I1) -> tuple:
    t0 = time.perf_counter()
    if model is None:
        res = optimize(I0, I1, BaselineConfig())
        out = (res.velocity, res.displacement, res.warped)
    else:
        gen, cfg = model
        res = infer(gen, I0, I1, cfg)
        out = (res.velocity, res.displacement, res.warped)
    return out + (time.perf_counter() - t0,)


def _load_image(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise DataProblem(f"image {p} not found")
    return data.load_raw(p)


def cmd_register(args) -> int:
    out = _out_dir(args, "register")
    model = load_model(args.model)
    I0, I1 = _load_image(args.source), _load_image(args.target)
    if I0.shape != I1.shape:
        raise DataProblem(f"source {I0.shape} and target {I1.shape} grids differ")
    v, u, warped, runtime = _register(model, I0, I1)
    out.mkdir(parents=True, exist_ok=True)
    data.save_raw(v, out / "velocity.raw")
    data.save_raw(u, out / "displacement.raw")
    data.save_raw(warped, out / "warped.raw")
    r = evaluation.PairResult("pair", I0, I1, warped, u, v, runtime,
                              source_path=str(args.source), target_path=str(args.target))
    evaluation.report([r], out)
    gen, cfg = model
    write_run_config(out / "run_config.txt", cfg, {"command": "register", "model": args.model,
                                                   "source": args.source, "target": args.target})
    print(f"registered in {runtime:.3f} s; outputs in {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = _out_dir(args, "evaluate")
    pairs_path = Path(args.pairs)
    if not pairs_path.exists():
        raise DataProblem(f"pairs file {pairs_path} not found")
    with open(pairs_path, newline="") as fh:
        pairs = list(csv.DictReader(fh))
    if not pairs:
        raise DataProblem(f"{pairs_path} lists no pairs")
    base = pairs_path.parent
    model = load_model(args.model) if args.model else None
    results = []
    for k, row in enumerate(pairs):
        src, tgt = base / row["source"], base / row["target"]
        I0, I1 = _load_image(src), _load_image(tgt)
        if I0.shape != I1.shape:
            raise DataProblem(f"pair {k}: source {I0.shape} and target {I1.shape} grids differ")
        v, u, warped, runtime = _register(model, I0, I1)
        ls = lt = None
        if args.labels:
            ls = _load_image(Path(args.labels) / src.name).astype(np.int32)
            lt = _load_image(Path(args.labels) / tgt.name).astype(np.int32)
        results.append(evaluation.PairResult(f"pair{k:04d}", I0, I1, warped, u, v, runtime, ls, lt,
                                             str(row["source"]), str(row["target"])))
    csv_path = evaluation.report(results, out)
    extra = {"command": "evaluate", "pairs": args.pairs, "labels": args.labels or "",
             "model": args.model or "baseline-svf"}
    Path(out / "run_config.txt").write_text("".join(f"{k}={v}\n" for k, v in extra.items()))
    print(f"evaluated {len(results)} pairs; metrics in {csv_path}")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lddmm-gan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate the 2D torus dataset")
    s.add_argument("--out")
    s.add_argument("--count", type=int, default=2560)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--inner-mean", type=float, default=4.0)
    s.add_argument("--inner-std", type=float, default=2.0)
    s.add_argument("--outer-mean", type=float, default=12.0)
    s.add_argument("--outer-std", type=float, default=4.0)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a GAN or run the model-based baseline")
    t.add_argument("--mode", choices=["svf-gan", "epdiff-gan", "baseline-svf", "baseline-epdiff"],
                   default="svf-gan")
    t.add_argument("--data", required=True, help="directory written by `simulate`")
    t.add_argument("--epochs", type=int, default=1000)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--lambda", dest="lam", type=float, default=1000.0)
    t.add_argument("--beta", type=float, default=0.2)
    t.add_argument("--sigma2", type=float, default=1.0)
    t.add_argument("--alpha", type=float, default=0.0025)
    t.add_argument("--s", type=float, default=4.0)
    t.add_argument("--steps", type=int, default=10, help="Euler time steps")
    t.add_argument("--squarings", type=int, default=6, help="scaling-and-squaring steps")
    t.add_argument("--lr-g", type=float, default=5e-5)
    t.add_argument("--lr-d", type=float, default=1e-6)
    t.add_argument("--head", choices=["smooth", "direct"], default="smooth")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--iterations", type=int, default=300, help="baseline modes only")
    t.add_argument("--lr", type=float, default=BaselineConfig.lr, help="baseline modes only")
    t.add_argument("--pair", default="0,1", help="baseline modes only: source,target indices")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="register one pair with a trained generator")
    r.add_argument("--model", required=True)
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="register and score a list of pairs")
    e.add_argument("--pairs", required=True, help="CSV with columns source,target (paths relative to it)")
    e.add_argument("--labels", help="directory holding label images named like the sources/targets")
    e.add_argument("--model", help="trained model; the model-based baseline is used when omitted")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageProblem as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataProblem, ParseError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except InvalidParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
