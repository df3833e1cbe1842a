"""Command-line pipeline: gen, train, sample, eval, workspace.

Every command writes a run manifest capturing its exact flags and seed, so
reruns with identical configs produce byte-identical artifacts.  Errors exit
nonzero with a single machine-parsable line `error:<category>: message`.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import read_bundle, write_bundle
from .errors import ContractViolation, FormatError, NumericError
from .flow import TrainConfig, sample_shape, train
from .metrics import DEFAULT_EPSILON, DEFAULT_EXACT_CAP, MetricsReport, evaluate
from .nets import ARCHITECTURES, make_net, net_from_meta
from .pointcloud import (NormalizationStats, PointCloud, denormalize_points,
                         normalize_condition, save_ply, save_xyz)
from .robot import RobotSpec, generate_dataset, workspace_projection

MODULE_CHOICES = (2, 3, 5)


def _fail(category: str, message: str) -> int:
    sys.stderr.write(f"error:{category}: {message}\n")
    return 1


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


PLUMBING_FLAGS = {"func", "out", "force", "no_figures"}


def _run_manifest(command: str, args: argparse.Namespace) -> dict:
    """Flags that define the computation; output-side plumbing is excluded so
    identical runs produce byte-identical artifacts wherever they land."""
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in PLUMBING_FLAGS}
    return {"command": command, "config": cfg}


def _prepare_out_dir(path, force: bool) -> None:
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ContractViolation(
            f"output directory {path} is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)


def _eval_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence((base, index)).generate_state(1)[0])


# ------------------------------------------------------------------ gen ----

def cmd_gen(args) -> int:
    _prepare_out_dir(args.out, args.force)
    spec = RobotSpec(modules=args.modules)
    payload_range = None
    if args.payload_max is not None:
        if args.payload_max <= 0:
            raise ContractViolation("--payload-max must be positive")
        payload_range = (0.0, args.payload_max)
    bundle = generate_dataset(spec, k=args.samples, n_train=args.points,
                              seed=args.seed, payload_range=payload_range,
                              include_base=args.with_base, colors=args.colors)
    write_bundle(args.out, bundle)
    _write_json(os.path.join(args.out, "run.json"), _run_manifest("gen", args))
    sizes = {name: len(idx) for name, idx in bundle.splits.items()}
    print(f"wrote bundle to {args.out}: K={bundle.k} N={bundle.n} d={bundle.d} "
          f"condition_dim={bundle.condition_dim} splits={sizes}")
    return 0


# ---------------------------------------------------------------- train ----

def cmd_train(args) -> int:
    _prepare_out_dir(args.out, args.force)
    bundle = read_bundle(args.data)
    cfg = TrainConfig(alpha=args.alpha, sigma=args.sigma,
                      lambda_rgb=args.lambda_rgb, epochs=args.epochs,
                      batch_size=args.batch, lr=args.lr,
                      ema_decay=args.ema_decay, seed=args.seed,
                      sample_steps=args.sample_steps, val_every=args.val_every,
                      val_samples=args.val_samples, val_steps=args.val_steps)
    net = make_net(args.arch, d=bundle.d, cond_dim=bundle.condition_dim,
                   width=args.width, blocks=args.blocks, seed=args.seed)
    if net.cond_dim != bundle.condition_dim:
        raise ContractViolation(
            f"network condition width {net.cond_dim} does not match dataset "
            f"{bundle.condition_dim}")
    result = train(bundle, net, cfg)

    run = _run_manifest("train", args)
    meta = {
        "arch": net.arch_id,
        "arch_config": net.config,
        "train_config": cfg.to_dict(),
        "normalization": bundle.stats.to_dict(),
        "robot": bundle.manifest["robot"],
        "d": bundle.d,
        "condition_dim": bundle.condition_dim,
        "n_points": bundle.n,
        "best_val_cd": result.best_val_cd,
        "best_epoch": result.best_epoch,
        "final_loss": result.history[-1].mean_loss,
        "run": run,
    }
    ckpt_path = os.path.join(args.out, "model.ckpt")
    save_checkpoint(ckpt_path, net.parameters(), meta)
    result.write_csv(os.path.join(args.out, "loss.csv"))
    _write_json(os.path.join(args.out, "run.json"), run)
    if not args.no_figures:
        from .figures import save_loss_curve
        save_loss_curve(result.history, os.path.join(args.out, "loss_curve.png"))
    best = "n/a" if result.best_val_cd is None else f"{result.best_val_cd:.6g}"
    print(f"trained {args.arch} for {cfg.epochs} epochs ({result.steps} steps); "
          f"final loss {result.history[-1].mean_loss:.6g}; best val CD {best}; "
          f"checkpoint {ckpt_path}")
    return 0


# --------------------------------------------------------------- sample ----

def _parse_floats(text: str, what: str) -> np.ndarray:
    try:
        vals = np.array([float(tok) for tok in text.split(",") if tok.strip() != ""])
    except ValueError as exc:
        raise ContractViolation(f"could not parse {what}: {exc}") from exc
    if vals.size == 0:
        raise ContractViolation(f"{what} is empty")
    return vals


def cmd_sample(args) -> int:
    meta, params = load_checkpoint(args.checkpoint)
    net = net_from_meta(meta, params)
    stats = NormalizationStats.from_dict(meta["normalization"])
    if args.condition is not None:
        cond = _parse_floats(args.condition, "--condition")
        if cond.size != net.cond_dim:
            raise ContractViolation(
                f"--condition has {cond.size} values, network expects {net.cond_dim}")
    else:
        raw = _parse_floats(args.raw, "--raw")
        motor_dim = stats.motor_dim
        has_payload = stats.payload_min is not None
        want = motor_dim + (1 if has_payload else 0)
        if raw.size != want:
            raise ContractViolation(
                f"--raw has {raw.size} values, robot expects {want} "
                f"({motor_dim} motors{' + payload' if has_payload else ''})")
        payload = float(raw[motor_dim]) if has_payload else None
        cond, clamped = normalize_condition(raw[:motor_dim], payload, stats)
        if clamped:
            sys.stderr.write("warning: raw condition outside training range, clamped\n")
    n = args.points if args.points is not None else int(meta["n_points"])
    sigma = float(meta["train_config"]["sigma"])
    rng = np.random.default_rng((args.seed, 0))
    cloud = sample_shape(net, cond, n=n, d=net.d, steps=args.steps,
                         sigma=sigma, rng=rng, use_ema=True)
    metric = denormalize_points(cloud, stats.scale)
    ext = os.path.splitext(args.out)[1].lower()
    if ext == ".ply":
        save_ply(args.out, metric)
    elif ext == ".xyz":
        save_xyz(args.out, metric)
    else:
        raise ContractViolation(f"output must end in .ply or .xyz, got {args.out!r}")
    _write_json(args.out + ".run.json", _run_manifest("sample", args))
    print(f"sampled {metric.n} points ({args.steps} steps) -> {args.out}")
    return 0


# ----------------------------------------------------------------- eval ----

def _mean_shape_predictor(bundle) -> np.ndarray:
    train_ids = bundle.splits.get("train", [])
    if not train_ids:
        raise ContractViolation("mean-shape baseline needs a training split")
    return bundle.normalized_points(train_ids).mean(axis=0)


def cmd_eval(args) -> int:
    if args.checkpoint is None and args.baseline is None:
        raise ContractViolation("need --checkpoint or --baseline mean-shape")
    _prepare_out_dir(args.out, args.force)
    bundle = read_bundle(args.data)
    ids = bundle.splits.get(args.split, [])
    if not ids:
        raise ContractViolation(f"dataset has no samples in split {args.split!r}")

    if args.baseline is not None:
        predictor = "baseline:mean-shape"
        mean_shape = _mean_shape_predictor(bundle)
        net = None
        sigma = 0.5
    else:
        meta, params = load_checkpoint(args.checkpoint)
        net = net_from_meta(meta, params)
        if net.cond_dim != bundle.condition_dim:
            raise ContractViolation(
                f"checkpoint condition width {net.cond_dim} does not match "
                f"dataset {bundle.condition_dim}")
        predictor = f"checkpoint:{meta['arch']}"
        sigma = float(meta["train_config"]["sigma"])

    scale = bundle.stats.scale
    emd_mode = "exact" if args.neval <= DEFAULT_EXACT_CAP else "approx"
    report = MetricsReport(split=args.split, n_eval=args.neval, seed=args.seed,
                           emd_mode=emd_mode,
                           epsilon=None if emd_mode == "exact" else DEFAULT_EPSILON)
    conds = bundle.normalized_conditions(ids)
    overlay = None
    for row, idx in enumerate(ids):
        gt = PointCloud(bundle.normalized_points([idx])[0])
        if net is None:
            pred = PointCloud(mean_shape.copy())
        else:
            rng = np.random.default_rng((args.seed, int(idx)))
            pred = sample_shape(net, conds[row], n=bundle.n, d=bundle.d,
                                steps=args.steps, sigma=sigma, rng=rng)
        cd, emd = evaluate(pred, gt, scale, n_eval=args.neval,
                           seed=_eval_seed(args.seed, int(idx)))
        report.add(int(idx), cd, emd)
        if overlay is None:
            overlay = (denormalize_points(pred, scale).xyz,
                       denormalize_points(gt, scale).xyz, int(idx))

    payload = report.to_dict()
    payload["predictor"] = predictor
    payload["run"] = _run_manifest("eval", args)
    _write_json(os.path.join(args.out, "report.json"), payload)
    with open(os.path.join(args.out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(report.csv_rows()) + "\n")
    if not args.no_figures:
        from .figures import save_cloud_overlay, save_metrics_figure
        save_metrics_figure(report.sample_indices, report.cd_values,
                            report.emd_values,
                            os.path.join(args.out, "metrics.png"))
        save_cloud_overlay(overlay[0], overlay[1],
                           os.path.join(args.out, "overlay.png"),
                           title=f"{predictor} sample {overlay[2]}")
    print(f"evaluated {len(ids)} samples of split {args.split!r} with {predictor}: "
          f"mean CD x1e4 = {report.mean_cd * 1e4:.4f}, "
          f"mean EMD x1e3 = {report.mean_emd * 1e3:.4f} -> {args.out}")
    return 0


# ------------------------------------------------------------ workspace ----

def cmd_workspace(args) -> int:
    _prepare_out_dir(args.out, args.force)
    spec = RobotSpec(modules=args.modules)
    tips, boundary = workspace_projection(spec, args.sweep, args.seed)
    csv_path = os.path.join(args.out, "workspace.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("y,z\n")
        for y, z in tips:
            fh.write(f"{float(y)!r},{float(z)!r}\n")
        fh.write("boundary\n")
        for y, z in boundary:
            fh.write(f"{float(y)!r},{float(z)!r}\n")
    _write_json(os.path.join(args.out, "run.json"), _run_manifest("workspace", args))
    if not args.no_figures:
        from .figures import save_workspace_figure
        save_workspace_figure(tips, boundary, os.path.join(args.out, "workspace.png"))
    print(f"swept {len(tips)} commands ({spec.modules} modules) -> {csv_path}")
    return 0


# ----------------------------------------------------------------- main ----

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tdcrflow",
        description="Flow-matching shape prediction for tendon-driven continuum robots")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic settled-shape dataset")
    p.add_argument("--modules", type=int, choices=MODULE_CHOICES, default=2)
    p.add_argument("--samples", type=int, required=True, help="number of configurations K")
    p.add_argument("--points", type=int, required=True, help="points per cloud N")
    p.add_argument("--seed", type=int, default=0)
    base = p.add_mutually_exclusive_group()
    base.add_argument("--with-base", dest="with_base", action="store_true", default=False)
    base.add_argument("--no-base", dest="with_base", action="store_false")
    p.add_argument("--payload-max", type=float, default=None,
                   help="enable payload conditioning, uniform in [0, MAX] kg")
    p.add_argument("--colors", action="store_true", help="store RGB channels (d=6)")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="fit a velocity field to a dataset bundle")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=sorted(ARCHITECTURES), default="mlp")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--alpha", type=float, default=3.0)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--lambda-rgb", dest="lambda_rgb", type=float, default=0.05)
    p.add_argument("--ema-decay", dest="ema_decay", type=float, default=0.999)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--sample-steps", dest="sample_steps", type=int, default=100)
    p.add_argument("--val-every", dest="val_every", type=int, default=10)
    p.add_argument("--val-samples", dest="val_samples", type=int, default=8)
    p.add_argument("--val-steps", dest="val_steps", type=int, default=50)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="predict one settled cloud from a condition")
    p.add_argument("--checkpoint", required=True)
    cond = p.add_mutually_exclusive_group(required=True)
    cond.add_argument("--condition", help="comma-separated normalized condition")
    cond.add_argument("--raw", help="comma-separated raw motors (and payload kg if trained with one)")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=None,
                   help="points to sample (default: training cloud size)")
    p.add_argument("--out", required=True, help="output .ply or .xyz path")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a predictor on a dataset split")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--baseline", choices=["mean-shape"], default=None,
                   help="score a constant mean-of-train-shapes predictor instead")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--neval", type=int, default=512)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("workspace", help="export the reachable tip YZ projection")
    p.add_argument("--modules", type=int, choices=MODULE_CHOICES, default=2)
    p.add_argument("--sweep", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_workspace)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ContractViolation as exc:
        return _fail("contract", str(exc))
    except FormatError as exc:
        return _fail("format", str(exc))
    except NumericError as exc:
        return _fail("numeric", str(exc))
    except OSError as exc:
        return _fail("io", str(exc))


if __name__ == "__main__":
    sys.exit(main())
