"""Command-line surface: self-checks, the two training phases, the full
distillation pipeline, the sampler comparison table, and small demos of the
color transform and the diffusion operator.

Exit codes: 0 success, 1 check or experiment failure, 2 usage error. The
RESTORECT_SEED environment variable overrides the config seed; an explicit
--seed flag wins over both. All output files land under --out.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import aniso_diffusion as ani
from . import checks
from . import distill_harness as dh
from . import hvi_color as hvi
from . import ndtensor as nd
from . import nn_blocks as nn

TRAIN_COMMANDS = ("train-phase1", "train-phase2", "distill")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="restorect",
        description="Desk-scale rectified-flow feature distillation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_steps=False):
        p.add_argument("--config", help="path to a JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="out", help="directory for all output files")
        p.add_argument("--format", choices=("csv", "json"), default="json",
                       help="report format for check commands")
        if needs_steps:
            p.add_argument("--steps", default=None,
                           help="comma-separated sampler step counts, e.g. 1,2,3,4,5")

    common(sub.add_parser("check", help="run every registered self-check"))
    common(sub.add_parser("grad-check", help="run the finite-difference gradient suite"))
    common(sub.add_parser("train-phase1", help="train the velocity predictors"))
    common(sub.add_parser("train-phase2", help="train the student against frozen predictors"))
    common(sub.add_parser("distill", help="run phase 1 and phase 2 end to end"))
    common(sub.add_parser("compare-samplers",
                          help="few-step quality table: rectified flow vs DDIM baseline"),
           needs_steps=True)
    common(sub.add_parser("demo-hvi", help="write a hue-sweep CSV of polarized coordinates"))
    common(sub.add_parser("demo-diffusion", help="write a CSV demo of the diffusion operator"))
    return parser


def resolve_config(args) -> dh.ExperimentConfig:
    if args.config:
        config = dh.load_config(args.config)
    else:
        config = dh.ExperimentConfig()
    env_seed = os.environ.get("RESTORECT_SEED")
    if env_seed is not None:
        config.seed = int(env_seed)
    if args.seed is not None:  # explicit flag wins over the environment
        config.seed = args.seed
    return config


def _require_config(args, parser) -> None:
    if args.command in TRAIN_COMMANDS and not args.config:
        parser.exit(2, f"restorect {args.command}: error: --config is required\n")


def _load_phase1_nets(config, outdir):
    nets = {}
    for key in ("rex", "img"):
        path = os.path.join(outdir, f"ckpt_vel_{key}")
        net = nn.VelocityPredictor(nd.Rng(0), config.feature_dim, t_max=config.t_max,
                                   prefix=f"vel_{key}")
        nn.restore_params(net.params(), nn.load_checkpoint(path))
        net.trained = True
        nets[key] = net
    return nets


def cmd_check(args, names=None) -> int:
    os.makedirs(args.out, exist_ok=True)
    ext = "json" if args.format == "json" else "csv"
    label = "grad_check" if names is not None else "check"
    path = os.path.join(args.out, f"{label}_report.{ext}")
    t0 = time.perf_counter()
    report = checks.run_all_checks(report_path=path, fmt=args.format, names=names)
    status = "ok" if report["passed"] else f"FAILED ({len(report['failed'])})"
    print(f"{label}: {report['total']} checks, {status}, "
          f"{time.perf_counter() - t0:.1f}s, report {path}")
    return 0 if report["passed"] else 1


def cmd_train_phase1(args) -> int:
    config = resolve_config(args)
    os.makedirs(args.out, exist_ok=True)
    rng = nd.Rng(config.seed)
    pairs = dh.synth_dataset(rng.derive("dataset"),
                             config.dataset_size + config.holdout_size, config.image_size)
    teacher = dh.SyntheticTeacher(rng.derive("teacher"), config.image_size, config.feature_dim)
    nets, records = dh.train_phase1(config, teacher, pairs[:config.dataset_size])
    dh.write_metrics_csv(os.path.join(args.out, "phase1_metrics.csv"),
                         records, dh.PHASE1_COMPONENTS)
    nn.save_checkpoint(os.path.join(args.out, "ckpt_vel_rex"), nets["rex"].params())
    nn.save_checkpoint(os.path.join(args.out, "ckpt_vel_img"), nets["img"].params())
    first, last = records[0], records[-1]
    print(f"phase1: {config.phase1_iters} iters, velocity loss "
          f"{first.components['vel_rex'] + first.components['vel_img']:.3f} -> "
          f"{last.components['vel_rex'] + last.components['vel_img']:.3f}")
    return 0


def cmd_train_phase2(args) -> int:
    config = resolve_config(args)
    os.makedirs(args.out, exist_ok=True)
    rng = nd.Rng(config.seed)
    pairs = dh.synth_dataset(rng.derive("dataset"),
                             config.dataset_size + config.holdout_size, config.image_size)
    teacher = dh.SyntheticTeacher(rng.derive("teacher"), config.image_size, config.feature_dim)
    try:
        nets = _load_phase1_nets(config, args.out)
    except FileNotFoundError as exc:
        print(f"phase2: missing phase-1 checkpoints under {args.out} ({exc})", file=sys.stderr)
        return 1
    student, records, summary = dh.train_phase2(
        config, nets, teacher, pairs[:config.dataset_size],
        holdout=pairs[config.dataset_size:])
    dh.write_metrics_csv(os.path.join(args.out, "phase2_metrics.csv"),
                         records, dh.PHASE2_COMPONENTS)
    nn.save_checkpoint(os.path.join(args.out, "ckpt_student"), student.params())
    print(f"phase2: {config.phase2_iters} iters, holdout L1 "
          f"{summary['initial_holdout_l1']:.4f} -> {summary['final_holdout_l1']:.4f}, "
          f"gate fraction {summary['gate_fraction']:.3f}")
    return 0


def cmd_distill(args) -> int:
    config = resolve_config(args)
    summary = dh.distill(config, outdir=args.out)
    print(f"phase1: velocity loss {summary['phase1_initial_vel']:.3f} -> "
          f"{summary['phase1_final_vel']:.3f}")
    print(f"phase2: holdout L1 {summary['initial_holdout_l1']:.4f} -> "
          f"{summary['final_holdout_l1']:.4f}, gate fraction "
          f"{summary['gate_fraction']:.3f}")
    return 0


def cmd_compare_samplers(args) -> int:
    config = resolve_config(args)
    if args.steps:
        try:
            config.sampler_steps = [int(s) for s in args.steps.split(",") if s]
        except ValueError:
            print(f"compare-samplers: bad --steps value '{args.steps}'", file=sys.stderr)
            return 2
        for s in config.sampler_steps:
            if not (1 <= s <= 5):
                print(f"compare-samplers: step {s} outside [1,5]", file=sys.stderr)
                return 2
    os.makedirs(args.out, exist_ok=True)
    rng = nd.Rng(config.seed)
    pairs = dh.synth_dataset(rng.derive("dataset"),
                             config.dataset_size + config.holdout_size, config.image_size)
    data = pairs[:config.dataset_size]
    teacher = dh.SyntheticTeacher(rng.derive("teacher"), config.image_size, config.feature_dim)
    try:
        nets = _load_phase1_nets(config, args.out)
        print(f"compare-samplers: loaded phase-1 checkpoints from {args.out}")
    except FileNotFoundError:
        print("compare-samplers: no checkpoints found, training the flow predictors")
        nets, _ = dh.train_phase1(config, teacher, data)
    ddim_net = dh.train_ddim_baseline(config, teacher, data)
    rows = dh.compare_samplers(
        config, nets["img"], ddim_net, teacher,
        out_csv=os.path.join(args.out, "samplers.csv"),
        timing_csv=os.path.join(args.out, "samplers_timing.csv"))
    for r in rows:
        print(f"{r.sampler:5s} steps={r.steps} frechet={r.frechet:12.4f} mse={r.mse:10.6f}")
    print(f"compare-samplers: {len(rows)} rows -> {os.path.join(args.out, 'samplers.csv')}")
    return 0


def cmd_demo_hvi(args) -> int:
    """Hue sweep at S=1, I=1: polarized coordinates are periodic and continuous
    across the red boundary."""
    config = resolve_config(args)
    os.makedirs(args.out, exist_ok=True)
    params = hvi.HviParams()
    hues = np.concatenate([np.linspace(0.0, 5.999, 120), [1e-3, 6.0 - 1e-3]])

    def hue_rgb(h):
        c = 1.0
        x = c * (1.0 - abs(h % 2.0 - 1.0))
        return [(c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x)][int(h) % 6]

    arr = np.array([hue_rgb(h) for h in hues]).T.reshape(1, 3, 1, -1)
    out = hvi.to_polarized_hvi(ad.constant(arr), params)
    lines = ["hue,h_polar,v_polar,i_polar"]
    for i, h in enumerate(hues):
        lines.append(f"{repr(float(h))},{repr(float(out.h_polar.data[0, 0, 0, i]))},"
                     f"{repr(float(out.v_polar.data[0, 0, 0, i]))},"
                     f"{repr(float(out.i_polar.data[0, 0, 0, i]))}")
    path = os.path.join(args.out, "hvi_hue_sweep.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    gap = math.hypot(
        float(out.h_polar.data[0, 0, 0, -2] - out.h_polar.data[0, 0, 0, -1]),
        float(out.v_polar.data[0, 0, 0, -2] - out.v_polar.data[0, 0, 0, -1]))
    print(f"demo-hvi: {len(hues)} samples -> {path}; red-boundary gap {gap:.2e}")
    return 0


def cmd_demo_diffusion(args) -> int:
    """Diffusion operator response along a 1-d slice of a step edge for a few
    sensitivity values: large gradients are preserved, small ones smoothed."""
    config = resolve_config(args)
    os.makedirs(args.out, exist_ok=True)
    n = 32
    img = np.zeros((1, 1, 8, n))
    img[:, :, :, n // 2:] = 1.0
    img += nd.Rng(config.seed).normal(img.shape, scale=0.02)
    img = np.clip(img, 0.0, 1.0)
    rows = ["x,input,response_s0.05,response_s0.1,response_s0.5"]
    responses = []
    for s in (0.05, 0.1, 0.5):
        params = ani.DiffusionParams(s=ad.Param(s, "s", lo=0.01, hi=1.0))
        responses.append(ani.anisotropic_operator(ad.constant(img), params).data[0, 0, 4])
    for x in range(n):
        vals = ",".join(repr(float(r[x])) for r in responses)
        rows.append(f"{x},{repr(float(img[0, 0, 4, x]))},{vals}")
    path = os.path.join(args.out, "diffusion_edge_response.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"demo-diffusion: edge response for s in (0.05, 0.1, 0.5) -> {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _require_config(args, parser)
    handlers = {
        "check": cmd_check,
        "grad-check": lambda a: cmd_check(a, names=checks.gradient_check_names()),
        "train-phase1": cmd_train_phase1,
        "train-phase2": cmd_train_phase2,
        "distill": cmd_distill,
        "compare-samplers": cmd_compare_samplers,
        "demo-hvi": cmd_demo_hvi,
        "demo-diffusion": cmd_demo_diffusion,
    }
    try:
        return handlers[args.command](args)
    except dh.TrainingDiverged as exc:
        print(f"restorect {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"restorect {args.command}: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
