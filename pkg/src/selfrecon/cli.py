"""Command line: generate-data, curate, train, eval, render.

Exit codes: 0 success, 2 usage error (bad flags, missing input paths),
1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataworld
from .config import ABLATIONS, RunConfig, apply_ablation
from .curation import CurationConfig, curate_directory
from .dataworld import TrainingLoader, load_eval_instances, load_png, save_png
from .evalharness import SUITES, EvalSettings, ReconstructorModel, format_table, psnr, run_suite
from .geometry import RelativePose
from .reconstructor import load_checkpoint
from .selftrain.loop import fit
from .validation import check_angles

log = logging.getLogger("selfrecon")

OUTPUT_ROOT_ENV = "SELFRECON_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def output_path(path) -> Path:
    """Relative output paths are placed under ``$SELFRECON_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def set_single_thread() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


# commands --------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    out = output_path(args.out)
    if args.kind == "synthetic":
        dataworld.build_synthetic_set(out, args.shapes, n_views=args.views, seed=args.seed,
                                      resolution=args.resolution, samples_per_ray=args.samples_per_ray)
    else:
        dataworld.build_pseudo_real_set(out, args.shapes, seed=args.seed, n_eval_views=args.eval_views,
                                        resolution=args.resolution, eval_resolution=args.eval_resolution,
                                        samples_per_ray=args.samples_per_ray)
    print(f"wrote {args.shapes} {args.kind} shapes to {out}")
    return 0


def cmd_curate(args) -> int:
    in_dir = _existing(args.input, "input directory")
    denylist = [c for c in (args.denylist or "").split(",") if c]
    cfg = CurationConfig(seed=args.seed, output_resolution=args.resolution)
    report = curate_directory(in_dir, output_path(args.out), denylist, cfg)
    dropped = ", ".join(f"{k}={v}" for k, v in report.dropped.items() if v)
    print(f"instances {report.total}  kept {report.kept}  dropped: {dropped or 'none'}  unreadable {report.unreadable}")
    return 0


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(_existing(args.config, "config file")) if args.config else RunConfig()
    return apply_ablation(cfg, args.ablate)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    synth_dir = args.synthetic or cfg.data.synthetic
    if not synth_dir:
        raise UsageError("no synthetic data: pass --synthetic or set data.synthetic in the config")
    synth = TrainingLoader(_existing(synth_dir, "synthetic data")).load_synthetic()
    real = None
    real_dir = args.real or cfg.data.real
    if cfg.weights.self_training_enabled:
        if not real_dir:
            raise UsageError("self-training needs --real or data.real in the config")
        real = TrainingLoader(_existing(real_dir, "real data")).load_real()
    out = output_path(args.out or cfg.output_dir)
    resume = _existing(args.resume, "checkpoint") if args.resume else None
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    result = fit(cfg, synth, real, out_dir=out, resume=resume, steps=args.steps)
    last = result.log[-1] if result.log else {}
    print(f"trained to j={result.state.j}  loss={last.get('loss', float('nan')):.5f}  config_hash={cfg.config_hash()}")
    return 0


def _load_model(path):
    p = _existing(path, "checkpoint")
    try:
        return load_checkpoint(p)
    except Exception as exc:  # noqa: BLE001 - any unreadable file is a bad argument
        raise UsageError(f"cannot read checkpoint {p}: {exc}") from exc


def _eval_settings(payload, args) -> tuple[EvalSettings, RunConfig | None]:
    cfg = RunConfig.from_dict(payload["run_config"]) if payload.get("run_config") else None
    radius = cfg.camera.radius if cfg else dataworld.DEFAULT_RADIUS
    fov = cfg.camera.fov_deg if cfg else dataworld.DEFAULT_FOV_DEG
    res = args.resolution or (cfg.train.eval_resolution if cfg else 224)
    return EvalSettings(resolution=res, radius=radius, fov_deg=fov, config_hash=cfg.config_hash() if cfg else "",
                        seed=payload["seed"]), cfg


def cmd_eval(args) -> int:
    model, payload = _load_model(args.checkpoint)
    settings, cfg = _eval_settings(payload, args)
    data = _existing(args.data, "evaluation data")
    instances = load_eval_instances(data, limit=args.limit)
    spr = args.samples_per_ray or (cfg.train.eval_samples_per_ray if cfg else 128)
    adapter = ReconstructorModel(model, spr)
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = SUITES if args.suite == "all" else (args.suite,)
    reports = []
    for name in names:
        rep = run_suite(name, adapter, instances, settings)
        rep.save(out / f"report_{name}.json")
        reports.append(rep)
    print(format_table(reports))
    return 0


def cmd_render(args) -> int:
    model, payload = _load_model(args.checkpoint)
    settings, cfg = _eval_settings(payload, args)
    image = load_png(_existing(args.image, "image"))
    if args.turntable:
        azimuths = [a - 360.0 if a > 180.0 else a for a in (360.0 * k / args.turntable for k in range(args.turntable))]
        poses = check_angles(azimuths, args.elevations[0] if args.elevations else 0.0)
    else:
        poses = check_angles(args.azimuths or [0.0], args.elevations or [0.0])
    spr = args.samples_per_ray or (cfg.train.eval_samples_per_ray if cfg else 128)
    adapter = ReconstructorModel(model, spr)
    state = adapter.reconstruct(image)
    renders, _ = adapter.render(state, [settings.camera(RelativePose(a, e)) for a, e in poses], settings.resolution)
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    for k, ((a, e), frame) in enumerate(zip(poses, renders)):
        name = f"frame_{k:03d}.png"
        save_png(out / name, frame)
        entry = {"file": name, "azimuth": a, "elevation": e}
        if a == 0.0 and e == 0.0:
            target = dataworld.resize_batch(image[None], settings.resolution)[0]
            entry["psnr_vs_input"] = psnr(np.clip(frame, 0, 1), target)
        frames.append(entry)
    meta = {"checkpoint": str(args.checkpoint), "config_hash": settings.config_hash, "seed": settings.seed,
            "resolution": settings.resolution, "frames": frames}
    (out / "render.json").write_text(json.dumps(meta, indent=1))
    print(f"wrote {len(frames)} frames to {out}")
    return 0


# parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfrecon", description=__doc__.splitlines()[0])
    parser.add_argument("--single-thread", action="store_true", help="one thread, deterministic kernels")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="build a synthetic or pseudo-real dataset")
    g.add_argument("--kind", choices=("synthetic", "pseudo-real"), required=True)
    g.add_argument("--shapes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--views", type=int, default=4)
    g.add_argument("--eval-views", type=int, default=5)
    g.add_argument("--resolution", type=int, default=128)
    g.add_argument("--eval-resolution", type=int, default=224)
    g.add_argument("--samples-per-ray", type=int, default=128)
    g.set_defaults(func=cmd_generate_data)

    c = sub.add_parser("curate", help="filter annotated scenes into training crops")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--denylist", default="", help="comma-separated category labels to drop")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--resolution", type=int, default=128)
    c.set_defaults(func=cmd_curate)

    t = sub.add_parser("train", help="train a reconstructor")
    t.add_argument("--config")
    t.add_argument("--synthetic")
    t.add_argument("--real")
    t.add_argument("--out")
    t.add_argument("--resume")
    t.add_argument("--steps", type=int)
    t.add_argument("--ablate", choices=ABLATIONS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run evaluation suites on a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="pseudo-real dataset root")
    e.add_argument("--suite", choices=SUITES + ("all",), default="all")
    e.add_argument("--out", required=True)
    e.add_argument("--resolution", type=int)
    e.add_argument("--samples-per-ray", type=int)
    e.add_argument("--limit", type=int)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="reconstruct one image and render it from chosen viewpoints")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--azimuths", type=_float_list)
    r.add_argument("--elevations", type=_float_list)
    r.add_argument("--turntable", type=int, help="number of evenly spaced frames around 360 degrees")
    r.add_argument("--resolution", type=int)
    r.add_argument("--samples-per-ray", type=int)
    r.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.single_thread:
        set_single_thread()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"selfrecon {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and signal failure
        log.exception("command failed")
        print(f"selfrecon {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
