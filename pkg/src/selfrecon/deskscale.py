"""Small-scale comparison of training variants on held-out pseudo-real views.

Trains each variant for several seeds on the same generated data and
reports the sealed-view PSNR. Results are cached per (variant, seed) so an
interrupted sweep resumes where it stopped.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .config import CurriculumConfig, OptimConfig, RunConfig, TrainConfig, apply_ablation
from .dataworld import TrainingLoader, build_pseudo_real_set, build_synthetic_set, load_eval_instances
from .evalharness import EvalSettings, ReconstructorModel, nvs_suite
from .reconstructor import ModelConfig
from .selftrain.loop import fit

log = logging.getLogger(__name__)


@dataclass
class DeskScaleProtocol:
    n_synthetic: int = 200
    n_real: int = 200
    n_eval: int = 50
    data_seed: int = 7
    resolution: int = 32
    data_samples_per_ray: int = 64
    j_max: int = 600
    batch_size: int = 8
    render_resolution: int = 24
    samples_per_ray: int = 16
    eval_resolution: int = 32
    eval_samples_per_ray: int = 64
    lr: float = 1e-3
    warmup: int = 100
    seeds: tuple = (0, 1, 2)

    def model_config(self) -> ModelConfig:
        return ModelConfig(input_resolution=self.resolution, patch_size=8, triplane_resolution=16,
                           triplane_channels=8, token_width=64, num_blocks=2, num_heads=4, query_grid=4,
                           decoder_hidden=32, decoder_layers=2)

    def run_config(self, seed: int, variant: str) -> RunConfig:
        """``variant`` is ``full``, ``baseline`` or an ablation name."""
        cfg = RunConfig(
            model=self.model_config(),
            train=TrainConfig(j_max=self.j_max, batch_size=self.batch_size, render_resolution=self.render_resolution,
                              samples_per_ray=self.samples_per_ray, eval_resolution=self.eval_resolution,
                              eval_samples_per_ray=self.eval_samples_per_ray, checkpoint_every=0),
            optim=OptimConfig(lr=self.lr, warmup=self.warmup),
            curriculum=CurriculumConfig(),
            seed=seed,
        )
        if variant == "full":
            return cfg
        if variant == "baseline":
            return apply_ablation(cfg, "no-selftrain")
        return apply_ablation(cfg, variant)


def prepare_data(root, protocol: DeskScaleProtocol) -> tuple[Path, Path]:
    root = Path(root)
    synth, real = root / "synthetic", root / "pseudo_real_set"
    if not (synth / "dataset.json").exists():
        build_synthetic_set(synth, protocol.n_synthetic, seed=protocol.data_seed, resolution=protocol.resolution,
                            samples_per_ray=protocol.data_samples_per_ray)
    if not (real / "dataset.json").exists():
        build_pseudo_real_set(real, protocol.n_real, seed=protocol.data_seed + 1, resolution=protocol.resolution,
                              eval_resolution=protocol.eval_resolution,
                              samples_per_ray=protocol.data_samples_per_ray)
    return synth, real


def run_variant(root, protocol: DeskScaleProtocol, variant: str, seed: int) -> dict:
    """Train one (variant, seed) and score it; cached in ``results/<variant>_<seed>.json``."""
    root = Path(root)
    cache = root / "results" / f"{variant}_{seed}.json"
    if cache.exists():
        return json.loads(cache.read_text())
    synth_dir, real_dir = prepare_data(root, protocol)
    cfg = protocol.run_config(seed, variant)
    synth = TrainingLoader(synth_dir).load_synthetic()
    real = TrainingLoader(real_dir).load_real() if cfg.weights.self_training_enabled else None
    start = time.time()
    result = fit(cfg, synth, real)
    train_time = time.time() - start
    instances = load_eval_instances(real_dir, limit=protocol.n_eval)
    settings = EvalSettings(resolution=protocol.eval_resolution, config_hash=cfg.config_hash(), seed=seed)
    report = nvs_suite(ReconstructorModel(result.state.model, protocol.eval_samples_per_ray), instances, settings)
    row = {"variant": variant, "seed": seed, "psnr": report.aggregates["psnr"], "ssim": report.aggregates["ssim"],
           "perceptual": report.aggregates["perceptual"], "train_seconds": train_time,
           "final_loss": result.log[-1]["loss"], "config_hash": cfg.config_hash()}
    cache.parent.mkdir(parents=True, exist_ok=True)
    cache.write_text(json.dumps(row, indent=1, sort_keys=True))
    log.info("%s seed %d: psnr %.3f (%.0fs)", variant, seed, row["psnr"], train_time)
    return row


def run_sweep(root, protocol: DeskScaleProtocol | None = None,
              variants=("baseline", "full", "naive-sem", "e2e-cycle")) -> dict:
    """Mean sealed-view PSNR per variant over the protocol seeds."""
    protocol = protocol or DeskScaleProtocol()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "protocol.json").write_text(json.dumps(asdict(protocol), indent=1, sort_keys=True))
    rows = [run_variant(root, protocol, v, s) for v in variants for s in protocol.seeds]
    summary = {}
    for v in variants:
        vals = [r["psnr"] for r in rows if r["variant"] == v]
        summary[v] = {"mean_psnr": float(np.mean(vals)), "per_seed": vals}
    (root / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def pilot_protocol(**overrides) -> DeskScaleProtocol:
    return replace(DeskScaleProtocol(), **overrides)


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="desk-scale variant sweep")
    parser.add_argument("root")
    parser.add_argument("--j-max", type=int, default=DeskScaleProtocol.j_max)
    parser.add_argument("--variants", default="baseline,full,naive-sem,e2e-cycle")
    parser.add_argument("--seeds", default="0,1,2")
    args = parser.parse_args()
    logging.basicConfig(level="INFO")
    proto = pilot_protocol(j_max=args.j_max, seeds=tuple(int(s) for s in args.seeds.split(",")))
    print(json.dumps(run_sweep(args.root, proto, tuple(args.variants.split(","))), indent=1))
