"""Joint training on supervised synthetic samples and single-view images."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ..config import RunConfig
from ..dataworld import RealSet, SyntheticSet, resize_batch
from ..features import OrientationHistogramEmbedder, RandomFeaturePerceptual
from ..reconstructor import Reconstructor, init_params, load_checkpoint, save_checkpoint
from .curriculum import CurriculumState, curriculum_bounds
from .losses import RenderSettings, self_training_loss, supervised_loss

log = logging.getLogger(__name__)


def lr_at(j: int, lr_max: float, warmup: int, j_max: int, schedule: str = "cosine") -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``j_max``."""
    if warmup > 0 and j < warmup:
        return lr_max * j / warmup
    if schedule == "constant" or j_max <= warmup:
        return lr_max
    progress = min((j - warmup) / (j_max - warmup), 1.0)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


class EpochSampler:
    """Endless index stream over ``n`` items, reshuffled (seeded) each epoch."""

    def __init__(self, n: int, seed):
        if n < 1:
            raise ValueError("dataset is empty")
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.perm = self.rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        for _ in range(k):
            if self.pos >= self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            out.append(self.perm[self.pos])
            self.pos += 1
        return np.asarray(out)

    def state_dict(self) -> dict:
        return {"n": self.n, "rng": self.rng.bit_generator.state, "perm": self.perm.tolist(), "pos": self.pos}

    def load_state_dict(self, state: dict) -> None:
        self.n = state["n"]
        self.rng.bit_generator.state = state["rng"]
        self.perm = np.asarray(state["perm"])
        self.pos = state["pos"]


@dataclass
class TrainState:
    config: RunConfig
    model: Reconstructor
    optimizer: torch.optim.Optimizer
    curriculum: CurriculumState
    rng: np.random.Generator
    synth_sampler: EpochSampler | None = None
    real_sampler: EpochSampler | None = None
    metrics: dict = field(default_factory=dict)

    @property
    def j(self) -> int:
        return self.curriculum.j


def make_optimizer(model: Reconstructor, config: RunConfig) -> torch.optim.Optimizer:
    o = config.optim
    return torch.optim.AdamW(model.parameters(), lr=o.lr, betas=(o.beta1, o.beta2), eps=o.eps,
                             weight_decay=o.weight_decay)


def render_settings(config: RunConfig, stratified: bool = True) -> RenderSettings:
    return RenderSettings(config.render_resolution, config.train.samples_per_ray, config.camera.radius,
                          config.camera.fov_deg, stratified=stratified)


def init_state(config: RunConfig, n_synth: int = 0, n_real: int = 0) -> TrainState:
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    model = init_params(config.model, config.seed)
    c = config.curriculum
    curriculum = CurriculumState(0, config.train.j_max, c.theta_min, c.theta_max, c.phi_min, c.phi_max, c.enabled)
    return TrainState(
        config=config,
        model=model,
        optimizer=make_optimizer(model, config),
        curriculum=curriculum,
        rng=np.random.default_rng(seeds[0]),
        synth_sampler=EpochSampler(n_synth, seeds[1]) if n_synth else None,
        real_sampler=EpochSampler(n_real, seeds[2]) if n_real else None,
    )


_EMBEDDER = None
_PERCEPTUAL = None


def default_backends():
    """Process-wide built-in embedder and perceptual backend (stateless, deterministic)."""
    global _EMBEDDER, _PERCEPTUAL
    if _EMBEDDER is None:
        _EMBEDDER = OrientationHistogramEmbedder()
        _PERCEPTUAL = RandomFeaturePerceptual(seed=0)
    return _EMBEDDER, _PERCEPTUAL


@dataclass
class SynthBatch:
    inputs: torch.Tensor
    views: torch.Tensor
    poses: list


def synth_batch(data: SyntheticSet, idx) -> SynthBatch:
    n = len(data.poses[0])
    return SynthBatch(torch.as_tensor(data.inputs[idx], dtype=torch.float32),
                      torch.as_tensor(data.views[idx][:, :n], dtype=torch.float32),
                      [data.poses[i] for i in idx])


def train_step(state: TrainState, synth: SynthBatch, real: torch.Tensor | None,
               embedder=None, perceptual=None) -> dict:
    """One optimizer update on ``synth`` (and ``real`` single views if self-training is on)."""
    cfg = state.config
    half = cfg.train.batch_size // 2
    if synth is None or synth.inputs.shape[0] == 0:
        raise ValueError("synthetic batch is empty")
    if synth.inputs.shape[0] != half:
        raise ValueError(f"synthetic batch must hold batch_size/2 = {half} samples")
    use_self = cfg.weights.self_training_enabled
    if use_self:
        if real is None or real.shape[0] == 0:
            raise ValueError("real batch is empty")
        if real.shape[0] != half:
            raise ValueError(f"real batch must hold batch_size/2 = {half} samples")
    if embedder is None or perceptual is None:
        embedder, perceptual = default_backends()

    model, opt = state.model, state.optimizer
    lr = lr_at(state.j, cfg.optim.lr, cfg.optim.warmup, cfg.train.j_max, cfg.optim.schedule)
    for group in opt.param_groups:
        group["lr"] = lr
    settings = render_settings(cfg)
    theta, phi = curriculum_bounds(state.curriculum)

    opt.zero_grad(set_to_none=True)
    l_recon, parts = supervised_loss(model, synth.inputs, synth.views, synth.poses, cfg.weights, perceptual,
                                     settings, state.rng)
    loss = l_recon
    comps = {"loss_in": 0.0, "loss_pix": 0.0, "loss_sem": 0.0}
    if use_self:
        l_self, comps = self_training_loss(model, real, state.curriculum, embedder, cfg.weights, state.rng,
                                           settings, m=cfg.train.semantic_views,
                                           naive_semantic=cfg.train.naive_semantic, e2e_cycle=cfg.train.e2e_cycle)
        loss = loss + l_self
    loss.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    grad_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.optim.clip_norm))
    opt.step()
    row = {
        "j": state.j,
        "lr": lr,
        "loss": float(loss.detach()),
        "loss_recon": float(l_recon.detach()),
        "loss_mse": parts["mse"],
        "loss_perceptual": parts["perceptual"],
        **comps,
        "theta_max": theta,
        "phi_max": phi,
        "grad_norm": grad_norm,
    }
    state.curriculum.j += 1
    state.metrics = row
    return row


def checkpoint_extra(state: TrainState) -> dict:
    return {
        "rng": state.rng.bit_generator.state,
        "synth_sampler": state.synth_sampler.state_dict() if state.synth_sampler else None,
        "real_sampler": state.real_sampler.state_dict() if state.real_sampler else None,
        "config_hash": state.config.config_hash(),
    }


def save_state(path, state: TrainState) -> None:
    save_checkpoint(path, state.model, seed=state.config.seed, iteration=state.j,
                    config=state.config.to_dict(), optimizer_state=state.optimizer.state_dict(),
                    extra=checkpoint_extra(state))


def load_state(path, config: RunConfig | None = None) -> TrainState:
    model, payload = load_checkpoint(path)
    if config is None:
        config = RunConfig.from_dict(payload["run_config"])
    extra = payload["extra"]
    state = init_state(config)
    state.model = model
    state.optimizer = make_optimizer(model, config)
    if payload["optimizer"] is not None:
        state.optimizer.load_state_dict(payload["optimizer"])
    state.curriculum.j = payload["iteration"]
    state.rng.bit_generator.state = extra["rng"]
    for key in ("synth_sampler", "real_sampler"):
        if extra.get(key):
            sampler = EpochSampler(extra[key]["n"], 0)
            sampler.load_state_dict(extra[key])
            setattr(state, key, sampler)
    return state


@dataclass
class FitResult:
    state: TrainState
    log: list[dict]
    checkpoints: list[Path]


def fit(
    config: RunConfig,
    synthetic_set: SyntheticSet,
    real_set: RealSet | None = None,
    out_dir=None,
    resume=None,
    steps: int | None = None,
) -> FitResult:
    """Train for ``config.train.j_max`` iterations (or ``steps`` more from a resume).

    With ``out_dir`` the per-step log is appended to ``train_log.jsonl`` and
    checkpoints are written every ``checkpoint_every`` steps and at the end.
    """
    if synthetic_set is None or len(synthetic_set) == 0:
        raise ValueError("synthetic set is empty")
    use_self = config.weights.self_training_enabled
    if use_self and (real_set is None or len(real_set) == 0):
        raise ValueError("self-training needs a non-empty real set")
    res = config.model.input_resolution
    synthetic_set = replace(synthetic_set, inputs=resize_batch(synthetic_set.inputs, res))
    if real_set is not None:
        real_set = replace(real_set, images=resize_batch(real_set.images, res))
    if resume is not None:
        state = load_state(resume, config)
        if state.synth_sampler is None:
            state.synth_sampler = EpochSampler(len(synthetic_set), np.random.SeedSequence(config.seed).spawn(3)[1])
    else:
        state = init_state(config, len(synthetic_set), len(real_set) if (use_self and real_set) else 0)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        if resume is None and log_path.exists():
            log_path.unlink()
    embedder, perceptual = default_backends()
    half = config.train.batch_size // 2
    end = config.train.j_max if steps is None else min(state.j + steps, config.train.j_max)
    rows, ckpts = [], []
    while state.j < end:
        synth = synth_batch(synthetic_set, state.synth_sampler.take(half))
        real = None
        if use_self:
            real = torch.as_tensor(real_set.images[state.real_sampler.take(half)], dtype=torch.float32)
        row = train_step(state, synth, real, embedder, perceptual)
        rows.append(row)
        if not all(torch.isfinite(p).all() for p in state.model.parameters()):
            raise FloatingPointError(f"non-finite parameters after step {row['j']}")
        if out is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            every = config.train.checkpoint_every
            if state.j == config.train.j_max or (every and state.j % every == 0):
                path = out / "checkpoints" / f"ckpt_{state.j:06d}.pt"
                save_state(path, state)
                ckpts.append(path)
        if row["j"] % 50 == 0:
            log.info("step %d loss %.4f lr %.2e", row["j"], row["loss"], row["lr"])
    if out is not None and state.j == config.train.j_max:
        save_state(out / "model.pt", state)
    return FitResult(state, rows, ckpts)
