"""Supervised, input-view, cycle-consistency and semantic losses.

All functions are batch-first: images are ``(B, H, W, 3)`` tensors in
[0, 1] composited on gray, triplanes are ``(B, 3, h, w, c)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from ..config import LossWeights
from ..geometry import (
    DEFAULT_FOV_DEG,
    DEFAULT_RADIUS,
    RelativePose,
    canonical_pose,
    compose_relative,
    inverse_relative_pose,
)
from ..reconstructor import Reconstructor
from ..renderfield import GRAY, composite_background, render_views
from .curriculum import CurriculumState, sample_cycle_pose, sample_semantic_poses


@dataclass
class RenderSettings:
    resolution: int
    samples_per_ray: int
    radius: float = DEFAULT_RADIUS
    fov_deg: float = DEFAULT_FOV_DEG
    background: tuple = GRAY
    stratified: bool = True

    def jitter_rng(self, rng: np.random.Generator | None) -> np.random.Generator | None:
        return rng if self.stratified else None


@dataclass
class CycleDiagnostics:
    deltas: list[RelativePose]
    intermediate: Tensor  # second-pass input, (B, H, W, 3)
    per_sample: Tensor = field(default=None)


@dataclass
class SemanticDiagnostics:
    deltas: list[list[RelativePose]]
    similarities: Tensor  # (B, m)
    selected: Tensor  # (B,) long


def resize_images(images: Tensor, size: int) -> Tensor:
    if images.shape[1] == size and images.shape[2] == size:
        return images
    x = F.interpolate(images.permute(0, 3, 1, 2), size=(size, size), mode="bilinear",
                      align_corners=False, antialias=True)
    return x.permute(0, 2, 3, 1)


def image_mse(a: Tensor, b: Tensor) -> Tensor:
    """Per-image mean squared error over all trailing dims."""
    return ((a - b) ** 2).flatten(1).mean(dim=1)


def _render_gray(planes, decoder, poses, settings: RenderSettings, rng) -> Tensor:
    rgb, alpha = render_views(planes, decoder, poses, settings.resolution, settings.samples_per_ray,
                              settings.jitter_rng(rng))
    return composite_background(rgb, alpha, settings.background)


def supervised_loss(
    model: Reconstructor,
    inputs: Tensor,
    views: Tensor,
    poses: Sequence[Sequence[RelativePose]],
    weights: LossWeights,
    perceptual,
    settings: RenderSettings,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, dict]:
    """Multi-view reconstruction loss on synthetic samples.

    Mean over samples and views of ``MSE + lambda_perceptual * perceptual``.
    """
    if not poses or any(len(p) == 0 for p in poses) or len(poses) != inputs.shape[0]:
        raise ValueError("each synthetic sample needs at least one ground-truth pose")
    if views.shape[1] != len(poses[0]):
        raise ValueError("number of views does not match number of poses")
    planes = model(inputs)
    cams = [[compose_relative(d, settings.radius, settings.fov_deg) for d in row] for row in poses]
    pred = _render_gray(planes, model.decoder, cams, settings, rng)  # (B, n, H, W, 3)
    b, n = pred.shape[:2]
    target = resize_images(views.reshape(b * n, *views.shape[2:]), settings.resolution)
    pred = pred.reshape(b * n, *pred.shape[2:])
    mse = image_mse(pred, target)
    loss = mse.mean()
    perc = torch.zeros((), dtype=loss.dtype)
    if weights.lambda_perceptual > 0:
        perc = perceptual(pred, target).mean()
        loss = loss + weights.lambda_perceptual * perc
    return loss, {"mse": float(mse.detach().mean()), "perceptual": float(perc.detach())}


def input_view_loss(planes: Tensor, decoder, input_images: Tensor, settings: RenderSettings,
                    rng: np.random.Generator | None = None) -> Tensor:
    """MSE between the canonical-view render and the input image."""
    cam = canonical_pose(settings.radius, settings.fov_deg)
    pred = _render_gray(planes, decoder, [[cam]] * planes.shape[0], settings, rng)[:, 0]
    return image_mse(pred, resize_images(input_images, settings.resolution)).mean()


def cycle_second_pass(
    model: Reconstructor,
    intermediate: Tensor,
    deltas: Sequence[RelativePose],
    targets: Tensor,
    settings: RenderSettings,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Reconstruct the novel views and render them back at the input viewpoint."""
    planes = model(intermediate)
    cams = [[inverse_relative_pose(d, settings.radius, settings.fov_deg)] for d in deltas]
    pred = _render_gray(planes, model.decoder, cams, settings, rng)[:, 0]
    return image_mse(pred, resize_images(targets, settings.resolution))


def cycle_loss(
    model: Reconstructor,
    input_images: Tensor,
    state: CurriculumState,
    rng: np.random.Generator,
    settings: RenderSettings,
    e2e: bool = False,
    planes: Tensor | None = None,
) -> tuple[Tensor, CycleDiagnostics]:
    """Reconstruct, render a sampled novel view, reconstruct it, render back.

    The intermediate render is detached unless ``e2e`` is set, so the first
    reconstruction receives no gradient from this loss.
    """
    deltas = [sample_cycle_pose(state, rng) for _ in range(input_images.shape[0])]
    if planes is None:
        planes = model(input_images)
    cams = [[compose_relative(d, settings.radius, settings.fov_deg)] for d in deltas]
    if e2e:
        novel = _render_gray(planes, model.decoder, cams, settings, rng)[:, 0]
    else:
        with torch.no_grad():
            novel = _render_gray(planes.detach(), model.decoder, cams, settings, rng)[:, 0]
        novel = novel.detach()
    intermediate = resize_images(novel.clamp(0.0, 1.0), model.config.input_resolution)
    per_sample = cycle_second_pass(model, intermediate, deltas, input_images, settings, rng)
    return per_sample.mean(), CycleDiagnostics(deltas, intermediate, per_sample.detach())


def select_hard_negative(similarities: Tensor) -> Tensor:
    """Index of the least similar view per row (first index on ties)."""
    sims = similarities.detach().cpu().numpy()
    return torch.as_tensor(np.argmin(sims, axis=1), dtype=torch.long)


def semantic_loss(
    decoder,
    planes: Tensor,
    input_images: Tensor,
    embedder,
    rng: np.random.Generator,
    settings: RenderSettings,
    m: int = 4,
    naive: bool = False,
) -> tuple[Tensor, SemanticDiagnostics]:
    """Negative embedding similarity between novel renders and the input.

    With hard-negative mining (default) only the least similar of ``m``
    renders contributes; ``naive`` averages all ``m``. Candidates are scored
    without gradient and the selected view is re-rendered with gradient.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    b = planes.shape[0]
    deltas = [sample_semantic_poses(m, rng) for _ in range(b)]
    cams = [[compose_relative(d, settings.radius, settings.fov_deg) for d in row] for row in deltas]
    with torch.no_grad():
        target = embedder(resize_images(input_images, settings.resolution))  # (B, D)
    # candidates are scored on midpoint samples so the gradient re-render of the
    # chosen view is exactly the image that was scored
    fixed = replace(settings, stratified=False)
    if naive:
        renders = _render_gray(planes, decoder, cams, fixed, None)  # (B, m, H, W, 3)
        emb = embedder(renders.reshape(b * m, *renders.shape[2:])).reshape(b, m, -1)
        sims = (emb * target[:, None]).sum(-1)
        return -sims.mean(), SemanticDiagnostics(deltas, sims.detach(), select_hard_negative(sims))
    with torch.no_grad():
        renders = _render_gray(planes.detach(), decoder, cams, fixed, None)
        emb = embedder(renders.reshape(b * m, *renders.shape[2:])).reshape(b, m, -1)
        sims = (emb * target[:, None]).sum(-1)
    selected = select_hard_negative(sims)
    chosen = [[cams[i][int(k)]] for i, k in enumerate(selected)]
    render = _render_gray(planes, decoder, chosen, fixed, None)[:, 0]
    loss = -(embedder(render) * target).sum(-1)
    return loss.mean(), SemanticDiagnostics(deltas, sims, selected)


def combine_self_training(l_in, l_pix, l_sem, weights: LossWeights):
    return weights.lambda_in * l_in + weights.lambda_pix * l_pix + weights.lambda_sem * l_sem


def self_training_loss(
    model: Reconstructor,
    input_images: Tensor,
    state: CurriculumState,
    embedder,
    weights: LossWeights,
    rng: np.random.Generator,
    settings: RenderSettings,
    m: int = 4,
    naive_semantic: bool = False,
    e2e_cycle: bool = False,
) -> tuple[Tensor, dict]:
    """Weighted sum of the input-view, cycle and semantic losses on single views.

    Terms whose weight is zero are skipped entirely.
    """
    planes = model(input_images)
    zero = torch.zeros((), dtype=planes.dtype)
    l_in = input_view_loss(planes, model.decoder, input_images, settings, rng) if weights.lambda_in > 0 else zero
    l_pix = zero
    if weights.lambda_pix > 0:
        l_pix, _ = cycle_loss(model, input_images, state, rng, settings, e2e=e2e_cycle, planes=planes)
    l_sem = zero
    if weights.lambda_sem > 0:
        l_sem, _ = semantic_loss(model.decoder, planes, input_images, embedder, rng, settings, m, naive_semantic)
    total = combine_self_training(l_in, l_pix, l_sem, weights)
    return total, {"loss_in": float(l_in.detach()), "loss_pix": float(l_pix.detach()), "loss_sem": float(l_sem.detach())}
