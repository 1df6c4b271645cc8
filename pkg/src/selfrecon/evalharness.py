"""Evaluation suites: novel-view metrics, semantic similarity, self-consistency.

Models are wrapped behind a small interface (:class:`EvalModel`) so the same
suites score a trained :class:`~selfrecon.reconstructor.Reconstructor` and
analytic oracles. All rendering here uses midpoint samples, so reports are
deterministic.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from skimage.metrics import structural_similarity

from .dataworld import EVAL_EXPAND_RATIO, EvalInstance, ToyShape, crop_instance
from .features import ConfigurationError, perceptual_distance as _perceptual
from .geometry import DEFAULT_FOV_DEG, DEFAULT_RADIUS, CameraPose, RelativePose, camera_rays, canonical_pose, compose_relative
from .reconstructor import Reconstructor
from .renderfield import GRAY, composite_background, render_rays, triplane_field

PSNR_CAP = 99.0
SEMANTIC_VIEWS = 7
SELF_CONSISTENCY_AZIMUTHS = (0, 30, 60, -30, -60, 30, 60, -30, -60, 30, 60, -30, -60)
SELF_CONSISTENCY_ELEVATIONS = (0, 0, 0, 0, 0, 30, 30, 30, 30, 60, 60, 60, 60)
SUITES = ("nvs", "semantic", "self-consistency")
OMITTED_METRICS = ("fid",)


# image metrics ---------------------------------------------------------------

def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped at 99 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(-10.0 * math.log10(mse), PSNR_CAP)


def _gray(x: np.ndarray) -> np.ndarray:
    if x.ndim == 3 and x.shape[-1] == 3:
        return x @ np.array([0.299, 0.587, 0.114])
    return x


def ssim(a, b) -> float:
    """Mean local SSIM on luma with an 11x11 Gaussian window (sigma 1.5)."""
    a, b = _check_pair(a, b)
    return float(structural_similarity(_gray(a), _gray(b), data_range=1.0, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False))


def perceptual_distance(a, b, backend) -> float:
    a, b = _check_pair(a, b)
    with torch.no_grad():
        return float(_perceptual(torch.as_tensor(a), torch.as_tensor(b), backend))


def semantic_similarity(a, b, embedder) -> float:
    a, b = _as_array(a), _as_array(b)
    with torch.no_grad():
        ea = embedder(torch.as_tensor(a)[None])
        eb = embedder(torch.as_tensor(b)[None])
    return float((ea * eb).sum())


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image
    t = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float64).permute(2, 0, 1)[None]
    out = torch.nn.functional.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).numpy()


# models ----------------------------------------------------------------------

class EvalModel(Protocol):
    input_resolution: int

    def reconstruct(self, image: np.ndarray, instance_id: str | None = None):
        """Image ``(R, R, 3)`` -> opaque 3D state."""

    def render(self, state, poses: Sequence[CameraPose], resolution: int) -> tuple[np.ndarray, np.ndarray]:
        """Gray-composited views ``(V, H, W, 3)`` and alphas ``(V, H, W)``."""


def render_field_chunked(field_fn, poses: Sequence[CameraPose], resolution: int, samples_per_ray: int,
                         dtype=torch.float32, chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint render of one field at each pose, in ray chunks to bound memory."""
    rgbs, alphas = [], []
    for pose in poses:
        rays = camera_rays(pose, resolution)
        origins = torch.as_tensor(rays.origins.reshape(-1, 3), dtype=dtype)
        dirs = torch.as_tensor(rays.directions.reshape(-1, 3), dtype=dtype)
        rgb_parts, alpha_parts = [], []
        with torch.no_grad():
            for i in range(0, origins.shape[0], chunk):
                rgb, alpha = render_rays(field_fn, origins[None, i:i + chunk], dirs[None, i:i + chunk],
                                         rays.near, rays.far, samples_per_ray)
                rgb_parts.append(rgb[0])
                alpha_parts.append(alpha[0])
        rgb = torch.cat(rgb_parts).reshape(resolution, resolution, 3)
        alpha = torch.cat(alpha_parts).reshape(resolution, resolution)
        rgbs.append(np.clip(composite_background(rgb, alpha, GRAY).double().numpy(), 0.0, 1.0))
        alphas.append(alpha.double().numpy())
    return np.stack(rgbs), np.stack(alphas)


class ReconstructorModel:
    """Adapter exposing a trained :class:`Reconstructor` to the suites."""

    def __init__(self, model: Reconstructor, samples_per_ray: int = 128):
        self.model = model.eval()
        self.samples_per_ray = samples_per_ray
        self.input_resolution = model.config.input_resolution

    def reconstruct(self, image: np.ndarray, instance_id: str | None = None):
        image = resize_image(_as_array(image), self.input_resolution)
        with torch.no_grad():
            return self.model(torch.as_tensor(image, dtype=torch.float32)[None])

    def render(self, state, poses, resolution):
        return render_field_chunked(triplane_field(state, self.model.decoder), poses, resolution,
                                    self.samples_per_ray, dtype=state.dtype)


class AnalyticShapeModel:
    """Oracle that ignores the image and returns the known shape of the instance."""

    def __init__(self, shapes: dict, input_resolution: int = 128, samples_per_ray: int = 128):
        self.shapes = shapes
        self.input_resolution = input_resolution
        self.samples_per_ray = samples_per_ray

    def reconstruct(self, image, instance_id: str | None = None) -> ToyShape:
        if instance_id not in self.shapes:
            raise KeyError(f"oracle has no shape for instance {instance_id!r}")
        return self.shapes[instance_id]

    def render(self, state: ToyShape, poses, resolution):
        def field_fn(points):
            density, color = state.density_color(points.reshape(-1, 3).double())
            return density.reshape(points.shape[:-1]), color.reshape(*points.shape[:-1], 3)

        return render_field_chunked(field_fn, poses, resolution, self.samples_per_ray, dtype=torch.float64)


class EmptyModel:
    """Zero-density model: every render is the plain gray background."""

    def __init__(self, input_resolution: int = 128):
        self.input_resolution = input_resolution

    def reconstruct(self, image, instance_id=None):
        return None

    def render(self, state, poses, resolution):
        v = len(poses)
        return np.full((v, resolution, resolution, 3), 0.5), np.zeros((v, resolution, resolution))


# reports ---------------------------------------------------------------------

@dataclass
class MetricsReport:
    suite: str
    config_hash: str
    seed: int
    pose_schedule: list
    rows: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    omitted: list = field(default_factory=lambda: list(OMITTED_METRICS))

    def finalize(self, metrics: Sequence[str]) -> "MetricsReport":
        self.aggregates = {m: (float(np.mean([r[m] for r in self.rows])) if self.rows else None) for m in metrics}
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text()))


def _pose_entries(deltas: Sequence[RelativePose]) -> list[dict]:
    return [d.to_dict() for d in deltas]


def semantic_azimuths(n: int = SEMANTIC_VIEWS) -> list[float]:
    return [360.0 * k / n for k in range(n)]


def _wrap(az: float) -> float:
    return az - 360.0 if az > 180.0 else az


def self_consistency_schedule() -> list[RelativePose]:
    return [RelativePose(a, e) for a, e in zip(SELF_CONSISTENCY_AZIMUTHS, SELF_CONSISTENCY_ELEVATIONS)]


@dataclass
class EvalSettings:
    resolution: int = 224
    radius: float = DEFAULT_RADIUS
    fov_deg: float = DEFAULT_FOV_DEG
    crop_ratio: float = EVAL_EXPAND_RATIO
    config_hash: str = ""
    seed: int = 0

    def camera(self, delta: RelativePose) -> CameraPose:
        return compose_relative(delta, self.radius, self.fov_deg)


def _default_backends(embedder, backend):
    if embedder is None or backend is None:
        from .selftrain.loop import default_backends

        e, b = default_backends()
        embedder = embedder or e
        backend = backend or b
    return embedder, backend


def _score(pred: np.ndarray, target: np.ndarray, backend) -> dict:
    return {"psnr": psnr(pred, target), "ssim": ssim(pred, target), "perceptual": perceptual_distance(pred, target, backend)}


def nvs_suite(model: EvalModel, instances: Sequence[EvalInstance], settings: EvalSettings | None = None,
              backend=None) -> MetricsReport:
    """Render each held-out pose and score it against the held-out image."""
    settings = settings or EvalSettings()
    _, backend = _default_backends(None, backend)
    schedule = []
    report = MetricsReport("nvs", settings.config_hash, settings.seed, schedule,
                           settings={"resolution": settings.resolution, "crop_ratio": settings.crop_ratio})
    for inst in instances:
        if inst.views is None or len(inst.views) == 0 or len(inst.views) != len(inst.poses):
            raise ConfigurationError(f"instance {inst.id} has no sealed evaluation views")
        state = model.reconstruct(inst.image, inst.id)
        renders, _ = model.render(state, [settings.camera(d) for d in inst.poses], settings.resolution)
        per_view = [_score(r, resize_image(np.asarray(t, dtype=np.float64), settings.resolution), backend)
                    for r, t in zip(renders, inst.views)]
        row = {"id": inst.id, "poses": _pose_entries(inst.poses), "n_views": len(per_view)}
        for m in ("psnr", "ssim", "perceptual"):
            row[m] = float(np.mean([v[m] for v in per_view]))
            row[f"{m}_per_view"] = [v[m] for v in per_view]
        report.rows.append(row)
    report.pose_schedule = [row["poses"] for row in report.rows]
    return report.finalize(("psnr", "ssim", "perceptual"))


def semantic_similarity_suite(model: EvalModel, instances: Sequence[EvalInstance], embedder=None,
                              settings: EvalSettings | None = None, backend=None) -> MetricsReport:
    """Embedding similarity and perceptual distance of 7 turntable renders to the input."""
    settings = settings or EvalSettings()
    embedder, backend = _default_backends(embedder, backend)
    deltas = [RelativePose(_wrap(a), 0.0) for a in semantic_azimuths()]
    report = MetricsReport("semantic", settings.config_hash, settings.seed,
                           [{"azimuth": a, "elevation": 0.0} for a in semantic_azimuths()],
                           settings={"resolution": settings.resolution, "n_views": SEMANTIC_VIEWS})
    for inst in instances:
        state = model.reconstruct(inst.image, inst.id)
        renders, _ = model.render(state, [settings.camera(d) for d in deltas], settings.resolution)
        target = resize_image(np.asarray(inst.image, dtype=np.float64), settings.resolution)
        sims = [semantic_similarity(r, target, embedder) for r in renders]
        dists = [perceptual_distance(r, target, backend) for r in renders]
        report.rows.append({"id": inst.id, "similarity": float(np.mean(sims)), "perceptual": float(np.mean(dists)),
                            "similarity_per_view": sims, "perceptual_per_view": dists, "n_views": len(renders)})
    return report.finalize(("similarity", "perceptual"))


def recrop(render: np.ndarray, alpha: np.ndarray, ratio: float, resolution: int) -> np.ndarray:
    """Re-frame a render around its silhouette; empty silhouettes are only resized."""
    mask = alpha >= 0.5
    if not mask.any():
        return resize_image(render, resolution)
    return crop_instance(render, mask, ratio, resolution).image


def self_consistency_suite(model: EvalModel, instances: Sequence[EvalInstance], settings: EvalSettings | None = None,
                           backend=None) -> MetricsReport:
    """Render at each scheduled pose, re-crop, reconstruct again, render back at the input view."""
    settings = settings or EvalSettings()
    _, backend = _default_backends(None, backend)
    schedule = self_consistency_schedule()
    report = MetricsReport("self-consistency", settings.config_hash, settings.seed, _pose_entries(schedule),
                           settings={"resolution": settings.resolution, "crop_ratio": settings.crop_ratio,
                                     "recrop": True})
    home = canonical_pose(settings.radius, settings.fov_deg)
    for inst in instances:
        image = np.asarray(inst.image, dtype=np.float64)
        target = resize_image(image, settings.resolution)
        state = model.reconstruct(image, inst.id)
        renders, alphas = model.render(state, [settings.camera(d) for d in schedule], settings.resolution)
        per_pose = []
        for render, alpha in zip(renders, alphas):
            second = model.reconstruct(recrop(render, alpha, settings.crop_ratio, model.input_resolution), inst.id)
            back, _ = model.render(second, [home], settings.resolution)
            per_pose.append(_score(back[0], target, backend))
        row = {"id": inst.id, "n_poses": len(per_pose)}
        for m in ("psnr", "ssim", "perceptual"):
            row[m] = float(np.mean([p[m] for p in per_pose]))
            row[f"{m}_per_pose"] = [p[m] for p in per_pose]
        report.rows.append(row)
    return report.finalize(("psnr", "ssim", "perceptual"))


def run_suite(name: str, model: EvalModel, instances, settings: EvalSettings | None = None,
              embedder=None, backend=None) -> MetricsReport:
    if name == "nvs":
        return nvs_suite(model, instances, settings, backend)
    if name == "semantic":
        return semantic_similarity_suite(model, instances, embedder, settings, backend)
    if name == "self-consistency":
        return self_consistency_suite(model, instances, settings, backend)
    raise ValueError(f"unknown suite {name!r}; expected one of {SUITES}")


def format_table(reports: Sequence[MetricsReport], label: str = "model") -> str:
    """Fixed-width summary: one row per report, metric columns with direction marks."""
    cols = [("psnr", "PSNR↑"), ("ssim", "SSIM↑"), ("perceptual", "Percep↓"), ("similarity", "Sim↑")]
    lines = [f"{'suite':<18}{label:<14}" + "".join(f"{title:>10}" for _, title in cols)]
    lines.append("-" * len(lines[0]))
    for rep in reports:
        cells = []
        for key, _ in cols:
            val = rep.aggregates.get(key)
            cells.append(f"{val:>10.4f}" if val is not None else f"{'-':>10}")
        lines.append(f"{rep.suite:<18}{rep.config_hash[:12]:<14}" + "".join(cells))
    lines.append("fid: omitted")
    return "\n".join(lines)
