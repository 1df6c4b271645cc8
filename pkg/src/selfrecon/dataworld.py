"""Procedural toy shapes, their ground-truth renders, and dataset I/O.

Two dataset kinds stand in for the two training branches:

* ``synthetic``: ``shapes/<id>/{input.png, view_0..n-1.png, cameras.json}``
  with supervision views.
* ``pseudo-real``: ``pseudo_real/<id>/{input.png, sealed_eval/...}``; only
  the canonical input may be used for training, the sealed views are for
  evaluation and the training loader refuses to open them.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .geometry import (
    DEFAULT_FOV_DEG,
    DEFAULT_RADIUS,
    SHAPE_BOUND,
    CameraPose,
    RelativePose,
    canonical_pose,
    pose_from_azel,
)
from .features import ConfigurationError
from .renderfield import GRAY, composite_background, render_field_views

SEALED_DIR = "sealed_eval"
SYNTHETIC_EXPONENTS = (0.25, 0.9)
PSEUDO_REAL_EXPONENTS = (0.9, 1.7)
# bounding-sphere radius after normalization; keeps every part inside the
# frustum of a 40 degree camera at distance 1.8 from any direction
SHAPE_RADIUS = 0.6
SUPERVISION_RANGE = (120.0, 45.0)
TRAIN_EXPAND_RANGE = (1.45, 1.7)
EVAL_EXPAND_RATIO = 1.6


class SealedSplitError(PermissionError):
    """Raised when a training-path loader touches held-out evaluation views."""


@dataclass
class Part:
    center: np.ndarray
    rotation: np.ndarray
    scales: np.ndarray
    exponents: tuple[float, float]
    colors: np.ndarray  # (2, 3); identical rows for solid parts
    split_axis: int = 0


@dataclass
class ToyShape:
    """Union of superquadric parts with solid or two-tone colors."""

    parts: list[Part]
    seed: int | None = None
    max_density: float = 60.0
    sharpness: float = 60.0

    def density_color(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Evaluate the field at ``(P, 3)`` points; returns ``(P,)`` and ``(P, 3)``."""
        dtype = points.dtype
        total = torch.zeros(points.shape[0], dtype=dtype)
        color_acc = torch.zeros(points.shape[0], 3, dtype=dtype)
        for part in self.parts:
            local = (points - torch.as_tensor(part.center, dtype=dtype)) @ torch.as_tensor(part.rotation, dtype=dtype)
            q = (local / torch.as_tensor(part.scales, dtype=dtype)).abs() + 1e-12
            e1, e2 = part.exponents
            inside = (q[:, 0] ** (2 / e2) + q[:, 1] ** (2 / e2)) ** (e2 / e1) + q[:, 2] ** (2 / e1)
            radial = inside ** (e1 / 2)
            dens = self.max_density * torch.sigmoid(self.sharpness * (1 - radial))
            colors = torch.as_tensor(part.colors, dtype=dtype)
            pick = (local[:, part.split_axis] >= 0).to(dtype).unsqueeze(-1)
            color = pick * colors[0] + (1 - pick) * colors[1]
            total = total + dens
            color_acc = color_acc + dens.unsqueeze(-1) * color
        in_bounds = (points.abs() <= SHAPE_BOUND).all(dim=-1).to(dtype)
        rgb = color_acc / (total.unsqueeze(-1) + 1e-12)
        return torch.clamp(total, max=self.max_density) * in_bounds, rgb

    def field(self, points: torch.Tensor):
        """Field function for :func:`render_field_views` over a batch of one."""
        density, rgb = self.density_color(points.reshape(-1, 3))
        return density.reshape(points.shape[:-1]), rgb.reshape(*points.shape[:-1], 3)


def sphere_shape(radius: float = 0.5, color=(0.8, 0.2, 0.2)) -> ToyShape:
    col = np.array([color, color], dtype=np.float64)
    return ToyShape([Part(np.zeros(3), np.eye(3), np.full(3, radius), (1.0, 1.0), col)])


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def generate_shape(seed: int, exponent_range: tuple[float, float] = SYNTHETIC_EXPONENTS) -> ToyShape:
    rng = np.random.default_rng(seed)
    n_parts = int(rng.integers(1, 5))
    parts = []
    for i in range(n_parts):
        center = rng.uniform(-0.05, 0.05, 3) if i == 0 else rng.uniform(-0.45, 0.45, 3)
        scales = rng.uniform(0.3, 0.6, 3) if i == 0 else rng.uniform(0.12, 0.35, 3)
        exps = tuple(float(e) for e in rng.uniform(*exponent_range, 2))
        base = rng.uniform(0.05, 0.95, 3)
        second = rng.uniform(0.05, 0.95, 3) if rng.random() < 0.5 else base
        parts.append(Part(center, _random_rotation(rng), scales, exps, np.stack([base, second]),
                          int(rng.integers(0, 3))))
    # box corners bound a superquadric with exponents <= 2
    reach = max(np.linalg.norm(p.center) + np.linalg.norm(p.scales) for p in parts)
    scale = SHAPE_RADIUS / reach
    for p in parts:
        p.center = p.center * scale
        p.scales = p.scales * scale
    return ToyShape(parts, seed=seed)


def render_shape_views(
    shape: ToyShape,
    poses: Sequence[CameraPose],
    resolution: int,
    samples_per_ray: int = 128,
    background=GRAY,
) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth renders; returns gray-composited ``(V, H, W, 3)`` and alphas ``(V, H, W)``."""
    with torch.no_grad():
        rgb, alpha = render_field_views(shape.field, [list(poses)], resolution, samples_per_ray,
                                        dtype=torch.float64)
    images = composite_background(rgb[0], alpha[0], background).numpy()
    return np.clip(images, 0.0, 1.0), alpha[0].numpy()


# --------------------------------------------------------------------------- image io

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _hash_config(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _sample_supervision_pose(rng: np.random.Generator) -> RelativePose:
    az_max, el_max = SUPERVISION_RANGE
    while True:
        delta = RelativePose(float(rng.uniform(-az_max, az_max)), float(rng.uniform(-el_max, el_max)))
        if delta.azimuth_deg != 0.0 or delta.elevation_deg != 0.0:
            return delta


def _camera_entry(delta: RelativePose, radius: float, fov: float) -> dict:
    return {**delta.to_dict(), "radius": radius, "fov": fov}


def _atomic_dir(final: Path) -> Path:
    tmp = final.with_name(final.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    return tmp


def _commit_dir(tmp: Path, final: Path) -> None:
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


def shape_id(index: int) -> str:
    return f"{index:05d}"


def build_synthetic_set(
    out_dir,
    n_shapes: int,
    n_views: int = 4,
    seed: int = 0,
    resolution: int = 128,
    samples_per_ray: int = 128,
    radius: float = DEFAULT_RADIUS,
    fov_deg: float = DEFAULT_FOV_DEG,
) -> Path:
    if n_shapes < 1:
        raise ValueError("n_shapes must be >= 1")
    out = Path(out_dir)
    cfg = dict(kind="synthetic", n_shapes=n_shapes, n_views=n_views, seed=seed, resolution=resolution,
               samples_per_ray=samples_per_ray, radius=radius, fov=fov_deg)
    (out / "shapes").mkdir(parents=True, exist_ok=True)
    for i in range(n_shapes):
        ss = np.random.SeedSequence([seed, i, 0])
        shape_seed = int(ss.generate_state(1)[0])
        rng = np.random.default_rng(ss.spawn(1)[0])
        shape = generate_shape(shape_seed, SYNTHETIC_EXPONENTS)
        deltas = [_sample_supervision_pose(rng) for _ in range(n_views)]
        poses = [canonical_pose(radius, fov_deg)] + [pose_from_azel(d, radius, fov_deg) for d in deltas]
        images, _ = render_shape_views(shape, poses, resolution, samples_per_ray)
        final = out / "shapes" / shape_id(i)
        tmp = _atomic_dir(final)
        save_png(tmp / "input.png", images[0])
        for k in range(n_views):
            save_png(tmp / f"view_{k}.png", images[k + 1])
        cams = {
            "shape_seed": shape_seed,
            "input": _camera_entry(RelativePose(0.0, 0.0), radius, fov_deg),
            "views": [_camera_entry(d, radius, fov_deg) for d in deltas],
        }
        (tmp / "cameras.json").write_text(json.dumps(cams, indent=2, sort_keys=True))
        _commit_dir(tmp, final)
    (out / "dataset.json").write_text(json.dumps({**cfg, "config_hash": _hash_config(cfg)}, indent=2, sort_keys=True))
    return out


def build_pseudo_real_set(
    out_dir,
    n_shapes: int,
    seed: int = 1,
    n_eval_views: int = 5,
    resolution: int = 128,
    eval_resolution: int = 224,
    samples_per_ray: int = 128,
    radius: float = DEFAULT_RADIUS,
    fov_deg: float = DEFAULT_FOV_DEG,
) -> Path:
    """Single-view training images plus sealed evaluation views.

    Shape seeds come from a separate stream (tag 1) than the synthetic set,
    and superquadric exponents are drawn from a shifted range.
    """
    if n_shapes < 1:
        raise ValueError("n_shapes must be >= 1")
    out = Path(out_dir)
    cfg = dict(kind="pseudo-real", n_shapes=n_shapes, n_eval_views=n_eval_views, seed=seed,
               resolution=resolution, eval_resolution=eval_resolution, samples_per_ray=samples_per_ray,
               radius=radius, fov=fov_deg)
    (out / "pseudo_real").mkdir(parents=True, exist_ok=True)
    for i in range(n_shapes):
        ss = np.random.SeedSequence([seed, i, 1])
        shape_seed = int(ss.generate_state(1)[0])
        rng = np.random.default_rng(ss.spawn(1)[0])
        shape = generate_shape(shape_seed, PSEUDO_REAL_EXPONENTS)
        deltas = [_sample_supervision_pose(rng) for _ in range(n_eval_views)]
        (inp,), _ = render_shape_views(shape, [canonical_pose(radius, fov_deg)], resolution, samples_per_ray)
        views, _ = render_shape_views(shape, [pose_from_azel(d, radius, fov_deg) for d in deltas],
                                      eval_resolution, samples_per_ray)
        final = out / "pseudo_real" / shape_id(i)
        tmp = _atomic_dir(final)
        save_png(tmp / "input.png", inp)
        sealed = tmp / SEALED_DIR
        sealed.mkdir()
        for k in range(n_eval_views):
            save_png(sealed / f"view_{k}.png", views[k])
        cams = {"shape_seed": shape_seed, "views": [_camera_entry(d, radius, fov_deg) for d in deltas]}
        (sealed / "cameras.json").write_text(json.dumps(cams, indent=2, sort_keys=True))
        _commit_dir(tmp, final)
    (out / "dataset.json").write_text(json.dumps({**cfg, "config_hash": _hash_config(cfg)}, indent=2, sort_keys=True))
    return out


# --------------------------------------------------------------------------- in-memory sets

@dataclass
class SyntheticSet:
    inputs: np.ndarray  # (N, H, W, 3)
    views: np.ndarray  # (N, n, H, W, 3)
    poses: list[list[RelativePose]]
    ids: list[str]
    radius: float = DEFAULT_RADIUS
    fov_deg: float = DEFAULT_FOV_DEG

    def __len__(self):
        return len(self.ids)


@dataclass
class RealSet:
    images: np.ndarray  # (N, H, W, 3)
    ids: list[str]

    def __len__(self):
        return len(self.ids)


@dataclass
class EvalInstance:
    id: str
    image: np.ndarray
    views: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0, 3)))
    poses: list[RelativePose] = field(default_factory=list)
    shape_seed: int | None = None


class TrainingLoader:
    """Reads training inputs and refuses anything under a sealed split.

    Every file opened is appended to :attr:`opened`, so tests can audit the
    training path.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.opened: list[Path] = []

    def _open(self, path: Path) -> np.ndarray:
        if SEALED_DIR in Path(path).parts:
            raise SealedSplitError(f"training loader refuses sealed evaluation file {path}")
        self.opened.append(Path(path))
        return load_png(path)

    def _read_json(self, path: Path) -> dict:
        if SEALED_DIR in Path(path).parts:
            raise SealedSplitError(f"training loader refuses sealed evaluation file {path}")
        self.opened.append(Path(path))
        return json.loads(Path(path).read_text())

    def load_image(self, path) -> np.ndarray:
        return self._open(Path(path))

    def load_synthetic(self) -> SyntheticSet:
        folders = sorted(p for p in (self.root / "shapes").iterdir() if p.is_dir() and not p.name.endswith(".tmp"))
        inputs, views, poses, ids = [], [], [], []
        radius, fov = DEFAULT_RADIUS, DEFAULT_FOV_DEG
        for folder in folders:
            cams = self._read_json(folder / "cameras.json")
            inputs.append(self._open(folder / "input.png"))
            views.append([self._open(folder / f"view_{k}.png") for k in range(len(cams["views"]))])
            poses.append([RelativePose(v["azimuth"], v["elevation"]) for v in cams["views"]])
            radius, fov = cams["input"]["radius"], cams["input"]["fov"]
            ids.append(folder.name)
        if not ids:
            raise ValueError(f"no synthetic shapes under {self.root}")
        return SyntheticSet(np.stack(inputs), np.asarray(views), poses, ids, radius, fov)

    def load_real(self) -> RealSet:
        """Pseudo-real inputs (``pseudo_real/<id>/input.png``) or curated crops (``kept/<id>/image.png``)."""
        images, ids = [], []
        if (self.root / "pseudo_real").is_dir():
            for folder in sorted(p for p in (self.root / "pseudo_real").iterdir() if p.is_dir()):
                if folder.name.endswith(".tmp"):
                    continue
                images.append(self._open(folder / "input.png"))
                ids.append(folder.name)
        elif (self.root / "kept").is_dir():
            for folder in sorted(p for p in (self.root / "kept").iterdir() if p.is_dir()):
                images.append(self._open(folder / "image.png"))
                ids.append(folder.name)
        if not ids:
            raise ValueError(f"no single-view images under {self.root}")
        return RealSet(np.stack(images), ids)


def load_eval_instances(root, limit: int | None = None) -> list[EvalInstance]:
    """Pseudo-real instances with their sealed views (evaluation path only)."""
    base = Path(root) / "pseudo_real"
    if not base.is_dir():
        raise FileNotFoundError(f"no pseudo_real directory under {root}")
    out = []
    for folder in sorted(p for p in base.iterdir() if p.is_dir() and not p.name.endswith(".tmp")):
        sealed = folder / SEALED_DIR
        cams_path = sealed / "cameras.json"
        if not cams_path.exists():
            raise ConfigurationError(f"missing sealed evaluation views for {folder.name}")
        cams = json.loads(cams_path.read_text())
        poses = [RelativePose(v["azimuth"], v["elevation"]) for v in cams["views"]]
        views = np.stack([load_png(sealed / f"view_{k}.png") for k in range(len(poses))])
        out.append(EvalInstance(folder.name, load_png(folder / "input.png"), views, poses, cams.get("shape_seed")))
        if limit is not None and len(out) >= limit:
            break
    return out


# --------------------------------------------------------------------------- cropping

@dataclass
class InstanceRecord:
    image: np.ndarray  # (R, R, 3), gray outside the mask
    mask: np.ndarray  # (R, R) bool
    source_id: str
    expand_ratio: float
    bbox: tuple[int, int, int, int]  # x, y, w, h in the source image
    crop_side: int


def sample_expand_ratio(rng: np.random.Generator, low: float = TRAIN_EXPAND_RANGE[0],
                        high: float = TRAIN_EXPAND_RANGE[1]) -> float:
    return float(rng.uniform(low, high))


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("mask is empty")
    x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
    return int(x0), int(y0), int(x1 - x0), int(y1 - y0)


def _resize(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image
    t = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float64)
    squeeze = t.ndim == 2
    t = t[None, None] if squeeze else t.permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)[0]
    return out[0].numpy() if squeeze else out.permute(1, 2, 0).numpy()


def resize_batch(images: np.ndarray, size: int) -> np.ndarray:
    """Resize ``(N, H, W, 3)`` images; returns the input unchanged when already ``size``."""
    images = np.asarray(images)
    if images.shape[1] == size and images.shape[2] == size:
        return images
    return np.stack([_resize(im, size) for im in images]).astype(images.dtype)


def crop_instance(
    image: np.ndarray,
    mask: np.ndarray,
    expand_ratio: float,
    output_resolution: int,
    background_gray: float = 0.5,
    source_id: str = "",
) -> InstanceRecord:
    """Square crop around the mask bounding box, gray outside the mask.

    The window side is ``expand_ratio`` times the longer bbox side; parts of
    the window falling outside the image are padded with gray.
    """
    if expand_ratio < 1:
        raise ValueError("expand_ratio must be >= 1")
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ValueError("cannot crop an empty mask")
    image = np.asarray(image, dtype=np.float64)
    x, y, w, h = mask_bbox(mask)
    side = max(int(round(expand_ratio * max(w, h))), 1)
    left = int(round(x + w / 2 - side / 2))
    top = int(round(y + h / 2 - side / 2))
    canvas = np.full((side, side, 3), background_gray, dtype=np.float64)
    canvas_mask = np.zeros((side, side), dtype=bool)
    H, W = mask.shape
    sx0, sy0 = max(left, 0), max(top, 0)
    sx1, sy1 = min(left + side, W), min(top + side, H)
    if sx1 > sx0 and sy1 > sy0:
        region = mask[sy0:sy1, sx0:sx1]
        patch = np.where(region[..., None], image[sy0:sy1, sx0:sx1], background_gray)
        canvas[sy0 - top:sy1 - top, sx0 - left:sx1 - left] = patch
        canvas_mask[sy0 - top:sy1 - top, sx0 - left:sx1 - left] = region
    out = _resize(canvas, output_resolution)
    out_mask = _resize(canvas_mask.astype(np.float64), output_resolution) >= 0.5
    return InstanceRecord(np.clip(out, 0, 1), out_mask, source_id, float(expand_ratio), (x, y, w, h), side)
