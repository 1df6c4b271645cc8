"""Triplane feature fields and differentiable emission-absorption rendering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .geometry import CameraPose, camera_rays

GRAY = (0.5, 0.5, 0.5)

# (u, v) world axes spanned by the xy, xz and yz planes
PLANE_AXES = ((0, 1), (0, 2), (1, 2))

FieldFn = Callable[[Tensor], tuple[Tensor, Tensor]]


@dataclass
class Triplane:
    """Three axis-aligned feature planes stored as ``(3, h, w, c)``.

    Plane ``k`` is indexed ``[row, col]`` with ``col`` following the first
    axis in ``PLANE_AXES[k]`` and ``row`` the second; grid nodes sit exactly
    on -1 and +1.
    """

    planes: Tensor

    def __post_init__(self):
        if self.planes.ndim != 4 or self.planes.shape[0] != 3:
            raise ValueError(f"triplane must have shape (3, h, w, c), got {tuple(self.planes.shape)}")
        if self.planes.shape[1] != self.planes.shape[2]:
            raise ValueError("triplane planes must be square (h == w)")

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]


@dataclass
class RenderedView:
    rgb: Tensor  # (H, W, 3)
    alpha: Tensor  # (H, W)
    pose: CameraPose


class FieldDecoder(nn.Module):
    """MLP from a triplane feature to (density >= 0, rgb in [0, 1])."""

    def __init__(self, channels: int, hidden: int = 64, layers: int = 3, density_scale: float = 10.0,
                 density_bias: float = -4.0):
        super().__init__()
        dims = [channels] + [hidden] * layers
        blocks: list[nn.Module] = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            blocks += [nn.Linear(d_in, d_out), nn.SiLU()]
        self.body = nn.Sequential(*blocks)
        self.head = nn.Linear(dims[-1], 4)
        self.density_scale = density_scale
        with torch.no_grad():
            self.head.bias[0] = density_bias

    def forward(self, features: Tensor) -> tuple[Tensor, Tensor]:
        out = self.head(self.body(features))
        density = F.softplus(out[..., 0]) * self.density_scale
        rgb = torch.sigmoid(out[..., 1:])
        return density, rgb


def _as_planes(triplane) -> Tensor:
    return triplane.planes if isinstance(triplane, Triplane) else triplane


def sample_triplane(triplane, points: Tensor) -> Tensor:
    """Bilinearly sample and sum the three planes at ``points``.

    ``triplane`` is a :class:`Triplane`, a ``(3, h, w, c)`` tensor, or a
    batch ``(B, 3, h, w, c)``; ``points`` is ``(..., 3)`` or, for batches,
    ``(B, ..., 3)``. Coordinates outside [-1, 1] are clamped to the border.
    """
    planes = _as_planes(triplane)
    batched = planes.ndim == 5
    if not batched:
        planes = planes.unsqueeze(0)
        points = points.unsqueeze(0)
    b, _, h, w, c = planes.shape
    lead = points.shape[1:-1]
    pts = points.reshape(b, -1, 3).clamp(-1.0, 1.0)
    grids = torch.stack([pts[..., list(axes)] for axes in PLANE_AXES], dim=1)  # (B, 3, P, 2)
    feats = F.grid_sample(
        planes.permute(0, 1, 4, 2, 3).reshape(b * 3, c, h, w),
        grids.reshape(b * 3, 1, -1, 2),
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )  # (B*3, c, 1, P)
    out = feats.reshape(b, 3, c, -1).sum(dim=1).transpose(1, 2).reshape(b, *lead, c)
    return out if batched else out[0]


def triplane_field(triplane, decoder: FieldDecoder) -> FieldFn:
    """Field function over a batch of triplanes; density vanishes outside [-1, 1]^3."""

    def field(points: Tensor) -> tuple[Tensor, Tensor]:
        density, rgb = decoder(sample_triplane(triplane, points))
        inside = (points.abs() <= 1.0).all(dim=-1).to(density.dtype)
        return density * inside, rgb

    return field


def composite(density: Tensor, rgb: Tensor, spacing: float) -> tuple[Tensor, Tensor]:
    """Emission-absorption compositing along the last sample axis.

    ``density`` is ``(..., S)``, ``rgb`` is ``(..., S, 3)``. Returns the
    composited color ``(..., 3)`` and opacity ``(..., )`` = 1 - transmittance.
    """
    optical = density * spacing
    # transmittance before each sample: exp(-sum of preceding optical depths)
    accumulated = torch.cumsum(optical, dim=-1)
    before = torch.cat([torch.zeros_like(accumulated[..., :1]), accumulated[..., :-1]], dim=-1)
    weights = torch.exp(-before) * (1.0 - torch.exp(-optical))
    color = (weights.unsqueeze(-1) * rgb).sum(dim=-2)
    alpha = 1.0 - torch.exp(-accumulated[..., -1])
    return color, alpha


def render_rays(
    field: FieldFn,
    origins: Tensor,
    directions: Tensor,
    near: float,
    far: float,
    samples_per_ray: int,
    jitter: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Render ``(B, N, 3)`` rays through ``field`` with uniform spacing.

    Without ``jitter`` samples sit at bin midpoints; ``jitter`` in [0, 1) of
    shape ``(B, N, S)`` gives stratified sampling.
    """
    if samples_per_ray < 2:
        raise ValueError("samples_per_ray must be >= 2")
    spacing = (far - near) / samples_per_ray
    bins = torch.arange(samples_per_ray, dtype=origins.dtype, device=origins.device)
    offset = 0.5 if jitter is None else jitter.to(origins.dtype)
    t = near + (bins + offset) * spacing  # (S,) or (B, N, S)
    if t.ndim == 1:
        t = t.expand(*origins.shape[:-1], samples_per_ray)
    points = origins.unsqueeze(-2) + t.unsqueeze(-1) * directions.unsqueeze(-2)  # (B, N, S, 3)
    b, n, s, _ = points.shape
    density, rgb = field(points.reshape(b, n * s, 3))
    return composite(density.reshape(b, n, s), rgb.reshape(b, n, s, 3), spacing)


def _ray_tensors(poses: Sequence[Sequence[CameraPose]], resolution: int, dtype, device):
    origins, dirs, bounds = [], [], set()
    for row in poses:
        o_row, d_row = [], []
        for pose in row:
            rays = camera_rays(pose, resolution)
            o_row.append(rays.origins.reshape(-1, 3))
            d_row.append(rays.directions.reshape(-1, 3))
            bounds.add((rays.near, rays.far))
        origins.append(np.concatenate(o_row))
        dirs.append(np.concatenate(d_row))
    if len(bounds) != 1:
        raise ValueError("all poses in one render call must share near/far bounds")
    near, far = bounds.pop()
    to = lambda a: torch.as_tensor(np.stack(a), dtype=dtype, device=device)  # noqa: E731
    return to(origins), to(dirs), near, far


def render_field_views(
    field: FieldFn,
    poses: Sequence[Sequence[CameraPose]],
    resolution: int,
    samples_per_ray: int,
    rng: np.random.Generator | None = None,
    dtype=torch.float32,
    device=None,
) -> tuple[Tensor, Tensor]:
    """Render ``len(poses)`` fields (one per batch row) at ``V`` poses each.

    Returns rgb ``(B, V, H, W, 3)`` and alpha ``(B, V, H, W)``. ``rng``
    switches on stratified depth jitter.
    """
    n_views = {len(row) for row in poses}
    if len(n_views) != 1:
        raise ValueError("every batch row needs the same number of poses")
    v = n_views.pop()
    origins, dirs, near, far = _ray_tensors(poses, resolution, dtype, device)
    jitter = None
    if rng is not None:
        jitter = torch.as_tensor(rng.random((*origins.shape[:2], samples_per_ray)), dtype=dtype, device=device)
    rgb, alpha = render_rays(field, origins, dirs, near, far, samples_per_ray, jitter)
    b = len(poses)
    return rgb.reshape(b, v, resolution, resolution, 3), alpha.reshape(b, v, resolution, resolution)


def render_views(
    planes: Tensor,
    decoder: FieldDecoder,
    poses: Sequence[Sequence[CameraPose]],
    resolution: int,
    samples_per_ray: int,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Batched triplane render: ``planes`` is ``(B, 3, h, w, c)``."""
    return render_field_views(
        triplane_field(planes, decoder), poses, resolution, samples_per_ray, rng,
        dtype=planes.dtype, device=planes.device,
    )


def render(
    triplane,
    decoder: FieldDecoder,
    pose: CameraPose,
    resolution: int,
    samples_per_ray: int = 128,
    rng: np.random.Generator | None = None,
) -> RenderedView:
    planes = _as_planes(triplane)
    rgb, alpha = render_views(planes.unsqueeze(0), decoder, [[pose]], resolution, samples_per_ray, rng)
    return RenderedView(rgb[0, 0], alpha[0, 0], pose)


def composite_background(rgb, alpha, color=GRAY):
    """``rgb + (1 - alpha) * color``; works for numpy arrays and tensors."""
    if isinstance(rgb, RenderedView):
        rgb, alpha = rgb.rgb, rgb.alpha
    if isinstance(rgb, Tensor):
        bg = torch.as_tensor(color, dtype=rgb.dtype, device=rgb.device)
    else:
        bg = np.asarray(color, dtype=np.float64)
    if any(not 0.0 <= float(c) <= 1.0 for c in color):
        raise ValueError("background color must lie in [0, 1]")
    return rgb + (1.0 - alpha)[..., None] * bg
