"""Deterministic image features: a semantic embedder and a perceptual distance.

Both are stand-ins with the same interface as the large pretrained networks
one would normally plug in (a contrastive image encoder, a learned perceptual
metric). They are differentiable so they can sit inside training losses.
"""
from __future__ import annotations

import math
from typing import Protocol

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class ConfigurationError(RuntimeError):
    pass


class SemanticEmbedder(Protocol):
    def __call__(self, images: Tensor) -> Tensor:
        """``(B, H, W, 3)`` images in [0, 1] -> ``(B, D)`` unit vectors."""


def _to_nchw(images: Tensor, size: int) -> Tensor:
    x = images.permute(0, 3, 1, 2)
    if x.shape[-1] != size or x.shape[-2] != size:
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return x


class OrientationHistogramEmbedder(nn.Module):
    """Gradient-orientation histograms plus block colors, L2-normalized.

    Images are resized to 32x32. Each pixel's gradient is projected onto 8
    directions (rectified), pooled over 4x4 cells; block mean colors are
    pooled the same way. The two blocks are normalized separately before
    the final normalization so neither dominates. A constant ``floor`` is
    added to every orientation bin so a flat image maps to a well-defined
    embedding instead of a normalized near-zero vector with huge gradients.
    """

    def __init__(self, size: int = 32, cell: int = 4, bins: int = 8, floor: float = 0.005):
        super().__init__()
        self.size, self.cell, self.floor = size, cell, floor
        angles = torch.arange(bins, dtype=torch.float64) * (2 * math.pi / bins)
        self.register_buffer("directions", torch.stack([angles.cos(), angles.sin()], dim=1))
        kx = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=torch.float64) / 8
        self.register_buffer("kernel", torch.stack([kx, kx.T]).unsqueeze(1))

    def forward(self, images: Tensor) -> Tensor:
        x = _to_nchw(images, self.size)
        gray = x.mean(dim=1, keepdim=True)
        grad = F.conv2d(F.pad(gray, (1, 1, 1, 1), mode="replicate"), self.kernel.to(x.dtype))  # (B, 2, S, S)
        proj = torch.einsum("bkhw,nk->bnhw", grad, self.directions.to(x.dtype)).clamp(min=0)
        hog = F.avg_pool2d(proj, self.cell).flatten(1) + self.floor
        color = F.avg_pool2d(x, self.cell).flatten(1) + 1e-3
        feat = torch.cat([F.normalize(hog, dim=1, eps=1e-12), F.normalize(color, dim=1)], dim=1)
        return F.normalize(feat, dim=1)


class RandomFeaturePerceptual(nn.Module):
    """Distance between channel-normalized features of a fixed random conv pyramid.

    Weights are drawn once from ``seed`` and never trained; the distance is
    symmetric and zero for identical inputs.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = (3,) + tuple(widths)
        for i, (c_in, c_out) in enumerate(zip(chans[:-1], chans[1:])):
            w = torch.randn(c_out, c_in, 3, 3, generator=gen) * math.sqrt(2.0 / (c_in * 9))
            self.register_buffer(f"w{i}", w)
            # biases keep flat regions away from the zero vector, where normalization is unstable
            self.register_buffer(f"b{i}", torch.randn(c_out, generator=gen) * 0.1)
        self.depth = len(widths)

    def features(self, images: Tensor) -> list[Tensor]:
        x = images.permute(0, 3, 1, 2) * 2 - 1
        out = []
        for i in range(self.depth):
            stride = 1 if i == 0 else 2
            w, b = getattr(self, f"w{i}").to(x.dtype), getattr(self, f"b{i}").to(x.dtype)
            x = F.leaky_relu(F.conv2d(x, w, b, stride=stride, padding=1), 0.2)
            out.append(F.normalize(x, dim=1, eps=1e-8))
        return out

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        """Per-image distance ``(B,)`` between ``(B, H, W, 3)`` batches."""
        fa, fb = self.features(a), self.features(b)
        # unit feature vectors differ by at most 2, so each layer term lies in [0, 1]
        return sum(((x - y) ** 2).sum(dim=1).mean(dim=(1, 2)) for x, y in zip(fa, fb)) / (4 * self.depth)


def perceptual_distance(a, b, backend: nn.Module | None) -> Tensor:
    if backend is None:
        raise ConfigurationError("perceptual backend is not initialized")
    a = torch.as_tensor(a)
    b = torch.as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    single = a.ndim == 3
    if single:
        a, b = a[None], b[None]
    d = backend(a, b)
    return d[0] if single else d
