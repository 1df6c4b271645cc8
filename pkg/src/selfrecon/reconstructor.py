"""A small transformer reconstructor: one RGB image in, one triplane out."""
from __future__ import annotations

import io
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .renderfield import FieldDecoder, Triplane

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_resolution: int = 128
    patch_size: int = 8
    triplane_resolution: int = 32
    triplane_channels: int = 16
    token_width: int = 256
    num_blocks: int = 4
    num_heads: int = 4
    query_grid: int = 8
    decoder_hidden: int = 64
    decoder_layers: int = 3

    def __post_init__(self):
        if self.input_resolution % self.patch_size:
            raise ValueError("input_resolution must be divisible by patch_size")
        h = self.triplane_resolution
        if h < 1 or h & (h - 1):
            raise ValueError("triplane_resolution must be a power of two")
        if h % self.query_grid:
            raise ValueError("triplane_resolution must be divisible by query_grid")
        if self.token_width % self.num_heads:
            raise ValueError("token_width must be divisible by num_heads")

    @property
    def num_patches(self) -> int:
        return (self.input_resolution // self.patch_size) ** 2

    @property
    def upsample_factor(self) -> int:
        return self.triplane_resolution // self.query_grid


class _CrossBlock(nn.Module):
    """Queries attend to image tokens, then to each other, then an MLP."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(width)
        self.norm_kv = nn.LayerNorm(width)
        self.cross = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm_self = nn.LayerNorm(width)
        self.self_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm_mlp = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, queries: Tensor, tokens: Tensor) -> Tensor:
        kv = self.norm_kv(tokens)
        q = self.norm_q(queries)
        queries = queries + self.cross(q, kv, kv, need_weights=False)[0]
        q = self.norm_self(queries)
        queries = queries + self.self_attn(q, q, q, need_weights=False)[0]
        return queries + self.mlp(self.norm_mlp(queries))


class Reconstructor(nn.Module):
    """Patch encoder, learned triplane queries, cross-attention, plane upsampler.

    The shared :class:`FieldDecoder` lives here too so that one state dict
    holds every trainable weight.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        width = cfg.token_width
        self.patch_embed = nn.Conv2d(3, width, cfg.patch_size, stride=cfg.patch_size)
        self.patch_pos = nn.Parameter(torch.randn(1, cfg.num_patches, width) * 0.02)
        self.queries = nn.Parameter(torch.randn(1, 3 * cfg.query_grid**2, width) * 0.02)
        self.blocks = nn.ModuleList(_CrossBlock(width, cfg.num_heads) for _ in range(cfg.num_blocks))
        self.out_norm = nn.LayerNorm(width)
        f = cfg.upsample_factor
        self.upsample = nn.Linear(width, f * f * cfg.triplane_channels)
        self.decoder = FieldDecoder(cfg.triplane_channels, cfg.decoder_hidden, cfg.decoder_layers)

    def forward(self, images: Tensor) -> Tensor:
        """``(B, H, W, 3)`` images in [0, 1] -> ``(B, 3, h, w, c)`` planes."""
        cfg = self.config
        images = check_model_input(images, cfg)
        b = images.shape[0]
        x = self.patch_embed(images.permute(0, 3, 1, 2) * 2 - 1)
        tokens = x.flatten(2).transpose(1, 2) + self.patch_pos
        queries = self.queries.expand(b, -1, -1)
        for block in self.blocks:
            queries = block(queries, tokens)
        g, f, c = cfg.query_grid, cfg.upsample_factor, cfg.triplane_channels
        out = self.upsample(self.out_norm(queries))  # (B, 3*g*g, f*f*c)
        out = out.reshape(b, 3, g, g, f, f, c).permute(0, 1, 2, 4, 3, 5, 6)
        return out.reshape(b, 3, g * f, g * f, c)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_params(config: ModelConfig, seed: int) -> Reconstructor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Reconstructor(config)


def check_model_input(images: Tensor, config: ModelConfig) -> Tensor:
    if images.ndim == 3:
        images = images.unsqueeze(0)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected (B, H, W, 3) images, got {tuple(images.shape)}")
    res = config.input_resolution
    if images.shape[1:3] != (res, res):
        raise ValueError(f"image resolution {tuple(images.shape[1:3])} != configured ({res}, {res})")
    return images


def reconstruct(model: Reconstructor, image) -> Triplane:
    """Single image ``(H, W, 3)`` -> :class:`Triplane`."""
    param = next(model.parameters())
    image = torch.as_tensor(np.asarray(image) if not isinstance(image, Tensor) else image,
                            dtype=param.dtype, device=param.device)
    if image.ndim != 3:
        raise ValueError("reconstruct takes a single (H, W, 3) image")
    planes = model(check_model_input(image, model.config))
    return Triplane(planes[0])


def _to_bytes(obj) -> bytes:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def save_checkpoint(path, model: Reconstructor, *, seed: int, iteration: int, config: dict | None = None,
                    optimizer_state: dict | None = None, extra: dict | None = None) -> None:
    """Write a versioned checkpoint; the file bytes depend only on the inputs."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "run_config": config,
        "seed": seed,
        "iteration": iteration,
        "model": model.state_dict(),
        "optimizer": optimizer_state,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(_to_bytes(payload))


def load_checkpoint(path) -> tuple[Reconstructor, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    model = Reconstructor(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["model"])
    return model, payload
