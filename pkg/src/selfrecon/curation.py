"""Select unoccluded, well-framed object instances from annotated images.

Inputs per image are instance masks, detection confidences, optional category
labels and a monocular inverse-depth map (larger values are nearer). An
instance is kept only if it passes the confidence, scale, truncation and
category filters and does not appear to be occluded where it touches other
instances.

Occlusion test: along the part of the boundary that touches another instance,
sample points, find the outward normal, and compare inverse depth just inside
against just outside. If the outside is clearly nearer at enough points, the
instance is behind its neighbour and is dropped.
"""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataworld import crop_instance, mask_bbox, save_png, load_png, sample_expand_ratio, to_uint8

log = logging.getLogger(__name__)

KEEP = "keep"
DROP = "drop"
DROP_REASONS = ("small", "truncated", "category", "occluded", "degenerate-boundary", "low-confidence")


@dataclass
class CurationConfig:
    confidence_threshold: float = 0.3
    scale_px: int = 100
    border_px: int = 10
    boundary_kernel: int = 9
    contact_kernel: int = 15
    n_points: int = 20
    step_frac: float = 0.05
    depth_ratio: float = 0.95
    vote_frac: float = 0.5
    min_mask_step: float = 2.0
    output_resolution: int = 128
    expand_range: tuple = (1.45, 1.7)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.confidence_threshold <= 1:
            raise ValueError("confidence_threshold must lie in [0, 1]")
        if self.boundary_kernel < 1 or self.contact_kernel < 1:
            raise ValueError("kernel sizes must be positive")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if not 0 < self.vote_frac <= 1:
            raise ValueError("vote_frac must lie in (0, 1]")
        self.expand_range = tuple(self.expand_range)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    def config_hash(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SceneRecord:
    """One annotated image: masks keyed by instance id, inverse depth, scores."""

    image: np.ndarray  # (H, W, 3) float in [0, 1]
    masks: dict  # id -> (H, W) bool
    depth: np.ndarray  # (H, W) inverse depth, >= 0
    confidences: dict
    categories: dict = field(default_factory=dict)
    scene_id: str = ""

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ValueError("depth must be a 2-D map")
        if not np.isfinite(self.depth).all() or (self.depth < 0).any():
            raise ValueError("depth must be finite and non-negative")
        masks = {}
        for key, m in self.masks.items():
            m = np.asarray(m)
            if m.shape != self.depth.shape:
                raise ValueError(f"mask {key} has shape {m.shape}, depth has {self.depth.shape}")
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"mask {key} is not binary")
            masks[key] = m.astype(bool)
        self.masks = masks

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class CurationVerdict:
    instance_id: str
    status: str
    reason: str | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def keep(self) -> bool:
        return self.status == KEEP

    @classmethod
    def kept(cls, instance_id, **diag) -> "CurationVerdict":
        return cls(str(instance_id), KEEP, None, diag)

    @classmethod
    def dropped(cls, instance_id, reason: str, **diag) -> "CurationVerdict":
        if reason not in DROP_REASONS:
            raise ValueError(f"unknown drop reason {reason!r}")
        return cls(str(instance_id), DROP, reason, diag)


# filters ---------------------------------------------------------------------

def filter_confidence(record: SceneRecord, instance_id, threshold: float = 0.3) -> bool:
    """True iff the detection confidence reaches ``threshold`` (inclusive)."""
    if instance_id not in record.confidences:
        raise KeyError(f"no confidence for instance {instance_id!r}")
    return float(record.confidences[instance_id]) >= threshold


def filter_small_truncated(mask: np.ndarray, image_size, scale_px: int = 100, border_px: int = 10) -> str | None:
    """Returns ``None`` if the instance passes, else the drop reason.

    The instance is small when its longer bbox side is under ``scale_px`` and
    truncated when the bbox comes within ``border_px`` of any image edge.
    """
    if not np.any(mask):
        return "degenerate-boundary"
    x, y, w, h = mask_bbox(mask)
    height, width = image_size[:2]
    if max(w, h) < scale_px:
        return "small"
    if min(x, y, width - (x + w), height - (y + h)) < border_px:
        return "truncated"
    return None


# morphology ------------------------------------------------------------------

def _square(k: int) -> np.ndarray:
    return np.ones((k, k), dtype=bool)


def instance_boundary(mask: np.ndarray, kernel: int = 9) -> np.ndarray:
    """Mask minus its erosion by a ``kernel``-square; pixels outside the image count as background."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_square(kernel), border_value=0)
    return mask & ~eroded


def contact_boundary(boundary: np.ndarray, other_boundaries: Iterable[np.ndarray], kernel: int = 15) -> np.ndarray:
    """Pixels of ``boundary`` within reach of another instance's boundary band.

    The other bands are dilated by a ``kernel``-square (reach ``kernel // 2``
    pixels) and intersected with this instance's own band.
    """
    boundary = np.asarray(boundary, dtype=bool)
    union = np.zeros_like(boundary)
    for other in other_boundaries:
        union |= np.asarray(other, dtype=bool)
    if not union.any():
        return np.zeros_like(boundary)
    return boundary & ndimage.binary_dilation(union, structure=_square(kernel))


def interior_pixels(mask: np.ndarray) -> np.ndarray:
    """Mask pixels whose whole 8-neighbourhood is also in the mask."""
    return ndimage.binary_erosion(np.asarray(mask, dtype=bool), structure=_square(3), border_value=0)


# normals ---------------------------------------------------------------------

@dataclass
class NormalResult:
    normal: np.ndarray | None  # outward unit vector (dx, dy) in (column, row) axes
    status: str  # ok | interior | zero-gradient | ambiguous


def _mask_at(mask: np.ndarray, x: float, y: float) -> bool:
    col, row = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
    h, w = mask.shape
    if not (0 <= row < h and 0 <= col < w):
        return False
    return bool(mask[row, col])


def mask_gradient(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sobel gradient ``(gx, gy)`` of the 3x3 box-blurred mask."""
    smooth = ndimage.uniform_filter(np.asarray(mask, dtype=np.float64), size=3, mode="constant")
    return ndimage.sobel(smooth, axis=1, mode="constant"), ndimage.sobel(smooth, axis=0, mode="constant")


def boundary_normal(mask: np.ndarray, point, step: float = 2.0, gradient=None) -> NormalResult:
    """Outward boundary normal at ``point = (row, col)``.

    The Sobel direction fixes the normal's line; its sign is set by probing
    the mask ``step`` pixels to either side. The point is rejected when its
    8-neighbourhood lies inside the mask, the gradient vanishes, or both
    probes agree (a thin or non-convex local boundary).
    """
    mask = np.asarray(mask, dtype=bool)
    row, col = int(point[0]), int(point[1])
    h, w = mask.shape
    window = np.zeros((3, 3), dtype=bool)
    r0, r1, c0, c1 = max(row - 1, 0), min(row + 2, h), max(col - 1, 0), min(col + 2, w)
    window[r0 - row + 1:r1 - row + 1, c0 - col + 1:c1 - col + 1] = mask[r0:r1, c0:c1]
    if window.all():
        return NormalResult(None, "interior")
    gx, gy = gradient if gradient is not None else mask_gradient(mask)
    g = np.array([gx[row, col], gy[row, col]])
    norm = np.linalg.norm(g)
    if norm < 1e-9:
        return NormalResult(None, "zero-gradient")
    n = -g / norm  # the gradient points into the mask
    ahead = _mask_at(mask, col + step * n[0], row + step * n[1])
    behind = _mask_at(mask, col - step * n[0], row - step * n[1])
    if ahead == behind:
        return NormalResult(None, "ambiguous")
    return NormalResult(n if not ahead else -n, "ok")


def _depth_at(depth: np.ndarray, x: float, y: float) -> float:
    h, w = depth.shape
    col = min(max(int(np.floor(x + 0.5)), 0), w - 1)
    row = min(max(int(np.floor(y + 0.5)), 0), h - 1)
    return float(depth[row, col])


# occlusion -------------------------------------------------------------------

def _boundaries(record: SceneRecord, kernel: int) -> dict:
    return {key: instance_boundary(m, kernel) for key, m in record.masks.items()}


def occlusion_verdict(
    record: SceneRecord,
    instance_id,
    N: int = 20,
    step_frac: float = 0.05,
    depth_ratio: float = 0.95,
    vote_frac: float = 0.5,
    rng: np.random.Generator | None = None,
    boundary_kernel: int = 9,
    contact_kernel: int = 15,
    min_mask_step: float = 2.0,
    boundaries: dict | None = None,
) -> CurationVerdict:
    """Decide whether ``instance_id`` is occluded by a neighbour.

    Points are drawn with replacement from the contact boundary (interior
    pixels excluded). For each point the inverse depth is read ``step_frac * s``
    pixels inside and outside along the normal, ``s`` being the mean bbox side;
    the point is occluded when inside / outside < ``depth_ratio``. A vote share
    of at least ``vote_frac`` drops the instance. Any normal rejection drops
    it as ``degenerate-boundary``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    mask = record.masks[instance_id]
    if not mask.any():
        return CurationVerdict.dropped(instance_id, "degenerate-boundary", detail="empty mask")
    if boundaries is None:
        boundaries = _boundaries(record, boundary_kernel)
    others = [b for key, b in boundaries.items() if key != instance_id]
    contact = contact_boundary(boundaries[instance_id], others, contact_kernel)
    x, y, bw, bh = mask_bbox(mask)
    s = (bw + bh) / 2.0
    step = step_frac * s
    diag = {"s": s, "bbox": [x, y, bw, bh], "contact_pixels": int(contact.sum())}
    if not contact.any():
        return CurationVerdict.kept(instance_id, **diag, vote_fraction=0.0, points=[], occluded=[])
    pool = np.argwhere(contact & ~interior_pixels(mask))
    diag["pool_size"] = int(len(pool))
    if len(pool) == 0:
        return CurationVerdict.dropped(instance_id, "degenerate-boundary", **diag, detail="no sampleable points")
    picks = pool[rng.integers(0, len(pool), size=N)]
    gradient = mask_gradient(mask)
    mask_step = max(step, min_mask_step)
    points, normals, inner, outer, flags = [], [], [], [], []
    for row, col in picks:
        res = boundary_normal(mask, (row, col), mask_step, gradient)
        if res.status != "ok":
            return CurationVerdict.dropped(instance_id, "degenerate-boundary", **diag,
                                           detail=f"normal {res.status} at ({int(row)}, {int(col)})")
        n = res.normal
        d_in = _depth_at(record.depth, col - step * n[0], row - step * n[1])
        d_out = _depth_at(record.depth, col + step * n[0], row + step * n[1])
        ratio = d_in / d_out if d_out > 0 else np.inf
        points.append([int(row), int(col)])
        normals.append([float(n[0]), float(n[1])])
        inner.append(d_in)
        outer.append(d_out)
        flags.append(bool(ratio < depth_ratio))
    fraction = float(np.mean(flags))
    diag.update(points=points, normals=normals, d_inner=inner, d_outer=outer, occluded=flags, vote_fraction=fraction)
    if fraction >= vote_frac:
        return CurationVerdict.dropped(instance_id, "occluded", **diag)
    return CurationVerdict.kept(instance_id, **diag)


def instance_rng(seed: int, scene_id: str, instance_id) -> np.random.Generator:
    """Generator keyed by ids rather than processing order."""
    key = [seed, zlib.crc32(scene_id.encode()), zlib.crc32(str(instance_id).encode())]
    return np.random.default_rng(np.random.SeedSequence(key))


def curate_instance(
    record: SceneRecord,
    instance_id,
    denylist: Iterable[str] = (),
    config: CurationConfig | None = None,
    boundaries: dict | None = None,
) -> CurationVerdict:
    """Confidence, then scale/truncation, then category, then occlusion."""
    cfg = config or CurationConfig()
    mask = record.masks[instance_id]
    if not filter_confidence(record, instance_id, cfg.confidence_threshold):
        return CurationVerdict.dropped(instance_id, "low-confidence",
                                       confidence=float(record.confidences[instance_id]))
    reason = filter_small_truncated(mask, record.shape, cfg.scale_px, cfg.border_px)
    if reason is not None:
        return CurationVerdict.dropped(instance_id, reason)
    category = record.categories.get(instance_id)
    if category is not None and category in set(denylist):
        return CurationVerdict.dropped(instance_id, "category", category=category)
    return occlusion_verdict(
        record, instance_id, cfg.n_points, cfg.step_frac, cfg.depth_ratio, cfg.vote_frac,
        rng=instance_rng(cfg.seed, record.scene_id, instance_id),
        boundary_kernel=cfg.boundary_kernel, contact_kernel=cfg.contact_kernel,
        min_mask_step=cfg.min_mask_step, boundaries=boundaries,
    )


# dataset level ---------------------------------------------------------------

@dataclass
class CurationReport:
    total: int = 0
    kept: int = 0
    dropped: dict = field(default_factory=lambda: {r: 0 for r in DROP_REASONS})
    unreadable: int = 0
    config_hash: str = ""
    seed: int = 0

    def add(self, verdict: CurationVerdict) -> None:
        self.total += 1
        if verdict.keep:
            self.kept += 1
        else:
            self.dropped[verdict.reason] += 1

    def merge(self, other: "CurationReport") -> None:
        self.total += other.total
        self.kept += other.kept
        self.unreadable += other.unreadable
        for key, count in other.dropped.items():
            self.dropped[key] += count

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class KeptInstance:
    scene_id: str
    instance_id: str
    record: object  # dataworld.InstanceRecord


def curate_dataset(
    records: Iterable,
    category_denylist: Iterable[str] = (),
    config: CurationConfig | None = None,
) -> tuple[list[KeptInstance], CurationReport, list[dict]]:
    """Curate every instance of every record.

    ``records`` may yield :class:`SceneRecord` objects or zero-argument
    callables that load one; a loader that raises is logged, skipped and
    counted as unreadable. Returns the kept crops, the report and one
    manifest row per instance.
    """
    cfg = config or CurationConfig()
    denylist = tuple(category_denylist)
    report = CurationReport(config_hash=cfg.config_hash(), seed=cfg.seed)
    kept, manifest = [], []
    for item in records:
        try:
            record = item() if callable(item) else item
        except Exception as exc:  # noqa: BLE001 - any broken record is skipped
            log.warning("skipping unreadable record: %s", exc)
            report.unreadable += 1
            continue
        boundaries = _boundaries(record, cfg.boundary_kernel)
        for instance_id in sorted(record.masks, key=str):
            verdict = curate_instance(record, instance_id, denylist, cfg, boundaries)
            report.add(verdict)
            manifest.append(_manifest_row(record.scene_id, verdict, cfg))
            if verdict.keep:
                rng = instance_rng(cfg.seed + 1, record.scene_id, instance_id)
                crop = crop_instance(record.image, record.masks[instance_id], sample_expand_ratio(rng, *cfg.expand_range),
                                     cfg.output_resolution, source_id=f"{record.scene_id}/{instance_id}")
                kept.append(KeptInstance(record.scene_id, str(instance_id), crop))
    return kept, report, manifest


def _manifest_row(scene_id: str, verdict: CurationVerdict, cfg: CurationConfig) -> dict:
    diag = verdict.diagnostics
    return {
        "scene": scene_id,
        "instance": verdict.instance_id,
        "verdict": verdict.status,
        "reason": verdict.reason,
        "vote_fraction": diag.get("vote_fraction"),
        "n_points": len(diag.get("points", [])),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
    }


# scene files -----------------------------------------------------------------

def save_scene(folder, record: SceneRecord) -> None:
    """Write a scene in the on-disk layout read by :func:`load_scene`.

    ``depth`` is normalized by its maximum into 16-bit; masks are 0/255.
    """
    folder = Path(folder)
    (folder / "masks").mkdir(parents=True, exist_ok=True)
    save_png(folder / "image.png", record.image)
    peak = record.depth.max()
    scaled = record.depth / peak if peak > 0 else record.depth
    Image.fromarray(np.round(scaled * 65535).astype(np.uint16)).save(folder / "depth.png")
    instances = []
    for key, m in record.masks.items():
        Image.fromarray(m.astype(np.uint8) * 255).save(folder / "masks" / f"{key}.png")
        entry = {"id": str(key), "confidence": float(record.confidences[key]), "category": record.categories.get(key)}
        entry["bbox"] = list(mask_bbox(m)) if m.any() else None
        instances.append(entry)
    (folder / "meta.json").write_text(json.dumps({"instances": instances}, indent=1))


def load_scene(folder) -> SceneRecord:
    folder = Path(folder)
    meta = json.loads((folder / "meta.json").read_text())
    depth = np.asarray(Image.open(folder / "depth.png"), dtype=np.float64) / 65535.0
    image = load_png(folder / "image.png")
    masks, conf, cats = {}, {}, {}
    for entry in meta["instances"]:
        key = str(entry["id"])
        masks[key] = np.asarray(Image.open(folder / "masks" / f"{key}.png")) >= 128
        conf[key] = float(entry["confidence"])
        if entry.get("category") is not None:
            cats[key] = entry["category"]
    return SceneRecord(image, masks, depth, conf, cats, scene_id=folder.name)


def curate_directory(in_dir, out_dir, category_denylist: Iterable[str] = (),
                     config: CurationConfig | None = None) -> CurationReport:
    """Curate every scene folder under ``in_dir``.

    Writes ``manifest.jsonl``, ``report.json`` and ``kept/<scene>_<id>/``
    crops (``image.png``, ``mask.png``, ``meta.json``) under ``out_dir``.
    """
    cfg = config or CurationConfig()
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    scenes = sorted(p for p in in_dir.iterdir() if p.is_dir()) if in_dir.is_dir() else []
    loaders = [lambda p=p: load_scene(p) for p in scenes]
    kept, report, manifest = curate_dataset(loaders, category_denylist, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.jsonl", "w") as fh:
        for row in manifest:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    for item in kept:
        folder = out_dir / "kept" / f"{item.scene_id}_{item.instance_id}"
        folder.mkdir(parents=True, exist_ok=True)
        save_png(folder / "image.png", item.record.image)
        Image.fromarray(to_uint8(item.record.mask.astype(np.float64))).save(folder / "mask.png")
        meta = {"source_id": item.record.source_id, "expand_ratio": item.record.expand_ratio,
                "bbox": list(item.record.bbox), "config_hash": cfg.config_hash(), "seed": cfg.seed}
        (folder / "meta.json").write_text(json.dumps(meta, indent=1))
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return report
