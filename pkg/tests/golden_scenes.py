"""Hand-constructed curation scenes whose verdicts follow from their construction.

Shapes are painted far to near: each instance's visible mask is its shape
minus every nearer shape, and the inverse-depth map takes the nearest value.
The expected verdict of an instance is fixed when the scene is designed
(isolated, occluded by a nearer overlapping shape, thin, small, ...), never by
running the curator.

Run as a script to refresh ``golden/curation_expected.json``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from selfrecon.curation import SceneRecord

SIZE = 320
BACKGROUND_DEPTH = 0.1
DENYLIST = ["bus"]
EXPECTED_PATH = Path(__file__).parent / "golden" / "curation_expected.json"


@dataclass
class Shape:
    id: str
    mask: np.ndarray
    depth: float
    expect: tuple  # ("keep", None) or ("drop", reason)
    confidence: float = 0.9
    category: str | None = None


def rect(x, y, w, h, size=SIZE):
    m = np.zeros((size, size), bool)
    m[y:y + h, x:x + w] = True
    return m


def disk(cx, cy, r, size=SIZE):
    yy, xx = np.mgrid[:size, :size]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def compose(scene_id, shapes, rng):
    depth = np.full((SIZE, SIZE), BACKGROUND_DEPTH)
    image = np.full((SIZE, SIZE, 3), 0.5)
    taken = np.zeros((SIZE, SIZE), bool)
    visible = {}
    for s in sorted(shapes, key=lambda s: -s.depth):  # nearest first
        vis = s.mask & ~taken
        visible[s.id] = vis
        depth[vis] = s.depth
        image[vis] = rng.uniform(0.1, 0.9, 3)
        taken |= s.mask
    record = SceneRecord(
        image=image, masks={s.id: visible[s.id] for s in shapes}, depth=depth,
        confidences={s.id: s.confidence for s in shapes},
        categories={s.id: s.category for s in shapes if s.category is not None},
        scene_id=scene_id,
    )
    expected = {s.id: {"verdict": s.expect[0], "reason": s.expect[1]} for s in shapes}
    return record, expected


KEEP = ("keep", None)
OCCLUDED = ("drop", "occluded")


def _isolated(rng):
    n = int(rng.integers(1, 3))
    shapes = []
    for i in range(n):
        side = int(rng.integers(105, 125))
        x = 20 + i * 150 + int(rng.integers(0, 15))
        y = int(rng.integers(20, SIZE - side - 20))
        m = rect(x, y, side, side) if rng.uniform() < 0.5 else disk(x + side // 2, y + side // 2, side // 2)
        shapes.append(Shape(f"iso{i}", m, float(rng.uniform(0.3, 1.0)), KEEP))
    return shapes


def _corner_overlap(rng):
    side = int(rng.integers(120, 140))
    bx, by = int(rng.integers(20, 40)), int(rng.integers(20, 40))
    ox, oy = int(rng.integers(40, 80)), int(rng.integers(40, 80))
    front_depth = float(rng.uniform(0.6, 1.0))
    back_depth = front_depth * float(rng.uniform(0.2, 0.85))
    return [
        Shape("back", rect(bx, by, side, side), back_depth, OCCLUDED),
        Shape("front", rect(bx + ox, by + oy, side, side), front_depth, KEEP),
    ]


def _disk_overlap(rng):
    # the front disk crosses the back one close to orthogonally, so the back keeps blunt corners
    r1, r2 = int(rng.integers(65, 75)), int(rng.integers(52, 60))
    cx, cy = 90, int(rng.integers(120, 200))
    d = float(rng.uniform(0.9, 1.1)) * np.hypot(r1, r2)
    angle = float(rng.uniform(-0.4, 0.4))
    front_depth = float(rng.uniform(0.6, 1.0))
    return [
        Shape("back", disk(cx, cy, r1), front_depth * float(rng.uniform(0.2, 0.85)), OCCLUDED),
        Shape("front", disk(int(cx + d * np.cos(angle)), int(cy + d * np.sin(angle)), r2), front_depth, KEEP),
    ]


def _thin_crescent(rng):
    # a nearer disk hides almost all of an equal disk; the visible sliver is narrower than
    # the probe step, so the outward side of its boundary cannot be resolved
    r = int(rng.integers(60, 70))
    cx, cy = int(rng.integers(120, 150)), int(rng.integers(110, 210))
    front_depth = float(rng.uniform(0.6, 1.0))
    return [
        Shape("back", disk(cx, cy, r), front_depth * float(rng.uniform(0.2, 0.85)), ("drop", "degenerate-boundary")),
        Shape("front", disk(cx + int(float(rng.uniform(0.2, 0.35)) * r), cy, r), front_depth, KEEP),
    ]


def _crossing_bar(rng):
    side = int(rng.integers(150, 200))
    bx, by = int(rng.integers(30, 60)), int(rng.integers(60, 100))
    bar_w = int(rng.integers(30, 50))
    bar_x = bx + side // 2 - bar_w // 2 + int(rng.integers(-20, 20))
    front_depth = float(rng.uniform(0.6, 1.0))
    return [
        Shape("back", rect(bx, by, side, side // 2 + 20), front_depth * float(rng.uniform(0.2, 0.85)), OCCLUDED),
        Shape("bar", rect(bar_x, 20, bar_w, SIZE - 40), front_depth, KEEP),
    ]


def _hole(rng):
    side = int(rng.integers(110, 130))
    x, y = int(rng.integers(90, SIZE - side - 90)), int(rng.integers(90, SIZE - side - 90))
    front_depth = float(rng.uniform(0.6, 1.0))
    return [
        Shape("back", rect(20, 20, SIZE - 40, SIZE - 40), front_depth * float(rng.uniform(0.2, 0.85)), OCCLUDED),
        Shape("front", rect(x, y, side, side), front_depth, KEEP),
    ]


def _touching_equal_depth(rng):
    h = int(rng.integers(110, 150))
    w1, w2 = int(rng.integers(110, 140)), int(rng.integers(110, 140))
    x, y = int(rng.integers(20, SIZE - 20 - w1 - w2)), int(rng.integers(20, SIZE - h - 20))
    depth = float(rng.uniform(0.3, 1.0))
    return [
        Shape("left", rect(x, y, w1, h), depth, KEEP),
        Shape("right", rect(x + w1, y, w2, h), depth, KEEP),
    ]


def _thin_line(rng):
    side = int(rng.integers(110, 130))
    x, y = int(rng.integers(20, 60)), int(rng.integers(30, SIZE - side - 30))
    gap = int(rng.integers(2, 5))
    depth = float(rng.uniform(0.4, 1.0))
    return [
        Shape("block", rect(x, y, side, side), depth, KEEP),
        # a one-pixel line parallel to the block's right edge: no usable normal anywhere
        Shape("line", rect(x + side + gap, y - 10, 1, side + 20), depth, ("drop", "degenerate-boundary")),
    ]


def _filtered(rng):
    kind = ["small", "truncated", "low-confidence", "category"][int(rng.integers(0, 4))]
    keeper = Shape("keeper", rect(180, 100, 110, 110), 0.8, KEEP)
    if kind == "small":
        w = int(rng.integers(40, 100))
        other = Shape("small", rect(20, 20, w, 99), 0.9, ("drop", "small"))
    elif kind == "truncated":
        other = Shape("edge", rect(int(rng.integers(0, 10)), 100, 120, 120), 0.9, ("drop", "truncated"))
    elif kind == "low-confidence":
        other = Shape("faint", rect(20, 20, 120, 120), 0.9, ("drop", "low-confidence"),
                      confidence=float(rng.uniform(0.0, 0.29)))
    else:
        other = Shape("vehicle", rect(20, 20, 120, 120), 0.9, ("drop", "category"), category="bus")
    return [other, keeper]


FAMILIES = [_isolated, _corner_overlap, _disk_overlap, _thin_crescent, _crossing_bar, _hole, _touching_equal_depth,
            _thin_line, _filtered]


def build_golden_scenes(n_per_family: int = 7, seed: int = 2024):
    """Returns ``[(record, expected)]``; ``expected`` maps instance id to verdict."""
    rng = np.random.default_rng(seed)
    out = []
    for family in FAMILIES:
        for k in range(n_per_family):
            scene_id = f"{family.__name__.lstrip('_')}_{k:02d}"
            out.append(compose(scene_id, family(rng), rng))
    return out


def write_expected(path=EXPECTED_PATH):
    expected = {record.scene_id: exp for record, exp in build_golden_scenes()}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(expected, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    write_expected()
