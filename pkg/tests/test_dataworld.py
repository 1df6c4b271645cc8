import hashlib
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from selfrecon.dataworld import (
    PSEUDO_REAL_EXPONENTS,
    SEALED_DIR,
    SealedSplitError,
    ToyShape,
    TrainingLoader,
    build_pseudo_real_set,
    build_synthetic_set,
    crop_instance,
    generate_shape,
    load_eval_instances,
    render_shape_views,
    sample_expand_ratio,
)
from selfrecon.features import ConfigurationError
from selfrecon.geometry import RelativePose, canonical_pose, pose_from_azel


def _probes(seed=0, n=100, low=-0.87, high=0.87):
    return torch.as_tensor(np.random.default_rng(seed).uniform(low, high, (n, 3)))


def test_shape_is_deterministic():
    a, b = generate_shape(42), generate_shape(42)
    pts = _probes()
    da, ca = a.density_color(pts)
    db, cb = b.density_color(pts)
    assert torch.equal(da, db) and torch.equal(ca, cb)


def test_shapes_differ_across_seeds():
    pts = _probes()
    assert not torch.equal(generate_shape(1).density_color(pts)[0], generate_shape(2).density_color(pts)[0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_shape_contracts(seed, shifted):
    shape = generate_shape(seed, PSEUDO_REAL_EXPONENTS if shifted else (0.25, 0.9))
    assert 1 <= len(shape.parts) <= 4
    # zero outside the normalization cube
    outside = torch.as_tensor(np.random.default_rng(seed % 1000).uniform(0.871, 1.5, (50, 3)))
    outside = outside * torch.as_tensor(np.random.default_rng(seed % 999).choice([-1.0, 1.0], (50, 3)))
    assert float(shape.density_color(outside)[0].abs().max()) == 0.0
    # bounded density
    dens = shape.density_color(_probes(seed % 997, 200))[0]
    assert float(dens.max()) <= shape.max_density
    # at least one part reaches into the ball of radius 0.3
    center = torch.as_tensor(shape.parts[0].center)[None]
    assert float(center.norm()) < 0.3
    assert float(shape.density_color(center)[0]) > shape.max_density / 2


def test_empty_shape_renders_gray():
    imgs, alphas = render_shape_views(ToyShape([]), [canonical_pose()], 16, 16)
    assert np.all(imgs == 0.5) and np.all(alphas == 0)


def test_render_is_bit_identical():
    shape = generate_shape(5)
    poses = [canonical_pose(), pose_from_azel(RelativePose(30.0, 10.0))]
    a, _ = render_shape_views(shape, poses, 24, 32)
    b, _ = render_shape_views(shape, poses, 24, 32)
    assert a.tobytes() == b.tobytes()


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synthetic_set_layout_and_determinism(tmp_path):
    a = build_synthetic_set(tmp_path / "a", 3, seed=9, resolution=16, samples_per_ray=16)
    b = build_synthetic_set(tmp_path / "b", 3, seed=9, resolution=16, samples_per_ray=16)
    assert _tree_digest(a) == _tree_digest(b)
    folders = sorted((a / "shapes").iterdir())
    assert [f.name for f in folders] == ["00000", "00001", "00002"]
    for folder in folders:
        assert sorted(p.name for p in folder.iterdir()) == sorted(
            ["input.png", "view_0.png", "view_1.png", "view_2.png", "view_3.png", "cameras.json"])
        cams = json.loads((folder / "cameras.json").read_text())
        assert len(cams["views"]) == 4
        for v in cams["views"]:
            assert abs(v["azimuth"]) <= 120 and abs(v["elevation"]) <= 45
            assert (v["azimuth"], v["elevation"]) != (0.0, 0.0)
            assert v["radius"] == 1.8 and v["fov"] == 40.0
            # poses round-trip through the camera constructor
            pose = pose_from_azel(RelativePose(v["azimuth"], v["elevation"]), v["radius"], v["fov"])
            assert np.linalg.norm(pose.translation) == pytest.approx(1.8)
    meta = json.loads((a / "dataset.json").read_text())
    assert meta["seed"] == 9 and len(meta["config_hash"]) == 16
    assert not list((a / "shapes").glob("*.tmp"))


def test_synthetic_views_reproduce_from_cameras(tmp_path):
    root = build_synthetic_set(tmp_path / "s", 1, seed=2, resolution=16, samples_per_ray=16)
    cams = json.loads((root / "shapes/00000/cameras.json").read_text())
    shape = generate_shape(cams["shape_seed"])
    v = cams["views"][0]
    img, _ = render_shape_views(shape, [pose_from_azel(RelativePose(v["azimuth"], v["elevation"]))], 16, 16)
    stored = TrainingLoader(root).load_image(root / "shapes/00000/view_0.png")
    assert np.abs(stored - img[0]).max() <= 0.5 / 255 + 1e-6


def test_pseudo_real_split_is_sealed(tmp_path):
    root = build_pseudo_real_set(tmp_path / "r", 3, seed=5, resolution=16, eval_resolution=16, samples_per_ray=16)
    loader = TrainingLoader(root)
    real = loader.load_real()
    assert len(real) == 3 and real.images.shape == (3, 16, 16, 3)
    assert all(SEALED_DIR not in p.parts for p in loader.opened)
    with pytest.raises(SealedSplitError):
        loader.load_image(root / "pseudo_real/00000" / SEALED_DIR / "view_0.png")
    inst = load_eval_instances(root)
    assert [len(i.views) for i in inst] == [5, 5, 5]
    assert all(len(i.poses) == 5 for i in inst)


def test_eval_loader_requires_sealed_views(tmp_path):
    root = build_pseudo_real_set(tmp_path / "r", 1, seed=5, resolution=16, eval_resolution=16, samples_per_ray=16)
    (root / "pseudo_real/00000" / SEALED_DIR / "cameras.json").unlink()
    with pytest.raises(ConfigurationError):
        load_eval_instances(root)


def test_synthetic_and_pseudo_real_shapes_differ(tmp_path):
    s = build_synthetic_set(tmp_path / "s", 2, seed=0, resolution=16, samples_per_ray=16)
    r = build_pseudo_real_set(tmp_path / "r", 2, seed=0, resolution=16, eval_resolution=16, samples_per_ray=16)
    seeds_s = {json.loads(p.read_text())["shape_seed"] for p in (s / "shapes").glob("*/cameras.json")}
    seeds_r = {json.loads(p.read_text())["shape_seed"] for p in (r / "pseudo_real").glob("*/sealed_eval/cameras.json")}
    assert not seeds_s & seeds_r


def test_crop_side_from_ratio():
    img = np.random.default_rng(0).uniform(size=(300, 300, 3))
    mask = np.zeros((300, 300), bool)
    mask[100:150, 50:150] = True  # 100 wide, 50 tall
    rec = crop_instance(img, mask, 1.6, 64)
    assert rec.crop_side == 160 and rec.bbox == (50, 100, 100, 50)
    assert rec.image.shape == (64, 64, 3)


def test_crop_background_is_gray_outside_mask():
    img = np.random.default_rng(1).uniform(size=(64, 64, 3))
    mask = np.zeros((64, 64), bool)
    mask[20:40, 24:40] = True
    rec = crop_instance(img, mask, 1.5, 32)
    # pixels far from the mask (beyond the resize footprint) are exactly gray
    far = ~_grow(rec.mask, 2)
    assert np.all(rec.image[far] == 0.5)


def _grow(mask, r):
    from scipy import ndimage

    return ndimage.binary_dilation(mask, iterations=r)


def test_crop_full_mask_ratio_one_has_no_border():
    img = np.random.default_rng(2).uniform(size=(40, 40, 3))
    rec = crop_instance(img, np.ones((40, 40), bool), 1.0, 40)
    np.testing.assert_allclose(rec.image, img)


def test_crop_twice_is_fixed_point():
    rng = np.random.default_rng(3)
    img = np.full((48, 48, 3), 0.5)
    mask = np.zeros((48, 48), bool)
    mask[8:40, 12:36] = True
    img[mask] = rng.uniform(size=(mask.sum(), 3))
    once = crop_instance(img, mask, 1.0, 32)
    twice = crop_instance(once.image, once.mask, 1.0, 32)
    assert np.abs(once.image - twice.image).max() <= 2 / 255


def test_crop_errors():
    with pytest.raises(ValueError):
        crop_instance(np.zeros((8, 8, 3)), np.zeros((8, 8), bool), 1.5, 8)
    with pytest.raises(ValueError):
        crop_instance(np.zeros((8, 8, 3)), np.ones((8, 8), bool), 0.9, 8)


def test_training_expand_ratios_in_range():
    rng = np.random.default_rng(0)
    ratios = np.array([sample_expand_ratio(rng) for _ in range(10_000)])
    assert ratios.min() >= 1.45 and ratios.max() <= 1.7
