import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import composite_loop, triplane_feature
from selfrecon.dataworld import render_shape_views, sphere_shape
from selfrecon.geometry import RelativePose, camera_rays, canonical_pose, pose_from_azel
from selfrecon.renderfield import (
    FieldDecoder,
    Triplane,
    composite,
    composite_background,
    render,
    render_field_views,
    render_rays,
    sample_triplane,
    triplane_field,
)


def _random_planes(seed=0, h=6, c=3):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(3, h, h, c, generator=g, dtype=torch.float64)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_triplane_sampling_matches_bilinear_oracle(seed):
    rng = np.random.default_rng(seed)
    planes = _random_planes(seed % 7)
    pts = rng.uniform(-1.2, 1.2, size=(20, 3))
    got = sample_triplane(Triplane(planes), torch.as_tensor(pts)).numpy()
    want = np.stack([triplane_feature(planes.numpy(), p) for p in np.clip(pts, -1, 1)])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_triplane_nodes_hit_grid_values_exactly():
    planes = _random_planes(1, h=5)
    # (x, y, z) = (-1, -1, -1) sits on node [0, 0] of every plane
    feat = sample_triplane(planes, torch.tensor([[-1.0, -1.0, -1.0]], dtype=torch.float64))
    np.testing.assert_allclose(feat[0].numpy(), planes[:, 0, 0].sum(0).numpy())


def test_batched_sampling_matches_per_item():
    planes = torch.stack([_random_planes(2), _random_planes(3)])
    pts = torch.rand(2, 7, 3, dtype=torch.float64) * 2 - 1
    both = sample_triplane(planes, pts)
    for b in range(2):
        np.testing.assert_allclose(both[b].numpy(), sample_triplane(planes[b], pts[b]).numpy())


def test_triplane_shape_validation():
    with pytest.raises(ValueError):
        Triplane(torch.zeros(2, 4, 4, 3))
    with pytest.raises(ValueError):
        Triplane(torch.zeros(3, 4, 5, 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.5))
def test_composite_matches_loop(seed, spacing):
    rng = np.random.default_rng(seed)
    dens = rng.exponential(3.0, size=12)
    rgb = rng.uniform(size=(12, 3))
    color, alpha = composite(torch.as_tensor(dens), torch.as_tensor(rgb), spacing)
    want_c, want_a = composite_loop(dens, rgb, spacing)
    np.testing.assert_allclose(color.numpy(), want_c, atol=1e-12)
    assert float(alpha) == pytest.approx(want_a, abs=1e-12)
    # weights sum to the opacity, so color stays in the convex hull scaled by alpha
    assert 0.0 <= float(alpha) <= 1.0


def test_constant_density_closed_form():
    sigma, near, far = 0.7, 1.0, 3.0

    def field(points):
        return torch.full(points.shape[:-1], sigma, dtype=points.dtype), torch.ones(*points.shape[:-1], 3, dtype=points.dtype)

    o = torch.zeros(1, 1, 3, dtype=torch.float64)
    d = torch.tensor([[[0.0, 0.0, -1.0]]], dtype=torch.float64)
    color, alpha = render_rays(field, o, d, near, far, 16)
    assert float(alpha) == pytest.approx(1 - math.exp(-sigma * (far - near)), abs=1e-12)
    np.testing.assert_allclose(color.numpy().ravel(), [float(alpha)] * 3, atol=1e-12)


def test_empty_field_is_background():
    decoder = FieldDecoder(3).double()
    with torch.no_grad():
        decoder.head.bias[0] = -1e3
    view = render(Triplane(_random_planes(4)), decoder, canonical_pose(), 8, 8)
    img = composite_background(view.rgb, view.alpha)
    np.testing.assert_allclose(img.detach().numpy(), 0.5, atol=1e-12)


def test_density_vanishes_outside_unit_box():
    decoder = FieldDecoder(3).double()
    field = triplane_field(_random_planes(5).unsqueeze(0), decoder)
    pts = torch.tensor([[[1.01, 0.0, 0.0], [0.0, -1.2, 0.3], [0.5, 0.5, 0.5]]], dtype=torch.float64)
    with torch.no_grad():
        dens, _ = field(pts)
    assert float(dens[0, 0]) == 0.0 and float(dens[0, 1]) == 0.0 and float(dens[0, 2]) > 0.0


def test_decoder_ranges():
    decoder = FieldDecoder(4)
    dens, rgb = decoder(torch.randn(100, 4) * 5)
    assert (dens >= 0).all() and (rgb >= 0).all() and (rgb <= 1).all()


def test_stratified_jitter_is_seeded():
    decoder = FieldDecoder(3).double()
    planes = _random_planes(6).unsqueeze(0)
    poses = [[canonical_pose()]]
    a, _ = render_field_views(triplane_field(planes, decoder), poses, 8, 8, np.random.default_rng(1), torch.float64)
    b, _ = render_field_views(triplane_field(planes, decoder), poses, 8, 8, np.random.default_rng(1), torch.float64)
    c, _ = render_field_views(triplane_field(planes, decoder), poses, 8, 8, np.random.default_rng(2), torch.float64)
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_mixed_radius_batch_rejected():
    decoder = FieldDecoder(3)
    planes = _random_planes(0).float().unsqueeze(0).expand(2, -1, -1, -1, -1)
    poses = [[canonical_pose(1.8)], [canonical_pose(2.5)]]
    with pytest.raises(ValueError):
        render_field_views(triplane_field(planes, decoder), poses, 8, 4)


def test_background_color_validation():
    with pytest.raises(ValueError):
        composite_background(np.zeros((2, 2, 3)), np.zeros((2, 2)), (1.5, 0.5, 0.5))


def test_sphere_silhouette_radius():
    """Canonical view of a centered sphere: a centered disc of the projected radius."""
    radius, res = 0.5, 96
    shape = sphere_shape(radius)
    # a hard edge so the silhouette is the geometric one
    shape.sharpness, shape.max_density = 5000.0, 2000.0
    _, alphas = render_shape_views(shape, [canonical_pose()], res, 192)
    mask = alphas[0] > 0.5
    ys, xs = np.nonzero(mask)
    assert abs(xs.mean() - (res - 1) / 2) < 0.5 and abs(ys.mean() - (res - 1) / 2) < 0.5
    # tangent cone half-angle: sin(a) = R / d; image radius = tan(a) / tan(fov / 2) in half-widths
    half = math.tan(math.asin(radius / 1.8)) / math.tan(math.radians(20.0))
    expected_area = math.pi * (half * res / 2) ** 2
    assert mask.sum() == pytest.approx(expected_area, rel=0.02)


def test_render_pose_symmetry_for_sphere():
    shape = sphere_shape(0.4)
    imgs, _ = render_shape_views(shape, [canonical_pose(), pose_from_azel(RelativePose(75.0, 20.0))], 32, 64)
    np.testing.assert_allclose(imgs[0], imgs[1], atol=2e-3)


def test_rays_through_box_hit_near_far_interval():
    rays = camera_rays(canonical_pose(), 8)
    t_center = np.linalg.norm(rays.origins[0, 0])
    assert rays.near < t_center - 0.87 and rays.far > t_center + 0.87
