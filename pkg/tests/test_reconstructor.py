import hashlib

import numpy as np
import pytest
import torch

from conftest import tiny_model_config
from selfrecon.reconstructor import (
    ModelConfig,
    check_model_input,
    init_params,
    load_checkpoint,
    reconstruct,
    save_checkpoint,
)
from selfrecon.renderfield import Triplane


def test_forward_shape():
    cfg = tiny_model_config()
    model = init_params(cfg, 0)
    out = model(torch.rand(3, 16, 16, 3))
    assert out.shape == (3, 3, cfg.triplane_resolution, cfg.triplane_resolution, cfg.triplane_channels)
    assert torch.isfinite(out).all()


def test_init_is_seeded_and_leaves_global_rng_alone():
    cfg = tiny_model_config()
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = init_params(cfg, 5)
    after = torch.rand(1)
    b = init_params(cfg, 5)
    c = init_params(cfg, 6)
    assert torch.equal(before, after)
    for (ka, va), (_, vb), (_, vc) in zip(a.state_dict().items(), b.state_dict().items(), c.state_dict().items()):
        assert torch.equal(va, vb), ka
    assert any(not torch.equal(va, vc) for va, vc in zip(a.state_dict().values(), c.state_dict().values()))


def test_output_depends_on_image():
    model = init_params(tiny_model_config(), 0)
    a = model(torch.zeros(1, 16, 16, 3))
    b = model(torch.ones(1, 16, 16, 3))
    assert not torch.allclose(a, b)


def test_input_resolution_is_checked():
    cfg = tiny_model_config()
    with pytest.raises(ValueError):
        check_model_input(torch.zeros(1, 32, 32, 3), cfg)
    with pytest.raises(ValueError):
        check_model_input(torch.zeros(1, 16, 16), cfg)
    model = init_params(cfg, 0)
    with pytest.raises(ValueError):
        model(torch.zeros(1, 8, 8, 3))


def test_reconstruct_returns_triplane():
    model = init_params(tiny_model_config(), 0)
    tri = reconstruct(model, np.full((16, 16, 3), 0.5))
    assert isinstance(tri, Triplane) and tri.resolution == 8 and tri.channels == 4


@pytest.mark.parametrize("kwargs", [dict(input_resolution=30), dict(triplane_resolution=12, query_grid=4),
                                    dict(triplane_resolution=16, query_grid=3), dict(token_width=30, num_heads=4)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


def test_checkpoint_round_trip_and_bytes(tmp_path):
    cfg = tiny_model_config()
    model = init_params(cfg, 3)
    save_checkpoint(tmp_path / "a.pt", model, seed=3, iteration=7, config={"k": 1}, extra={"x": [1, 2]})
    save_checkpoint(tmp_path / "b.pt", model, seed=3, iteration=7, config={"k": 1}, extra={"x": [1, 2]})
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()  # noqa: E731
    assert digest(tmp_path / "a.pt") == digest(tmp_path / "b.pt")
    loaded, payload = load_checkpoint(tmp_path / "a.pt")
    assert payload["iteration"] == 7 and payload["seed"] == 3 and payload["run_config"] == {"k": 1}
    x = torch.rand(2, 16, 16, 3)
    assert torch.equal(model(x), loaded(x))


def test_checkpoint_version_mismatch(tmp_path):
    torch.save({"version": 99}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.pt")
