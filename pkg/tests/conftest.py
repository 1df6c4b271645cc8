import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from selfrecon.config import OptimConfig, RunConfig, TrainConfig  # noqa: E402
from selfrecon.dataworld import TrainingLoader, build_pseudo_real_set, build_synthetic_set  # noqa: E402
from selfrecon.reconstructor import ModelConfig  # noqa: E402


def tiny_model_config() -> ModelConfig:
    return ModelConfig(input_resolution=16, patch_size=8, triplane_resolution=8, triplane_channels=4,
                       token_width=32, num_blocks=1, num_heads=2, query_grid=2, decoder_hidden=16, decoder_layers=2)


def tiny_run_config(seed: int = 0, j_max: int = 4, **train) -> RunConfig:
    params = dict(j_max=j_max, batch_size=4, render_resolution=12, samples_per_ray=8, eval_resolution=16,
                  eval_samples_per_ray=16, checkpoint_every=2)
    params.update(train)
    return RunConfig(model=tiny_model_config(), train=TrainConfig(**params), optim=OptimConfig(lr=1e-3, warmup=1),
                     seed=seed)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Small synthetic and pseudo-real sets shared by the training tests."""
    root = tmp_path_factory.mktemp("data")
    build_synthetic_set(root / "synth", 4, seed=3, resolution=16, samples_per_ray=32)
    build_pseudo_real_set(root / "real", 4, seed=4, resolution=16, eval_resolution=16, samples_per_ray=32)
    return {
        "root": root,
        "synth_dir": root / "synth",
        "real_dir": root / "real",
        "synth": TrainingLoader(root / "synth").load_synthetic(),
        "real": TrainingLoader(root / "real").load_real(),
    }


@pytest.fixture(autouse=True)
def _restore_torch_flags():
    threads = torch.get_num_threads()
    det = torch.are_deterministic_algorithms_enabled()
    yield
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(det)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        # detail lines (indented) stay attached to the criterion line they follow
        groups: list[list[str]] = []
        for line in ACCEPTANCE_LINES:
            if line.startswith(" ") and groups:
                groups[-1].append(line)
            else:
                groups.append([line])
        for group in sorted(groups, key=lambda g: int(g[0].split()[1].rstrip(":"))):
            for line in group:
                terminalreporter.write_line(line)
