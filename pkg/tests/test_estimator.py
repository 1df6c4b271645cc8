import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import tiny_run_config
from golden_scenes import build_golden_scenes
from selfrecon.dataworld import load_eval_instances
from selfrecon.estimator import OcclusionCurator, SelfTrainingReconstructor, load_estimator


def test_params_and_clone():
    cfg = tiny_run_config()
    est = SelfTrainingReconstructor(config=cfg, ablation="naive-sem")
    params = est.get_params()
    assert params["config"] is cfg and params["ablation"] == "naive-sem"
    twin = clone(est)
    assert twin.get_params()["ablation"] == "naive-sem"
    assert not hasattr(twin, "model_")


def test_unfitted_errors():
    est = SelfTrainingReconstructor(config=tiny_run_config())
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 16, 16, 3)))
    with pytest.raises(TypeError):
        est.fit(np.zeros((2, 16, 16, 3)))


@pytest.fixture(scope="module")
def fitted(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("est")
    est = SelfTrainingReconstructor(config=tiny_run_config(j_max=2), out_dir=out)
    est.fit(tiny_data["synth"], real=tiny_data["real"])
    return est, out


def test_fit_predict_render_score(fitted, tiny_data):
    est, _ = fitted
    assert est.n_iter_ == 2 and len(est.log_) == 2
    images = tiny_data["real"].images[:2]
    planes = est.predict(images)
    assert planes.shape == (2, 3, 8, 8, 4)
    # inputs at another resolution are resized, 8-bit inputs rescaled
    big = np.repeat(np.repeat((images * 255).astype(np.uint8), 2, axis=1), 2, axis=2)
    assert est.predict(big).shape == planes.shape
    renders = est.render(images, [0.0, 45.0], 10.0, resolution=12, samples_per_ray=8)
    assert renders.shape == (2, 2, 12, 12, 3)
    score = est.score(load_eval_instances(tiny_data["real_dir"], limit=1))
    assert np.isfinite(score)


def test_input_validation(fitted):
    est, _ = fitted
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 16, 12, 3)))
    with pytest.raises(ValueError):
        est.predict(np.full((1, 16, 16, 3), 2.5))
    with pytest.raises(ValueError):
        est.render(np.zeros((1, 16, 16, 3)), [0.0], 95.0)


def test_checkpoint_reload(fitted, tiny_data):
    est, out = fitted
    again = load_estimator(out / "model.pt")
    images = tiny_data["real"].images[:1]
    assert np.array_equal(again.predict(images), est.predict(images))
    with pytest.raises(FileNotFoundError):
        load_estimator(out / "missing.pt")


def test_curator_transform_and_curate():
    scenes = [r for r, _ in build_golden_scenes(n_per_family=1)]
    cur = OcclusionCurator(denylist=("bus",))
    verdicts = cur.fit().transform(scenes)
    assert [len(v) for v in verdicts] == [len(s.masks) for s in scenes]
    kept, report, manifest = cur.curate(scenes)
    assert report.kept == sum(v.keep for vs in verdicts for v in vs)
    assert clone(cur).get_params()["denylist"] == ("bus",)
    with pytest.raises(ValueError):
        OcclusionCurator(vote_frac=0.0).fit()
