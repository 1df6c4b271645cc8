"""Estimator-style wrappers around training, inference and curation.

They follow the scikit-learn conventions: constructor arguments are stored
verbatim, learned state gets a trailing underscore, ``fit`` returns ``self``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig, apply_ablation
from .curation import CurationConfig, CurationVerdict, curate_dataset, curate_instance
from .dataworld import RealSet, SyntheticSet, resize_batch
from .evalharness import EvalSettings, ReconstructorModel, nvs_suite
from .geometry import RelativePose
from .reconstructor import load_checkpoint
from .selftrain.loop import fit as fit_loop
from .validation import check_angles, check_images


class SelfTrainingReconstructor(BaseEstimator):
    """Single-image triplane reconstructor trained on synthetic multi-view data
    plus (optionally) unlabeled single views.

    Parameters
    ----------
    config : RunConfig, optional
        Full run configuration; defaults to ``RunConfig()``.
    ablation : str, optional
        Name of an ablation applied on top of ``config`` before training.
    out_dir : str or Path, optional
        Where logs and checkpoints go; nothing is written when omitted.
    """

    def __init__(self, config: RunConfig | None = None, ablation: str | None = None, out_dir=None):
        self.config = config
        self.ablation = ablation
        self.out_dir = out_dir

    def _resolved_config(self) -> RunConfig:
        return apply_ablation(self.config if self.config is not None else RunConfig(), self.ablation)

    def fit(self, X: SyntheticSet, y=None, real: RealSet | None = None, resume=None):
        """Train on the synthetic set ``X`` and the single-view set ``real``."""
        if not isinstance(X, SyntheticSet):
            raise TypeError("X must be a SyntheticSet")
        cfg = self._resolved_config()
        result = fit_loop(cfg, X, real, out_dir=self.out_dir, resume=resume)
        self.config_ = cfg
        self.model_ = result.state.model.eval()
        self.log_ = result.log
        self.n_iter_ = result.state.j
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "SelfTrainingReconstructor":
        model, payload = load_checkpoint(path)
        cfg = RunConfig.from_dict(payload["run_config"]) if payload.get("run_config") else RunConfig(model=model.config)
        est = cls(config=cfg)
        est.config_ = cfg
        est.model_ = model.eval()
        est.log_ = []
        est.n_iter_ = payload["iteration"]
        return est

    def _batch(self, images) -> torch.Tensor:
        res = self.model_.config.input_resolution
        arr = check_images(images)
        return torch.as_tensor(resize_batch(arr, res), dtype=torch.float32)

    def predict(self, images) -> np.ndarray:
        """Triplanes ``(N, 3, h, w, c)`` for images ``(N, H, W, 3)``."""
        check_is_fitted(self, "model_")
        with torch.no_grad():
            return self.model_(self._batch(images)).numpy()

    def render(self, images, azimuths, elevations=0.0, resolution: int | None = None,
               samples_per_ray: int | None = None) -> np.ndarray:
        """Gray-composited renders ``(N, V, R, R, 3)`` at the given relative poses."""
        check_is_fitted(self, "model_")
        cfg = self.config_
        res = resolution or cfg.train.eval_resolution
        adapter = ReconstructorModel(self.model_, samples_per_ray or cfg.train.eval_samples_per_ray)
        settings = EvalSettings(resolution=res, radius=cfg.camera.radius, fov_deg=cfg.camera.fov_deg)
        cams = [settings.camera(RelativePose(a, e)) for a, e in check_angles(azimuths, elevations)]
        out = []
        for image in check_images(images):
            renders, _ = adapter.render(adapter.reconstruct(image), cams, res)
            out.append(renders)
        return np.stack(out)

    def score(self, instances, y=None) -> float:
        """Mean held-out-view PSNR over evaluation instances."""
        check_is_fitted(self, "model_")
        cfg = self.config_
        adapter = ReconstructorModel(self.model_, cfg.train.eval_samples_per_ray)
        settings = EvalSettings(resolution=cfg.train.eval_resolution, radius=cfg.camera.radius,
                                fov_deg=cfg.camera.fov_deg, config_hash=cfg.config_hash(), seed=cfg.seed)
        return nvs_suite(adapter, instances, settings).aggregates["psnr"]


class OcclusionCurator(TransformerMixin, BaseEstimator):
    """Keep/drop verdicts for every instance of annotated scenes.

    Stateless: ``fit`` only validates the parameters.
    """

    def __init__(self, confidence_threshold: float = 0.3, scale_px: int = 100, border_px: int = 10,
                 n_points: int = 20, step_frac: float = 0.05, depth_ratio: float = 0.95, vote_frac: float = 0.5,
                 denylist=(), output_resolution: int = 128, seed: int = 0):
        self.confidence_threshold = confidence_threshold
        self.scale_px = scale_px
        self.border_px = border_px
        self.n_points = n_points
        self.step_frac = step_frac
        self.depth_ratio = depth_ratio
        self.vote_frac = vote_frac
        self.denylist = denylist
        self.output_resolution = output_resolution
        self.seed = seed

    def _config(self) -> CurationConfig:
        return CurationConfig(
            confidence_threshold=self.confidence_threshold, scale_px=self.scale_px, border_px=self.border_px,
            n_points=self.n_points, step_frac=self.step_frac, depth_ratio=self.depth_ratio,
            vote_frac=self.vote_frac, output_resolution=self.output_resolution, seed=self.seed,
        )

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X) -> list[list[CurationVerdict]]:
        """One list of verdicts (sorted by instance id) per scene record."""
        cfg = getattr(self, "config_", None) or self._config()
        return [[curate_instance(rec, key, tuple(self.denylist), cfg) for key in sorted(rec.masks, key=str)]
                for rec in X]

    def curate(self, X):
        """Kept crops, report and manifest rows for the scene records ``X``."""
        cfg = getattr(self, "config_", None) or self._config()
        return curate_dataset(X, tuple(self.denylist), cfg)


def load_estimator(path) -> SelfTrainingReconstructor:
    if not Path(path).is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return SelfTrainingReconstructor.from_checkpoint(path)
