"""Pose sampling for the cycle and semantic losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import RelativePose

SEMANTIC_AZIMUTH_MAX = 120.0
SEMANTIC_ELEVATION_MAX = 45.0


@dataclass
class CurriculumState:
    j: int
    j_max: int
    theta_min_deg: float = 15.0
    theta_max_deg: float = 90.0
    phi_min_deg: float = 15.0
    phi_max_deg: float = 90.0
    enabled: bool = True

    def __post_init__(self):
        if self.theta_min_deg > self.theta_max_deg or self.phi_min_deg > self.phi_max_deg:
            raise ValueError("curriculum endpoints need min <= max")
        if self.j < 0 or (self.j_max > 0 and self.j > self.j_max):
            raise ValueError(f"iteration {self.j} outside [0, {self.j_max}]")


def curriculum_bounds(state: CurriculumState) -> tuple[float, float]:
    """Azimuth and elevation half-ranges at iteration ``state.j``.

    Both widen linearly from their min to their max over ``j_max``
    iterations. With the curriculum disabled the full range is used from the
    first step.
    """
    if state.j_max <= 0:
        raise ValueError("j_max must be positive")
    if not state.enabled:
        return float(state.theta_max_deg), float(state.phi_max_deg)
    frac = state.j / state.j_max
    theta = frac * (state.theta_max_deg - state.theta_min_deg) + state.theta_min_deg
    phi = frac * (state.phi_max_deg - state.phi_min_deg) + state.phi_min_deg
    return float(theta), float(phi)


def sample_cycle_pose(state: CurriculumState, rng: np.random.Generator) -> RelativePose:
    theta, phi = curriculum_bounds(state)
    return RelativePose(float(rng.uniform(-theta, theta)), float(rng.uniform(-phi, phi)))


def sample_semantic_poses(
    m: int,
    rng: np.random.Generator,
    azimuth_max: float = SEMANTIC_AZIMUTH_MAX,
    elevation_max: float = SEMANTIC_ELEVATION_MAX,
) -> list[RelativePose]:
    """``m`` poses from a fixed range that does not depend on the iteration."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return [
        RelativePose(float(rng.uniform(-azimuth_max, azimuth_max)), float(rng.uniform(-elevation_max, elevation_max)))
        for _ in range(m)
    ]
