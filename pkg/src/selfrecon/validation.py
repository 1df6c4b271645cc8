"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numpy as np
import torch


def check_image(image, resolution: int | None = None, name: str = "image") -> np.ndarray:
    """Validate one ``(H, W, 3)`` image in [0, 1]; returns a float64 array.

    ``uint8`` input is rescaled from [0, 255].
    """
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    arr = arr.astype(np.float64, copy=False)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be square, got {arr.shape[:2]}")
    if resolution is not None and arr.shape[0] != resolution:
        raise ValueError(f"{name} must be {resolution}x{resolution}, got {arr.shape[0]}x{arr.shape[1]}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_images(images, resolution: int | None = None) -> np.ndarray:
    """Validate a batch ``(N, H, W, 3)``; a single image is promoted to a batch of one."""
    if isinstance(images, torch.Tensor):
        images = images.detach().cpu().numpy()
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"images must have shape (N, H, W, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("got an empty image batch")
    return np.stack([check_image(a, resolution, f"images[{i}]") for i, a in enumerate(arr)])


def check_mask(mask, shape: tuple[int, int] | None = None) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"mask shape {arr.shape} does not match {tuple(shape)}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask must be binary")
    return arr.astype(bool)


def check_angles(azimuths, elevations) -> list[tuple[float, float]]:
    az = np.atleast_1d(np.asarray(azimuths, dtype=np.float64))
    el = np.atleast_1d(np.asarray(elevations, dtype=np.float64))
    if el.size == 1 and az.size > 1:
        el = np.full_like(az, el[0])
    if az.shape != el.shape:
        raise ValueError(f"got {az.size} azimuths but {el.size} elevations")
    return [(float(a), float(e)) for a, e in zip(az, el)]
