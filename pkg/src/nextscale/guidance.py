"""Structural guidance: Laplacian magnitude of the low-resolution input
and its per-scale normalized pyramid.

The guidance map highlights second-order structure (edges, strokes) in
the conditioning image; the gating network consumes one normalized copy
per scale.
"""

from __future__ import annotations

import numpy as np

from .codec import ScaleSchedule, downsample


class GuidanceError(ValueError):
    pass


def to_luminance(image: np.ndarray) -> np.ndarray:
    """(C, H, W) or (H, W) -> (H, W), channels averaged with equal weight."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3:
        return image.mean(axis=0)
    raise GuidanceError(f"expected (H, W) or (C, H, W) image, got shape {image.shape}")


def laplacian_magnitude(image: np.ndarray) -> np.ndarray:
    """Absolute response of the 4-neighbor Laplacian kernel
    [[0,1,0],[1,-4,1],[0,1,0]] with replicate padding, on luminance."""
    lum = to_luminance(image)
    h, w = lum.shape
    if h < 2 or w < 2:
        raise GuidanceError(f"image too small for a Laplacian: {lum.shape}")
    padded = np.pad(lum, 1, mode="edge")
    lap = (
        padded[:-2, 1:-1]
        + padded[2:, 1:-1]
        + padded[1:-1, :-2]
        + padded[1:-1, 2:]
        - 4.0 * lum
    )
    return np.abs(lap)


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; an all-equal map normalizes to all zeros."""
    lo = x.min()
    hi = x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def guidance_pyramid(s: np.ndarray, schedule: ScaleSchedule) -> list[np.ndarray]:
    """Per scale: area-downsample the magnitude map to (H_k, W_k), then
    min-max normalize each map independently. Returns K maps (H_k, W_k)
    with values in [0, 1]."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise GuidanceError(f"expected a 2-D magnitude map, got shape {s.shape}")
    out = []
    for h, w in schedule.resolutions:
        pooled = downsample(s, (h, w))
        out.append(minmax_normalize(pooled))
    return out
