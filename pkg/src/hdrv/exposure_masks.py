"""Contrast, well-exposedness and saturation maps (Mertens-style exposure cues)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .imagecore import Domain, Image, luminance_array

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
WELLNESS_SIGMA = 0.2


@dataclass(frozen=True)
class MaskSet:
    contrast: Image
    wellness: Image
    saturation: Image
    combined: Image  # channels: contrast, wellness, saturation

    @classmethod
    def from_combined(cls, combined: Image):
        d = combined.data
        mk = lambda k: Image(d[:, :, k], Domain.HDR, check=False)
        return cls(mk(0), mk(1), mk(2), combined)


def contrast_map(img: Image) -> Image:
    """Absolute response of the 4-neighbour Laplacian on luminance."""
    y = luminance_array(img.data)
    lap = ndimage.correlate(y, LAPLACIAN, mode="nearest")
    return Image(np.abs(lap).astype(np.float32), Domain.HDR)


def wellness_array(data, sigma=WELLNESS_SIGMA):
    d = np.asarray(data, dtype=np.float64)
    if d.ndim == 2:
        d = d[:, :, None]
    return np.exp(-np.sum((d - 0.5) ** 2, axis=2) / (2.0 * sigma * sigma))


def wellness_map(img: Image, sigma: float = WELLNESS_SIGMA) -> Image:
    """Product over channels of a Gaussian centred on mid-gray."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    return Image(wellness_array(img.data, sigma).astype(np.float32), Domain.HDR)


def saturation_map(img: Image) -> Image:
    """Population standard deviation of R, G, B at each pixel."""
    if img.channels != 3:
        raise ParameterError(f"saturation needs a 3-channel image, got {img.channels} channel(s)")
    return Image(np.std(img.data.astype(np.float64), axis=2).astype(np.float32), Domain.HDR)


def adaptive_mask(img: Image, sigma: float = WELLNESS_SIGMA) -> MaskSet:
    c = contrast_map(img)
    e = wellness_map(img, sigma)
    if img.channels == 3:
        s = saturation_map(img)
    else:
        # gray input carries no colour spread
        s = Image(np.zeros(img.shape[:2], np.float32), Domain.HDR)
    combined = Image(np.concatenate([c.data, e.data, s.data], axis=2), Domain.HDR)
    return MaskSet(c, e, s, combined)
