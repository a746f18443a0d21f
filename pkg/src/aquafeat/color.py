"""Median-channel white balance used as the fixed pre-processing step."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

GAIN_MIN = 0.1
GAIN_MAX = 10.0
MEAN_FLOOR = 1e-6


class ColorGains(NamedTuple):
    r: float
    g: float
    b: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


def compute_gains(image: np.ndarray) -> ColorGains:
    """Per-channel gains that move each channel mean onto the median channel mean.

    A channel whose mean is below ``MEAN_FLOOR`` carries nothing to rescale
    and keeps gain 1.
    """
    if image.size == 0:
        raise ValueError("compute_gains needs a non-empty image")
    means = image.reshape(-1, 3).astype(np.float64).mean(axis=0)
    med = float(np.median(means))
    gains = []
    for mu in means:
        if mu < MEAN_FLOOR:
            gains.append(1.0)
        else:
            gains.append(float(np.clip(med / mu, GAIN_MIN, GAIN_MAX)))
    return ColorGains(*gains)


def apply_white_balance(image: np.ndarray) -> np.ndarray:
    gains = compute_gains(image).as_array().astype(image.dtype)
    return np.clip(image * gains, 0.0, 1.0)
