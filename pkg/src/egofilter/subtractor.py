"""Magnitude-domain subtraction of the predicted ego spectrogram."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from egofilter.audio import AudioClip
from egofilter.dsp import FRAME_LEN, HOP, Spectrogram, istft


@dataclass(frozen=True)
class SubtractionConfig:
    """``floor_beta`` sets the spectral floor, ``over_subtraction_alpha`` scales the estimate.

    The defaults give plain subtraction clamped at zero.
    """

    floor_beta: float = 0.0
    over_subtraction_alpha: float = 1.0

    def __post_init__(self):
        if self.floor_beta < 0:
            raise ValueError("floor_beta must be >= 0")
        if not self.over_subtraction_alpha > 0:
            raise ValueError("over_subtraction_alpha must be > 0")


def subtract(mixture_mag, ego_mag, cfg: SubtractionConfig = SubtractionConfig()) -> np.ndarray:
    """max(X - alpha * R_hat, beta * X), elementwise."""
    x = np.asarray(mixture_mag, dtype=np.float64)
    r = np.asarray(ego_mag, dtype=np.float64)
    if x.shape != r.shape:
        raise ValueError(f"shape mismatch: mixture {x.shape} vs ego estimate {r.shape}")
    return np.maximum(x - cfg.over_subtraction_alpha * r, cfg.floor_beta * x)


def reconstruct(mag, phase, frame_len: int = FRAME_LEN, hop: int = HOP,
                sample_rate: int = 16000) -> AudioClip:
    """Resynthesize with the mixture's phase left untouched."""
    return istft(Spectrogram(mag, phase, frame_len, hop, sample_rate))
