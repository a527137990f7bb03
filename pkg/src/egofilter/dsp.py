"""Time-frequency analysis/synthesis and scalar acoustic measures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from egofilter.audio import AudioClip, AudioError

FRAME_LEN = 400  # 25 ms at 16 kHz
HOP = 160  # 10 ms at 16 kHz
LOG_FLOOR = 1e-10
WINDOW_POWER_FLOOR = 1e-8


class InsufficientSamplesError(AudioError):
    pass


@dataclass
class Spectrogram:
    """One-sided STFT split into magnitude and phase, both shaped (F, T)."""

    magnitude: np.ndarray
    phase: np.ndarray
    frame_len: int = FRAME_LEN
    hop: int = HOP
    sample_rate: int = 16000

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if self.magnitude.shape != self.phase.shape:
            raise ValueError(
                f"magnitude {self.magnitude.shape} and phase {self.phase.shape} differ in shape"
            )
        if self.magnitude.ndim != 2 or self.magnitude.shape[0] != self.frame_len // 2 + 1:
            raise ValueError(
                f"expected {self.frame_len // 2 + 1} frequency rows, got shape {self.magnitude.shape}"
            )

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[1]

    @property
    def n_samples(self) -> int:
        """Length of the signal covered by the frames."""
        return self.frame_len + (self.n_frames - 1) * self.hop

    def frequencies(self) -> np.ndarray:
        return np.arange(self.magnitude.shape[0]) * self.sample_rate / self.frame_len


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_frames(n_samples: int, frame_len: int = FRAME_LEN, hop: int = HOP) -> int:
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // hop + 1


def stft(clip: AudioClip, frame_len: int = FRAME_LEN, hop: int = HOP) -> Spectrogram:
    """Frame, window and transform ``clip``. No edge padding is applied.

    The number of frames is ``(len(clip) - frame_len) // hop + 1``.
    """
    if frame_len % 2:
        raise ValueError(f"frame_len must be even, got {frame_len}")
    if not 0 < hop <= frame_len:
        raise ValueError(f"hop must be in (0, frame_len], got {hop}")
    x = np.asarray(clip.samples, dtype=np.float64)
    if len(x) < frame_len:
        raise InsufficientSamplesError(
            f"insufficient samples: {len(x)} < frame length {frame_len}"
        )
    if not np.all(np.isfinite(x)):
        raise AudioError("samples contain NaN or Inf")
    frames = sliding_window_view(x, frame_len)[::hop] * hann(frame_len)
    spec = np.fft.rfft(frames, axis=1).T
    return Spectrogram(np.abs(spec), np.angle(spec), frame_len, hop, clip.sample_rate)


def window_power(n_frames: int, frame_len: int = FRAME_LEN, hop: int = HOP) -> np.ndarray:
    """Summed squared window over the overlap-add span."""
    w2 = hann(frame_len) ** 2
    total = np.zeros(frame_len + (n_frames - 1) * hop)
    for t in range(n_frames):
        total[t * hop : t * hop + frame_len] += w2
    return total


def istft(spec: Spectrogram, return_coverage: bool = False):
    """Normalized overlap-add inverse of :func:`stft`.

    Samples whose summed squared window is below 1e-8 cannot be recovered and
    are set to zero. With ``return_coverage=True`` a boolean mask of the
    recovered samples is returned alongside the clip.
    """
    frame_len, hop = spec.frame_len, spec.hop
    n = spec.n_frames
    frames = np.fft.irfft(spec.magnitude * np.exp(1j * spec.phase), n=frame_len, axis=0).T
    frames *= hann(frame_len)
    out = np.zeros(frame_len + (n - 1) * hop)
    for t in range(n):
        out[t * hop : t * hop + frame_len] += frames[t]
    wsum = window_power(n, frame_len, hop)
    covered = wsum > WINDOW_POWER_FLOOR
    out[covered] /= wsum[covered]
    out[~covered] = 0.0
    clip = AudioClip(out, spec.sample_rate)
    if return_coverage:
        return clip, covered
    return clip


def alpha_ratio(spec: Spectrogram, split_hz: float = 1000.0) -> float:
    """Log-magnitude sum above ``split_hz`` divided by the sum at or below it.

    Magnitudes are floored at 1e-10 before taking 20*log10.
    """
    if not np.any(spec.magnitude):
        raise ValueError("alpha ratio undefined for an all-zero spectrogram")
    db = 20.0 * np.log10(np.maximum(spec.magnitude, LOG_FLOOR))
    high = spec.frequencies() > split_hz
    den = db[~high].sum()
    if den == 0.0:
        raise ValueError("degenerate low-band energy: denominator sums to zero")
    return float(db[high].sum() / den)


def overlap_snr_db(target: AudioClip, interference: AudioClip, overlap: tuple[int, int]) -> float:
    """SNR in dB of ``target`` against ``interference`` over samples [start, stop)."""
    start, stop = overlap
    if not 0 <= start < stop or stop > min(len(target), len(interference)):
        raise ValueError(f"overlap range {overlap} not covered by both clips")
    p_target = np.mean(target.samples[start:stop] ** 2)
    p_interf = np.mean(interference.samples[start:stop] ** 2)
    if p_interf <= 0.0:
        raise ValueError("interference has zero power over the overlap range")
    if p_target <= 0.0:
        return float("-inf")
    return float(10.0 * np.log10(p_target / p_interf))


def peak_normalize(clip: AudioClip) -> AudioClip:
    """Divide by the absolute peak. An all-zero clip is returned unchanged."""
    peak = np.max(np.abs(clip.samples)) if len(clip) else 0.0
    if peak == 0.0:
        return AudioClip(clip.samples.copy(), clip.sample_rate, clip.start)
    return AudioClip(clip.samples / peak, clip.sample_rate, clip.start)
