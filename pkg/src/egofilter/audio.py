"""Mono audio container and 16-bit PCM WAV I/O."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_SAMPLE_RATE = 16000


class AudioError(ValueError):
    """Raised for malformed audio data or unsupported WAV files."""


@dataclass
class AudioClip:
    """Mono samples in nominal range [-1, 1].

    ``start`` is the index of ``samples[0]`` on the timeline of the signal the
    clip was derived from (0 for clips read from disk). The filtering stages
    use it to report where an extracted segment sits inside the mixture.
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    start: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError(f"expected mono samples, got shape {self.samples.shape}")
        if int(self.sample_rate) <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("samples contain NaN or Inf")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0 - 1.0 / 32768)
    return np.round(x * 32768.0).astype("<i2")


def from_pcm16(pcm: np.ndarray) -> np.ndarray:
    return np.asarray(pcm, dtype=np.float64) / 32768.0


def read_wav(path: str | Path) -> AudioClip:
    """Read a mono 16-bit PCM WAV file."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise AudioError(f"{path}: expected mono, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise AudioError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise AudioError(f"{path}: {exc}") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(from_pcm16(pcm), rate)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write ``clip`` as mono 16-bit PCM, clamping to [-1, 1)."""
    pcm = to_pcm16(clip.samples)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())
