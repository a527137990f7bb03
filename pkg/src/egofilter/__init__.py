"""Streaming ego-speech filtering for single-microphone robots.

The robot knows what it is about to say. A small CNN maps the magnitude
spectrogram of that utterance to the magnitude the robot's own microphone
will observe, and the prediction is subtracted from the live microphone
spectrogram to recover overlapping human speech.
"""

from egofilter.audio import AudioClip, read_wav, write_wav
from egofilter.dsp import Spectrogram, alpha_ratio, istft, overlap_snr_db, peak_normalize, stft

__all__ = [
    "AudioClip",
    "Spectrogram",
    "alpha_ratio",
    "istft",
    "overlap_snr_db",
    "peak_normalize",
    "read_wav",
    "stft",
    "write_wav",
]

__version__ = "0.1.0"
