"""Synthetic corpus: speech-like utterances, recorded ego speech and low-SNR mixtures.

Physical loudspeaker/room recordings are replaced by a synthetic chain:
exponentially decaying noise RIR, a first-order high shelf for loudspeaker
and microphone coloration, and a tanh soft clip for non-linearity.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import signal

from egofilter.audio import AudioClip, read_wav, write_wav
from egofilter.dsp import stft

SAMPLE_RATE = 16000
DECAY_60DB = 3.0 * math.log(10.0)  # 6.908: ln(10^3), amplitude falls 60 dB
REFERENCE_RT60 = 0.5  # tail energy equals direct energy at this RT60
SHELF_HZ = 2000.0
SHELF_DB = 3.0
CLIP_KNEE = 0.9


class NoOverlapError(ValueError):
    pass


@dataclass
class MixtureSpec:
    target_path: str
    robot_path: str
    snr_db: float
    rt60_seconds: float = 0.3
    fan_noise_db: float = -30.0
    overlap_offset_seconds: float = 0.0
    seed: int = 0
    words: int | None = None
    gender_code: int | None = None

    def __post_init__(self):
        if self.rt60_seconds < 0:
            raise ValueError("rt60_seconds must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown MixtureSpec fields: {sorted(unknown)}")
        return cls(**d)


def read_manifest(path: str | Path) -> list[MixtureSpec]:
    specs = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                specs.append(MixtureSpec.from_dict(json.loads(line)))
    return specs


def write_manifest(path: str | Path, specs) -> None:
    with open(path, "w") as f:
        for s in specs:
            f.write(s.to_json() + "\n")


# -- synthetic speech ---------------------------------------------------------

def _resonator(f: float, bw: float, fs: int):
    r = math.exp(-math.pi * bw / fs)
    theta = 2.0 * math.pi * f / fs
    a = [1.0, -2.0 * r * math.cos(theta), r * r]
    return [1.0 - r], a


def synth_speech(duration: float, seed: int, f0: float | None = None,
                 sample_rate: int = SAMPLE_RATE) -> tuple[AudioClip, int]:
    """Speech-like signal made of formant-filtered harmonic syllables.

    Speech starts at the first sample. Returns the clip (peak 0.5) and the
    number of synthetic words.
    """
    rng = np.random.default_rng(seed)
    if f0 is None:
        f0 = rng.uniform(90.0, 240.0)
    n_total = int(round(duration * sample_rate))
    out = np.zeros(n_total)
    pos, words = 0, 0
    while pos < n_total - int(0.08 * sample_rate):
        words += 1
        for _ in range(int(rng.integers(1, 4))):
            n_syl = int(rng.uniform(0.12, 0.28) * sample_rate)
            n_syl = min(n_syl, n_total - pos)
            if n_syl < int(0.04 * sample_rate):
                break
            out[pos : pos + n_syl] += _syllable(n_syl, f0, rng, sample_rate)
            pos += n_syl
        pos += int(rng.uniform(0.04, 0.15) * sample_rate)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.5 / peak
    return AudioClip(out, sample_rate), words


def _syllable(n: int, f0: float, rng, fs: int) -> np.ndarray:
    t = np.arange(n) / fs
    pitch = f0 * np.linspace(1.0 + rng.uniform(-0.1, 0.1), 1.0 + rng.uniform(-0.15, 0.1), n)
    phase = 2.0 * np.pi * np.cumsum(pitch) / fs
    n_harm = int(7000.0 // f0)
    source = sum(np.sin(h * phase) / h for h in range(1, n_harm + 1))
    formants = ((rng.uniform(300, 850), 90.0, 1.0), (rng.uniform(900, 2400), 110.0, 0.6),
                (rng.uniform(2400, 3400), 160.0, 0.35))
    voiced = np.zeros(n)
    for f, bw, gain in formants:
        b, a = _resonator(f, bw, fs)
        voiced += gain * signal.lfilter(b, a, source)
    env = np.ones(n)
    ramp = min(int(0.02 * fs), n // 2)
    if ramp > 0:
        env[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[-ramp:] = env[:ramp][::-1]
    syl = voiced * env * rng.uniform(0.5, 1.0)
    if rng.random() < 0.4:
        # fricative onset: high-passed noise burst
        m = min(int(rng.uniform(0.03, 0.08) * fs), n)
        b, a = signal.butter(2, rng.uniform(2500, 5000) / (fs / 2), btype="high")
        burst = signal.lfilter(b, a, rng.standard_normal(m)) * np.hanning(m)
        syl[:m] += burst * 0.3 * np.max(np.abs(syl))
    return syl


def pink_noise(n: int, seed: int) -> np.ndarray:
    """Unit-RMS 1/f noise."""
    rng = np.random.default_rng(seed)
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = np.inf
    x = np.fft.irfft(spec / np.sqrt(f), n=n)
    return x / np.sqrt(np.mean(x**2))


# -- room and playback ----------------------------------------------------------

def rir_envelope(t, rt60: float):
    """Amplitude envelope of the reverberant tail; -60 dB at ``t = rt60``."""
    return np.exp(-DECAY_60DB * np.asarray(t, dtype=np.float64) / rt60)


def synth_rir(rt60_seconds: float, length_seconds: float, seed: int,
              sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Unit direct path followed by exponentially decaying Gaussian noise.

    The tail's expected energy is ``rt60 / 0.5`` relative to the direct path,
    i.e. a 0 dB direct-to-reverberant ratio at RT60 = 0.5 s.
    """
    if rt60_seconds < 0:
        raise ValueError("rt60 must be >= 0")
    n = max(1, int(round(length_seconds * sample_rate)))
    h = np.zeros(n)
    h[0] = 1.0
    if rt60_seconds == 0 or n == 1:
        return h
    rng = np.random.default_rng(seed)
    env = rir_envelope(np.arange(1, n) / sample_rate, rt60_seconds)
    a = math.exp(-2.0 * DECAY_60DB / (sample_rate * rt60_seconds))
    geometric = a / (1.0 - a)
    sigma = math.sqrt((rt60_seconds / REFERENCE_RT60) / geometric)
    h[1:] = sigma * rng.standard_normal(n - 1) * env
    return h


def shelf_coefficients(sample_rate: int = SAMPLE_RATE, corner_hz: float = SHELF_HZ,
                       gain_db: float = SHELF_DB):
    """First-order high shelf: unity at DC, ``gain_db`` at Nyquist (bilinear, prewarped)."""
    g = 10.0 ** (gain_db / 20.0)
    k = math.tan(math.pi * corner_hz / sample_rate)
    b = np.array([g + k, k - g]) / (1.0 + k)
    a = np.array([1.0, (k - 1.0) / (1.0 + k)])
    return b, a


def soft_clip(x: np.ndarray, knee: float = CLIP_KNEE) -> np.ndarray:
    """Identity below ``knee``; tanh compression above it, bounded by 1."""
    y = np.array(x, dtype=np.float64)
    over = np.abs(y) >= knee
    head = 1.0 - knee
    y[over] = np.sign(y[over]) * (knee + head * np.tanh((np.abs(y[over]) - knee) / head))
    return y


def apply_playback(robot: AudioClip, rir: np.ndarray) -> AudioClip:
    """Robot utterance as captured by its own microphone (full convolution length)."""
    wet = signal.convolve(robot.samples, rir)
    b, a = shelf_coefficients(robot.sample_rate)
    colored = signal.lfilter(b, a, wet)
    return AudioClip(soft_clip(colored), robot.sample_rate)


# -- mixtures -----------------------------------------------------------------

def _resolve(path: str, base: Path | None) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base is None else base / p


def load_sources(spec: MixtureSpec, base_dir=None) -> tuple[AudioClip, AudioClip]:
    base = Path(base_dir) if base_dir is not None else None
    return read_wav(_resolve(spec.target_path, base)), read_wav(_resolve(spec.robot_path, base))


def record_ego(robot: AudioClip, spec: MixtureSpec) -> AudioClip:
    rir = synth_rir(spec.rt60_seconds, spec.rt60_seconds, spec.seed, robot.sample_rate)
    return apply_playback(robot, rir)


def mix(spec: MixtureSpec, base_dir=None, target: AudioClip | None = None,
        robot: AudioClip | None = None):
    """Build (mixture, recorded_ego, scaled_target) on a common timeline.

    The robot starts at sample 0; the target starts at the overlap offset and
    is scaled so its power over the overlap region is ``snr_db`` relative to
    the recorded ego speech.
    """
    return mix_with_overlap(spec, base_dir, target, robot)[:3]


def mix_with_overlap(spec: MixtureSpec, base_dir=None, target: AudioClip | None = None,
                     robot: AudioClip | None = None):
    """:func:`mix` plus the [start, stop) sample range the SNR is defined over."""
    if target is None or robot is None:
        loaded_target, loaded_robot = load_sources(spec, base_dir)
        target = target if target is not None else loaded_target
        robot = robot if robot is not None else loaded_robot
    fs = robot.sample_rate
    if target.sample_rate != fs:
        raise ValueError("target and robot sample rates differ")

    ego = record_ego(robot, spec)
    offset = int(round(spec.overlap_offset_seconds * fs))
    n = max(len(ego), offset + len(target))
    start, stop = max(offset, 0), min(offset + len(target), len(ego))
    if offset < 0 or stop <= start:
        raise NoOverlapError("no overlap region between target and robot speech")

    ego_t = np.zeros(n)
    ego_t[: len(ego)] = ego.samples
    tgt_t = np.zeros(n)
    tgt_t[offset : offset + len(target)] = target.samples
    p_ego = np.mean(ego_t[start:stop] ** 2)
    p_tgt = np.mean(tgt_t[start:stop] ** 2)
    if p_tgt <= 0 or p_ego <= 0:
        raise NoOverlapError("no overlap region: silent target or robot over the overlap")
    tgt_t *= math.sqrt(p_ego / p_tgt * 10.0 ** (spec.snr_db / 10.0))

    mixture = ego_t + tgt_t
    if np.isfinite(spec.fan_noise_db):
        ego_rms = math.sqrt(np.mean(ego.samples**2))
        mixture = mixture + pink_noise(n, spec.seed + 1) * ego_rms * 10.0 ** (spec.fan_noise_db / 20.0)
    peak = np.max(np.abs(mixture))
    if peak > 1.0:
        mixture, ego_t, tgt_t = mixture / peak, ego_t / peak, tgt_t / peak
    return AudioClip(mixture, fs), AudioClip(ego_t, fs), AudioClip(tgt_t, fs), (start, stop)


def training_pair(spec: MixtureSpec, base_dir=None, robot: AudioClip | None = None):
    """(played, recorded) spectrogram pair; the played clip is zero-padded over the reverb tail."""
    if robot is None:
        _, robot = load_sources(spec, base_dir)
    ego = record_ego(robot, spec)
    played = np.zeros(len(ego))
    played[: len(robot)] = robot.samples
    return stft(AudioClip(played, robot.sample_rate)), stft(ego)


# -- corpus -------------------------------------------------------------------

def sample_specs(n: int, seed: int, snr_mean: float = -22.33, snr_sd: float = 4.09,
                 robot_seconds=(2.5, 4.0), target_seconds=(1.0, 2.5)):
    """Draw ``n`` random mixture recipes plus the source durations/pitches they need.

    RT60 is 0.6 s ("large lab") for a quarter of the specs, 0.3 s otherwise.
    """
    rng = np.random.default_rng(seed)
    plans = []
    for i in range(n):
        robot_dur = rng.uniform(*robot_seconds)
        target_dur = rng.uniform(*target_seconds)
        f0 = rng.uniform(95.0, 240.0)
        spec = MixtureSpec(
            target_path=f"target_src_{i}.wav",
            robot_path=f"robot_src_{i}.wav",
            snr_db=float(rng.normal(snr_mean, snr_sd)),
            rt60_seconds=0.6 if rng.random() < 0.25 else 0.3,
            fan_noise_db=-30.0,
            overlap_offset_seconds=float(rng.uniform(0.0, robot_dur - 0.6)),
            seed=int(seed * 100003 + i),
            gender_code=0 if f0 >= 165.0 else 1,
        )
        plans.append((spec, robot_dur, target_dur, f0))
    return plans


ROBOT_F0 = 125.0


def build_corpus(out_dir: str | Path, n: int, seed: int, **kwargs) -> list[MixtureSpec]:
    """Write synthetic source WAVs and ``manifest.jsonl`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = []
    for spec, robot_dur, target_dur, f0 in sample_specs(n, seed, **kwargs):
        robot, _ = synth_speech(robot_dur, spec.seed * 2 + 1, f0=ROBOT_F0)
        target, words = synth_speech(target_dur, spec.seed * 2 + 2, f0=f0)
        spec.words = words
        write_wav(out / spec.robot_path, robot)
        write_wav(out / spec.target_path, target)
        specs.append(spec)
    write_manifest(out / "manifest.jsonl", specs)
    return specs
