"""Two-lane streaming filter.

Lane one turns the utterance the robot is about to play into a predicted
microphone magnitude spectrogram (the ego estimate). Lane two consumes the
microphone stream: an energy VAD finds the robot's speech onset, post-onset
audio fills a one-second buffer, and each full buffer is transformed, has the
matching ego-estimate frames subtracted, is resynthesized with its own phase,
and yields its middle 0.8 s, peak-normalized. The buffer then drops its
oldest 0.8 s and keeps filling.

With the defaults, emitted segments tile the post-onset timeline from 0.1 s
onwards in 0.8 s steps. The first 0.1 s and any trailing remainder shorter
than a full buffer are not emitted unless :func:`flush` is called.
"""

from __future__ import annotations

import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from egofilter.audio import AudioClip
from egofilter.dsp import Spectrogram, peak_normalize, stft
from egofilter.egonet.network import EgoNetWeights, forward
from egofilter.subtractor import SubtractionConfig, reconstruct, subtract

log = logging.getLogger(__name__)


class NoEgoEstimateError(RuntimeError):
    pass


class OnsetNotFoundError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    buffer_seconds: float = 1.0
    keep_seconds: float = 0.8
    frame_len: int = 400
    hop: int = 160
    vad_energy_multiplier: float = 3.0
    vad_frames_required: int = 3
    # Overlap between consecutive one-second blocks; must equal buffer - keep.
    block_stride_seconds: float = 0.2
    vad_frame_len: int = 160
    vad_abs_threshold: float = 1e-6
    sample_rate: int = 16000

    def __post_init__(self):
        if not 0 < self.keep_seconds < self.buffer_seconds:
            raise ValueError("need 0 < keep_seconds < buffer_seconds")
        if min(self.frame_len, self.hop, self.vad_frame_len, self.vad_frames_required) <= 0:
            raise ValueError("frame sizes and vad_frames_required must be positive")
        if self.vad_energy_multiplier <= 0 or self.vad_abs_threshold <= 0:
            raise ValueError("VAD thresholds must be positive")
        if not math.isclose(self.block_stride_seconds, self.buffer_seconds - self.keep_seconds,
                            abs_tol=1e-9):
            raise ValueError(
                "block_stride_seconds is the overlap between consecutive buffers and must equal "
                "buffer_seconds - keep_seconds"
            )
        if self.keep_samples % self.hop:
            raise ValueError("keep_seconds must span a whole number of STFT hops")
        if (self.buffer_samples - self.keep_samples) % 2:
            raise ValueError("buffer - keep must split evenly around the kept segment")

    @property
    def buffer_samples(self) -> int:
        return int(round(self.buffer_seconds * self.sample_rate))

    @property
    def keep_samples(self) -> int:
        return int(round(self.keep_seconds * self.sample_rate))

    @property
    def lead_samples(self) -> int:
        return (self.buffer_samples - self.keep_samples) // 2

    @property
    def hop_frames(self) -> int:
        return self.keep_samples // self.hop


@dataclass
class EgoEstimate:
    magnitude: np.ndarray
    millis: float

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[1]


def prepare_ego_estimate(robot: AudioClip, weights: EgoNetWeights,
                         cfg: PipelineConfig = PipelineConfig()) -> EgoEstimate:
    """Predict the microphone-side magnitude of ``robot`` and time the prediction."""
    if robot.sample_rate != cfg.sample_rate:
        raise ValueError(f"robot clip at {robot.sample_rate} Hz, expected {cfg.sample_rate}")
    t0 = time.perf_counter()
    spec = stft(robot, cfg.frame_len, cfg.hop)
    rhat = forward(weights, spec.magnitude)
    millis = 1000.0 * (time.perf_counter() - t0)
    return EgoEstimate(rhat, millis)


# -- voice activity -------------------------------------------------------------

@dataclass
class VadState:
    floor_sum: float = 0.0
    floor_frames: int = 0
    run: int = 0
    run_start: int | None = None
    onset: int | None = None
    pending: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pending_start: int = 0  # stream index of pending[0]
    next_frame: int = 0  # stream index of the next unanalysed frame

    @property
    def noise_floor(self) -> float | None:
        return self.floor_sum / self.floor_frames if self.floor_frames else None


def _vad_scan(vad: VadState, chunk: np.ndarray, cfg: PipelineConfig) -> int | None:
    """Feed samples to the VAD. Frames stay pending until they are ruled out as onset."""
    if vad.onset is not None:
        return vad.onset
    vad.pending = np.concatenate([vad.pending, np.asarray(chunk, dtype=np.float64)])
    n = cfg.vad_frame_len
    end = vad.pending_start + len(vad.pending)
    while vad.next_frame + n <= end:
        i = vad.next_frame - vad.pending_start
        energy = float(np.mean(vad.pending[i : i + n] ** 2))
        floor = vad.noise_floor
        threshold = cfg.vad_abs_threshold if floor is None else max(
            cfg.vad_energy_multiplier * floor, cfg.vad_abs_threshold)
        if energy > threshold:
            if vad.run == 0:
                vad.run_start = vad.next_frame
            vad.run += 1
            if vad.run >= cfg.vad_frames_required:
                vad.onset = vad.run_start
                break
        else:
            vad.run = 0
            vad.run_start = None
            vad.floor_sum += energy
            vad.floor_frames += 1
        vad.next_frame += n
    keep_from = vad.run_start if vad.run_start is not None else vad.next_frame
    drop = keep_from - vad.pending_start
    if drop > 0:
        vad.pending = vad.pending[drop:]
        vad.pending_start = keep_from
    return vad.onset


# -- streaming buffer ---------------------------------------------------------------

@dataclass
class StreamState:
    """Consumption-lane state. ``buffer`` holds post-onset samples, at most one buffer's worth."""

    cfg: PipelineConfig = field(default_factory=PipelineConfig)
    buffer: np.ndarray = field(default_factory=lambda: np.zeros(0))
    backlog: np.ndarray = field(default_factory=lambda: np.zeros(0))
    vad: VadState = field(default_factory=VadState)
    rhat_cursor: int = 0
    emitted: int = 0
    timings: list = field(default_factory=list)

    @property
    def onset(self) -> int | None:
        return self.vad.onset


def detect_onset(state: StreamState, chunk) -> int | None:
    """Run the energy VAD over ``chunk``; return the onset sample index once found.

    Frames are 10 ms. The noise floor is the mean energy of frames that were
    not active; before any such frame exists the threshold is the absolute
    fallback. The onset is the first frame of ``vad_frames_required``
    consecutive frames above the threshold. Samples before it are discarded;
    samples from the onset on are queued for the buffer.
    """
    if state.vad.onset is not None:
        state.backlog = np.concatenate([state.backlog, np.asarray(chunk, dtype=np.float64)])
        return state.vad.onset
    onset = _vad_scan(state.vad, chunk, state.cfg)
    if onset is not None:
        post = state.vad.pending[onset - state.vad.pending_start :]
        state.backlog = np.concatenate([state.backlog, post])
        state.vad.pending = np.zeros(0)
    return onset


def _estimate_frames(rhat: np.ndarray, cursor: int, n: int) -> np.ndarray:
    out = np.zeros((rhat.shape[0], n))
    avail = rhat[:, cursor : cursor + n]
    out[:, : avail.shape[1]] = avail
    return out


def _filter_block(block: np.ndarray, rhat: np.ndarray, cursor: int, cfg: PipelineConfig,
                  sub: SubtractionConfig) -> np.ndarray:
    spec = stft(AudioClip(np.ascontiguousarray(block), cfg.sample_rate), cfg.frame_len, cfg.hop)
    if rhat.shape[0] != spec.magnitude.shape[0]:
        raise ValueError(f"ego estimate has {rhat.shape[0]} rows, mixture has {spec.magnitude.shape[0]}")
    mag = subtract(spec.magnitude, _estimate_frames(rhat, cursor, spec.n_frames), sub)
    return reconstruct(mag, spec.phase, cfg.frame_len, cfg.hop, cfg.sample_rate).samples


def _emit(state: StreamState, rhat, sub, n_real: int | None = None) -> AudioClip:
    cfg = state.cfg
    t0 = time.perf_counter()
    block = state.buffer
    if len(block) < cfg.buffer_samples:
        block = np.concatenate([block, np.zeros(cfg.buffer_samples - len(block))])
    out = _filter_block(block, rhat, state.rhat_cursor, cfg, sub)
    stop = cfg.lead_samples + cfg.keep_samples if n_real is None else n_real
    origin = state.vad.onset + state.emitted * cfg.keep_samples
    seg = peak_normalize(AudioClip(out[cfg.lead_samples : stop], cfg.sample_rate,
                                   start=origin + cfg.lead_samples))
    millis = 1000.0 * (time.perf_counter() - t0)
    state.timings.append(("buffer", state.emitted, millis))
    state.timings.append(
        ("lag", state.emitted, 1000.0 * (cfg.buffer_samples - cfg.lead_samples) / cfg.sample_rate + millis)
    )
    state.emitted += 1
    state.rhat_cursor += cfg.hop_frames
    return seg


def _as_matrix(rhat) -> np.ndarray | None:
    if rhat is None:
        return None
    return rhat.magnitude if isinstance(rhat, EgoEstimate) else np.asarray(rhat, dtype=np.float64)


def push_samples(state: StreamState, chunk, rhat, sub: SubtractionConfig = SubtractionConfig()):
    """Consume a chunk of microphone samples; return the segments it completes."""
    rhat = _as_matrix(rhat)
    if rhat is None:
        raise NoEgoEstimateError("no ego estimate: prepare_ego_estimate must run before streaming")
    cfg = state.cfg
    if detect_onset(state, chunk) is None:
        return []
    segments = []
    while True:
        room = cfg.buffer_samples - len(state.buffer)
        if room and len(state.backlog):
            state.buffer = np.concatenate([state.buffer, state.backlog[:room]])
            state.backlog = state.backlog[room:]
        if len(state.buffer) < cfg.buffer_samples:
            return segments
        segments.append(_emit(state, rhat, sub))
        state.buffer = state.buffer[cfg.keep_samples :]


def flush(state: StreamState, rhat, sub: SubtractionConfig = SubtractionConfig()):
    """Process the trailing partial buffer, zero-padded; keeps only real samples."""
    rhat = _as_matrix(rhat)
    if rhat is None:
        raise NoEgoEstimateError("no ego estimate: prepare_ego_estimate must run before streaming")
    if state.vad.onset is None:
        return []
    segments = push_samples(state, np.zeros(0), rhat, sub)
    if len(state.buffer) > state.cfg.lead_samples:
        segments.append(_emit(state, rhat, sub, n_real=len(state.buffer)))
        state.buffer = np.zeros(0)
    return segments


def concatenate(segments) -> AudioClip:
    if not segments:
        return AudioClip(np.zeros(0))
    return AudioClip(np.concatenate([s.samples for s in segments]), segments[0].sample_rate,
                     start=segments[0].start)


# -- offline modes ------------------------------------------------------------------

def find_onset(mixture: AudioClip, cfg: PipelineConfig = PipelineConfig()) -> int:
    onset = _vad_scan(VadState(), mixture.samples, cfg)
    if onset is None:
        raise OnsetNotFoundError("robot speech onset not detected")
    return onset


def run_offline_entire(mixture: AudioClip, robot: AudioClip, weights: EgoNetWeights,
                       cfg: PipelineConfig = PipelineConfig(),
                       sub: SubtractionConfig = SubtractionConfig(),
                       estimate: EgoEstimate | None = None) -> AudioClip:
    """Filter the whole post-onset mixture in one pass.

    The output covers ``frame_len + (T - 1) * hop`` samples from the onset,
    where ``T`` is the STFT frame count of the post-onset mixture; trailing
    samples that do not fill a frame are dropped. ``start`` is the onset.
    """
    onset = find_onset(mixture, cfg)
    if estimate is None:
        estimate = prepare_ego_estimate(robot, weights, cfg)
    post = AudioClip(mixture.samples[onset:], mixture.sample_rate)
    spec = stft(post, cfg.frame_len, cfg.hop)
    mag = subtract(spec.magnitude, _estimate_frames(estimate.magnitude, 0, spec.n_frames), sub)
    out = reconstruct(mag, spec.phase, cfg.frame_len, cfg.hop, cfg.sample_rate)
    return peak_normalize(AudioClip(out.samples, out.sample_rate, start=onset))


def run_offline_blocks(mixture: AudioClip, robot: AudioClip, weights: EgoNetWeights,
                       cfg: PipelineConfig = PipelineConfig(),
                       sub: SubtractionConfig = SubtractionConfig(),
                       estimate: EgoEstimate | None = None, flush_tail: bool = False) -> AudioClip:
    """Streaming block math applied to a whole file; blocks normalized independently."""
    if estimate is None:
        estimate = prepare_ego_estimate(robot, weights, cfg)
    state = StreamState(cfg)
    segments = push_samples(state, mixture.samples, estimate, sub)
    if state.onset is None:
        raise OnsetNotFoundError("robot speech onset not detected")
    if flush_tail:
        segments += flush(state, estimate, sub)
    if not segments:
        return AudioClip(np.zeros(0), mixture.sample_rate, start=state.onset + cfg.lead_samples)
    return concatenate(segments)


# -- two-lane runner ----------------------------------------------------------------

class TwoLanePipeline:
    """Preparation and consumption lanes joined by a one-slot hand-off.

    :meth:`feed` never blocks: chunks queue without loss while the consumption
    lane waits for the ego estimate or falls behind.
    """

    def __init__(self, weights: EgoNetWeights, cfg: PipelineConfig = PipelineConfig(),
                 sub: SubtractionConfig = SubtractionConfig(), flush_tail: bool = False,
                 on_segment=None):
        self.weights = weights
        self.cfg = cfg
        self.sub = sub
        self.flush_tail = flush_tail
        self.on_segment = on_segment
        self.segments: list[AudioClip] = []
        self.state = StreamState(cfg)
        self.estimate: EgoEstimate | None = None
        self._slot: queue.Queue = queue.Queue(maxsize=1)
        self._inbox: queue.Queue = queue.Queue()
        self._errors: list[BaseException] = []
        self._threads: list[threading.Thread] = []

    def start(self, robot: AudioClip) -> None:
        prep = threading.Thread(target=self._prepare, args=(robot,), name="ego-prepare", daemon=True)
        consume = threading.Thread(target=self._consume, name="ego-consume", daemon=True)
        self._threads = [prep, consume]
        prep.start()
        consume.start()

    def feed(self, chunk) -> None:
        self._inbox.put(np.asarray(chunk, dtype=np.float64))

    def close(self) -> list[AudioClip]:
        self._inbox.put(None)
        for t in self._threads:
            t.join()
        if self._errors:
            raise self._errors[0]
        return self.segments

    @property
    def timings(self) -> list[tuple[str, int, float]]:
        prep = [("prepare", -1, self.estimate.millis)] if self.estimate is not None else []
        return prep + list(self.state.timings)

    def _prepare(self, robot: AudioClip) -> None:
        try:
            self._slot.put(prepare_ego_estimate(robot, self.weights, self.cfg))
        except BaseException as exc:  # handed to the consumer so close() can re-raise it
            self._errors.append(exc)
            self._slot.put(None)

    def _consume(self) -> None:
        try:
            self.estimate = self._slot.get()
            if self.estimate is None:
                return
            while True:
                chunk = self._inbox.get()
                if chunk is None:
                    break
                self._deliver(push_samples(self.state, chunk, self.estimate, self.sub))
            if self.flush_tail:
                self._deliver(flush(self.state, self.estimate, self.sub))
        except BaseException as exc:
            self._errors.append(exc)

    def _deliver(self, segments) -> None:
        for seg in segments:
            self.segments.append(seg)
            if self.on_segment is not None:
                self.on_segment(seg)
