"""Ego-speech spectrogram regressor: encoder, time/frequency dilation blocks, decoder.

Magnitudes enter and leave the network in a compressed domain
``m ** p / magnitude_scale``. The decoder ends in a sigmoid, so
``magnitude_scale`` (the largest compressed training target) maps every
training target into [0, 1].

Feature maps are channels-last, (freq, time, channels). The first dilation
block dilates along time; its output is transposed so the second block
dilates along frequency, and transposed back afterwards.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from egofilter.egonet.conv import (
    conv2d,
    conv2d_backward,
    conv_transpose2d,
    conv_transpose2d_backward,
)


class ReceptiveFieldError(ValueError):
    pass


@dataclass
class EgoNetConfig:
    channels: int = 128
    kernel: int = 5
    dilations: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    convs_share_weights_across_blocks: bool = True
    compression_exponent: float = 0.3
    magnitude_scale: float = 1.0

    def __post_init__(self):
        self.dilations = [int(d) for d in self.dilations]
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ValueError("dilations must be a non-empty list of positive integers")
        if any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ValueError("dilations must be strictly increasing")
        if not self.compression_exponent > 0:
            raise ValueError("compression_exponent must be positive")
        if not self.magnitude_scale > 0:
            raise ValueError("magnitude_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def min_frames(self) -> int:
        return self.kernel * max(self.dilations)

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        """Names and shapes of every learnable tensor, in storage order."""
        k, c = self.kernel, self.channels
        shapes = {"encoder.weight": (k, k, 1, c), "encoder.bias": (c,)}
        blocks = [""] if self.convs_share_weights_across_blocks else [".0", ".1"]
        for suffix in blocks:
            shapes[f"dilation{suffix}.weight"] = (k, k, c, c)
            shapes[f"dilation{suffix}.bias"] = (c,)
        shapes["skip.weight"] = (1, 1, c, c)
        shapes["skip.bias"] = (c,)
        shapes["decoder.weight"] = (k, k, c, 1)
        shapes["decoder.bias"] = (1,)
        return shapes


@dataclass
class EgoNetWeights:
    config: EgoNetConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.config.tensor_shapes()
        if list(self.tensors) != list(expected):
            raise ValueError(
                f"tensor names {list(self.tensors)} do not match config {list(expected)}"
            )
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    @property
    def dtype(self):
        return self.tensors["encoder.weight"].dtype

    def block_names(self, block: int) -> tuple[str, str]:
        prefix = "dilation" if self.config.convs_share_weights_across_blocks else f"dilation.{block}"
        return f"{prefix}.weight", f"{prefix}.bias"

    def astype(self, dtype) -> "EgoNetWeights":
        return EgoNetWeights(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "EgoNetWeights":
        return self.astype(self.dtype)


def init_weights(config: EgoNetConfig, seed: int = 0, dtype=np.float32) -> EgoNetWeights:
    """Kernels uniform in +-sqrt(1/fan_in), biases zero. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            bound = np.sqrt(1.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return EgoNetWeights(config, tensors)


def param_count(weights: EgoNetWeights) -> int:
    return int(sum(t.size for t in weights.tensors.values()))


def param_count_closed_form(config: EgoNetConfig) -> int:
    k, c = config.kernel, config.channels
    encoder = k * k * c + c
    dilation = k * k * c * c + c
    skip = c * c + c
    decoder = k * k * c + 1
    n_dilation = 1 if config.convs_share_weights_across_blocks else 2
    return encoder + n_dilation * dilation + skip + decoder


def power_law_loss(pred_mag, target_mag, p: float = 0.3) -> float:
    """Mean squared difference of power-law compressed magnitudes."""
    pred_mag = np.asarray(pred_mag, dtype=np.float64)
    target_mag = np.asarray(target_mag, dtype=np.float64)
    if pred_mag.shape != target_mag.shape:
        raise ValueError(f"shape mismatch: {pred_mag.shape} vs {target_mag.shape}")
    return float(np.mean((pred_mag**p - target_mag**p) ** 2))


def compress(mag, config: EgoNetConfig):
    return np.asarray(mag) ** config.compression_exponent / config.magnitude_scale


def expand(compressed, config: EgoNetConfig):
    return (np.asarray(compressed, dtype=np.float64) * config.magnitude_scale) ** (
        1.0 / config.compression_exponent
    )


def _check_input(weights: EgoNetWeights, mag: np.ndarray) -> None:
    cfg = weights.config
    if mag.ndim != 2:
        raise ValueError(f"expected a 2D magnitude matrix, got shape {mag.shape}")
    if np.any(mag < 0) or not np.all(np.isfinite(mag)):
        raise ValueError("magnitudes must be finite and non-negative")
    n_freq, n_time = mag.shape
    if n_freq < cfg.kernel:
        raise ReceptiveFieldError(f"input has {n_freq} frequency rows; at least {cfg.kernel} required")
    if n_time < cfg.min_frames:
        raise ReceptiveFieldError(
            f"input has {n_time} frames; at least T={cfg.min_frames} required"
        )


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(weights: EgoNetWeights, x: np.ndarray, keep: bool):
    """Compressed-domain forward pass on a (F, T) map. Returns (F, T) output and cache."""
    cfg = weights.config
    t = weights.tensors
    k = cfg.kernel
    half = k // 2
    h0 = conv2d(x[:, :, None], t["encoder.weight"], t["encoder.bias"], pad=(half, half))
    np.maximum(h0, 0, out=h0)
    acts = []
    h = h0
    for block in range(2):
        wname, bname = weights.block_names(block)
        for d in cfg.dilations:
            out = conv2d(h, t[wname], t[bname], dilation=(1, d), pad=(half, half * d))
            np.maximum(out, 0, out=out)
            if keep:
                acts.append(h)
            h = out
        h = np.ascontiguousarray(h.transpose(1, 0, 2))
    skip = conv2d(h0, t["skip.weight"], t["skip.bias"])
    np.maximum(skip, 0, out=skip)
    merged = h + skip
    z = conv_transpose2d(merged, t["decoder.weight"], t["decoder.bias"], pad=(half, half))
    y = _sigmoid(z[:, :, 0])
    cache = None
    if keep:
        cache = {"x": x, "h0": h0, "acts": acts, "dil_out": h, "skip": skip, "merged": merged, "y": y}
    return y, cache


def forward_compressed(weights: EgoNetWeights, mag: np.ndarray) -> np.ndarray:
    """Network output in the compressed domain, strictly inside (0, 1)."""
    mag = np.asarray(mag)
    _check_input(weights, mag)
    x = compress(mag, weights.config).astype(weights.dtype)
    y, _ = _forward(weights, x, keep=False)
    return y


def forward(weights: EgoNetWeights, mag: np.ndarray) -> np.ndarray:
    """Predict the microphone-observed magnitude spectrogram from the played one."""
    return expand(forward_compressed(weights, mag), weights.config)


def _backward(weights: EgoNetWeights, cache: dict, dy: np.ndarray) -> dict[str, np.ndarray]:
    cfg = weights.config
    t = weights.tensors
    half = cfg.kernel // 2
    grads = {name: np.zeros_like(v) for name, v in t.items()}

    y = cache["y"]
    dz = (dy * y * (1.0 - y))[:, :, None].astype(weights.dtype)
    dmerged, gw, gb = conv_transpose2d_backward(
        cache["merged"], t["decoder.weight"], dz, pad=(half, half)
    )
    grads["decoder.weight"] += gw
    grads["decoder.bias"] += gb

    dskip = dmerged * (cache["skip"] > 0)
    dh0, gw, gb = conv2d_backward(cache["h0"], t["skip.weight"], dskip)
    grads["skip.weight"] += gw
    grads["skip.bias"] += gb

    dh = dmerged
    out = cache["dil_out"]
    acts = cache["acts"]
    n_dil = len(cfg.dilations)
    for block in (1, 0):
        wname, bname = weights.block_names(block)
        dh = np.ascontiguousarray(dh.transpose(1, 0, 2))
        out = np.ascontiguousarray(out.transpose(1, 0, 2))
        for i in reversed(range(n_dil)):
            d = cfg.dilations[i]
            inp = acts[block * n_dil + i]
            dpre = dh * (out > 0)
            dh, gw, gb = conv2d_backward(inp, t[wname], dpre, dilation=(1, d), pad=(half, half * d))
            grads[wname] += gw
            grads[bname] += gb
            out = inp
    dh0 = dh0 + dh

    dpre = dh0 * (cache["h0"] > 0)
    _, gw, gb = conv2d_backward(
        cache["x"][:, :, None], t["encoder.weight"], dpre, pad=(half, half), need_dx=False
    )
    grads["encoder.weight"] += gw
    grads["encoder.bias"] += gb
    return grads


def loss_and_gradient(weights: EgoNetWeights, mag: np.ndarray, target_mag: np.ndarray):
    """Power-law loss of the prediction against ``target_mag`` and its exact gradient."""
    mag = np.asarray(mag)
    target_mag = np.asarray(target_mag, dtype=np.float64)
    if mag.shape != target_mag.shape:
        raise ValueError(f"shape mismatch: {mag.shape} vs {target_mag.shape}")
    _check_input(weights, mag)
    cfg = weights.config
    x = compress(mag, cfg).astype(weights.dtype)
    y, cache = _forward(weights, x, keep=True)
    # pred ** p == y * scale, so the loss is taken directly in that domain.
    resid = y * cfg.magnitude_scale - target_mag**cfg.compression_exponent
    loss = float(np.mean(resid**2))
    dy = 2.0 * cfg.magnitude_scale * resid / resid.size
    return loss, _backward(weights, cache, dy)


def gradient(weights: EgoNetWeights, mag: np.ndarray, target_mag: np.ndarray) -> dict[str, np.ndarray]:
    return loss_and_gradient(weights, mag, target_mag)[1]
