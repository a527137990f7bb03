"""Minibatch Adam training of the ego-speech regressor."""

from __future__ import annotations

import logging
import time
from dataclasses import replace

import numpy as np

from egofilter.dsp import Spectrogram
from egofilter.egonet.network import EgoNetConfig, EgoNetWeights, init_weights, loss_and_gradient
from egofilter.egonet.optim import AdamState, adam_step

log = logging.getLogger(__name__)


def _magnitude(x) -> np.ndarray:
    return x.magnitude if isinstance(x, Spectrogram) else np.asarray(x, dtype=np.float64)


def fit_magnitude_scale(targets, p: float) -> float:
    """Largest compressed target magnitude; 1.0 when every target is silent."""
    peak = max(float(np.max(t)) for t in targets) if targets else 0.0
    return peak**p if peak > 0 else 1.0


def _mean_logit(targets, config: EgoNetConfig) -> float:
    total = sum(float(np.sum(t**config.compression_exponent)) for t in targets)
    m = total / sum(t.size for t in targets) / config.magnitude_scale
    m = min(max(m, 1e-3), 1.0 - 1e-3)
    return float(np.log(m / (1.0 - m)))


def train(pairs, config: EgoNetConfig, epochs: int = 1, lr: float = 1e-3, seed: int = 0,
          batch_size: int = 4, crop_frames: int | None = None, max_seconds: float | None = None,
          init: EgoNetWeights | None = None, warm_start: bool = True):
    """Fit the network on (played, recorded) spectrogram pairs.

    Each step averages the gradient over ``batch_size`` pairs; with
    ``crop_frames`` every pair contributes a random window of that many frames.
    Returns the trained float32 weights and the per-step loss curve.
    ``max_seconds`` stops training after the step that crosses the budget.

    With ``warm_start`` the decoder bias of freshly initialized weights is set
    to the logit of the mean compressed target, so training starts at the data
    mean. From the 0.5 midpoint the first Adam steps tend to drive the sigmoid
    into saturation at 0, where the gradient vanishes for good.
    """
    if not pairs:
        raise ValueError("empty dataset: at least one training pair is required")
    inputs = [_magnitude(r) for r, _ in pairs]
    targets = [_magnitude(e) for _, e in pairs]
    for i, (r, e) in enumerate(zip(inputs, targets)):
        if r.shape != e.shape:
            raise ValueError(f"pair {i}: input shape {r.shape} != target shape {e.shape}")

    scale = fit_magnitude_scale(targets, config.compression_exponent)
    config = replace(config, dilations=list(config.dilations), magnitude_scale=scale)
    if init is None:
        weights = init_weights(config, seed)
        if warm_start:
            weights.tensors["decoder.bias"][:] = _mean_logit(targets, config)
    else:
        weights = EgoNetWeights(config, {k: v.astype(np.float32) for k, v in init.tensors.items()})

    rng = np.random.default_rng(seed)
    state = AdamState()
    curve: list[float] = []
    started = time.perf_counter()
    n = len(pairs)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for b0 in range(0, n, batch_size):
            batch = order[b0 : b0 + batch_size]
            total = {k: np.zeros(v.shape) for k, v in weights.tensors.items()}
            batch_loss = 0.0
            for i in batch:
                r, e = inputs[i], targets[i]
                if crop_frames is not None and r.shape[1] > crop_frames:
                    s = int(rng.integers(0, r.shape[1] - crop_frames + 1))
                    r, e = r[:, s : s + crop_frames], e[:, s : s + crop_frames]
                loss, grads = loss_and_gradient(weights, r, e)
                batch_loss += loss
                for k in total:
                    total[k] += grads[k]
            m = len(batch)
            grads = {k: g / m for k, g in total.items()}
            params, state = adam_step(weights.tensors, grads, state, lr)
            weights = EgoNetWeights(config, params)
            curve.append(batch_loss / m)
            if max_seconds is not None and time.perf_counter() - started > max_seconds:
                log.info("time budget reached after %d steps", len(curve))
                return weights, curve
        log.info("epoch %d/%d loss %.6f", epoch + 1, epochs, curve[-1])
    return weights, curve
