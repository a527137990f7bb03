"""Run configuration: one flat record whose fields mirror the per-module configs.

Precedence is flags > config file > defaults. Config files are YAML (JSON is
accepted too since it parses as YAML) using the exact field names below.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from egofilter.egonet.network import EgoNetConfig
from egofilter.pipeline import PipelineConfig
from egofilter.subtractor import SubtractionConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # stream pipeline
    buffer_seconds: float = 1.0
    keep_seconds: float = 0.8
    frame_len: int = 400
    hop: int = 160
    vad_energy_multiplier: float = 3.0
    vad_frames_required: int = 3
    block_stride_seconds: float = 0.2
    flush_tail: bool = False
    # network
    channels: int = 128
    kernel: int = 5
    dilations: list = field(default_factory=lambda: [2, 4, 8, 16])
    convs_share_weights_across_blocks: bool = True
    compression_exponent: float = 0.3
    # subtraction
    floor_beta: float = 0.0
    over_subtraction_alpha: float = 1.0
    # training
    lr: float = 1e-3
    epochs: int = 1
    batch_size: int = 4
    seed: int = 0
    crop_frames: int | None = None
    max_seconds: float | None = None
    warm_start: bool = True
    # corpus synthesis
    n: int = 100
    # I/O
    manifest: str | None = None
    out: str | None = None
    out_dir: str | None = None
    weights: str | None = None
    robot: str | None = None
    mic: str | None = None
    mode: str = "entire"
    chunk_ms: int = 100
    extracted_dir: str | None = None
    reference_dir: str | None = None
    report: str | None = None
    k: int = 4

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            buffer_seconds=self.buffer_seconds, keep_seconds=self.keep_seconds,
            frame_len=self.frame_len, hop=self.hop,
            vad_energy_multiplier=self.vad_energy_multiplier,
            vad_frames_required=self.vad_frames_required,
            block_stride_seconds=self.block_stride_seconds,
        )

    def network(self) -> EgoNetConfig:
        return EgoNetConfig(
            channels=self.channels, kernel=self.kernel, dilations=list(self.dilations),
            convs_share_weights_across_blocks=self.convs_share_weights_across_blocks,
            compression_exponent=self.compression_exponent,
        )

    def subtraction(self) -> SubtractionConfig:
        return SubtractionConfig(floor_beta=self.floor_beta,
                                 over_subtraction_alpha=self.over_subtraction_alpha)

    def to_dict(self) -> dict:
        return asdict(self)


FIELD_NAMES = {f.name for f in fields(RunConfig)}


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    unknown = sorted(set(data) - FIELD_NAMES)
    if unknown:
        raise ConfigError(f"{p}: unknown config fields {unknown}")
    return data


def resolve(file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    """Merge defaults, then config-file values, then explicitly given flags."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def write_snapshot(cfg: RunConfig, directory, command: str) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"resolved_config_{command}.json"
    path.write_text(json.dumps({"command": command, **cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    return path
