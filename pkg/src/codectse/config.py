"""Run configuration: nested dataclasses, scale presets, YAML round-trip and
dotted-key overrides."""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for unknown keys, bad values or inconsistent sections."""


@dataclass
class DataConfig:
    sample_rate: int = 16000
    win: int = 512
    hop: int = 256
    n_mels: int = 80
    mel_floor: float = 1e-10
    snr_lo: float = 0.0
    snr_hi: float = 5.0
    ref_seconds: float = 5.0
    manifest: str = ""


@dataclass
class CodecConfig:
    n_layers: int = 4
    codebook_size: int = 64
    dim: int = 128
    hidden: int = 256
    ae_steps: int = 1200
    ft_steps: int = 600
    vq_epochs: int = 12
    batch_frames: int = 512
    lr: float = 2e-3
    ema_decay: float = 0.8
    dead_threshold: float = 1.0
    mel_loss_weight: float = 1.0
    seed: int = 0


@dataclass
class AdapterConfig:
    layers: int = 2
    heads: int = 4
    dim: int = 128
    ffn_mult: int = 4
    kernel_size: int = 15
    causal_mode: str = "full"  # full | chunk_causal
    chunk_frames: int = 125
    dropout: float = 0.0


@dataclass
class DecoderConfig:
    layers: int = 4
    heads: int = 4
    dim: int = 128
    ffn_mult: int = 4
    n_ar: int = 2
    max_len: int = 1536
    io_mode: str = "continuous"  # continuous | discrete
    output_mode: str = "target"  # target | ref_output
    dropout: float = 0.0


@dataclass
class RefinerConfig:
    layers: int = 2
    heads: int = 4
    dim: int = 128
    ffn_mult: int = 4
    input_mode: str = "all"  # all | mix_only | ref_only
    dropout: float = 0.0


@dataclass
class TrainConfig:
    mode: str = "joint"  # joint | split
    lr0: float = 1e-3
    warmup_steps: int = 500
    plateau_patience_epochs: int = 3
    halving_factor: float = 0.5
    epochs: int = 20
    steps_per_epoch: int = 50
    batch_size: int = 4
    train_pool: int = 0  # 0: dynamic mixing; >0: fixed pool of this many examples
    val_pool: int = 4
    seed: int = 0
    ce_weight: float = 1.0
    reg_weight: float = 1.0
    grad_clip: float = 1.0


@dataclass
class StreamConfig:
    chunk_seconds: float = 2.0
    decode_mode: str = "greedy"  # greedy | top_k
    top_k: int = 1
    temperature: float = 1.0
    seed: int = 0


@dataclass
class EvalConfig:
    n_examples: int = 8
    seed: int = 1234
    rows: list[str] = field(
        default_factory=lambda: ["base_n2", "n1", "n3", "encoder_mix", "encoder_ref", "no_encoder", "target_n"]
    )
    spk_steps: int = 300


@dataclass
class RunConfig:
    preset: str = "desk"
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        _check(self.adapter.dim % self.adapter.heads == 0, "adapter.dim must be divisible by adapter.heads")
        _check(self.decoder.dim % self.decoder.heads == 0, "decoder.dim must be divisible by decoder.heads")
        _check(self.refiner.dim % self.refiner.heads == 0, "refiner.dim must be divisible by refiner.heads")
        _check(1 <= self.decoder.n_ar <= self.codec.n_layers, "decoder.n_ar must be in [1, codec.n_layers]")
        _check(self.adapter.causal_mode in ("full", "chunk_causal"), "adapter.causal_mode: full | chunk_causal")
        _check(self.decoder.io_mode in ("continuous", "discrete"), "decoder.io_mode: continuous | discrete")
        _check(self.decoder.output_mode in ("target", "ref_output"), "decoder.output_mode: target | ref_output")
        _check(self.refiner.input_mode in ("all", "mix_only", "ref_only"), "refiner.input_mode: all | mix_only | ref_only")
        _check(self.train.mode in ("joint", "split"), "train.mode: joint | split")
        _check(self.stream.decode_mode in ("greedy", "top_k"), "stream.decode_mode: greedy | top_k")
        _check(self.data.win >= self.data.hop > 0, "data.win >= data.hop > 0")
        _check(self.data.snr_hi >= self.data.snr_lo, "data.snr_hi >= data.snr_lo")
        _check(self.codec.codebook_size >= 2, "codec.codebook_size >= 2")
        for name in ("lr0", "halving_factor"):
            _check(getattr(self.train, name) > 0, f"train.{name} must be positive")
        for name in ("warmup_steps", "plateau_patience_epochs", "epochs", "steps_per_epoch", "batch_size"):
            _check(getattr(self.train, name) > 0, f"train.{name} must be positive")
        _check(self.adapter.chunk_frames > 0, "adapter.chunk_frames must be positive")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


PAPER_OVERRIDES: dict[str, Any] = {
    "adapter.layers": 6,
    "adapter.heads": 8,
    "adapter.dim": 512,
    "adapter.ffn_mult": 2,
    "decoder.layers": 10,
    "decoder.heads": 8,
    "decoder.dim": 512,
    "decoder.max_len": 3000,
    "refiner.layers": 6,
    "refiner.heads": 8,
    "refiner.dim": 512,
    "codec.codebook_size": 1024,
    "codec.n_layers": 8,
    "train.warmup_steps": 10000,
    "train.epochs": 100,
}


def preset(name: str = "desk") -> RunConfig:
    if name == "desk":
        return RunConfig(preset="desk").validate()
    if name == "paper":
        cfg = RunConfig(preset="paper")
        apply_overrides(cfg, PAPER_OVERRIDES)
        return cfg.validate()
    raise ConfigError(f"unknown preset {name!r} (expected desk | paper)")


def from_dict(data: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    cfg = copy.deepcopy(base) if base is not None else None
    if cfg is None:
        cfg = preset(data.get("preset", "desk"))
    flat = _flatten(data)
    flat.pop("preset", None)
    apply_overrides(cfg, flat)
    return cfg.validate()


def load(path: str | Path, overrides: dict[str, Any] | None = None, preset_name: str | None = None) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if preset_name is not None:
        data["preset"] = preset_name
    cfg = from_dict(data)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def _flatten(data: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, dotted + "."))
        else:
            out[dotted] = value
    return out


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Set ``section.field`` values in place. Strings are coerced to the field type."""
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"unknown key {dotted!r}: expected section.field")
        section_name, field_name = parts
        section = getattr(cfg, section_name, None)
        if section is None or not dataclasses.is_dataclass(section):
            raise ConfigError(f"unknown section {section_name!r}")
        fields = {f.name: f for f in dataclasses.fields(section)}
        if field_name not in fields:
            raise ConfigError(f"unknown key {dotted!r}")
        current = getattr(section, field_name)
        setattr(section, field_name, _coerce(value, current, dotted))
    return cfg


def _coerce(value: Any, current: Any, key: str) -> Any:
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            if isinstance(value, str):
                return [v.strip() for v in value.split(",") if v.strip()]
            return list(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.field=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw) if raw.strip() else ""
