"""Flat key-value experiment configuration.

One ``key = value`` per line, ``#`` comments. Unknown keys are rejected and
every value is validated on load, so a config diff is always meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .audio import FrontendConfig
from .errors import ConfigError
from .model import ComponentPlan, ModelConfig
from .specaugment import AugmentPolicy
from .training import Schedule, TrainConfig
from .visual import VisualConfig

COMPONENTS = ("audio_encoder", "visual_encoder", "fusion", "decoder")


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _choice(*options):
    def parse(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"must be one of {options}, got {raw!r}")
        return raw

    return parse


def _optional_int(raw: str):
    return None if raw.lower() == "none" else int(raw)


def _optional_float(raw: str):
    return None if raw.lower() == "none" else float(raw)


@dataclass
class ExperimentConfig:
    """Typed view of one experiment file; see SCHEMA for keys and defaults."""

    task: str = "asr"
    tokenizer: str = ""
    # model dims
    d_model: int = 64
    n_heads: int = 4
    n_encoder_blocks: int = 4
    n_decoder_blocks: int = 2
    ff_dim: int = 128
    dropout: float = 0.1
    label_smoothing: float = 0.1
    max_target_len: int = 128
    init_seed: int = 0
    # frontend
    n_mels: int = 80
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    fft_size: int = 512
    f_min: float = 0.0
    f_max: float | None = None
    # fusion
    fusion_mode: str = "none"
    speech_proj_dim: int = 16
    visual_proj_dim: int = 16
    # visual encoder
    visual_image_size: int = 32
    visual_embed_dim: int = 64
    visual_blocks: int = 3
    visual_stem_channels: int = 16
    visual_gmlp_layers: int = 0
    visual_use_grid: bool = False
    visual_mean: float = 0.5
    visual_std: float = 0.5
    flip_images: bool = True
    # augmentation
    augment: bool = False
    warp_window: int = 5
    freq_mask_width: int = 10
    n_freq_masks: int = 2
    time_mask_width: int = 20
    n_time_masks: int = 2
    time_mask_ratio: float = 0.2
    # schedule
    lr_start: float = 3.2e-8
    lr_peak: float = 8e-4
    warmup_steps: int = 500
    decay_exponent: float = 2.0
    # training
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    keep_checkpoints: int | None = None
    # decoding
    beam_size: int = 4
    length_penalty: float = 0.0
    max_decode_len: int | None = None
    # component transfer grid
    audio_encoder_init: str = "random"
    audio_encoder_train: str = "finetune"
    visual_encoder_init: str = "random"
    visual_encoder_train: str = "finetune"
    fusion_init: str = "random"
    fusion_train: str = "finetune"
    decoder_init: str = "random"
    decoder_train: str = "finetune"

    # ------------------------------------------------------------------

    def frontend_config(self) -> FrontendConfig:
        return FrontendConfig(
            frame_length_ms=self.frame_length_ms,
            frame_shift_ms=self.frame_shift_ms,
            fft_size=self.fft_size,
            n_mels=self.n_mels,
            f_min=self.f_min,
            f_max=self.f_max,
        )

    def visual_config(self) -> VisualConfig:
        return VisualConfig(
            image_size=self.visual_image_size,
            embed_dim=self.visual_embed_dim,
            n_blocks=self.visual_blocks,
            stem_channels=self.visual_stem_channels,
            n_gmlp_layers=self.visual_gmlp_layers,
            use_grid=self.visual_use_grid,
            channel_mean=self.visual_mean,
            channel_std=self.visual_std,
        )

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            n_mels=self.n_mels,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_encoder_blocks=self.n_encoder_blocks,
            n_decoder_blocks=self.n_decoder_blocks,
            ff_dim=self.ff_dim,
            fusion_mode=self.fusion_mode,
            speech_proj_dim=self.speech_proj_dim,
            visual_proj_dim=self.visual_proj_dim,
            dropout=self.dropout,
            label_smoothing=self.label_smoothing,
            max_target_len=self.max_target_len,
            visual=self.visual_config() if self.fusion_mode != "none" else None,
        )

    def augment_policy(self) -> AugmentPolicy | None:
        if not self.augment:
            return None
        return AugmentPolicy(
            warp_window=self.warp_window,
            freq_mask_width=self.freq_mask_width,
            n_freq_masks=self.n_freq_masks,
            time_mask_width=self.time_mask_width,
            n_time_masks=self.n_time_masks,
            time_mask_ratio=self.time_mask_ratio,
        )

    def schedule(self) -> Schedule:
        return Schedule(
            lr_start=self.lr_start,
            lr_peak=self.lr_peak,
            warmup_steps=self.warmup_steps,
            decay_exponent=self.decay_exponent,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            schedule=self.schedule(),
            augment=self.augment_policy(),
            flip_images=self.flip_images and self.fusion_mode != "none",
            keep_checkpoints=self.keep_checkpoints,
        )

    def component_plans(self, root, components) -> dict[str, ComponentPlan]:
        plans = {}
        for component in components:
            init = getattr(self, f"{component}_init")
            train = getattr(self, f"{component}_train")
            if init != "random":
                init = str(Path(root) / init)
            plans[component] = ComponentPlan(init=init, train=train)
        return plans


_PARSERS = {
    "task": _choice("asr", "visual-pretrain"),
    "tokenizer": str,
    "fusion_mode": _choice("none", "emb", "seq"),
    "f_max": _optional_float,
    "keep_checkpoints": _optional_int,
    "max_decode_len": _optional_int,
    "visual_use_grid": _bool,
    "flip_images": _bool,
    "augment": _bool,
    "audio_encoder_train": _choice("finetune", "frozen"),
    "visual_encoder_train": _choice("finetune", "frozen"),
    "fusion_train": _choice("finetune", "frozen"),
    "decoder_train": _choice("finetune", "frozen"),
}


def _parser_for(field) -> callable:
    if field.name in _PARSERS:
        return _PARSERS[field.name]
    if field.type in ("int", int):
        return int
    if field.type in ("float", float):
        return float
    if field.type in ("bool", bool):
        return _bool
    return str


def load_config(path) -> ExperimentConfig:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    known = {f.name: f for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _parser_for(known[key])(raw)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def save_config(path, cfg: ExperimentConfig) -> None:
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if value is None:
            value = "none"
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")
