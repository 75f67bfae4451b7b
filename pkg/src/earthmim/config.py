"""Run configuration: flat-sectioned key-value files.

One file describes a whole run. Every key has a default, unknown keys are
rejected with all problems listed at once, and the effective (post-default)
config can be written back out such that re-reading it reproduces the same
object exactly.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import GeneratorConfig, Registry, default_registry
from .masking import MaskConfig
from .model import DecoderConfig, EncoderConfig, ModelConfig
from .objectives import LossConfig
from .tokenizer import TokenizerConfig
from .training import AblationSpec, OptimConfig


class ConfigError(ValueError):
    """Raised with every validation problem joined into one message."""


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "runs"
    threads: int = 1


@dataclass(frozen=True)
class DataSection:
    count: int = 512
    height: int = 32
    width: int = 32
    t_min: int = 4
    t_max: int = 8
    num_classes: int = 5
    latent_components: int = 3
    noise_scale: float = 0.45
    presence_dropout: float = 0.1
    mixing_seed: int = 7
    class_thresholds: tuple[float, ...] = (-0.45, -0.15, 0.15, 0.45)


@dataclass(frozen=True)
class TokenizerSection:
    base_patch_size: int = 8
    p_eff_choices: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    crop_choices: tuple[int, ...] = tuple(range(1, 13))


@dataclass(frozen=True)
class ModelSection:
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    decoder_depth: int = 2


@dataclass(frozen=True)
class LossSection:
    tau_patch: float = 0.1
    tau_inst: float = 0.1


@dataclass(frozen=True)
class EvalSection:
    k: int = 20
    pooling: str = "mean_over_time"
    norm: str = "none"
    probe_epochs: int = 50
    finetune_epochs: int = 10
    finetune_lr: float = 1e-3
    finetune_head: str = "linear"
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2


# section name -> backing dataclass, in canonical file order
SECTION_TYPES: dict[str, type] = {
    "run": RunSection,
    "data": DataSection,
    "tokenizer": TokenizerSection,
    "masking": MaskConfig,
    "model": ModelSection,
    "loss": LossSection,
    "optim": OptimConfig,
    "eval": EvalSection,
    "ablation": AblationSpec,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    masking: MaskConfig = field(default_factory=MaskConfig)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSpec = field(default_factory=AblationSpec)

    def registry(self) -> Registry:
        return default_registry(self.data.num_classes)

    def generator_config(self) -> GeneratorConfig:
        d = self.data
        return GeneratorConfig(
            registry=self.registry(),
            height=d.height, width=d.width, t_min=d.t_min, t_max=d.t_max,
            num_classes=d.num_classes, latent_components=d.latent_components,
            noise_scale=d.noise_scale, presence_dropout=d.presence_dropout,
            mixing_seed=d.mixing_seed, class_thresholds=d.class_thresholds,
        )

    def tokenizer_config(self) -> TokenizerConfig:
        t = self.tokenizer
        return TokenizerConfig(
            base_patch_size=t.base_patch_size,
            p_eff_choices=t.p_eff_choices,
            crop_choices=t.crop_choices,
            model_dim=self.model.dim,
        )

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            encoder=EncoderConfig(depth=m.depth, model_dim=m.dim, heads=m.heads, mlp_ratio=m.mlp_ratio),
            decoder=DecoderConfig(depth=m.decoder_depth),
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            tau_patch=self.loss.tau_patch,
            tau_inst=self.loss.tau_inst,
            lambda_inst=self.ablation.lambda_inst,
            negative_scope=self.ablation.negative_scope,
        )


def _parse_value(raw: str, annotation) -> object:
    origin = typing.get_origin(annotation)
    if origin is tuple:
        element = typing.get_args(annotation)[0]
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(element(p) for p in parts)
    if annotation is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return annotation(raw)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    """Build a RunConfig from file text, collecting every problem at once."""
    parser = configparser.ConfigParser()
    # keys stay case-sensitive so unknown-key reports echo the file verbatim
    parser.optionxform = str
    errors: list[str] = []
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config: unparseable file: {exc}") from exc

    sections = {}
    for name, cls in SECTION_TYPES.items():
        hints = typing.get_type_hints(cls)
        known = {f.name: hints[f.name] for f in dataclasses.fields(cls)}
        overrides = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in known:
                    errors.append(f"[{name}] unknown key {key!r}")
                    continue
                try:
                    overrides[key] = _parse_value(raw, known[key])
                except (ValueError, TypeError) as exc:
                    errors.append(f"[{name}] {key}: {exc}")
        try:
            sections[name] = cls(**overrides)
        except ValueError as exc:
            errors.append(f"[{name}] {exc}")
            sections[name] = cls()  # defaults keep cross-checks running

    for name in parser.sections():
        if name not in SECTION_TYPES:
            errors.append(f"unknown section [{name}]")

    config = RunConfig(**sections)
    errors.extend(cross_validate(config))
    if errors:
        raise ConfigError("config:\n  " + "\n  ".join(errors))
    return config


def cross_validate(config: RunConfig) -> list[str]:
    """Constraints spanning sections; returned rather than raised."""
    errors = []
    if config.model.dim % 4:
        errors.append("[model] dim must be divisible by 4 for the positional grid")
    fractions = (
        config.eval.train_fraction, config.eval.val_fraction, config.eval.test_fraction
    )
    if abs(sum(fractions) - 1.0) > 1e-9:
        errors.append("[eval] split fractions must sum to 1")
    if config.eval.pooling not in ("mean_over_time", "max_over_time"):
        errors.append(f"[eval] unknown pooling {config.eval.pooling!r}")
    if config.eval.norm not in ("none", "l2"):
        errors.append(f"[eval] unknown norm {config.eval.norm!r}")
    if config.eval.finetune_head not in ("linear", "mlp3", "seg"):
        errors.append(f"[eval] unknown finetune_head {config.eval.finetune_head!r}")
    if config.data.count < 0:
        errors.append("[data] count must be non-negative")
    if config.run.threads < 1:
        errors.append("[run] threads must be positive")
    # the derived constructors carry their own checks; surface them here
    try:
        config.generator_config()
    except ValueError as exc:
        errors.append(f"[data] {exc}")
    try:
        config.tokenizer_config()
    except ValueError as exc:
        errors.append(f"[tokenizer] {exc}")
    try:
        config.model_config()
    except ValueError as exc:
        errors.append(f"[model] {exc}")
    return errors


def render_config(config: RunConfig) -> str:
    """Effective config as file text; parsing it back reproduces `config`."""
    out = io.StringIO()
    for name, cls in SECTION_TYPES.items():
        section = getattr(config, name)
        out.write(f"[{name}]\n")
        for f in dataclasses.fields(cls):
            out.write(f"{f.name} = {_format_value(getattr(section, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())


def write_config(path: str | Path, config: RunConfig) -> None:
    Path(path).write_text(render_config(config))


def with_overrides(config: RunConfig, **run_fields) -> RunConfig:
    """Apply non-None CLI flag values onto the [run] section."""
    updates = {k: v for k, v in run_fields.items() if v is not None}
    if not updates:
        return config
    return dataclasses.replace(config, run=dataclasses.replace(config.run, **updates))
