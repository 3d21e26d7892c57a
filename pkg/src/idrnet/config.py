"""Run configuration and its flat ``key = value`` text format.

Blank lines and ``#`` comments are ignored.  Every key must name a
:class:`RunConfig` field; unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import CONTEXT_VARIANTS, EncoderConfig
from .diagnostics import DELETION_MODES, NORMALIZATIONS
from .grouping import PROTOTYPE_MODES
from .model import ModelConfig

RELATION_UPDATES = ("deletion_diagnostics", "backprop", "frozen")
TIMINGS = ("after_step", "before_step")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    num_classes: int = 6
    height: int = 64
    width: int = 64
    train_size: int = 512
    val_size: int = 64
    cue_prob: float = 0.5
    # model
    channels: int = 32
    widths: tuple = ()
    context_variant: str = "identity"
    idr: bool = True
    enhancement: str = "dataset_level"
    use_mean: bool = True
    use_var: bool = True
    threshold: float = 0.0
    relation_update: str = "deletion_diagnostics"
    deletion_mode: str = "balanced"
    diagnostics_timing: str = "after_step"
    prototype_timing: str = "after_step"
    delta_normalization: str = "global"
    # optimisation
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    batch_size: int = 8
    iterations: int = 2000
    alpha: float = 0.4
    prototype_momentum: float = 0.1
    m_mean: float = 0.1
    m_var: float = 0.1
    # augmentation
    aug_flip: bool = True
    aug_scale_min: float = 0.5
    aug_scale_max: float = 2.0
    # bookkeeping
    eval_every: int = 500
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self) -> None:
        choices = {
            "context_variant": CONTEXT_VARIANTS,
            "enhancement": PROTOTYPE_MODES,
            "relation_update": RELATION_UPDATES,
            "deletion_mode": DELETION_MODES,
            "diagnostics_timing": TIMINGS,
            "prototype_timing": TIMINGS,
            "delta_normalization": NORMALIZATIONS,
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.height % 8 or self.width % 8:
            raise ConfigError("height and width must be divisible by 8")
        if self.widths and (len(self.widths) != 3 or self.widths[-1] != self.channels):
            raise ConfigError("widths needs three entries ending in channels")
        if self.enhancement == "orthogonal" and self.num_classes > self.channels:
            raise ConfigError("orthogonal prototypes need channels >= num_classes")
        if self.batch_size < 1 or self.iterations < 1:
            raise ConfigError("batch_size and iterations must be positive")
        if not 0 < self.aug_scale_min <= self.aug_scale_max:
            raise ConfigError("need 0 < aug_scale_min <= aug_scale_max")

    def model_config(self) -> ModelConfig:
        enc = EncoderConfig(self.channels, self.widths or None, context_variant=self.context_variant)
        return ModelConfig(self.num_classes, enc, self.idr, self.use_mean, self.use_var, self.threshold)

    @property
    def diagnostics_enabled(self) -> bool:
        return self.idr and self.relation_update == "deletion_diagnostics"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    def dumps(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    if kind == "bool":
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "tuple":
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return raw


def parse_config(text: str, **overrides) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    values.update(overrides)
    return RunConfig(**values)


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    text = Path(path).read_text() if path is not None else ""
    return parse_config(text, **overrides)
