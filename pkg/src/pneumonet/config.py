"""Run configuration: a line-based `key = value` file.

Blank lines and `#` comments are ignored; every key has a default, unknown
or duplicate keys are rejected, and the effective configuration echoes back
in canonical form at startup so runs are self-documenting.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError
from .imaging import AugmentParams
from .models import WidthConfig
from .training import TrainConfig, UnfreezeSchedule, default_unfreeze_schedule


@dataclass
class RunConfig:
    # training
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    precision: str = "f32"
    loss: str = "default"
    early_stop_patience: int | None = None
    # architecture (desk scale by default)
    base_channels: int = 8
    dense_layers: int = 4
    growth: int = 32
    in_channels: int = 1
    # data
    side: int = 64
    augment: bool = True
    max_rotation_deg: float = 15.0
    zoom_low: float = 0.9
    zoom_high: float = 1.1
    hflip_prob: float = 0.5
    # schedule: "default", "none", or explicit stages "2:enc5,3:enc4"
    unfreeze: str = "default"

    def __post_init__(self):
        # delegate validation to the dataclasses these fields feed
        self.train_config()
        self.width_config()
        self.augment_params()
        if self.unfreeze not in ("default", "none"):
            _parse_stage_spec(self.unfreeze)

    # -- derived configs ---------------------------------------------------

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, seed=self.seed,
            precision=self.precision,
            loss=None if self.loss == "default" else self.loss,
            early_stop_patience=self.early_stop_patience)

    def width_config(self) -> WidthConfig:
        return WidthConfig(
            base_channels=self.base_channels, dense_layers=self.dense_layers,
            growth=self.growth, in_channels=self.in_channels)

    def augment_params(self) -> AugmentParams | None:
        if not self.augment:
            return None
        return AugmentParams(
            max_rotation_deg=self.max_rotation_deg, zoom_low=self.zoom_low,
            zoom_high=self.zoom_high, hflip_prob=self.hflip_prob)

    def schedule_for(self, model) -> UnfreezeSchedule | None:
        if self.unfreeze == "none":
            return None
        if self.unfreeze == "default":
            return default_unfreeze_schedule(model, self.epochs)
        stages = _parse_stage_spec(self.unfreeze)
        always = tuple(b.name for b in model.blocks
                       if b.name not in {n for _, ns in stages for n in ns})
        return UnfreezeSchedule(stages, always)

    # -- parse / echo --------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, origin: str = "<config>") -> "RunConfig":
        values = {}
        valid = {f.name: f for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in valid:
                raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
            values[key] = _convert(key, val, valid[key].type, origin, lineno)
        return cls(**values)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_text(text, origin=path)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "on" if v else "off"
            elif v is None:
                v = "none"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _convert(key, val, ftype, origin, lineno):
    try:
        if key == "early_stop_patience":
            return None if val.lower() == "none" else int(val)
        if key == "augment":
            lowered = val.lower()
            if lowered in ("on", "true", "1", "yes"):
                return True
            if lowered in ("off", "false", "0", "no"):
                return False
            raise ValueError(f"expected on/off, got {val!r}")
        if ftype == "int":
            return int(val)
        if ftype == "float":
            return float(val)
        return val
    except ValueError as e:
        raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {e}") from None


def _parse_stage_spec(spec: str):
    """'2:enc5,3:enc4' -> [(2, ['enc5']), (3, ['enc4'])]"""
    stages = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        epoch_s, _, block = part.partition(":")
        if not block:
            raise ConfigError(
                f"bad unfreeze stage {part!r}; expected 'epoch:block'")
        try:
            stages.append((int(epoch_s), [block.strip()]))
        except ValueError:
            raise ConfigError(f"bad unfreeze stage epoch in {part!r}") from None
    if not stages:
        raise ConfigError(f"empty unfreeze stage list: {spec!r}")
    return stages
