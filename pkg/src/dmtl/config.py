"""Experiment configuration: flat ``section.key=value`` text files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .autodiff.ops import ConfigError
from .model import ModelConfig


def _dims(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in str(text).lower().replace(",", "x").split("x") if p]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) <= 0:
        raise ConfigError(f"expected three positive dims like 32x32x32, got {text!r}")
    return tuple(parts)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in str(text).split(",") if p.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    data_root: str = "data/desk"
    patch: tuple[int, int, int] = (32, 32, 32)
    patches_per_volume: int = 1
    tumor_prob: float = 0.5
    stride: tuple[int, int, int] | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    lambda_class: float = 0.3
    epsilon_dice: float = 1e-5
    class_weights: tuple[float, ...] | None = None  # None: inverse training-split frequency
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 40
    val_every: int = 1
    mode: str = "multi"
    split_seed: int = 1
    seed: int = 0
    threshold: float = 0.5
    out_dir: str = "runs/default"

    # (section.key, attribute, parser)
    _KEYS = {
        "data.root": ("data_root", str),
        "data.patch": ("patch", _dims),
        "data.patches_per_volume": ("patches_per_volume", int),
        "data.tumor_prob": ("tumor_prob", float),
        "data.stride": ("stride", lambda t: None if str(t).lower() in ("", "auto", "none") else _dims(t)),
        "loss.lambda_class": ("lambda_class", float),
        "loss.epsilon_dice": ("epsilon_dice", float),
        "loss.class_weights": ("class_weights", lambda t: None if str(t).lower() in ("", "auto") else _floats(t)),
        "train.lr": ("lr", float),
        "train.batch_size": ("batch_size", int),
        "train.epochs": ("epochs", int),
        "train.val_every": ("val_every", int),
        "train.mode": ("mode", str),
        "train.split_seed": ("split_seed", int),
        "train.seed": ("seed", int),
        "eval.threshold": ("threshold", float),
        "out.dir": ("out_dir", str),
    }

    def validate(self) -> None:
        if self.mode not in ("single", "multi"):
            raise ConfigError(f"train.mode must be single or multi, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.val_every < 1 or self.patches_per_volume < 1:
            raise ConfigError("epochs, batch_size, val_every and patches_per_volume must be >= 1")
        if self.lambda_class < 0:
            raise ConfigError("loss.lambda_class must be >= 0")
        if self.class_weights is not None and (len(self.class_weights) != self.model.num_classes
                                               or min(self.class_weights) <= 0):
            raise ConfigError(f"loss.class_weights must be {self.model.num_classes} positive numbers")
        self.model.check_input_dims(self.patch)
        if self.stride is not None and any(s > p or s < 1 for s, p in zip(self.stride, self.patch)):
            raise ConfigError(f"data.stride {self.stride} must lie in [1, patch]")

    @property
    def model_config(self) -> ModelConfig:
        """Model config with the classifier switched by ``mode``."""
        return dataclasses.replace(self.model, classification_enabled=self.mode == "multi")

    def set(self, key: str, value) -> None:
        key = key.strip()
        if key.startswith("model."):
            name = key[len("model."):]
            merged = self.model.to_dict()
            if name == "classification_enabled":
                raise ConfigError("the classifier is switched by train.mode (single|multi), not model.classification_enabled")
            if name not in merged:
                raise ConfigError(f"unknown config key {key!r}")
            merged[name] = _bool(value) if isinstance(merged[name], bool) else int(value)
            self.model = ModelConfig(**merged)
            return
        if key not in self._KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        attr, parse = self._KEYS[key]
        try:
            setattr(self, attr, parse(value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc

    def items(self) -> list[tuple[str, str]]:
        def show(v):
            if v is None:
                return "auto"
            if isinstance(v, tuple):
                return ("x" if len(v) == 3 and all(isinstance(i, int) for i in v) else ",").join(
                    repr(i) if isinstance(i, float) else str(i) for i in v)
            if isinstance(v, bool):
                return str(int(v))
            if isinstance(v, float):
                return repr(v)
            return str(v)

        out = [(key, show(getattr(self, attr))) for key, (attr, _) in self._KEYS.items()]
        out += [(f"model.{k}", show(v)) for k, v in self.model.to_dict().items() if k != "classification_enabled"]
        return out

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items())


def parse_lines(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path=None, overrides=(), base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Defaults, then the file (if any), then ``key=value`` overrides."""
    cfg = base or ExperimentConfig()
    if path is not None:
        for k, v in parse_lines(Path(path).read_text()):
            cfg.set(k, v)
    for item in overrides:
        pairs = parse_lines(item)
        if not pairs:
            raise ConfigError(f"empty override {item!r}")
        for k, v in pairs:
            cfg.set(k, v)
    cfg.validate()
    return cfg

