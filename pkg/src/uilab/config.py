"""Experiment configuration and its flat ``dotted.key = value`` text form.

Example::

    # desk run
    trials = 20
    methods = none, unlearnshield, noise
    dataset.noise_std = 0.1
    arch.hidden_widths = 256, 64, 32
    defense.lambda1 = 0.5

Blank lines and ``#`` comments are ignored. Unknown keys are an error.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from uilab.attack import AttackConfig
from uilab.data import DatasetConfig
from uilab.defense import METHODS as DEFENSE_METHODS
from uilab.defense import DefenseConfig
from uilab.errors import ValidationError
from uilab.model import ArchSpec, TrainConfig
from uilab.unlearning import UnlearnConfig


@dataclass(frozen=True)
class ArchConfig:
    hidden_widths: tuple = (256, 64, 32)
    activation: str = "tanh"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    trials: int = 20
    base_seed: int = 0
    methods: tuple = ("none", "unlearnshield", "noise", "prune")

    def __post_init__(self):
        if self.trials < 1:
            raise ValidationError("trials must be >= 1")
        bad = [m for m in self.methods if m not in DEFENSE_METHODS]
        if bad or not self.methods:
            raise ValidationError(f"unknown defense methods {bad}")
        # construct once so dimension errors surface at load time
        self.model_arch()

    def model_arch(self) -> ArchSpec:
        d = self.dataset
        return ArchSpec((d.height, d.width, d.channels), self.arch.hidden_widths,
                        d.classes, self.arch.activation)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in flatten_config(self))

    def run_id(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def flatten_config(cfg, prefix=""):
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            yield from flatten_config(v, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", v


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            sample = default[0] if default else 0.0
            return tuple(_coerce(key, x, sample) for x in items)
        return raw
    except ValueError:
        raise ValidationError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    known = dict(flatten_config(base))
    updates: dict[str, dict] = {}
    top: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValidationError(f"line {lineno}: unknown config key {key!r}")
        value = _coerce(key, raw, known[key])
        if "." in key:
            section, name = key.split(".", 1)
            updates.setdefault(section, {})[name] = value
        else:
            top[key] = value
    sections = {name: replace(getattr(base, name), **vals) for name, vals in updates.items()}
    return replace(base, **sections, **top)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
