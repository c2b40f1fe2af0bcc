"""Flat key=value experiment configuration."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .attacks import TriggerSpec
from .events import SynthConfig
from .snn import LIFConfig, NetConfig, TrainConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # dataset
    height: int = 32
    width: int = 32
    frames: int = 16
    num_classes: int = 4
    side: int = 8
    step: int = 1
    noise: float = 0.01
    n_train: int = 1000
    n_test: int = 200
    n_holdout: int = 200
    data_seed: int = 0
    train_path: str = ""
    test_path: str = ""
    holdout_path: str = ""
    # network
    conv_channels: tuple[int, ...] = (8,)
    hidden: tuple[int, ...] = ()
    votes: int = 1
    dropout: float = 0.0
    threshold: float = 1.0
    time_constant: float = 2.0
    surrogate_slope: float = 2.0
    # training
    epochs: int = 8
    batch_size: int = 16
    lr: float = 0.001
    seed: int = 0
    # trigger / poisoning
    kind: str = "static"
    polarity: int = 3
    size: float = 0.1
    location: str = "top-left"
    smart_grid_lines: int = 2
    most_active: bool = True
    least_polarity: bool = True
    budget: float = 0.1
    clean_weight: float = 0.5
    move_step: int = 2
    poison_rate: float = 0.1
    target: int = 0
    gen_width: int = 8
    # grids (empty = single run with the scalar value)
    poison_rates: tuple[float, ...] = ()
    sizes: tuple[float, ...] = ()
    polarities: tuple[int, ...] = ()
    locations: tuple[str, ...] = ()
    clean_weights: tuple[float, ...] = ()
    budgets: tuple[float, ...] = ()
    kinds: tuple[str, ...] = ()
    # defenses
    defense: str = "strip"
    frr: float = 0.01
    n_overlays: int = 64
    n_strip: int = 100
    percentile: float = 85.0
    prune_fracs: tuple[float, ...] = (0.0, 0.1, 0.3, 0.5, 0.8)
    prune_direction: str = "least"
    finetune_epochs: int = 5
    # stealth
    n_stealth: int = 16
    # paths
    out_dir: str = "runs/default"
    checkpoint: str = ""
    baseline_checkpoint: str = ""
    resume: bool = False

    # -- derived configs ----------------------------------------------------
    def synth(self) -> SynthConfig:
        return SynthConfig(self.height, self.width, self.frames, self.num_classes, self.side,
                           self.step, self.noise, self.n_train, self.n_test + self.n_holdout)

    def net(self) -> NetConfig:
        return NetConfig((self.frames, 2, self.height, self.width), self.num_classes,
                         tuple(self.conv_channels), tuple(self.hidden), self.votes, self.dropout,
                         lif=LIFConfig(self.threshold, self.time_constant, self.surrogate_slope))

    def train(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.seed)

    def trigger(self, **over) -> TriggerSpec:
        loc = over.pop("location", self.location)
        if isinstance(loc, str) and "," in loc:
            r, c = loc.split(",")
            loc = (int(r), int(c))
        spec = TriggerSpec(self.kind, self.polarity, self.size, loc, self.smart_grid_lines, self.most_active,
                           self.least_polarity, self.budget, self.clean_weight, self.move_step, self.seed)
        return dataclasses.replace(spec, **over)

    # -- text form ----------------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={_fmt(v)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _coerce(name: str, hint, raw: str):
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint in (int, float, str):
            return hint(raw)
        # tuple[X, ...]
        inner = hint.__args__[0]
        if raw == "":
            return ()
        return tuple(inner(p.strip()) for p in raw.split(","))
    except (ValueError, TypeError) as exc:
        raise ConfigFileError(f"bad value for {name}: {raw!r}") from exc


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = dataclasses.replace(base) if base is not None else ExperimentConfig()
    hints = get_type_hints(ExperimentConfig)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in hints:
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, hints[key], val))
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    text = Path(path).read_text() if path else ""
    if overrides:
        text += "\n" + "\n".join(overrides)
    return parse_config(text)
