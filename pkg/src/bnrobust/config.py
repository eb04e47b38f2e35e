"""Experiment configuration: flat ``section.key = value`` text files.

Example::

    # comments start with '#'
    data.dataset = mnist
    data.dir = /data/mnist
    model.widths = 8,16,32
    train.config_name = bn_params
    train.lr_schedule = 0:0.01,20:0.001
    attack.epsilon = 8/255
    eval.ensemble = pgd50x5,pgd50x5t,rs5000

Every key has a default, so an empty file is a valid configuration. The
resolved configuration is written back in the same format into each run
directory.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from .attacks import AttackSpec, parse_epsilon
from .training import CONFIG_NAMES, FINETUNE_CONFIGS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    dataset: str = "cifar10"  # cifar10 | mnist | blobs
    dir: str = ""
    n_train: int = 0  # 0 = whole split
    downsample: int = 1  # average-pool factor applied at load time
    blobs_classes: int = 2
    blobs_size: int = 8
    blobs_margin: float = 0.5
    blobs_n_train: int = 512
    blobs_n_test: int = 256


@dataclass
class ModelSection:
    depth_n: int = 3
    widths: str = "16,32,64"
    seed: int = 0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1


@dataclass
class TrainSection:
    config_name: str = "normal"
    plus_logit: bool = False
    plus_conv1: bool = False
    reset_stats: bool = False
    adversarial: str = "auto"  # auto | true | false
    epochs: int = 100
    batch_size: int = 128
    lr_schedule: str = "0:0.1,50:0.01,75:0.001"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = True
    aug_flip: bool = True
    aug_pad: int = 4
    seed: int = 0
    eval_every: int = 1


@dataclass
class AttackSection:
    epsilon: str = "8/255"
    steps: int = 10
    step_size: str = ""  # empty = epsilon/4
    restarts: int = 1
    random_init: bool = True
    seed: int = 0


@dataclass
class EvalSection:
    ensemble: str = "pgd50x5,pgd50x5t,rs5000"
    n: int = 1000
    batch_size: int = 256
    seed: int = 0
    histogram_bins: int = 64


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)

    SECTIONS = ("data", "model", "train", "attack", "eval")

    # -- text round trip -----------------------------------------------------
    def set(self, key: str, value) -> None:
        try:
            section_name, name = key.split(".", 1)
        except ValueError:
            raise ConfigError(f"config key {key!r} lacks a section prefix") from None
        if section_name not in self.SECTIONS:
            raise ConfigError(f"unknown config section {section_name!r}")
        section = getattr(self, section_name)
        kinds = {f.name: type(getattr(section, f.name)) for f in fields(section)}
        if name not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(section, name, _coerce(kinds[name], value, key))

    def items(self):
        for section_name in self.SECTIONS:
            section = getattr(self, section_name)
            for f in fields(section):
                yield f"{section_name}.{f.name}", getattr(section, f.name)

    def dumps(self) -> str:
        lines = []
        for key, value in self.items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'section.key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.loads(path.read_text())

    # -- typed views -------------------------------------------------------------
    def widths(self) -> list[int]:
        return parse_int_list(self.model.widths)

    def epsilon(self) -> float:
        return parse_epsilon(self.attack.epsilon)

    def is_adversarial(self) -> bool:
        mode = self.train.adversarial.lower()
        if mode == "auto":
            return self.train.config_name == "adv" or self.train.config_name in FINETUNE_CONFIGS
        return _coerce(bool, mode, "train.adversarial")

    def inner_attack(self) -> AttackSpec:
        eps = self.epsilon()
        step = parse_epsilon(self.attack.step_size) if self.attack.step_size else None
        return AttackSpec(
            epsilon=eps,
            steps=self.attack.steps,
            step_size=step,
            restarts=self.attack.restarts,
            random_init=self.attack.random_init,
            seed=self.attack.seed,
        )

    def train_config(self) -> TrainConfig:
        if self.train.config_name not in CONFIG_NAMES:
            raise ConfigError(f"unknown train.config_name {self.train.config_name!r}")
        return TrainConfig(
            epochs=self.train.epochs,
            batch_size=self.train.batch_size,
            lr_schedule=parse_schedule(self.train.lr_schedule),
            sgd_momentum=self.train.momentum,
            weight_decay=self.train.weight_decay,
            inner_attack=self.inner_attack(),
            seed=self.train.seed,
            augment=self.train.augment,
            aug_pad=self.train.aug_pad,
            aug_flip=self.train.aug_flip,
        )

    def ensemble(self) -> list[AttackSpec]:
        return parse_ensemble(self.eval.ensemble, self.epsilon(), self.eval.seed)


def _coerce(kind, value, key):
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(Fraction(text)) if "/" in text else float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise ConfigError("empty integer list")
    return values


def parse_schedule(text: str) -> list[tuple[int, float]]:
    """``"0:0.1,50:0.01"`` -> ``[(0, 0.1), (50, 0.01)]``."""
    out = []
    for item in str(text).split(","):
        item = item.strip()
        if not item:
            continue
        try:
            epoch, lr = item.split(":")
            out.append((int(epoch), float(lr)))
        except ValueError:
            raise ConfigError(f"bad lr schedule entry {item!r}; expected epoch:lr") from None
    if not out:
        raise ConfigError("empty lr schedule")
    return out


_MEMBER = re.compile(r"^(?:(pgd)(\d+)(?:x(\d+))?(t?)|(rs)(\d+)|(fgsm))$")


def parse_ensemble(text: str, epsilon: float, seed: int = 0) -> list[AttackSpec]:
    """Members: ``pgd<steps>[x<restarts>][t]`` (``t`` = runner-up targeted), ``rs<queries>``, ``fgsm``."""
    members = []
    for k, token in enumerate(t.strip() for t in str(text).split(",") if t.strip()):
        m = _MEMBER.match(token)
        if not m:
            raise ConfigError(f"unknown ensemble member {token!r}")
        if m.group(1):
            members.append(
                AttackSpec(
                    epsilon=epsilon,
                    steps=int(m.group(2)),
                    restarts=int(m.group(3) or 1),
                    targeted=bool(m.group(4)),
                    seed=seed + k,
                )
            )
        elif m.group(5):
            members.append(AttackSpec(epsilon=epsilon, kind="random_search", queries=int(m.group(6)), seed=seed + k))
        else:
            members.append(AttackSpec(epsilon=epsilon, kind="fgsm", steps=1, seed=seed + k))
    return members
