"""Layers, the pre-activation ResNet family and the parameter namespace."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, relu

SELECTORS = ("all", "bn_params", "bn_stats", "logit", "conv1")


class Module:
    """Minimal module container: named parameters, buffers and children."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._buffers: "OrderedDict[str, Tensor]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()
        self._hooks: list[Callable] = []
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value)
        self._buffers[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for mod_name, mod in self.named_modules():
            for name, t in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), t

    def named_buffers(self) -> Iterator[tuple[str, Tensor]]:
        for mod_name, mod in self.named_modules():
            for name, t in mod._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), t

    def named_arrays(self) -> Iterator[tuple[str, Tensor]]:
        """Parameters and buffers, in a stable per-module order."""
        for mod_name, mod in self.named_modules():
            for store in (mod._params, mod._buffers):
                for name, t in store.items():
                    yield (f"{mod_name}.{name}" if mod_name else name), t

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self.named_arrays())

    def load_state_dict(self, state) -> None:
        own = OrderedDict(self.named_arrays())
        if list(own) != list(state):
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data[...] = arr

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (used for float64 oracles)."""
        for _, t in self.named_arrays():
            t.data = t.data.astype(dtype)
        return self

    def register_forward_hook(self, fn: Callable) -> Callable:
        """``fn(module, output)`` runs after every forward; returns a remover."""
        self._hooks.append(fn)
        return lambda: self._hooks.remove(fn)

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        for hook in self._hooks:
            hook(self, out)
        return out

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, padding: int = 1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.weight = self.add_param("weight", he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel))

    def forward(self, x):
        return F.conv2d(x, self.weight, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = self.add_param("weight", he_normal(rng, (out_features, in_features), in_features))
        self.bias = self.add_param("bias", np.zeros(out_features, dtype=np.float32))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x):
        return relu(x)


class BatchNorm2d(Module):
    """Batch normalization with per-channel scale ``gamma`` and shift ``beta``.

    ``update_stats`` is the statistics-update switch: when False, train-mode
    forwards still normalize with batch statistics but leave the running
    buffers untouched.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be > 0")
        if not 0 < momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        self.eps, self.momentum = eps, momentum
        self.update_stats = True
        self.gamma = self.add_param("gamma", np.ones(channels, dtype=np.float32))
        self.beta = self.add_param("beta", np.zeros(channels, dtype=np.float32))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.running_var = self.add_buffer("running_var", np.ones(channels, dtype=np.float32))

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def reset_statistics(self) -> None:
        self.running_mean.data[...] = 0.0
        self.running_var.data[...] = 1.0

    def forward(self, x):
        return F.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean.data,
            self.running_var.data,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
            update_stats=self.update_stats,
        )


class PreActBlock(Module):
    """BN -> ReLU -> conv, twice, plus a parameter-free shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, bn_kw: dict, rng):
        super().__init__()
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.bn1 = self.add_child("bn1", BatchNorm2d(in_ch, **bn_kw))
        self.relu1 = self.add_child("relu1", ReLU())
        self.conv1 = self.add_child("conv1", Conv2d(in_ch, out_ch, 3, stride, 1, rng=rng))
        self.bn2 = self.add_child("bn2", BatchNorm2d(out_ch, **bn_kw))
        self.relu2 = self.add_child("relu2", ReLU())
        self.conv2 = self.add_child("conv2", Conv2d(out_ch, out_ch, 3, 1, 1, rng=rng))

    def shortcut(self, x):
        if self.stride != 1:
            x = F.subsample_ceil(x)
        if self.out_ch != self.in_ch:
            x = F.pad_channels(x, self.out_ch)
        return x

    def forward(self, x):
        out = self.conv1(self.relu1(self.bn1(x)))
        out = self.conv2(self.relu2(self.bn2(out)))
        return out + self.shortcut(x)


@dataclass
class ResNetConfig:
    depth_n: int = 3
    widths: list = field(default_factory=lambda: [16, 32, 64])
    num_classes: int = 10
    in_channels: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    # fixed per-channel input normalization folded into the first layer
    input_mean: list | None = None
    input_std: list | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.depth_n < 1:
            raise ValueError(f"depth_n must be >= 1, got {self.depth_n}")
        if not self.widths or any(int(w) < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        for vec in (self.input_mean, self.input_std):
            if vec is not None and len(vec) != self.in_channels:
                raise ValueError("input normalization needs one value per input channel")
        if self.input_std is not None and min(self.input_std) <= 0:
            raise ValueError("input_std must be positive")

    @property
    def depth(self) -> int:
        return 2 * len(self.widths) * self.depth_n + 2

    def to_dict(self) -> dict:
        return asdict(self)


class PreActResNet(Module):
    def __init__(self, cfg: ResNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        bn_kw = {"eps": cfg.bn_eps, "momentum": cfg.bn_momentum}
        widths = [int(w) for w in cfg.widths]
        self.conv1 = self.add_child("conv1", Conv2d(cfg.in_channels, widths[0], 3, 1, 1, rng=rng))
        self.blocks: list[PreActBlock] = []
        in_ch = widths[0]
        for s, width in enumerate(widths):
            for b in range(cfg.depth_n):
                stride = 2 if (s > 0 and b == 0) else 1
                block = PreActBlock(in_ch, width, stride, bn_kw, rng)
                self.add_child(f"stage{s + 1}.block{b}", block)
                self.blocks.append(block)
                in_ch = width
        self.bn_final = self.add_child("bn_final", BatchNorm2d(in_ch, **bn_kw))
        self.relu_final = self.add_child("relu_final", ReLU())
        self.fc = self.add_child("fc", Linear(in_ch, cfg.num_classes, rng=rng))
        if cfg.input_mean is not None or cfg.input_std is not None:
            mean = np.asarray(cfg.input_mean or [0.0] * cfg.in_channels, dtype=np.float32)
            std = np.asarray(cfg.input_std or [1.0] * cfg.in_channels, dtype=np.float32)
            self._in_shift = mean.reshape(1, -1, 1, 1)
            self._in_scale = (1.0 / std).reshape(1, -1, 1, 1)
        else:
            self._in_shift = self._in_scale = None

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if self._in_shift is not None:
            x = (x - self._in_shift.astype(x.dtype)) * self._in_scale.astype(x.dtype)
        out = self.conv1(x)
        for block in self.blocks:
            out = block(out)
        out = self.relu_final(self.bn_final(out))
        return self.fc(F.global_avg_pool(out))


def build_resnet(cfg: ResNetConfig | None = None, **overrides) -> PreActResNet:
    """Pre-activation CIFAR-style ResNet with depth ``6n+2`` (n=3 is ResNet-20)."""
    cfg = cfg or ResNetConfig()
    if overrides:
        cfg = ResNetConfig(**{**cfg.to_dict(), **overrides})
    return PreActResNet(cfg)


def bn_layers(model: Module) -> list[tuple[str, BatchNorm2d]]:
    """All BN layers in forward (topological) order."""
    return [(name, m) for name, m in model.named_modules() if isinstance(m, BatchNorm2d)]


def reset_bn_statistics(model: Module) -> None:
    for _, bn in bn_layers(model):
        bn.reset_statistics()


def set_bn_stat_updates(model: Module, enabled: bool) -> None:
    for _, bn in bn_layers(model):
        bn.update_stats = enabled


def enumerate_params(model: Module, selector: str) -> list[str]:
    """Names of the stored arrays picked by ``selector`` (one of ``SELECTORS``)."""
    if selector not in SELECTORS:
        raise ValueError(f"unknown selector {selector!r}; expected one of {SELECTORS}")
    if selector == "all":
        return [name for name, _ in model.named_arrays()]
    names: list[str] = []
    if selector in ("bn_params", "bn_stats"):
        attrs = ("gamma", "beta") if selector == "bn_params" else ("running_mean", "running_var")
        for mod_name, bn in bn_layers(model):
            names.extend(f"{mod_name}.{a}" for a in attrs)
        return names
    if selector == "logit":
        fc = getattr(model, "fc", None)
        return ["fc.weight", "fc.bias"] if isinstance(fc, Linear) else []
    conv = getattr(model, "conv1", None)
    return ["conv1.weight"] if isinstance(conv, Conv2d) else []
