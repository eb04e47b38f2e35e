"""Standard and adversarial training with per-parameter freeze masks.

The named configurations mirror the study's training matrix:

================  ===============  =========  ============
config            trainable        BN stats   start from
================  ===============  =========  ============
normal / adv      everything       update     scratch
bn_only           gamma, beta      update     scratch
bn_stats          nothing          update     checkpoint
bn_only_params    gamma, beta      frozen     checkpoint
bn_params         gamma, beta      update     checkpoint
================  ===============  =========  ============

``plus_logit`` / ``plus_conv1`` additionally unfreeze the final linear layer
and the first convolution.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .attacks import AttackSpec, predict, pgd
from .checkpoint import ArchitectureMismatch, Checkpoint, load_model
from .data import DatasetSplit, augment, batch_iter
from .nn import Module, enumerate_params, reset_bn_statistics, set_bn_stat_updates
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

CONFIG_NAMES = ("normal", "adv", "bn_only", "bn_stats", "bn_only_params", "bn_params")
FINETUNE_CONFIGS = ("bn_stats", "bn_only_params", "bn_params")


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class FreezeMask:
    trainable: dict
    update_bn_stats: bool = True
    reset_stats_first: bool = False
    name: str = "custom"

    @classmethod
    def custom(cls, model: Module, trainable_names, update_bn_stats: bool = True, reset_stats_first: bool = False):
        """Free-form mask; every name not listed is frozen."""
        names = [n for n, _ in model.named_parameters()]
        wanted = set(trainable_names)
        unknown = wanted - set(names)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        return cls({n: n in wanted for n in names}, update_bn_stats, reset_stats_first)

    def trainable_names(self) -> list[str]:
        return [n for n, flag in self.trainable.items() if flag]

    def apply(self, model: Module) -> None:
        """Bind to ``model``: set requires_grad per name and the BN statistics switch."""
        params = dict(model.named_parameters())
        if set(params) != set(self.trainable):
            raise KeyError("freeze mask does not cover exactly the model's parameters")
        for name, p in params.items():
            p.requires_grad = bool(self.trainable[name])
        set_bn_stat_updates(model, self.update_bn_stats)


def make_freeze_mask(
    model: Module,
    config_name: str,
    plus_logit: bool = False,
    plus_conv1: bool = False,
    reset_stats_first: bool = False,
) -> FreezeMask:
    if config_name not in CONFIG_NAMES:
        raise ValueError(f"unknown config {config_name!r}; expected one of {CONFIG_NAMES}")
    names = [n for n, _ in model.named_parameters()]
    if config_name in ("normal", "adv"):
        chosen = set(names)
    elif config_name == "bn_stats":
        chosen = set()
    else:
        chosen = set(enumerate_params(model, "bn_params"))
    if plus_logit:
        chosen |= set(enumerate_params(model, "logit"))
    if plus_conv1:
        chosen |= set(enumerate_params(model, "conv1"))
    update = config_name != "bn_only_params"
    tag = config_name + ("+logit" if plus_logit else "") + ("+conv1" if plus_conv1 else "")
    tag += "+reset" if reset_stats_first else ""
    return FreezeMask({n: n in chosen for n in names}, update, reset_stats_first, tag)


def sgd_step(
    model: Module,
    mask: FreezeMask,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: dict | None = None,
    no_decay: set | None = None,
) -> None:
    """``v = momentum*v + grad + wd*param; param -= lr*v`` for trainable parameters only.

    ``velocity`` carries the momentum buffers between calls; names in
    ``no_decay`` skip weight decay.
    """
    velocity = {} if velocity is None else velocity
    no_decay = no_decay or set()
    for name, p in model.named_parameters():
        if not mask.trainable.get(name, False):
            continue
        if p.grad is None:
            raise RuntimeError(f"trainable parameter {name} has no gradient")
        g = p.grad
        if weight_decay and name not in no_decay:
            g = g + weight_decay * p.data
        if momentum:
            v = velocity.get(name)
            v = g.copy() if v is None else momentum * v + g
            velocity[name] = v
            g = v
        p.data -= (lr * g).astype(p.data.dtype)


class SGD:
    def __init__(self, model: Module, mask: FreezeMask, momentum=0.9, weight_decay=5e-4, decay_bn: bool = False):
        self.model, self.mask = model, mask
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity: dict = {}
        self.no_decay = set() if decay_bn else set(enumerate_params(model, "bn_params"))

    def step(self, lr: float) -> None:
        sgd_step(self.model, self.mask, lr, self.momentum, self.weight_decay, self.velocity, self.no_decay)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr_schedule: list = field(default_factory=lambda: [(0, 0.1), (50, 0.01), (75, 0.001)])
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    inner_attack: AttackSpec = field(default_factory=AttackSpec)
    seed: int = 0
    augment: bool = True
    aug_pad: int = 4
    aug_flip: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr_schedule or any(lr <= 0 for _, lr in self.lr_schedule):
            raise ValueError("learning rates must be positive")
        self.lr_schedule = sorted((int(e), float(lr)) for e, lr in self.lr_schedule)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if epoch >= start:
                lr = value
        return lr

    @classmethod
    def finetune_default(cls, **kw):
        base = dict(epochs=30, lr_schedule=[(0, 0.01), (20, 0.001)])
        return cls(**{**base, **kw})


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float  # mean training objective (adversarial loss when adversarial)
    clean_loss: float
    clean_err: float  # percent; eval-mode forward before each update when adversarial, else the training forward
    adv_loss: float | None = None
    adv_err: float | None = None  # percent, on the training-mode adversarial forward
    extra: dict = field(default_factory=dict)


def train(
    model: Module,
    data: DatasetSplit,
    mask: FreezeMask,
    cfg: TrainConfig,
    adversarial: bool = False,
    on_epoch_end=None,
) -> list[EpochLog]:
    """Run ``cfg.epochs`` epochs of (adversarial) SGD under ``mask``.

    Adversarial batches are produced by PGD against the current model in eval
    mode; the update forward then runs in train mode so BN statistics adapt
    (iff ``mask.update_bn_stats``). ``on_epoch_end(epoch, log)`` may return a
    dict that is stored in ``log.extra``.
    """
    mask.apply(model)
    if mask.reset_stats_first:
        reset_bn_statistics(model)
    any_trainable = any(mask.trainable.values())
    opt = SGD(model, mask, cfg.sgd_momentum, cfg.weight_decay)
    logs = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        sums = {"loss": 0.0, "clean_loss": 0.0, "clean_wrong": 0, "adv_wrong": 0, "n": 0}
        for b, batch in enumerate(batch_iter(data, cfg.batch_size, cfg.seed, epoch)):
            rng = np.random.default_rng([cfg.seed, epoch, b])
            if cfg.augment:
                batch = augment(batch, rng, cfg.aug_pad, cfg.aug_flip)
            if len(batch) < 2:
                continue  # train-mode BN needs more than one example
            x_train = batch.images
            clean_logits = None
            if adversarial:
                model.eval()
                clean_logits = predict(model, batch.images)
                x_train = pgd(model, batch, cfg.inner_attack, rng).adversarial
            model.train()
            if any_trainable:
                logits = model(Tensor(x_train))
                loss = F.cross_entropy(logits, batch.labels)
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NumericalError(f"non-finite loss {loss_value} at epoch {epoch} batch {b} (lr={lr})")
                model.zero_grad()
                loss.backward()
                opt.step(lr)
                out = logits.data
            else:
                with no_grad():
                    out = model(Tensor(x_train)).data
                loss_value = float(F.per_example_cross_entropy(out, batch.labels).mean())
            if clean_logits is None:
                clean_logits = out
            n = len(batch)
            sums["loss"] += loss_value * n
            sums["clean_loss"] += float(F.per_example_cross_entropy(clean_logits, batch.labels).sum())
            sums["clean_wrong"] += int((clean_logits.argmax(1) != batch.labels).sum())
            sums["adv_wrong"] += int((out.argmax(1) != batch.labels).sum())
            sums["n"] += n
        n = max(sums["n"], 1)
        log = EpochLog(
            epoch=epoch + 1,
            lr=lr,
            loss=sums["loss"] / n,
            clean_loss=sums["clean_loss"] / n,
            clean_err=100.0 * sums["clean_wrong"] / n,
            adv_loss=sums["loss"] / n if adversarial else None,
            adv_err=100.0 * sums["adv_wrong"] / n if adversarial else None,
        )
        model.eval()
        if on_epoch_end is not None:
            log.extra = on_epoch_end(epoch + 1, log) or {}
        logger.info(
            "epoch %d lr %.4g loss %.4f clean_err %.2f%s",
            log.epoch, lr, log.loss, log.clean_err,
            f" adv_err {log.adv_err:.2f}" if adversarial else "",
        )
        logs.append(log)
    model.eval()
    return logs


def finetune(
    model: Module,
    data: DatasetSplit,
    config_name: str,
    cfg: TrainConfig,
    plus_logit: bool = False,
    plus_conv1: bool = False,
    reset_stats_first: bool = False,
    on_epoch_end=None,
):
    """Adversarially fine-tune an already-trained ``model`` in place under a named mask."""
    mask = make_freeze_mask(model, config_name, plus_logit, plus_conv1, reset_stats_first)
    logs = train(model, data, mask, cfg, adversarial=True, on_epoch_end=on_epoch_end)
    return model, logs


def finetune_from_checkpoint(
    base,
    data: DatasetSplit,
    config_name: str,
    cfg: TrainConfig,
    plus_logit: bool = False,
    plus_conv1: bool = False,
    reset_stats_first: bool = False,
    expected_arch: dict | None = None,
    on_epoch_end=None,
):
    """Load ``base`` (a path or :class:`Checkpoint`), then adversarially fine-tune it."""
    if isinstance(base, Checkpoint):
        if expected_arch is not None and {k: base.arch.get(k) for k in expected_arch} != expected_arch:
            raise ArchitectureMismatch(f"checkpoint architecture {base.arch} != requested {expected_arch}")
        model = base.build_model()
    else:
        model, _ = load_model(base, expected_arch)
    return finetune(model, data, config_name, cfg, plus_logit, plus_conv1, reset_stats_first, on_epoch_end)
