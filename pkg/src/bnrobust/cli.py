"""Command-line front end: ``bnrobust {train,finetune,eval,analyze}``.

Exit codes: 0 success, 2 input/data/config error, 3 checkpoint error,
4 numerical abort (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import analysis
from .attacks import AttackSpec, evaluate_robust_error, predict
from .checkpoint import ArchitectureMismatch, CheckpointError, load_model, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import DataFormatError, DatasetSplit, load_dataset
from .functional import per_example_cross_entropy
from .nn import ResNetConfig, build_resnet
from .training import NumericalError, make_freeze_mask, train

logger = logging.getLogger("bnrobust")

EXIT_OK, EXIT_INPUT, EXIT_CHECKPOINT, EXIT_NUMERICAL = 0, 2, 3, 4
METRICS_HEADER = ["epoch", "split", "loss", "clean_err", "robust_err_pgd10"]


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- configuration -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat section.key = value config file")
    common.add_argument("--data-dir", help="dataset directory (overrides data.dir)")
    common.add_argument("--dataset", help="cifar10 | mnist | blobs")
    common.add_argument("--out", help="output directory", default="run")
    common.add_argument("--seed", type=int, help="seed for model init, batching and attacks")
    common.add_argument("--arch", help="n,w1,w2,... e.g. 3,16,32,64 for ResNet-20")
    common.add_argument("--config-name", help="normal | adv | bn_only | bn_stats | bn_only_params | bn_params")
    common.add_argument("--plus-logit", action="store_true", default=None)
    common.add_argument("--plus-conv1", action="store_true", default=None)
    common.add_argument("--reset-stats", action="store_true", default=None, help="reset BN statistics first")
    common.add_argument("--adversarial", choices=["auto", "true", "false"])
    common.add_argument("--epsilon", help="L-inf budget as a rational, e.g. 8/255")
    common.add_argument("--steps", type=int, help="PGD steps of the training attack")
    common.add_argument("--epochs", type=int)
    common.add_argument("--eval-n", type=int, help="number of test examples to evaluate")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="bnrobust", description="Experiment driver for adversarial fine-tuning of batch-norm layers."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train from scratch")
    p = sub.add_parser("finetune", parents=[common], help="adversarially fine-tune a checkpoint")
    p.add_argument("checkpoint")
    p = sub.add_parser("eval", parents=[common], help="clean and robust error of a checkpoint")
    p.add_argument("checkpoint")
    p = sub.add_parser("analyze", parents=[common], help="normalized-weight and histogram analysis")
    p.add_argument("checkpoints", nargs="+")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    direct = {
        "data.dir": args.data_dir,
        "data.dataset": args.dataset,
        "train.config_name": args.config_name,
        "train.plus_logit": args.plus_logit,
        "train.plus_conv1": args.plus_conv1,
        "train.reset_stats": args.reset_stats,
        "train.adversarial": args.adversarial,
        "attack.epsilon": args.epsilon,
        "attack.steps": args.steps,
        "train.epochs": args.epochs,
        "eval.n": args.eval_n,
    }
    for key, value in direct.items():
        if value is not None:
            cfg.set(key, value)
    if args.seed is not None:
        for key in ("model.seed", "train.seed", "attack.seed", "eval.seed"):
            cfg.set(key, args.seed)
    if args.arch:
        parts = [p for p in args.arch.split(",") if p.strip()]
        if len(parts) < 2:
            raise ConfigError("--arch needs n followed by at least one width")
        cfg.set("model.depth_n", parts[0])
        cfg.set("model.widths", ",".join(parts[1:]))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    cfg.epsilon()  # validate early
    return cfg


def load_data(cfg: ExperimentConfig) -> tuple[DatasetSplit, DatasetSplit]:
    d = cfg.data
    if d.dataset in ("cifar10", "mnist"):
        if not d.dir or not Path(d.dir).is_dir():
            raise FileNotFoundError(f"data directory not found: {d.dir or '(unset)'}")
        train_split, test_split = load_dataset(d.dataset, d.dir)
    elif d.dataset == "blobs":
        train_split, test_split = load_dataset(
            "blobs",
            seed=cfg.model.seed,
            n_train=d.blobs_n_train,
            n_test=d.blobs_n_test,
            num_classes=d.blobs_classes,
            image_size=d.blobs_size,
            margin=d.blobs_margin,
        )
    else:
        raise ConfigError(f"unknown dataset {d.dataset!r}")
    if d.downsample > 1:
        train_split, test_split = (downsample(s, d.downsample) for s in (train_split, test_split))
    if d.n_train:
        train_split = train_split.subset(min(d.n_train, len(train_split)))
    return train_split, test_split


def downsample(split: DatasetSplit, factor: int) -> DatasetSplit:
    n, c, h, w = split.images.shape
    ho, wo = h // factor, w // factor
    x = split.images[:, :, : ho * factor, : wo * factor].reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))
    return DatasetSplit(x.astype(np.float32), split.labels, split.tag, split.num_classes)


def model_config(cfg: ExperimentConfig, in_channels: int, num_classes: int) -> ResNetConfig:
    return ResNetConfig(
        depth_n=cfg.model.depth_n,
        widths=cfg.widths(),
        num_classes=num_classes,
        in_channels=in_channels,
        bn_eps=cfg.model.bn_eps,
        bn_momentum=cfg.model.bn_momentum,
        seed=cfg.model.seed,
    )


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def _eps_text(cfg: ExperimentConfig) -> str:
    return str(Fraction(cfg.attack.epsilon.strip())) if "/" in cfg.attack.epsilon else cfg.attack.epsilon


# -- shared training driver -----------------------------------------------------------


def _run_training(model, cfg: ExperimentConfig, out: Path, provenance: dict, train_split, test_split) -> int:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    mask = make_freeze_mask(
        model, cfg.train.config_name, cfg.train.plus_logit, cfg.train.plus_conv1, cfg.train.reset_stats
    )
    tcfg = cfg.train_config()
    adversarial = cfg.is_adversarial()
    provenance = {**provenance, "adversarial": adversarial, "mask": mask.name, "epochs_done": 0}
    save_checkpoint(out / "init.ckpt", model, {**provenance, "stage": "init"})
    ckpt_path = out / "model.ckpt"
    save_checkpoint(ckpt_path, model, provenance)
    eval_spec = AttackSpec(
        epsilon=tcfg.inner_attack.epsilon, steps=10, step_size=tcfg.inner_attack.step_size, seed=cfg.eval.seed
    )
    n_eval = min(cfg.eval.n, len(test_split))
    rows = []

    def on_epoch_end(epoch, log):
        rows.append([epoch, "train", _fmt(log.loss), _fmt(log.clean_err), _fmt(log.adv_err)])
        extra = {}
        if cfg.train.eval_every and (epoch % cfg.train.eval_every == 0 or epoch == tcfg.epochs) and n_eval:
            res = evaluate_robust_error(model, test_split, [eval_spec], n_eval, cfg.eval.batch_size)
            sub = test_split.subset(n_eval)
            loss = float(per_example_cross_entropy(predict(model, sub.images), sub.labels).mean())
            rows.append([epoch, "test", _fmt(loss), _fmt(res["clean_error"]), _fmt(res["robust_error"])])
            extra = {"test_clean_err": res["clean_error"], "test_robust_err": res["robust_error"]}
            print(
                f"epoch {epoch:3d}  train loss {log.loss:.4f}  test clean {res['clean_error']:6.2f}%"
                f"  robust(pgd10) {res['robust_error']:6.2f}%",
                flush=True,
            )
        save_checkpoint(ckpt_path, model, {**provenance, "epochs_done": epoch})
        _write_metrics(out / "metrics.csv", rows)
        return extra

    _write_metrics(out / "metrics.csv", rows)
    try:
        train(model, train_split, mask, tcfg, adversarial, on_epoch_end=on_epoch_end)
    except NumericalError as exc:
        raise CliError(f"numerical abort: {exc}; last good checkpoint kept at {ckpt_path}", EXIT_NUMERICAL) from exc
    # covers epochs=0, where only the statistics reset (if requested) has happened
    save_checkpoint(ckpt_path, model, {**provenance, "epochs_done": tcfg.epochs})
    return EXIT_OK


def _write_metrics(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(rows)


# -- subcommands ---------------------------------------------------------------------


def cmd_train(args, cfg: ExperimentConfig) -> int:
    train_split, test_split = load_data(cfg)
    n, c, h, w = train_split.images.shape
    model = build_resnet(model_config(cfg, c, train_split.num_classes))
    provenance = {
        "command": "train",
        "config_name": cfg.train.config_name,
        "seeds": {"model": cfg.model.seed, "train": cfg.train.seed, "attack": cfg.attack.seed},
        "epochs": cfg.train.epochs,
        "epsilon": _eps_text(cfg),
        "dataset": cfg.data.dataset,
    }
    return _run_training(model, cfg, Path(args.out), provenance, train_split, test_split)


def _load(path, expected_arch=None):
    try:
        return load_model(path, expected_arch)
    except ArchitectureMismatch as exc:
        raise CliError(f"architecture mismatch: {exc}", EXIT_CHECKPOINT) from exc
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_CHECKPOINT) from exc


def cmd_finetune(args, cfg: ExperimentConfig) -> int:
    train_split, test_split = load_data(cfg)
    expected = None
    if args.arch:
        expected = {
            "depth_n": cfg.model.depth_n,
            "widths": cfg.widths(),
            "num_classes": train_split.num_classes,
            "in_channels": train_split.images.shape[1],
        }
    model, ckpt = _load(args.checkpoint, expected)
    if ckpt.arch.get("in_channels") != train_split.images.shape[1]:
        raise CliError("architecture mismatch: checkpoint input channels differ from the dataset", EXIT_CHECKPOINT)
    cfg.set("model.depth_n", ckpt.arch["depth_n"])
    cfg.set("model.widths", ",".join(str(w) for w in ckpt.arch["widths"]))
    provenance = {
        "command": "finetune",
        "config_name": cfg.train.config_name,
        "base_checkpoint_sha256": ckpt.sha256,
        "seeds": {"train": cfg.train.seed, "attack": cfg.attack.seed},
        "epochs": cfg.train.epochs,
        "epsilon": _eps_text(cfg),
        "dataset": cfg.data.dataset,
    }
    return _run_training(model, cfg, Path(args.out), provenance, train_split, test_split)


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    _, test_split = load_data(cfg)
    model, ckpt = _load(args.checkpoint)
    ensemble = cfg.ensemble()
    n = min(cfg.eval.n, len(test_split))
    if ensemble:
        res = evaluate_robust_error(model, test_split, ensemble, n, cfg.eval.batch_size)
    else:
        res = evaluate_robust_error(model, test_split, [], n, cfg.eval.batch_size, clean_only=True)
    report = {
        "checkpoint_sha256": ckpt.sha256,
        "config_name": ckpt.provenance.get("config_name", ""),
        "epsilon": _eps_text(cfg),
        "n_examples": n,
        "ensemble": [s.label() for s in ensemble],
        "clean_error": round(res["clean_error"], 4),
        "robust_error": round(res["robust_error"], 4),
        "per_attack": {k: round(v, 4) for k, v in res["per_attack"].items()},
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"{'attack':<28}{'error %':>10}")
    print(f"{'clean':<28}{report['clean_error']:>10.2f}")
    for name, value in report["per_attack"].items():
        print(f"{name:<28}{value:>10.2f}")
    print(f"{'combined (robust)':<28}{report['robust_error']:>10.2f}")
    return EXIT_OK


def cmd_analyze(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = []
    for i, path in enumerate(args.checkpoints):
        model, ckpt = _load(path)
        tag = f"{i}-{ckpt.provenance.get('config_name') or Path(path).stem}"
        models.append((tag, model))

    test_split = None
    if cfg.data.dataset == "blobs" or cfg.data.dir:
        _, test_split = load_data(cfg)
    eps = cfg.epsilon()
    attack = AttackSpec(epsilon=eps, steps=10, seed=cfg.eval.seed) if eps > 0 else None
    n = min(cfg.eval.n, len(test_split)) if test_split is not None else None

    accounting = {}
    for tag, model in models:
        analysis.write_layer_means_csv(out / f"layer_means_{tag}.csv", analysis.per_layer_mean_m(model))
        sources = {"bn_gamma", "bn_m", "bn_b"}
        if test_split is not None:
            sources |= {"logits", "confidence"}
        hists = analysis.extract_histograms(
            model, test_split, attack, sources, n, cfg.eval.histogram_bins, model_tag=tag
        )
        analysis.write_histograms(out / "histograms", hists)
        accounting[tag] = analysis.param_accounting(model)
    (out / "param_accounting.json").write_text(json.dumps(accounting, indent=2, sort_keys=True) + "\n")

    if len(models) > 1:
        with open(out / "mean_shift.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model_a", "model_b", "mean_shift"])
            for (ta, ma), (tb, mb) in itertools.permutations(models, 2):
                try:
                    w.writerow([ta, tb, repr(analysis.mean_shift(ma, mb))])
                except analysis.TopologyMismatch as exc:
                    logger.warning("skipping pair %s / %s: %s", ta, tb, exc)
    print(f"analysis written to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "finetune": cmd_finetune, "eval": cmd_eval, "analyze": cmd_analyze}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, DataFormatError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
