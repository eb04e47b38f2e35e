"""BN as a per-channel affine map, per-layer summaries, histograms and parameter accounting.

In eval mode a BN channel computes ``m * z + b`` with

    m = gamma / sqrt(running_var + eps)            (normalized weight)
    b = beta - gamma * running_mean / sqrt(running_var + eps)   (normalized bias)

Looking at gamma alone ignores how the statistics rescale a channel, so the
summaries here are built on ``m`` and ``b``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .attacks import AttackSpec, predict, run_attack
from .data import DatasetSplit
from .functional import softmax_np
from .nn import BatchNorm2d, Module, bn_layers, enumerate_params

HISTOGRAM_SOURCES = ("bn_gamma", "bn_m", "bn_b", "logits", "confidence")
DEFAULT_BINS = 64


class TopologyMismatch(ValueError):
    pass


@dataclass
class NormalizedAffine:
    layer_id: str
    m: np.ndarray
    b: np.ndarray

    def __call__(self, z: np.ndarray) -> np.ndarray:
        shape = (1, -1) + (1,) * (np.ndim(z) - 2)
        return self.m.reshape(shape) * z + self.b.reshape(shape)


def normalized_affine(layer: BatchNorm2d, layer_id: str = "") -> NormalizedAffine:
    gamma = layer.gamma.data.astype(np.float64)
    beta = layer.beta.data.astype(np.float64)
    mean = layer.running_mean.data.astype(np.float64)
    var = layer.running_var.data.astype(np.float64)
    m = gamma / np.sqrt(var + layer.eps)
    return NormalizedAffine(layer_id, m, beta - m * mean)


class LayerMean(NamedTuple):
    layer_id: str
    mean_m: float
    mean_b: float


def per_layer_mean_m(model: Module) -> list[LayerMean]:
    """Mean normalized weight (and bias) of every BN layer, in forward order."""
    layers = bn_layers(model)
    if not layers:
        raise ValueError("model has no BN layers")
    out = []
    for name, bn in layers:
        aff = normalized_affine(bn, name)
        out.append(LayerMean(name, float(aff.m.mean()), float(aff.b.mean())))
    return out


def mean_shift(model_a: Module, model_b: Module) -> float:
    """Average over BN layers of ``mean(m_a) - mean(m_b)``."""
    a, b = per_layer_mean_m(model_a), per_layer_mean_m(model_b)
    shape_a = [(name, bn.channels) for name, bn in bn_layers(model_a)]
    shape_b = [(name, bn.channels) for name, bn in bn_layers(model_b)]
    if shape_a != shape_b:
        raise TopologyMismatch("models have different BN layer layouts")
    return float(np.mean([x.mean_m - y.mean_m for x, y in zip(a, b)]))


@dataclass
class HistogramData:
    bin_edges: np.ndarray
    counts: np.ndarray
    source: str
    model_tag: str = ""
    layer_id: str = ""
    variant: str = ""  # "clean" / "adversarial" for data-dependent sources

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def histogram(values, source: str, bins: int = DEFAULT_BINS, **meta) -> HistogramData:
    """Uniform bins over [min, max] (widened by 0.5 on each side for constant input)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("cannot histogram an empty array")
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return HistogramData(edges, counts.astype(np.int64), source, **meta)


def extract_histograms(
    model: Module,
    split: DatasetSplit | None,
    attack: AttackSpec | None = None,
    sources=("bn_m",),
    n_examples: int | None = None,
    bins: int = DEFAULT_BINS,
    model_tag: str = "",
) -> list[HistogramData]:
    """Histograms of BN quantities (one per layer) and of logits / confidences.

    Both data-dependent sources give one value per example: ``logits`` is
    the largest logit and ``confidence`` the largest softmax probability.
    With ``attack`` given,
    data-dependent sources are also computed on adversarial examples.
    """
    sources = set(sources)
    if not sources:
        raise ValueError("no histogram sources requested")
    unknown = sources - set(HISTOGRAM_SOURCES)
    if unknown:
        raise ValueError(f"unknown histogram sources {sorted(unknown)}")
    out: list[HistogramData] = []
    for name, bn in bn_layers(model):
        aff = normalized_affine(bn, name)
        values = {"bn_gamma": bn.gamma.data, "bn_m": aff.m, "bn_b": aff.b}
        for src in ("bn_gamma", "bn_m", "bn_b"):
            if src in sources:
                out.append(histogram(values[src], src, bins, model_tag=model_tag, layer_id=name))

    data_sources = sorted(sources & {"logits", "confidence"})
    if data_sources:
        if split is None:
            raise ValueError("logit/confidence histograms need a data split")
        if attack is not None and split.labels is None:
            raise ValueError("an attack needs labels")
        subset = split.subset(len(split) if n_examples is None else n_examples)
        model.eval()
        variants = {"clean": subset.images}
        if attack is not None:
            variants["adversarial"] = run_attack(model, subset.batch(np.arange(len(subset))), attack).adversarial
        for variant, images in variants.items():
            logits = predict(model, images)
            for src in data_sources:
                if src == "logits":
                    vals = logits.max(axis=1)
                else:
                    vals = softmax_np(logits.astype(np.float64)).max(axis=1)
                out.append(histogram(vals, src, bins, model_tag=model_tag, variant=variant))
    return out


def confidences(model: Module, images: np.ndarray) -> np.ndarray:
    return softmax_np(predict(model, images).astype(np.float64)).max(axis=1)


def param_accounting(model: Module) -> dict:
    """Exact parameter counts; ``bn_fraction`` is |gamma|+|beta| over all trainable-capable parameters, in percent."""
    sizes = {name: t.data.size for name, t in model.named_arrays()}
    param_names = [n for n, _ in model.named_parameters()]
    total = sum(sizes[n] for n in param_names)
    per_selector = {
        sel: sum(sizes[n] for n in enumerate_params(model, sel))
        for sel in ("bn_params", "bn_stats", "logit", "conv1")
    }
    per_selector["all"] = total
    bn = per_selector["bn_params"]
    return {
        "total": total,
        "per_selector": per_selector,
        "bn_fraction": 100.0 * bn / total if total else 0.0,
    }


# -- CSV emitters -------------------------------------------------------------


def write_histogram_csv(path, hist: HistogramData) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for left, right, count in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts):
            w.writerow([repr(float(left)), repr(float(right)), int(count)])


def write_layer_means_csv(path, means: list[LayerMean]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer_id", "mean_m", "mean_b"])
        for row in means:
            w.writerow([row.layer_id, repr(row.mean_m), repr(row.mean_b)])


def histogram_filename(hist: HistogramData) -> str:
    parts = [hist.model_tag or "model", hist.source]
    if hist.layer_id:
        parts.append(hist.layer_id)
    if hist.variant:
        parts.append(hist.variant)
    return "hist_" + "_".join(p.replace(".", "-") for p in parts) + ".csv"


def write_histograms(directory, hists: list[HistogramData]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for h in hists:
        path = directory / histogram_filename(h)
        write_histogram_csv(path, h)
        paths.append(path)
    return paths
