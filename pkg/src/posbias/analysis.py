"""Representation diagnostics: per-position word information and its link to the logits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.stats import rankdata

from .corpus import Dataset
from .model import TrainedModel


@dataclass(frozen=True)
class InfoCurve:
    layer: int
    values: np.ndarray  # mean cosine similarity per passage position
    counts: np.ndarray  # examples contributing to each position
    n_examples: int

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["position", "layer", "cosine", "n"])
            for i, (v, c) in enumerate(zip(self.values, self.counts)):
                w.writerow([i, self.layer, f"{v:.8f}", int(c)])


@dataclass(frozen=True)
class CorrelationCurve:
    layers: list[int]
    per_layer: list[float]
    target: str
    skipped: int  # (example, layer) pairs with an undefined coefficient

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["layer", "target", "spearman"])
            for layer, rho in zip(self.layers, self.per_layer):
                w.writerow([layer, self.target, f"{rho:.8f}"])


def row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine of matching rows; 0 where either row is all zeros."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    dots = np.einsum("ij,ij->i", a, b)
    out = np.zeros(len(a))
    ok = denom > 0
    out[ok] = np.clip(dots[ok] / denom[ok], -1.0, 1.0)
    return out


def example_info(model: TrainedModel, example) -> list[np.ndarray]:
    """Per-layer cosine similarity to the word embedding, for one example."""
    layers = model.hidden_states(example).layers
    return [row_cosines(layers[0], h) for h in layers]


def cosine_info(model: TrainedModel, dataset: Dataset, layer: int) -> InfoCurve:
    """Mean cosine(word embedding, layer activation) at each passage position.

    Each example contributes only to the positions it has.
    """
    n_layers = len(model.hidden_states(dataset.examples[0]).layers) if len(dataset) else 0
    if not 0 <= layer < max(n_layers, 1):
        raise ValueError(f"layer {layer} outside [0, {n_layers})")
    width = max((ex.n_tokens for ex in dataset), default=0)
    sums = np.zeros(width)
    counts = np.zeros(width, dtype=np.int64)
    for ex in sorted(dataset.examples, key=lambda e: e.id):
        layers = model.hidden_states(ex).layers
        cos = row_cosines(layers[0], layers[layer])
        sums[: cos.size] += cos
        counts[: cos.size] += 1
    values = np.divide(sums, counts, out=np.zeros(width), where=counts > 0)
    return InfoCurve(layer, values, counts, len(dataset))


def sentence_info(model: TrainedModel, dataset: Dataset, layer: int) -> tuple[float, float]:
    """Mean cosine info over first-sentence tokens and over all later tokens."""
    first, later = [], []
    for ex in dataset:
        layers = model.hidden_states(ex).layers
        cos = row_cosines(layers[0], layers[layer])
        cut = ex.sentences[0].token_end
        first.append(cos[:cut])
        later.append(cos[cut:])
    first_v = np.concatenate(first) if first else np.zeros(0)
    later_v = np.concatenate(later) if later else np.zeros(0)
    return (float(first_v.mean()) if first_v.size else math.nan,
            float(later_v.mean()) if later_v.size else math.nan)


def spearman(x, y) -> float:
    """Spearman's rho with average ranks for ties; NaN when either input is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two vectors of equal length")
    if x.size < 2:
        raise ValueError("spearman needs at least two points")
    rx = rankdata(x) - (x.size + 1) / 2.0
    ry = rankdata(y) - (y.size + 1) / 2.0
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        return math.nan
    return float(np.clip((rx @ ry) / denom, -1.0, 1.0))


def correlation_curve(model: TrainedModel, dataset: Dataset,
                      target: Literal["start", "end"] = "start") -> CorrelationCurve:
    """Per layer, the mean over examples of Spearman(target logits, cosine info).

    Layer 0 is the reference embedding itself (constant similarity) and is not
    reported. Examples whose coefficient is undefined are skipped and counted.
    """
    if target not in ("start", "end"):
        raise ValueError(f"target must be 'start' or 'end', got {target!r}")
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    skipped = 0
    layers_seen: list[int] = []
    for ex in sorted(dataset.examples, key=lambda e: e.id):
        if ex.n_tokens < 2:
            skipped += 1
            continue
        start, end = model.scores(ex)
        logits = start if target == "start" else end
        info = example_info(model, ex)
        layers_seen = list(range(1, len(info)))
        for layer in layers_seen:
            rho = spearman(logits, info[layer])
            if math.isnan(rho):
                skipped += 1
                continue
            sums[layer] = sums.get(layer, 0.0) + rho
            counts[layer] = counts.get(layer, 0) + 1
    per_layer = [sums[l] / counts[l] if counts.get(l) else math.nan for l in layers_seen]
    return CorrelationCurve(layers_seen, per_layer, target, skipped)
