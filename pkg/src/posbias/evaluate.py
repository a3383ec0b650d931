"""EM/F1 scoring, position-bucketed evaluation and sentence-wise heatmaps."""

from __future__ import annotations

import csv
import json
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .corpus import Dataset, Example, answer_sentence_index
from .ensemble import ConfigurationError

ALL, FIRST, REST = "all", "k=1", "k=2,3,..."

_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)


def _strip_punct(text: str) -> str:
    return "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))


def normalize_answer(text: str) -> str:
    """Lower-case, drop punctuation, drop articles, collapse whitespace."""
    text = _strip_punct(text.lower())
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def _f1(prediction: str, gold: str) -> float:
    pred_toks = normalize_answer(prediction).split()
    gold_toks = normalize_answer(gold).split()
    if not pred_toks or not gold_toks:
        return float(pred_toks == gold_toks)
    common = Counter(pred_toks) & Counter(gold_toks)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pred_toks)
    recall = same / len(gold_toks)
    return 2 * precision * recall / (precision + recall)


def em_f1(prediction: str, golds: Sequence[str]) -> tuple[int, float]:
    if not golds:
        raise ValueError("need at least one gold answer")
    norm = normalize_answer(prediction)
    em = max(int(norm == normalize_answer(g)) for g in golds)
    f1 = max(_f1(prediction, g) for g in golds)
    return em, f1


@dataclass(frozen=True)
class BucketScore:
    em: float
    f1: float
    n: int


@dataclass
class EvalReport:
    em: float
    f1: float
    n: int
    buckets: dict[str, BucketScore] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "em": self.em, "f1": self.f1, "n": self.n,
            "buckets": {k: {"em": b.em, "f1": b.f1, "n": b.n} for k, b in self.buckets.items()},
        }

    def write_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["bucket", "n", "em", "f1"])
            for label, b in self.buckets.items():
                w.writerow([label, b.n, f"{b.em:.6f}", f"{b.f1:.6f}"])


def _bucket(scores: list[tuple[int, float]]) -> BucketScore:
    if not scores:
        return BucketScore(0.0, 0.0, 0)
    n = len(scores)
    em = 100.0 * sum(s[0] for s in scores) / n
    f1 = 100.0 * sum(s[1] for s in scores) / n
    return BucketScore(em, f1, n)


Predictor = Callable[[Example], tuple[int, int]]


def score_predictions(dataset: Dataset, spans: Mapping[str, tuple[int, int]],
                      per_k: bool = False) -> EvalReport:
    """Score predicted token spans keyed by example id.

    Examples are bucketed by the sentence holding the first listed gold answer.
    Per-example scores are reduced in id order so the report does not depend
    on dataset order.
    """
    rows = []
    for ex in sorted(dataset.examples, key=lambda e: e.id):
        s, e = spans[ex.id][:2]
        em, f1 = em_f1(ex.span_text(s, e), [a.text for a in ex.answers])
        rows.append((answer_sentence_index(ex, ex.answers[0]), (em, f1)))

    overall = _bucket([r for _, r in rows])
    buckets = {
        ALL: overall,
        FIRST: _bucket([r for k, r in rows if k == 1]),
        REST: _bucket([r for k, r in rows if k >= 2]),
    }
    if per_k:
        for k in sorted({k for k, _ in rows}):
            buckets[f"k={k}"] = _bucket([r for kk, r in rows if kk == k])
    return EvalReport(overall.em, overall.f1, overall.n, buckets)


def evaluate(dataset: Dataset, model, per_k: bool = False) -> EvalReport:
    """Predict every example with `model` and score against all gold answers.

    `model` is a trained model, a fitted ``SpanExtractor``, or any callable
    mapping an example to a (start, end) token span.
    """
    from .model import predict

    model = getattr(model, "model_", model)
    if callable(model):
        spans = {ex.id: model(ex) for ex in dataset}
    else:
        spans = {ex.id: predict(ex, model) for ex in dataset}
    return score_predictions(dataset, spans, per_k)


@dataclass
class HeatmapMatrix:
    rows: list[int]  # training k
    cols: list[int]  # evaluation k
    cells: list[list[float]]  # F1

    def cell(self, train_k: int, eval_k: int) -> float:
        return self.cells[self.rows.index(train_k)][self.cols.index(eval_k)]

    def diagonal_mean(self) -> float:
        vals = [self.cell(k, k) for k in self.rows if k in self.cols]
        return sum(vals) / len(vals)

    def off_diagonal_mean(self) -> float:
        vals = [self.cell(i, j) for i in self.rows for j in self.cols if i != j]
        return sum(vals) / len(vals)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["train_k\\eval_k", *self.cols])
            for k, row in zip(self.rows, self.cells):
                w.writerow([k, *(f"{v:.6f}" for v in row)])


def heatmap(models: Mapping[int, object], dev_subsets: Mapping[int, Dataset]) -> HeatmapMatrix:
    """F1 of the model trained on sentence k=i, evaluated on the dev subset k=j."""
    missing = sorted(set(models) - set(dev_subsets))
    if missing:
        raise ConfigurationError(f"no dev subset for k={missing}")
    rows = sorted(models)
    cols = sorted(dev_subsets)
    cells = [[evaluate(dev_subsets[j], models[i]).f1 for j in cols] for i in rows]
    return HeatmapMatrix(rows, cols, cells)
