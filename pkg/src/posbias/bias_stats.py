"""Biased subsets, answer-position statistics and answer priors."""

from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import Dataset, Example, answer_sentence_index

Target = Literal["start", "end"]

DEFAULT_EPS = 1e-8


def _answer_position(example: Example, target: Target) -> int:
    a = example.train_answer
    if target == "start":
        return a.token_start
    if target == "end":
        return a.token_end
    raise ValueError(f"target must be 'start' or 'end', got {target!r}")


def _answer_sentence(example: Example, target: Target) -> int:
    pos = _answer_position(example, target)
    for s in example.sentences:
        if s.token_start <= pos < s.token_end:
            return s.index
    raise ValueError(f"{example.id}: answer outside every sentence")


# -- subsets ----------------------------------------------------------------


def build_subset(dataset: Dataset, k: int) -> Dataset:
    """Examples whose training answer starts in sentence `k`."""
    if k < 1:
        raise ValueError("k must be >= 1")
    kept = [ex for ex in dataset if answer_sentence_index(ex) == k]
    if not kept:
        warnings.warn(f"subset k={k} of {dataset.name!r} is empty", stacklevel=2)
    return dataset.derive(kept, op="subset", source=dataset.name, k=k)


def build_subset_at_least(dataset: Dataset, k_min: int) -> Dataset:
    if k_min < 2:
        raise ValueError("k_min must be >= 2")
    kept = [ex for ex in dataset if answer_sentence_index(ex) >= k_min]
    if not kept:
        warnings.warn(f"subset k>={k_min} of {dataset.name!r} is empty", stacklevel=2)
    return dataset.derive(kept, op="subset_at_least", source=dataset.name, k_min=k_min)


def sample_matched(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Uniform sample of `n` examples without replacement.

    Sampling runs over ids in lexicographic order, so the result does not
    depend on the input order.
    """
    if not 0 <= n <= len(dataset):
        raise ValueError(f"cannot sample {n} examples from a dataset of {len(dataset)}")
    pool = sorted(dataset.examples, key=lambda ex: ex.id)
    idx = np.random.default_rng(seed).permutation(len(pool))[:n]
    return dataset.derive((pool[i] for i in idx), op="sample", source=dataset.name, n=n, seed=seed)


# -- statistics ---------------------------------------------------------------


@dataclass(frozen=True)
class PositionHistogram:
    counts_by_sentence: dict[int, int]
    counts_by_token: np.ndarray
    total: int

    def mode_sentence(self) -> int:
        return max(sorted(self.counts_by_sentence), key=self.counts_by_sentence.__getitem__)

    def to_csv_rows(self) -> list[tuple[str, int, int]]:
        rows = [("sentence", l, c) for l, c in sorted(self.counts_by_sentence.items())]
        rows += [("token", i, int(c)) for i, c in enumerate(self.counts_by_token) if c]
        return rows


def position_histogram(dataset: Dataset, target: Target = "start") -> PositionHistogram:
    by_sent = Counter(_answer_sentence(ex, target) for ex in dataset)
    positions = [_answer_position(ex, target) for ex in dataset]
    by_tok = np.bincount(positions, minlength=1) if positions else np.zeros(0, dtype=int)
    return PositionHistogram(dict(sorted(by_sent.items())), by_tok, len(dataset))


@dataclass(frozen=True)
class WordLevelPrior:
    terms: np.ndarray
    n: int
    target: str = "start"
    source: str = ""

    def to_json(self) -> dict:
        return {"kind": "word", "terms": self.terms.tolist(), "N": self.n,
                "target": self.target, "source": self.source}


@dataclass(frozen=True)
class SentenceLevelPrior:
    sentence_freq: dict[int, float]
    max_sentences: int  # L: most sentences in any training passage
    n: int
    target: str = "start"
    source: str = ""

    def to_json(self) -> dict:
        return {"kind": "sentence", "sentence_freq": {str(k): v for k, v in self.sentence_freq.items()},
                "L": self.max_sentences, "N": self.n, "target": self.target, "source": self.source}


def word_level_prior(dataset: Dataset, max_seq_len: int, target: Target = "start") -> WordLevelPrior:
    """Fraction of training answers whose start (or end) token sits at each position.

    Answers at or beyond `max_seq_len` fall outside the vector but still count
    towards the normaliser.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot build a prior from an empty dataset")
    counts = np.zeros(max_seq_len, dtype=np.int64)
    for ex in dataset:
        pos = _answer_position(ex, target)
        if pos < max_seq_len:
            counts[pos] += 1
    # integer counts divided once: exact and independent of example order
    return WordLevelPrior(counts / n, n, target, dataset.name)


def sentence_level_prior(dataset: Dataset, target: Target = "start") -> SentenceLevelPrior:
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot build a prior from an empty dataset")
    counts = Counter(_answer_sentence(ex, target) for ex in dataset)
    max_l = max(len(ex.sentences) for ex in dataset)
    freq = {l: counts.get(l, 0) / n for l in range(1, max_l + 1)}
    return SentenceLevelPrior(freq, max_l, n, target, dataset.name)


def expand_prior(prior: SentenceLevelPrior, example: Example) -> np.ndarray:
    """Per-token terms: every token of sentence l gets the frequency of l (0 beyond L)."""
    terms = np.zeros(example.n_tokens)
    for s in example.sentences:
        terms[s.token_start : s.token_end] = prior.sentence_freq.get(s.index, 0.0)
    return terms


def load_prior(path: str | Path) -> WordLevelPrior | SentenceLevelPrior:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    if raw["kind"] == "word":
        return WordLevelPrior(np.asarray(raw["terms"], dtype=float), raw["N"],
                              raw.get("target", "start"), raw.get("source", ""))
    if raw["kind"] == "sentence":
        freq = {int(k): float(v) for k, v in raw["sentence_freq"].items()}
        return SentenceLevelPrior(freq, raw.get("L", max(freq, default=0)), raw["N"],
                                  raw.get("target", "start"), raw.get("source", ""))
    raise ValueError(f"unknown prior kind {raw['kind']!r}")


# -- estimator wrapper ----------------------------------------------------------


@dataclass(frozen=True)
class BiasTerm:
    start_terms: np.ndarray
    end_terms: np.ndarray
    transform: str = "literal"


def apply_transform(terms: np.ndarray, transform: str, eps: float = DEFAULT_EPS) -> np.ndarray:
    """``literal`` uses frequencies as additive log-terms; ``log_smoothed`` uses log(f + eps)."""
    if transform == "literal":
        return np.asarray(terms, dtype=float)
    if transform == "log_smoothed":
        return np.log(np.asarray(terms, dtype=float) + eps)
    raise ValueError(f"unknown prior transform {transform!r}")


class AnswerPrior(TransformerMixin, BaseEstimator):
    """Answer-position prior used as the fixed bias model.

    ``fit`` counts training-answer positions (start and end separately);
    ``transform`` turns examples into per-token :class:`BiasTerm` vectors.

    Parameters
    ----------
    kind : {"sentence", "word"}
    max_seq_len : int
        Length of the word-level vector.
    prior_transform : {"literal", "log_smoothed"}
    eps : float
        Smoothing constant for ``log_smoothed``.
    """

    def __init__(self, kind="sentence", max_seq_len=512, prior_transform="literal", eps=DEFAULT_EPS):
        self.kind = kind
        self.max_seq_len = max_seq_len
        self.prior_transform = prior_transform
        self.eps = eps

    def fit(self, dataset: Dataset, y=None):
        if self.kind == "sentence":
            self.start_ = sentence_level_prior(dataset, "start")
            self.end_ = sentence_level_prior(dataset, "end")
        elif self.kind == "word":
            self.start_ = word_level_prior(dataset, self.max_seq_len, "start")
            self.end_ = word_level_prior(dataset, self.max_seq_len, "end")
        else:
            raise ValueError(f"kind must be 'sentence' or 'word', got {self.kind!r}")
        apply_transform(np.zeros(1), self.prior_transform, self.eps)  # validates the name
        return self

    def _raw(self, prior, example: Example) -> np.ndarray:
        if self.kind == "sentence":
            return expand_prior(prior, example)
        n = example.n_tokens
        out = np.zeros(n)
        m = min(n, len(prior.terms))
        out[:m] = prior.terms[:m]
        return out

    def bias_terms(self, example: Example) -> BiasTerm:
        check_is_fitted(self, "start_")
        return BiasTerm(
            apply_transform(self._raw(self.start_, example), self.prior_transform, self.eps),
            apply_transform(self._raw(self.end_, example), self.prior_transform, self.eps),
            self.prior_transform,
        )

    def transform(self, dataset) -> list[BiasTerm]:
        return [self.bias_terms(ex) for ex in dataset]

    def to_json(self) -> dict:
        check_is_fitted(self, "start_")
        return {"kind": self.kind, "prior_transform": self.prior_transform, "eps": self.eps,
                "max_seq_len": self.max_seq_len,
                "start": self.start_.to_json(), "end": self.end_.to_json()}
