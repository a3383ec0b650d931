"""Synthetic marker-token reading task.

Every sentence of a passage carries one marker token followed by a short run
of filler words. The question names one of those markers, and the answer is
the words right after it. Content alone solves the task from any sentence,
so a model that prefers a sentence position has learned a spurious cue.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Dataset, Example, build_example


@dataclass(frozen=True)
class SyntheticSpec:
    n_examples: int = 2000
    sentences_per_passage: tuple[int, int] = (4, 4)
    tokens_per_sentence: tuple[int, int] = (8, 12)
    vocab_size: int = 200
    answer_placement: str = "uniform"  # "uniform" or "fixed_k(K)"
    seed: int = 0
    answer_len: tuple[int, int] = (2, 2)
    n_markers: int = 40

    def __post_init__(self):
        for name in ("sentences_per_passage", "tokens_per_sentence", "answer_len"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be a non-empty range of positive integers")
        if self.vocab_size < 10:
            raise ValueError("vocab_size must be >= 10")
        if self.n_examples < 0:
            raise ValueError("n_examples must be >= 0")
        if self.tokens_per_sentence[0] < self.answer_len[1] + 2:
            raise ValueError("sentences are too short to hold a marker and an answer")
        if self.n_markers < self.sentences_per_passage[1]:
            raise ValueError("need at least one distinct marker per sentence")
        k = self.fixed_k
        if k is not None and k > self.sentences_per_passage[0]:
            raise ValueError(f"fixed_k({k}) exceeds the minimum sentence count")

    @property
    def fixed_k(self) -> int | None:
        p = self.answer_placement
        if p == "uniform":
            return None
        if p.startswith("fixed_k(") and p.endswith(")"):
            return int(p[len("fixed_k(") : -1])
        raise ValueError(f"unknown answer placement {p!r}")


def _word(i: int) -> str:
    return f"w{i}"


def _marker(i: int) -> str:
    return f"mk{i}"


def generate(spec: SyntheticSpec, name: str = "synth", id_prefix: str | None = None) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    prefix = id_prefix if id_prefix is not None else f"{name}-{spec.seed}"
    examples: list[Example] = []
    for i in range(spec.n_examples):
        n_sent = int(rng.integers(spec.sentences_per_passage[0], spec.sentences_per_passage[1] + 1))
        k = spec.fixed_k or int(rng.integers(1, n_sent + 1))
        markers = rng.choice(spec.n_markers, size=n_sent, replace=False)
        sentences: list[list[str]] = []
        answer_words: list[str] = []
        answer_offset = 0
        for s in range(n_sent):
            length = int(rng.integers(spec.tokens_per_sentence[0], spec.tokens_per_sentence[1] + 1))
            ans_len = int(rng.integers(spec.answer_len[0], spec.answer_len[1] + 1))
            words = [_word(int(w)) for w in rng.integers(0, spec.vocab_size, size=length)]
            words[0] = words[0].capitalize()
            # marker never opens the sentence and its answer stays inside it
            pos = int(rng.integers(1, length - ans_len + 1))
            words[pos] = _marker(int(markers[s]))
            if s == k - 1:
                answer_words = words[pos + 1 : pos + 1 + ans_len]
                answer_offset = sum(len(" ".join(x)) + 2 for x in sentences)
                answer_offset += len(" ".join(words[: pos + 1])) + 1
            sentences.append(words)
        context = " ".join(" ".join(words) + "." for words in sentences)
        question = f"What follows {_marker(int(markers[k - 1]))} ?"
        answer = " ".join(answer_words)
        examples.append(build_example(f"{prefix}-{i:06d}", context, question, [(answer, answer_offset)]))
    record = {"op": "synth", "placement": spec.answer_placement, "seed": spec.seed, "n": spec.n_examples}
    return Dataset(name, tuple(examples), (record,))
