"""De-biasing objectives over start/end position distributions.

Every function works on 1-D float arrays for one passage. Functions whose
name ends in ``_grad`` return gradients used by the hand-written backward
pass in :mod:`posbias.model`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

OBJECTIVES = ("none", "bias_product", "learned_mixin", "entropy_reg", "random_pos")
ENSEMBLE_OBJECTIVES = ("bias_product", "learned_mixin")

COSINE_EPS = 1e-6


class ConfigurationError(ValueError):
    pass


def log_softmax(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("log_softmax needs a non-empty vector")
    shifted = scores - scores.max()
    return shifted - np.log(np.exp(shifted).sum())


def softmax(scores) -> np.ndarray:
    return np.exp(log_softmax(scores))


def _check_same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")


def bias_product(logp, bias) -> np.ndarray:
    """softmax(log p + log b): product of the model and bias experts."""
    return learned_mixin(logp, bias, 1.0)


def learned_mixin(logp, bias, g: float) -> np.ndarray:
    """softmax(log p + g * log b) with a non-negative gate g."""
    logp = np.asarray(logp, dtype=float)
    bias = np.asarray(bias, dtype=float)
    _check_same_length(logp, bias)
    if g < 0:
        raise ValueError("gate must be non-negative")
    return softmax(logp + g * bias)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass
class MixinHead:
    """Affine map from a hidden row to a scalar, pooled into the gate value."""

    weight: np.ndarray
    bias: float = 0.0


def gate(hidden: np.ndarray, head: MixinHead) -> float:
    """max_i softplus(weight . x_i + bias)."""
    g, _ = gate_forward(hidden, head.weight, head.bias)
    return g


def gate_forward(hidden: np.ndarray, weight: np.ndarray, bias: float) -> tuple[float, int]:
    """Gate value and the arg-max row it was pooled from."""
    hidden = np.atleast_2d(np.asarray(hidden, dtype=float))
    if hidden.shape[0] == 0:
        raise ValueError("gate needs at least one position")
    scores = hidden @ weight + bias
    i = int(np.argmax(scores))  # softplus is monotone, so max commutes
    return float(softplus(scores[i])), i


def entropy_regularizer(cos_sims) -> float:
    """Entropy of clamped, sum-normalised cosine similarities."""
    return entropy_and_grad(cos_sims)[0]


def entropy_and_grad(cos_sims) -> tuple[float, np.ndarray]:
    s = np.asarray(cos_sims, dtype=float)
    clamped = np.maximum(s, COSINE_EPS)
    total = clamped.sum()
    q = clamped / total
    h = float(-(q * np.log(q)).sum())
    grad = (-np.log(q) - h) / total
    grad[s < COSINE_EPS] = 0.0
    return h, grad


def randomized_positions(max_seq_len: int, t: int, seed) -> np.ndarray:
    """`t` distinct 1-based positions from 1..max_seq_len, ascending.

    `seed` may be an int or a ``numpy.random.Generator``.
    """
    if not 1 <= t <= max_seq_len:
        raise ValueError(f"t must lie in [1, {max_seq_len}], got {t}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.sort(rng.choice(max_seq_len, size=t, replace=False)) + 1


def nll_loss(ensembled, gold: int) -> float:
    p = np.asarray(ensembled, dtype=float)
    if not 0 <= gold < p.size:
        raise ValueError(f"gold position {gold} outside [0, {p.size})")
    return float(-np.log(p[gold]))


def ensembled_nll_and_grad(
    scores: np.ndarray, gold: int, bias: np.ndarray | None = None, g: float = 1.0
) -> tuple[float, np.ndarray, float]:
    """Loss -log softmax(log_softmax(scores) + g*bias)[gold].

    Returns (loss, d loss / d scores, d loss / d g). With ``bias=None`` this is
    plain cross-entropy and the gate gradient is 0.
    """
    logp = log_softmax(scores)
    if bias is None:
        combined = logp
    else:
        _check_same_length(logp, bias)
        combined = logp + g * bias
    logq = log_softmax(combined)
    if not 0 <= gold < logq.size:
        raise ValueError(f"gold position {gold} outside [0, {logq.size})")
    delta = np.exp(logq)
    delta[gold] -= 1.0
    # delta sums to zero, so it passes through log_softmax(scores) unchanged
    dg = float(delta @ bias) if bias is not None else 0.0
    return float(-logq[gold]), delta, dg


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "none"
    lam: float = 5.0
    t: int = 384
    max_seq_len: int = 512
    seed: int = 0
    epochs: int = 10
    learning_rate: float = 0.05
    batch_size: int = 16
    d: int = 32
    max_answer_len: int = 30
    prior: str = "none"
    prior_transform: str = "literal"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if not 1 <= self.t <= self.max_seq_len:
            raise ConfigurationError("t must satisfy 1 <= t <= max_seq_len")
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.prior not in ("none", "word", "sentence"):
            raise ConfigurationError(f"unknown prior {self.prior!r}")
        if self.objective in ENSEMBLE_OBJECTIVES and self.prior == "none":
            raise ConfigurationError(f"objective {self.objective} needs --prior word|sentence")
        if self.objective not in ENSEMBLE_OBJECTIVES and self.prior != "none":
            raise ConfigurationError(f"objective {self.objective} does not use a prior")

    @property
    def needs_prior(self) -> bool:
        return self.objective in ENSEMBLE_OBJECTIVES

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(values) - set(fields)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def write(self, path: str | Path) -> None:
        """Flat ``key = value`` file, one entry per line."""
        with open(path, "w", encoding="utf-8") as f:
            for key, value in self.to_dict().items():
                f.write(f"{key} = {value}\n")

    @classmethod
    def read(cls, path: str | Path) -> "TrainConfig":
        defaults = cls()
        values = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, raw = (part.strip() for part in line.partition("="))
                if not hasattr(defaults, key):
                    raise ConfigurationError(f"unknown config key {key!r}")
                values[key] = type(getattr(defaults, key))(raw)
        return cls(**values)
