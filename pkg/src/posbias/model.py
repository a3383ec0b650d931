"""A small span-extraction reader with hand-written gradients.

Architecture, per passage of n tokens (width d):

    L0  E_i            word embedding of token i
    L1  X_i = E_i + P_i          add position embedding
        q   = mean of question word embeddings
        a   = softmax_i((X_i Wk) . (q Wq) / sqrt(d))      question-to-passage attention
        c   = sum_i a_i X_i Wv                            attended passage summary
    L2  H_i = X_i + c + sum_r a_{i-r} O_r                 look-back window over the attention
    L3  Z_i = H_i + relu(H_i Wf + bf)
        start_i = Z_i . ws,  end_i = Z_i . we

The look-back window (offset table O, r = 0..window-1) lets the token r steps
after a question match know it, which is what span extraction needs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .bias_stats import AnswerPrior, BiasTerm
from .corpus import Dataset, Example
from .ensemble import (
    ConfigurationError,
    TrainConfig,
    ensembled_nll_and_grad,
    entropy_and_grad,
    log_softmax,
    randomized_positions,
    sigmoid,
    softmax,
    softplus,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "posbias-model/1"
UNK = "<unk>"
WINDOW = 4

# initial standard deviations (scaled by 1/sqrt(d) where noted in init_params);
# "match" is the identity weight in the query projection, i.e. how strongly
# a passage token matching a question token is attended before any training
INIT_SCALE = {
    "word_emb": 1.0,
    "pos_emb": 0.1,
    "attention": 0.1,
    "offsets": 0.1,
    "ff": 0.5,
    "scorer": 0.1,
    "gate": 0.1,
    "gate_bias": 0.0,
    "match": 0.55,
}


class InputError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


PARAM_NAMES = (
    "word_emb", "pos_emb", "w_query", "w_key", "w_value", "offsets",
    "w_ff", "b_ff", "start_scorer", "end_scorer",
    "gate_start_w", "gate_start_b", "gate_end_w", "gate_end_b",
)


@dataclass
class ModelParams:
    word_emb: np.ndarray      # vocab x d
    pos_emb: np.ndarray       # max_seq_len x d
    w_query: np.ndarray       # d x d
    w_key: np.ndarray         # d x d
    w_value: np.ndarray       # d x d
    offsets: np.ndarray       # WINDOW x d
    w_ff: np.ndarray          # d x d
    b_ff: np.ndarray          # d
    start_scorer: np.ndarray  # d
    end_scorer: np.ndarray    # d
    gate_start_w: np.ndarray  # d
    gate_start_b: np.ndarray  # (1,)
    gate_end_w: np.ndarray    # d
    gate_end_b: np.ndarray    # (1,)

    @property
    def d(self) -> int:
        return self.word_emb.shape[1]

    @property
    def max_seq_len(self) -> int:
        return self.pos_emb.shape[0]

    def items(self):
        return ((name, getattr(self, name)) for name in PARAM_NAMES)

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{k: np.zeros_like(v) for k, v in self.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.items())


def init_params(vocab_size: int, d: int, max_seq_len: int, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    s = INIT_SCALE
    root = 1.0 / math.sqrt(d)

    def normal(shape, scale):
        return rng.normal(0.0, scale, size=shape)

    return ModelParams(
        word_emb=normal((vocab_size, d), s["word_emb"]),
        pos_emb=normal((max_seq_len, d), s["pos_emb"]),
        w_query=s["match"] * np.eye(d) + normal((d, d), s["attention"] * root),
        w_key=np.eye(d) + normal((d, d), s["attention"] * root),
        w_value=normal((d, d), s["attention"] * root),
        offsets=normal((WINDOW, d), s["offsets"]),
        w_ff=normal((d, d), s["ff"] * root),
        b_ff=np.zeros(d),
        start_scorer=normal(d, s["scorer"]),
        end_scorer=normal(d, s["scorer"]),
        gate_start_w=normal(d, s["gate"] * root),
        gate_start_b=np.full(1, s["gate_bias"]),
        gate_end_w=normal(d, s["gate"] * root),
        gate_end_b=np.full(1, s["gate_bias"]),
    )


# -- vocabulary ---------------------------------------------------------------


def build_vocab(dataset: Dataset, min_count: int = 1) -> dict[str, int]:
    """Token -> id over passages and questions; id 0 is reserved for unknowns."""
    counts: dict[str, int] = {}
    for ex in dataset:
        for tok in (*ex.passage_tokens, *ex.question_tokens):
            counts[tok.text] = counts.get(tok.text, 0) + 1
    vocab = {UNK: 0}
    for text in sorted(counts):
        if counts[text] >= min_count:
            vocab[text] = len(vocab)
    return vocab


def encode(tokens, vocab: dict[str, int]) -> np.ndarray:
    return np.fromiter((vocab.get(t.text, 0) for t in tokens), dtype=np.int64, count=len(tokens))


@dataclass(frozen=True)
class Encoded:
    passage: np.ndarray
    question: np.ndarray
    start: int
    end: int


def encode_example(example: Example, vocab: dict[str, int]) -> Encoded:
    ans = example.train_answer
    return Encoded(
        encode(example.passage_tokens, vocab),
        encode(example.question_tokens, vocab),
        ans.token_start,
        ans.token_end,
    )


# -- forward / backward -------------------------------------------------------


@dataclass
class HiddenStates:
    """Per-layer passage representations; layer 0 is the word embedding."""

    layers: list[np.ndarray]

    @property
    def final(self) -> np.ndarray:
        return self.layers[-1]

    def __len__(self) -> int:
        return len(self.layers)


N_LAYERS = 4


@dataclass
class _Cache:
    passage: np.ndarray
    question: np.ndarray
    rows: np.ndarray
    emb: np.ndarray
    x: np.ndarray
    q: np.ndarray
    qq: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    attn: np.ndarray
    h: np.ndarray
    pre: np.ndarray
    z: np.ndarray


def _position_rows(n: int, position_indices) -> np.ndarray:
    if position_indices is None:
        return np.arange(n)
    idx = np.asarray(position_indices, dtype=np.int64)
    if idx.size < n:
        raise InputError(f"{idx.size} sampled positions for a passage of {n} tokens")
    return idx[:n] - 1  # sampled positions are 1-based


def _forward(params: ModelParams, passage: np.ndarray, question: np.ndarray,
             position_indices=None) -> tuple[np.ndarray, np.ndarray, _Cache]:
    n = passage.size
    if n == 0:
        raise InputError("empty passage")
    if n > params.max_seq_len:
        raise InputError(f"passage of {n} tokens exceeds max_seq_len={params.max_seq_len}")
    d = params.d
    rows = _position_rows(n, position_indices)
    emb = params.word_emb[passage]
    x = emb + params.pos_emb[rows]
    if question.size:
        q = params.word_emb[question].mean(axis=0)
    else:
        q = np.zeros(d)
    qq = q @ params.w_query
    keys = x @ params.w_key
    attn = softmax(keys @ qq / math.sqrt(d))
    values = x @ params.w_value
    c = attn @ values
    h = x + c
    for r in range(min(WINDOW, n)):
        h[r:] += np.outer(attn[: n - r], params.offsets[r])
    pre = h @ params.w_ff + params.b_ff
    z = h + np.maximum(pre, 0.0)
    start = z @ params.start_scorer
    end = z @ params.end_scorer
    cache = _Cache(passage, question, rows, emb, x, q, qq, keys, values, attn, h, pre, z)
    return start, end, cache


def _backward(params: ModelParams, cache: _Cache, d_start: np.ndarray, d_end: np.ndarray,
              d_z_extra: np.ndarray | None, d_emb_extra: np.ndarray | None,
              grads: ModelParams) -> None:
    """Accumulate parameter gradients into `grads`."""
    d = params.d
    n = cache.passage.size
    z, h, x, attn = cache.z, cache.h, cache.x, cache.attn

    grads.start_scorer += z.T @ d_start
    grads.end_scorer += z.T @ d_end
    dz = np.outer(d_start, params.start_scorer) + np.outer(d_end, params.end_scorer)
    if d_z_extra is not None:
        dz += d_z_extra

    dpre = dz * (cache.pre > 0)
    grads.w_ff += h.T @ dpre
    grads.b_ff += dpre.sum(axis=0)
    dh = dz + dpre @ params.w_ff.T

    dx = dh.copy()
    dc = dh.sum(axis=0)
    dattn = cache.values @ dc
    for r in range(min(WINDOW, n)):
        grads.offsets[r] += attn[: n - r] @ dh[r:]
        dattn[: n - r] += dh[r:] @ params.offsets[r]

    dvalues = np.outer(attn, dc)
    grads.w_value += x.T @ dvalues
    dx += dvalues @ params.w_value.T

    dlogit = attn * (dattn - attn @ dattn)
    scale = 1.0 / math.sqrt(d)
    dkeys = np.outer(dlogit, cache.qq) * scale
    dqq = (cache.keys.T @ dlogit) * scale
    grads.w_key += x.T @ dkeys
    dx += dkeys @ params.w_key.T
    grads.w_query += np.outer(cache.q, dqq)
    dq = params.w_query @ dqq

    demb = dx if d_emb_extra is None else dx + d_emb_extra
    np.add.at(grads.word_emb, cache.passage, demb)
    np.add.at(grads.pos_emb, cache.rows, dx)
    if cache.question.size:
        np.add.at(grads.word_emb, cache.question,
                  np.broadcast_to(dq / cache.question.size, (cache.question.size, d)))


def forward(example: Example, params: ModelParams, vocab: dict[str, int],
            position_indices=None) -> tuple[HiddenStates, np.ndarray, np.ndarray]:
    """Hidden states and start/end scores for one example."""
    enc = encode_example(example, vocab)
    start, end, cache = _forward(params, enc.passage, enc.question, position_indices)
    return HiddenStates([cache.emb, cache.x, cache.h, cache.z]), start, end


def _row_cosines(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    safe = np.where(denom > 0, denom, 1.0)
    cos = np.where(denom > 0, np.einsum("ij,ij->i", a, b) / safe, 0.0)
    return cos, na, nb


def _cosine_grads(a, b, cos, na, nb, dcos):
    """Gradients of sum_i dcos_i * cos(a_i, b_i) w.r.t. a and b."""
    ok = (na > 0) & (nb > 0)
    na_s = np.where(ok, na, 1.0)[:, None]
    nb_s = np.where(ok, nb, 1.0)[:, None]
    k = (dcos * ok)[:, None]
    da = k * (b / (na_s * nb_s) - cos[:, None] * a / na_s**2)
    db = k * (a / (na_s * nb_s) - cos[:, None] * b / nb_s**2)
    return da, db


def example_loss_and_grads(
    params: ModelParams,
    enc: Encoded,
    config: TrainConfig,
    bias: BiasTerm | None = None,
    position_indices=None,
    grads: ModelParams | None = None,
) -> tuple[float, ModelParams, dict]:
    """Training loss for one encoded example and its gradient.

    Returns (loss, grads, info); `info` carries the gate values under
    learned-mixin and the entropy under entropy regularisation.
    """
    if config.needs_prior and bias is None:
        raise ConfigurationError(f"objective {config.objective} needs a prior")
    if grads is None:
        grads = params.zeros_like()
    start, end, cache = _forward(params, enc.passage, enc.question, position_indices)
    info: dict = {}

    b_start = b_end = None
    g_start = g_end = 1.0
    if config.needs_prior:
        b_start, b_end = bias.start_terms, bias.end_terms
    if config.objective == "learned_mixin":
        a_s = cache.z @ params.gate_start_w + params.gate_start_b[0]
        a_e = cache.z @ params.gate_end_w + params.gate_end_b[0]
        i_s, i_e = int(np.argmax(a_s)), int(np.argmax(a_e))
        g_start, g_end = float(softplus(a_s[i_s])), float(softplus(a_e[i_e]))
        info["gate_start"], info["gate_end"] = g_start, g_end

    loss_s, d_start, dg_s = ensembled_nll_and_grad(start, enc.start, b_start, g_start)
    loss_e, d_end, dg_e = ensembled_nll_and_grad(end, enc.end, b_end, g_end)
    loss = 0.5 * (loss_s + loss_e)
    d_start *= 0.5
    d_end *= 0.5

    d_z = None
    d_emb = None
    if config.objective == "learned_mixin":
        d_z = np.zeros_like(cache.z)
        for dg, i, a_w, a_b, gw, gb in (
            (0.5 * dg_s, i_s, params.gate_start_w, params.gate_start_b, grads.gate_start_w, grads.gate_start_b),
            (0.5 * dg_e, i_e, params.gate_end_w, params.gate_end_b, grads.gate_end_w, grads.gate_end_b),
        ):
            da = dg * float(sigmoid(cache.z[i] @ a_w + a_b[0]))
            gw += da * cache.z[i]
            gb[0] += da
            d_z[i] += da * a_w
    if config.objective == "entropy_reg" and config.lam > 0:
        cos, na, nb = _row_cosines(cache.emb, cache.z)
        ent, dent = entropy_and_grad(cos)
        info["entropy"] = ent
        loss -= config.lam * ent
        d_emb, d_z_ent = _cosine_grads(cache.emb, cache.z, cos, na, nb, -config.lam * dent)
        d_z = d_z_ent if d_z is None else d_z + d_z_ent

    _backward(params, cache, d_start, d_end, d_z, d_emb, grads)
    return float(loss), grads, info


def loss_and_gradients(example: Example, params: ModelParams, config: TrainConfig,
                       prior: AnswerPrior | None, vocab: dict[str, int],
                       position_indices=None) -> tuple[float, ModelParams]:
    """Loss and gradients for one example under `config.objective`."""
    if config.needs_prior and prior is None:
        raise ConfigurationError(f"objective {config.objective} needs a prior")
    bias = prior.bias_terms(example) if config.needs_prior else None
    loss, grads, _ = example_loss_and_grads(
        params, encode_example(example, vocab), config, bias, position_indices
    )
    return loss, grads


# -- training -----------------------------------------------------------------


@dataclass
class TrainedModel:
    params: ModelParams
    config: TrainConfig
    vocab: dict[str, int]
    metrics_log: list[dict] = field(default_factory=list)

    def scores(self, example: Example) -> tuple[np.ndarray, np.ndarray]:
        enc = encode_example(example, self.vocab)
        start, end, _ = _forward(self.params, enc.passage, enc.question)
        return start, end

    def hidden_states(self, example: Example) -> HiddenStates:
        return forward(example, self.params, self.vocab)[0]


def _trainable(dataset: Dataset, config: TrainConfig) -> tuple[list[Example], int]:
    limit = config.max_seq_len
    if config.objective == "random_pos":
        limit = min(limit, config.t)
    kept = [ex for ex in dataset if ex.n_tokens <= limit]
    return kept, len(dataset) - len(kept)


def train(dataset: Dataset, config: TrainConfig, prior: AnswerPrior | None = None,
          vocab: dict[str, int] | None = None) -> TrainedModel:
    """Seeded mini-batch SGD over `dataset` under `config.objective`."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if config.needs_prior and prior is None:
        raise ConfigurationError(f"objective {config.objective} needs a prior")
    examples, dropped = _trainable(dataset, config)
    if dropped:
        logger.warning("dropped %d examples longer than the model accepts", dropped)
    if not examples:
        raise ValueError("no example fits within max_seq_len")
    if vocab is None:
        vocab = build_vocab(dataset)
    params = init_params(len(vocab), config.d, config.max_seq_len, config.seed)
    encoded = [encode_example(ex, vocab) for ex in examples]
    biases = [prior.bias_terms(ex) for ex in examples] if config.needs_prior else [None] * len(examples)

    rng = np.random.default_rng(config.seed + 1)
    log: list[dict] = [{"epoch": 0, "dropped": dropped}]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(encoded))
        total, gates = 0.0, []
        for b0 in range(0, len(order), config.batch_size):
            batch = order[b0 : b0 + config.batch_size]
            grads = params.zeros_like()
            for i in batch:
                positions = None
                if config.objective == "random_pos":
                    positions = randomized_positions(config.max_seq_len, config.t, rng)
                loss, _, info = example_loss_and_grads(
                    params, encoded[i], config, biases[i], positions, grads
                )
                if not math.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} on example {examples[i].id}"
                    )
                total += loss
                if "gate_start" in info:
                    gates.append((info["gate_start"], info["gate_end"]))
            step = config.learning_rate / len(batch)
            for name, value in params.items():
                value -= step * getattr(grads, name)
        if not params.is_finite():
            raise TrainingDivergedError(f"parameters became non-finite at epoch {epoch}")
        entry = {"epoch": epoch, "loss": total / len(encoded)}
        if gates:
            g = np.asarray(gates)
            entry["gate_start"] = float(g[:, 0].mean())
            entry["gate_end"] = float(g[:, 1].mean())
        log.append(entry)
        logger.info("epoch %d loss %.4f", epoch, entry["loss"])
    return TrainedModel(params, config, vocab, log)


# -- inference ----------------------------------------------------------------


def best_span(start_logp: np.ndarray, end_logp: np.ndarray, max_answer_len: int = 30) -> tuple[int, int, float]:
    """Highest start_logp[s] + end_logp[e] with s <= e < s + max_answer_len."""
    n = start_logp.size
    total = start_logp[:, None] + end_logp[None, :]
    s_idx, e_idx = np.indices((n, n))
    valid = (e_idx >= s_idx) & (e_idx - s_idx < max_answer_len)
    total = np.where(valid, total, -np.inf)
    flat = int(np.argmax(total))
    s, e = divmod(flat, n)
    return s, e, float(total[s, e])


def predict(example: Example, model: TrainedModel, prior=None) -> tuple[int, int, float]:
    """Best span from the model's own log-probabilities; `prior` is never read."""
    start, end = model.scores(example)
    return best_span(log_softmax(start), log_softmax(end), model.config.max_answer_len)


# -- checkpoints --------------------------------------------------------------


def save_model(model: TrainedModel, path: str | Path) -> None:
    vocab = sorted(model.vocab, key=model.vocab.__getitem__)
    blob = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "vocab": vocab,
        "metrics_log": model.metrics_log,
        "params": {k: v.tolist() for k, v in model.params.items()},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(blob, f, sort_keys=True, ensure_ascii=False)


def load_model(path: str | Path) -> TrainedModel:
    with open(path, encoding="utf-8") as f:
        blob = json.load(f)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {blob.get('format')!r}")
    params = ModelParams(**{k: np.asarray(blob["params"][k], dtype=float) for k in PARAM_NAMES})
    vocab = {tok: i for i, tok in enumerate(blob["vocab"])}
    return TrainedModel(params, TrainConfig.from_dict(blob["config"]), vocab, blob["metrics_log"])


# -- estimator ----------------------------------------------------------------


class SpanExtractor(BaseEstimator):
    """Estimator front end: ``fit(dataset)`` trains, ``predict(dataset)`` returns spans.

    When ``objective`` is an ensemble objective, ``fit`` builds the answer
    prior named by ``prior`` from the training data unless one is passed in.
    """

    def __init__(self, objective="none", prior="none", prior_transform="literal", lam=5.0,
                 t=384, max_seq_len=512, d=32, epochs=10, learning_rate=0.05,
                 batch_size=16, max_answer_len=30, seed=0):
        self.objective = objective
        self.prior = prior
        self.prior_transform = prior_transform
        self.lam = lam
        self.t = t
        self.max_seq_len = max_seq_len
        self.d = d
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_answer_len = max_answer_len
        self.seed = seed

    def make_config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, dataset: Dataset, y=None, prior: AnswerPrior | None = None):
        config = self.make_config()
        if config.needs_prior and prior is None:
            prior = AnswerPrior(config.prior, config.max_seq_len, config.prior_transform).fit(dataset)
        self.prior_ = prior if config.needs_prior else None
        self.model_ = train(dataset, config, self.prior_)
        return self

    def predict(self, dataset: Iterable[Example]) -> list[tuple[int, int, float]]:
        check_is_fitted(self, "model_")
        return [predict(ex, self.model_) for ex in dataset]

    def score(self, dataset: Dataset, y=None) -> float:
        """Mean F1 (0-100) over `dataset`."""
        from .evaluate import evaluate

        check_is_fitted(self, "model_")
        return evaluate(dataset, self.model_).f1
