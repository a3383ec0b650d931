"""Extractive-QA corpora: tokens, sentences, answer alignment and dataset transforms.

All character offsets are codepoint offsets into the passage string.
"""

from __future__ import annotations

import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CACHE_FORMAT = "posbias-dataset/1"

TERMINATORS = frozenset({".", "?", "!"})
QUOTES = frozenset("\"'“”‘’`«»")
CLOSERS = frozenset(")]}")

ABBREVIATIONS = frozenset(
    {
        "Mr.", "Mrs.", "Dr.", "St.", "No.", "vs.", "etc.", "e.g.", "i.e.", "U.S.",
        "Jan.", "Feb.", "Mar.", "Apr.", "Jun.", "Jul.", "Aug.", "Sep.", "Sept.",
        "Oct.", "Nov.", "Dec.",
    }
)


class CorpusError(Exception):
    """Base class for dataset ingestion failures."""


class DatasetFormatError(CorpusError):
    pass


class AlignmentError(CorpusError):
    def __init__(self, message: str, ids: Sequence[str] = ()):
        super().__init__(message)
        self.ids = list(ids)


class TruncationError(CorpusError):
    pass


@dataclass(frozen=True)
class Token:
    text: str
    char_start: int
    char_end: int
    position: int


@dataclass(frozen=True)
class Sentence:
    index: int  # 1-based
    token_start: int
    token_end: int  # exclusive

    def __len__(self) -> int:
        return self.token_end - self.token_start


@dataclass(frozen=True)
class Answer:
    text: str
    char_start: int
    token_start: int
    token_end: int  # inclusive


@dataclass(frozen=True)
class Example:
    id: str
    context: str
    question: str
    passage_tokens: tuple[Token, ...]
    sentences: tuple[Sentence, ...]
    question_tokens: tuple[Token, ...]
    answers: tuple[Answer, ...]
    train_answer_index: int = 0
    meta: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.answers:
            raise ValueError(f"example {self.id!r} has no answers")
        if not 0 <= self.train_answer_index < len(self.answers):
            raise ValueError(f"example {self.id!r}: train_answer_index out of range")
        n = len(self.passage_tokens)
        for a in self.answers:
            if not 0 <= a.token_start <= a.token_end < n:
                raise ValueError(f"example {self.id!r}: answer span outside passage")

    @property
    def train_answer(self) -> Answer:
        return self.answers[self.train_answer_index]

    @property
    def n_tokens(self) -> int:
        return len(self.passage_tokens)

    def span_text(self, start: int, end: int) -> str:
        toks = self.passage_tokens
        return self.context[toks[start].char_start : toks[end].char_end]


@dataclass(frozen=True)
class Dataset:
    name: str
    examples: tuple[Example, ...]
    provenance: tuple[Mapping, ...] = ()

    def __post_init__(self):
        ids = [ex.id for ex in self.examples]
        if len(set(ids)) != len(ids):
            raise ValueError(f"dataset {self.name!r} has duplicate example ids")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def derive(self, examples: Iterable[Example], **record) -> "Dataset":
        """New dataset with the same name and one more provenance record."""
        return Dataset(self.name, tuple(examples), self.provenance + (dict(record),))


# -- tokenization and sentence segmentation ---------------------------------


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> list[Token]:
    """Whitespace tokenization with leading/trailing punctuation split off.

    >>> [t.text for t in tokenize("The cat sat.")]
    ['The', 'cat', 'sat', '.']
    """
    tokens: list[Token] = []
    for m in re.finditer(r"\S+", text):
        start, end = m.start(), m.end()
        lead = start
        while lead < end and _is_punct(text[lead]):
            lead += 1
        trail = end
        while trail > lead and _is_punct(text[trail - 1]):
            trail -= 1
        pieces = [(i, i + 1) for i in range(start, lead)]
        if lead < trail:
            pieces.append((lead, trail))
        pieces.extend((i, i + 1) for i in range(trail, end))
        for s, e in pieces:
            tokens.append(Token(text[s:e], s, e, len(tokens)))
    return tokens


def _next_nonspace(source: str, offset: int) -> str | None:
    m = re.compile(r"\S").search(source, offset)
    return m.group() if m else None


def segment_sentences(tokens: Sequence[Token], source: str) -> list[Sentence]:
    """Rule-based sentence split over `tokens`.

    A terminator token (``.``, ``?``, ``!``) closes a sentence when the next
    non-space character is uppercase, a digit or a quote, unless the token
    before it forms a guarded abbreviation (``Mr.``, ``U.S.``, ...).
    """
    if not tokens:
        return []
    bounds: list[int] = []
    n = len(tokens)
    for i, tok in enumerate(tokens[:-1]):
        if tok.text not in TERMINATORS:
            continue
        if i > 0 and tokens[i - 1].char_end == tok.char_start:
            if tokens[i - 1].text + tok.text in ABBREVIATIONS:
                continue
        # closing quotes/brackets glued to the terminator stay in this sentence
        j = i
        while (j + 1 < n and tokens[j + 1].char_start == tokens[j].char_end
               and (tokens[j + 1].text in QUOTES or tokens[j + 1].text in CLOSERS)):
            j += 1
        if j + 1 >= n:
            continue
        nxt = _next_nonspace(source, tokens[j].char_end)
        if nxt is not None and (nxt.isupper() or nxt.isdigit() or nxt in QUOTES):
            bounds.append(j + 1)
    bounds.append(n)
    sentences, start = [], 0
    for end in bounds:
        sentences.append(Sentence(len(sentences) + 1, start, end))
        start = end
    return sentences


def align_answer(
    example_id: str,
    context: str,
    tokens: Sequence[Token],
    answer_text: str,
    char_start: int,
) -> Answer:
    """Map a character-level answer onto the tokens it intersects."""
    if not 0 <= char_start < len(context):
        raise AlignmentError(f"{example_id}: answer offset outside passage", [example_id])
    words = answer_text.split()
    pattern = re.compile(r"\s*" + r"\s+".join(re.escape(w) for w in words)) if words else None
    m = pattern.match(context, char_start) if pattern else None
    if m is None:
        raise AlignmentError(
            f"{example_id}: answer text {answer_text!r} not found at offset {char_start}",
            [example_id],
        )
    char_end = m.end()
    hits = [t.position for t in tokens if t.char_start < char_end and t.char_end > char_start]
    if not hits:
        raise AlignmentError(f"{example_id}: no token intersects the answer", [example_id])
    return Answer(answer_text, char_start, hits[0], hits[-1])


def build_example(
    example_id: str,
    context: str,
    question: str,
    answers: Sequence[tuple[str, int]],
    tokens: Sequence[Token] | None = None,
    sentences: Sequence[Sentence] | None = None,
) -> Example:
    """Tokenize, segment and align one (context, question, answers) triple.

    The training answer is the earliest-starting gold answer.
    """
    if tokens is None:
        tokens = tokenize(context)
    if sentences is None:
        sentences = segment_sentences(tokens, context)
    aligned = tuple(align_answer(example_id, context, tokens, t, s) for t, s in answers)
    ex = Example(
        id=example_id,
        context=context,
        question=question,
        passage_tokens=tuple(tokens),
        sentences=tuple(sentences),
        question_tokens=tuple(tokenize(question)),
        answers=aligned,
    )
    return select_first_answer(ex)


# -- loaders ------------------------------------------------------------------


def load_squad(path: str | Path) -> Dataset:
    """Read a SQuAD v1.1 JSON file, one example per question."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as err:
        raise DatasetFormatError(f"{path}: malformed JSON ({err})") from err
    try:
        articles = raw["data"]
    except (KeyError, TypeError) as err:
        raise DatasetFormatError(f"{path}: missing top-level 'data' list") from err

    examples: list[Example] = []
    bad_ids: list[str] = []
    for article in articles:
        for para in article["paragraphs"]:
            context = para["context"]
            tokens = tokenize(context)
            sentences = segment_sentences(tokens, context)
            for qa in para["qas"]:
                golds = [(a["text"], int(a["answer_start"])) for a in qa["answers"]]
                try:
                    examples.append(
                        build_example(qa["id"], context, qa["question"], golds, tokens, sentences)
                    )
                except AlignmentError:
                    bad_ids.append(qa["id"])
                except ValueError:
                    bad_ids.append(qa["id"])
    if bad_ids:
        raise AlignmentError(
            f"{path}: {len(bad_ids)} answers do not match their context: "
            + ", ".join(bad_ids[:20]),
            bad_ids,
        )
    return Dataset(path.stem, tuple(examples), ({"op": "load_squad", "source": str(path)},))


def load_mrqa(path: str | Path) -> Dataset:
    """Read an MRQA shared-task JSON-lines file (header line first).

    MRQA ``char_spans`` are inclusive on both ends. Questions without detected
    answers are skipped and counted in the provenance record.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f if ln.strip()]
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise DatasetFormatError(f"{path}: malformed header line ({err})") from err
    if not isinstance(header, dict) or "header" not in header:
        raise DatasetFormatError(f"{path}: first line is not an MRQA header record")

    examples: list[Example] = []
    skipped = 0
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise DatasetFormatError(f"{path}:{lineno}: malformed JSON ({err})") from err
        context = rec["context"]
        tokens = tokenize(context)
        sentences = segment_sentences(tokens, context)
        for qa in rec["qas"]:
            golds = []
            for det in qa.get("detected_answers", []):
                start, end = det["char_spans"][0]
                golds.append((context[start : end + 1], int(start)))
            if not golds:
                skipped += 1
                continue
            examples.append(
                build_example(qa["qid"], context, qa["question"], golds, tokens, sentences)
            )
    if skipped:
        logger.warning("%s: skipped %d questions without detected answers", path, skipped)
    name = header["header"].get("dataset", path.stem) if isinstance(header["header"], dict) else path.stem
    return Dataset(
        str(name),
        tuple(examples),
        ({"op": "load_mrqa", "source": str(path), "skipped_no_answer": skipped},),
    )


# -- per-example transforms ---------------------------------------------------


def answer_sentence_index(example: Example, answer: Answer | None = None) -> int:
    """1-based index of the sentence holding the answer's first token."""
    if answer is None:
        answer = example.train_answer
    for sent in example.sentences:
        if sent.token_start <= answer.token_start < sent.token_end:
            return sent.index
    raise ValueError(f"{example.id}: answer start outside every sentence")


def select_first_answer(example: Example) -> Example:
    best = min(range(len(example.answers)), key=lambda i: (example.answers[i].char_start, i))
    return replace(example, train_answer_index=best)


def _keep_prefix(example: Example, n_sentences: int) -> Example | None:
    """Cut the passage to its first `n_sentences` sentences; None if the training answer is lost."""
    sents = example.sentences[:n_sentences]
    if not sents:
        return None
    n_tok = sents[-1].token_end
    train = example.train_answer
    kept = [a for a in example.answers if a.token_end < n_tok]
    if train.token_end >= n_tok:
        return None
    tokens = example.passage_tokens[:n_tok]
    context = example.context[: tokens[-1].char_end]
    return replace(
        example,
        context=context,
        passage_tokens=tokens,
        sentences=sents,
        answers=tuple(kept),
        train_answer_index=kept.index(train),
    )


def truncate_first_sentence(example: Example) -> Example:
    if answer_sentence_index(example) != 1:
        raise TruncationError(f"{example.id}: training answer is not in the first sentence")
    out = _keep_prefix(example, 1)
    if out is None:
        raise TruncationError(f"{example.id}: training answer crosses the first sentence")
    return out


def truncate_passage(example: Example, max_words: int) -> Example | None:
    """Cut at the last sentence boundary within `max_words` tokens.

    Returns None when the training answer does not survive the cut.
    """
    if max_words < 1:
        raise ValueError("max_words must be >= 1")
    if example.n_tokens <= max_words:
        return example
    n_sent = sum(1 for s in example.sentences if s.token_end <= max_words)
    return _keep_prefix(example, n_sent)


def shuffle_sentences(example: Example, seed: int) -> Example:
    """Permute sentence order with a seeded generator.

    The permutation (new slot -> original sentence index) is stored in
    ``meta["sentence_order"]``. Answers that straddle a sentence boundary cannot
    be carried across a shuffle; they are dropped, and when the training answer
    straddles one the example is returned unshuffled.
    """
    rng = np.random.default_rng(seed)
    sents = example.sentences
    order = [int(i) for i in rng.permutation(len(sents))]

    def sentence_of(pos: int) -> int:
        return next(k for k, s in enumerate(sents) if s.token_start <= pos < s.token_end)

    train = example.train_answer
    if sentence_of(train.token_start) != sentence_of(train.token_end):
        return replace(example, meta={**example.meta, "sentence_order": list(range(len(sents)))})

    toks = example.passage_tokens
    pieces: list[str] = []
    new_tokens: list[Token] = []
    new_sents: list[Sentence] = []
    # (original token position) -> (new position, char shift)
    moved: dict[int, tuple[int, int]] = {}
    cursor = 0
    for slot, k in enumerate(order):
        s = sents[k]
        c0, c1 = toks[s.token_start].char_start, toks[s.token_end - 1].char_end
        if pieces:
            pieces.append(" ")
            cursor += 1
        shift = cursor - c0
        first = len(new_tokens)
        for t in toks[s.token_start : s.token_end]:
            moved[t.position] = (len(new_tokens), shift)
            new_tokens.append(Token(t.text, t.char_start + shift, t.char_end + shift, len(new_tokens)))
        new_sents.append(Sentence(slot + 1, first, len(new_tokens)))
        pieces.append(example.context[c0:c1])
        cursor += c1 - c0

    new_answers = []
    new_train = 0
    for a in example.answers:
        if sentence_of(a.token_start) != sentence_of(a.token_end):
            continue
        p0, shift = moved[a.token_start]
        p1, _ = moved[a.token_end]
        if a is train:
            new_train = len(new_answers)
        new_answers.append(Answer(a.text, a.char_start + shift, p0, p1))
    return replace(
        example,
        context="".join(pieces),
        passage_tokens=tuple(new_tokens),
        sentences=tuple(new_sents),
        answers=tuple(new_answers),
        train_answer_index=new_train,
        meta={**example.meta, "sentence_order": order},
    )


# -- dataset-level transforms -----------------------------------------------


def map_truncate_passage(dataset: Dataset, max_words: int) -> Dataset:
    kept, dropped = [], []
    for ex in dataset:
        out = truncate_passage(ex, max_words)
        if out is None:
            dropped.append(ex.id)
        else:
            kept.append(out)
    return dataset.derive(
        kept, op="truncate_passage", max_words=max_words, dropped=len(dropped), dropped_ids=dropped
    )


def map_first_sentence(dataset: Dataset) -> Dataset:
    return dataset.derive(
        (truncate_first_sentence(ex) for ex in dataset), op="truncate_first_sentence"
    )


def map_shuffle_sentences(dataset: Dataset, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**32, size=len(dataset))
    return dataset.derive(
        (shuffle_sentences(ex, int(s)) for ex, s in zip(dataset, seeds)),
        op="shuffle_sentences",
        seed=seed,
    )


# -- cache ----------------------------------------------------------------------


def _example_to_record(ex: Example) -> dict:
    return {
        "id": ex.id,
        "context": ex.context,
        "question": ex.question,
        "tokens": [[t.text, t.char_start, t.char_end] for t in ex.passage_tokens],
        "sentences": [[s.token_start, s.token_end] for s in ex.sentences],
        "question_tokens": [[t.text, t.char_start, t.char_end] for t in ex.question_tokens],
        "answers": [[a.text, a.char_start, a.token_start, a.token_end] for a in ex.answers],
        "train_answer_index": ex.train_answer_index,
        "meta": dict(ex.meta),
    }


def _example_from_record(rec: dict) -> Example:
    toks = tuple(Token(t, s, e, i) for i, (t, s, e) in enumerate(rec["tokens"]))
    qtoks = tuple(Token(t, s, e, i) for i, (t, s, e) in enumerate(rec["question_tokens"]))
    return Example(
        id=rec["id"],
        context=rec["context"],
        question=rec["question"],
        passage_tokens=toks,
        sentences=tuple(Sentence(i + 1, s, e) for i, (s, e) in enumerate(rec["sentences"])),
        question_tokens=qtoks,
        answers=tuple(Answer(*a) for a in rec["answers"]),
        train_answer_index=rec["train_answer_index"],
        meta=rec.get("meta", {}),
    )


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write the dataset cache: a header line, then one JSON record per example."""
    with open(path, "w", encoding="utf-8") as f:
        header = {"format": CACHE_FORMAT, "name": dataset.name, "provenance": list(dataset.provenance)}
        f.write(json.dumps(header, sort_keys=True, ensure_ascii=False) + "\n")
        for ex in dataset:
            f.write(json.dumps(_example_to_record(ex), sort_keys=True, ensure_ascii=False) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        try:
            header = json.loads(f.readline())
        except json.JSONDecodeError as err:
            raise DatasetFormatError(f"{path}: not a dataset cache ({err})") from err
        if not isinstance(header, dict) or header.get("format") != CACHE_FORMAT:
            raise DatasetFormatError(f"{path}: unknown cache format {header!r:.80}")
        examples = tuple(_example_from_record(json.loads(ln)) for ln in f if ln.strip())
    return Dataset(header["name"], examples, tuple(header.get("provenance", ())))
