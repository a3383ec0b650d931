import json
import os
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posbias.bias_stats import (
    AnswerPrior,
    apply_transform,
    build_subset,
    build_subset_at_least,
    expand_prior,
    load_prior,
    position_histogram,
    sample_matched,
    sentence_level_prior,
    word_level_prior,
)
from posbias.corpus import Dataset, answer_sentence_index, build_example
from posbias.synth import SyntheticSpec, generate

CONTEXT = "Alpha beta gamma. Delta epsilon zeta. Eta theta iota."
# token positions: Alpha0 beta1 gamma2 .3 Delta4 epsilon5 zeta6 .7 Eta8 theta9 iota10 .11


def _ex(i, answer, offset, context=CONTEXT):
    return build_example(f"q{i:03d}", context, "Which?", [(answer, offset)])


@pytest.fixture
def tiny():
    exs = [
        _ex(0, "beta", 6),  # sentence 1, token 1
        _ex(1, "Alpha", 0),  # sentence 1, token 0
        _ex(2, "epsilon zeta", 24),  # sentence 2, tokens 5-6
        _ex(3, "theta", 42),  # sentence 3, token 9
        _ex(4, "beta gamma", 6),  # sentence 1, tokens 1-2
    ]
    return Dataset("tiny", tuple(exs))


# -- subsets -------------------------------------------------------------------


def test_build_subset_counts(tiny):
    assert [ex.id for ex in build_subset(tiny, 1)] == ["q000", "q001", "q004"]
    assert [ex.id for ex in build_subset(tiny, 2)] == ["q002"]
    assert [ex.id for ex in build_subset_at_least(tiny, 2)] == ["q002", "q003"]


def test_build_subset_empty_warns(tiny):
    with pytest.warns(UserWarning, match="empty"):
        assert len(build_subset(tiny, 4)) == 0


def test_build_subset_rejects_bad_k(tiny):
    with pytest.raises(ValueError):
        build_subset(tiny, 0)
    with pytest.raises(ValueError):
        build_subset_at_least(tiny, 1)


def test_subset_records_provenance(tiny):
    sub = build_subset(tiny, 1)
    assert sub.provenance[-1] == {"op": "subset", "source": "tiny", "k": 1}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_subsets_partition_the_dataset(seed):
    ds = generate(SyntheticSpec(n_examples=40, seed=seed))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        parts = [build_subset(ds, k) for k in range(1, 5)]
    ids = sorted(ex.id for p in parts for ex in p)
    assert ids == sorted(ex.id for ex in ds)
    rest = build_subset_at_least(ds, 2)
    assert len(parts[0]) + len(rest) == len(ds)


def test_sample_matched_is_order_independent_and_seeded():
    ds = generate(SyntheticSpec(n_examples=50, seed=3))
    rev = Dataset(ds.name, tuple(reversed(ds.examples)))
    a = sample_matched(ds, 10, seed=7)
    b = sample_matched(rev, 10, seed=7)
    assert [ex.id for ex in a] == [ex.id for ex in b]
    assert len({ex.id for ex in a}) == 10
    c = sample_matched(ds, 10, seed=8)
    assert [ex.id for ex in a] != [ex.id for ex in c]


def test_sample_matched_too_large():
    ds = generate(SyntheticSpec(n_examples=5, seed=0))
    with pytest.raises(ValueError):
        sample_matched(ds, 6, seed=0)


# -- histogram and priors ----------------------------------------------------------


def test_position_histogram(tiny):
    h = position_histogram(tiny)
    assert h.counts_by_sentence == {1: 3, 2: 1, 3: 1}
    assert h.counts_by_token.tolist() == [1, 2, 0, 0, 0, 1, 0, 0, 0, 1]
    assert h.total == 5
    assert h.mode_sentence() == 1


def test_word_level_prior_by_hand(tiny):
    p = word_level_prior(tiny, max_seq_len=12)
    expected = np.zeros(12)
    expected[[0, 1, 5, 9]] = [1, 2, 1, 1]
    np.testing.assert_array_equal(p.terms, expected / 5)
    end = word_level_prior(tiny, max_seq_len=12, target="end")
    exp_end = np.zeros(12)
    exp_end[[0, 1, 2, 6, 9]] = [1, 1, 1, 1, 1]
    np.testing.assert_array_equal(end.terms, exp_end / 5)


def test_word_level_prior_truncated_positions_still_count(tiny):
    p = word_level_prior(tiny, max_seq_len=4)
    np.testing.assert_array_equal(p.terms, np.array([1, 2, 0, 0]) / 5)
    assert p.n == 5


def test_sentence_level_prior_by_hand(tiny):
    p = sentence_level_prior(tiny)
    assert p.sentence_freq == {1: 3 / 5, 2: 1 / 5, 3: 1 / 5}
    assert p.max_sentences == 3


def test_first_sentence_prior_is_an_indicator():
    ds = generate(SyntheticSpec(n_examples=60, answer_placement="fixed_k(1)", seed=2))
    p = sentence_level_prior(ds)
    assert p.sentence_freq == {1: 1.0, 2: 0.0, 3: 0.0, 4: 0.0}
    ex = ds.examples[0]
    terms = expand_prior(p, ex)
    first = ex.sentences[0]
    assert (terms[first.token_start : first.token_end] == 1.0).all()
    assert (terms[first.token_end :] == 0.0).all()


def test_expand_prior_beyond_longest_training_passage(tiny):
    p = sentence_level_prior(tiny)
    long = build_example("z", CONTEXT + " Nu xi omicron.", "Which?", [("beta", 6)])
    terms = expand_prior(p, long)
    assert (terms[12:] == 0.0).all()


def _brute_counts(ds, max_seq_len):
    counts = [0] * max_seq_len
    for ex in ds:
        pos = ex.train_answer.token_start
        if pos < max_seq_len:
            counts[pos] += 1
    return counts


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 80))
def test_word_prior_matches_brute_force_counting(seed, max_seq_len):
    ds = generate(SyntheticSpec(n_examples=30, seed=seed))
    p = word_level_prior(ds, max_seq_len)
    counts = _brute_counts(ds, max_seq_len)
    assert p.terms.tolist() == [c / len(ds) for c in counts]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_sentence_prior_matches_brute_force_counting(seed):
    ds = generate(SyntheticSpec(n_examples=30, sentences_per_passage=(2, 5), seed=seed))
    p = sentence_level_prior(ds)
    for k, f in p.sentence_freq.items():
        assert f == sum(answer_sentence_index(ex) == k for ex in ds) / len(ds)
    assert sum(p.sentence_freq.values()) == pytest.approx(1.0, abs=1e-12)


def test_prior_is_independent_of_example_order():
    ds = generate(SyntheticSpec(n_examples=64, seed=9))
    rng = np.random.default_rng(0)
    shuffled = Dataset(ds.name, tuple(ds.examples[i] for i in rng.permutation(len(ds))))
    assert word_level_prior(ds, 64).terms.tobytes() == word_level_prior(shuffled, 64).terms.tobytes()
    assert sentence_level_prior(ds).sentence_freq == sentence_level_prior(shuffled).sentence_freq


def test_empty_dataset_prior_raises():
    with pytest.raises(ValueError):
        word_level_prior(Dataset("e", ()), 8)
    with pytest.raises(ValueError):
        sentence_level_prior(Dataset("e", ()))


def test_prior_json_round_trip(tiny, tmp_path):
    for prior in (word_level_prior(tiny, 12), sentence_level_prior(tiny)):
        path = tmp_path / "p.json"
        path.write_text(json.dumps(prior.to_json()))
        back = load_prior(path)
        if hasattr(prior, "terms"):
            np.testing.assert_array_equal(back.terms, prior.terms)
        else:
            assert back.sentence_freq == prior.sentence_freq
        assert back.n == prior.n


# -- transforms and the estimator -------------------------------------------------------


def test_apply_transform():
    f = np.array([0.5, 0.0])
    np.testing.assert_array_equal(apply_transform(f, "literal"), f)
    np.testing.assert_allclose(apply_transform(f, "log_smoothed", eps=1e-8), np.log(f + 1e-8))
    with pytest.raises(ValueError):
        apply_transform(f, "sqrt")


def test_answer_prior_estimator(tiny):
    prior = AnswerPrior(kind="word", max_seq_len=12).fit(tiny)
    terms = prior.bias_terms(tiny.examples[0])
    assert terms.start_terms.shape == (12,)
    np.testing.assert_array_equal(terms.start_terms, prior.start_.terms)
    assert len(prior.transform(tiny)) == len(tiny)
    assert prior.get_params() == {"kind": "word", "max_seq_len": 12,
                                  "prior_transform": "literal", "eps": 1e-8}


def test_answer_prior_requires_fit(tiny):
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        AnswerPrior().bias_terms(tiny.examples[0])


def test_answer_prior_rejects_unknown_settings(tiny):
    with pytest.raises(ValueError):
        AnswerPrior(kind="char").fit(tiny)
    with pytest.raises(ValueError):
        AnswerPrior(prior_transform="sqrt").fit(tiny)


# -- real SQuAD counts (only when the files are available locally) ----------------

SQUAD_DIR = Path(os.environ.get("POSBIAS_SQUAD_DIR", "/nonexistent"))


def _squad(name):
    path = SQUAD_DIR / name
    if not path.exists():
        pytest.skip(f"{name} not available; set POSBIAS_SQUAD_DIR to run")
    from posbias.corpus import load_squad

    return load_squad(path)


def test_squad_train_first_sentence_subset_size():
    train = _squad("train-v1.1.json")
    assert len(train) == 87_599
    # our sentencizer differs from the original tool, so allow a 2% band
    assert len(build_subset(train, 1)) == pytest.approx(28_263, rel=0.02)
    assert position_histogram(train).mode_sentence() == 1


def test_squad_dev_first_sentence_subset_size():
    dev = _squad("dev-v1.1.json")
    assert len(build_subset(dev, 1)) == pytest.approx(3_637, rel=0.02)
