import csv
import json
import subprocess
import sys

import pytest

from posbias.cli import main
from posbias.corpus import load_dataset
from posbias.evaluate import evaluate
from posbias.model import load_model

SENTENCES = [
    "Denver won the game.",
    "The match was held in Santa Clara.",
    "Fans travelled from far away.",
    "Tickets sold out within a day.",
]


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture
def squad_file(tmp_path):
    context = " ".join(SENTENCES)
    qas = [
        {"id": "q1", "question": "Who won?", "answers": [{"text": "Denver", "answer_start": 0}]},
        {"id": "q2", "question": "Where?", "answers": [{"text": "Santa Clara", "answer_start": context.index("Santa")}]},
        {"id": "q3", "question": "When sold out?", "answers": [{"text": "within a day", "answer_start": context.index("within")}]},
    ]
    blob = {"version": "1.1", "data": [{"title": "t", "paragraphs": [{"context": context, "qas": qas}]}]}
    path = tmp_path / "squad.json"
    path.write_text(json.dumps(blob))
    return path


def _long_context(n_sentences, tokens_per_sentence=10):
    sents = []
    for i in range(n_sentences):
        words = [f"w{i}x{j}" for j in range(tokens_per_sentence - 1)]  # plus the full stop
        sents.append("S" + " ".join(words) + ".")
    return " ".join(sents)


@pytest.fixture
def mrqa_file(tmp_path):
    # 40 sentences of 10 tokens each: a 300-token cut keeps sentences 1-30
    context = _long_context(40)
    qas = []
    for i, sent in enumerate((0, 5, 29, 30, 35)):
        word = f"w{sent}x3"
        start = context.index(word)
        qas.append({"qid": f"m{i}", "question": "Which word?",
                    "detected_answers": [{"text": word, "char_spans": [[start, start + len(word) - 1]]}]})
    qas.append({"qid": "m-none", "question": "Unanswerable?", "detected_answers": []})
    lines = [{"header": {"dataset": "NewsQA", "split": "dev"}}, {"context": context, "qas": qas}]
    path = tmp_path / "mrqa.jsonl"
    path.write_text("\n".join(json.dumps(x) for x in lines) + "\n")
    return path


# -- ingest -------------------------------------------------------------------------


def test_ingest_squad(tmp_path, squad_file):
    out = tmp_path / "ing"
    assert main(["ingest", "--format", "squad", "--input", str(squad_file), "--out-dir", str(out), "--quiet"]) == 0
    ds = load_dataset(out / "dataset.jsonl")
    assert len(ds) == 3
    man = _manifest(out)
    assert man["command"] == "ingest"
    assert man["n_examples"] == 3
    assert str(squad_file) in man["inputs"]


def test_ingest_is_byte_identical_on_rerun(tmp_path, squad_file):
    for name in ("a", "b"):
        main(["ingest", "--format", "squad", "--input", str(squad_file), "--out-dir", str(tmp_path / name), "--quiet"])
    assert (tmp_path / "a/dataset.jsonl").read_bytes() == (tmp_path / "b/dataset.jsonl").read_bytes()


def test_ingest_mrqa_truncation_counts_drops(tmp_path, mrqa_file):
    out = tmp_path / "mrqa"
    code = main(["ingest", "--format", "mrqa", "--input", str(mrqa_file), "--max-words", "300",
                 "--out-dir", str(out), "--quiet"])
    assert code == 0
    ds = load_dataset(out / "dataset.jsonl")
    man = _manifest(out)
    # answers in sentences 31 and 36 lie past token 300
    assert man["dropped"] == 2
    assert man["skipped_no_answer"] == 1
    assert sorted(ex.id for ex in ds) == ["m0", "m1", "m2"]
    assert all(ex.n_tokens <= 300 for ex in ds)


def test_ingest_first_sentence_and_shuffle(tmp_path, squad_file):
    out = tmp_path / "first"
    assert main(["ingest", "--format", "squad", "--input", str(squad_file), "--first-sentence",
                 "--out-dir", str(out), "--quiet"]) == 0
    ds = load_dataset(out / "dataset.jsonl")
    assert [ex.id for ex in ds] == ["q1"]
    assert ds.examples[0].context == SENTENCES[0]
    out = tmp_path / "shuf"
    assert main(["ingest", "--format", "squad", "--input", str(squad_file), "--shuffle-sentences",
                 "--seed", "3", "--out-dir", str(out), "--quiet"]) == 0
    for ex in load_dataset(out / "dataset.jsonl"):
        assert sorted(ex.meta["sentence_order"]) == [0, 1, 2, 3]


def test_ingest_malformed_input_is_a_data_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["ingest", "--format", "squad", "--input", str(bad), "--out-dir", str(tmp_path / "o"), "--quiet"]) == 2
    missing = tmp_path / "nope.json"
    assert main(["ingest", "--format", "squad", "--input", str(missing), "--out-dir", str(tmp_path / "o"), "--quiet"]) == 2


def test_usage_errors_exit_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["ingest", "--format", "xml", "--input", "x"])
    assert err.value.code == 1
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 1


# -- synth and subset -------------------------------------------------------------------


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = main(["synth", "--n-examples", "120", "--n-dev", "80", "--placement", "fixed_k(1)",
                 "--seed", "2", "--out-dir", str(out), "--quiet"])
    assert code == 0
    return out


def test_synth_outputs(synth_dir):
    train = load_dataset(synth_dir / "train.jsonl")
    full = load_dataset(synth_dir / "train_full.jsonl")
    dev = load_dataset(synth_dir / "dev.jsonl")
    assert (len(train), len(full), len(dev)) == (120, 120, 80)
    from posbias.corpus import answer_sentence_index

    assert {answer_sentence_index(ex) for ex in train} == {1}
    assert len({answer_sentence_index(ex) for ex in dev}) > 1
    assert _manifest(synth_dir)["spec"]["answer_placement"] == "fixed_k(1)"


def test_synth_rejects_inconsistent_spec(tmp_path):
    assert main(["synth", "--placement", "fixed_k(7)", "--out-dir", str(tmp_path), "--quiet"]) == 1
    with pytest.raises(SystemExit) as err:
        main(["synth", "--placement", "middle", "--out-dir", str(tmp_path), "--quiet"])
    assert err.value.code == 1


def test_subset_partition_and_histogram(tmp_path, synth_dir):
    dev = synth_dir / "dev.jsonl"
    main(["subset", "--data", str(dev), "--k", "1", "--out-dir", str(tmp_path / "k1"), "--quiet"])
    main(["subset", "--data", str(dev), "--k-min", "2", "--out-dir", str(tmp_path / "rest"), "--quiet"])
    k1 = load_dataset(tmp_path / "k1/subset.jsonl")
    rest = load_dataset(tmp_path / "rest/subset.jsonl")
    assert len(k1) + len(rest) == 80
    assert not {e.id for e in k1} & {e.id for e in rest}
    rows = list(csv.reader(open(tmp_path / "k1/histogram.csv")))
    assert rows[0] == ["unit", "index", "count"]
    assert ["sentence", "1", str(len(k1))] in rows


def test_subset_sample_is_reproducible(tmp_path, synth_dir):
    for name in ("a", "b"):
        main(["subset", "--data", str(synth_dir / "dev.jsonl"), "--sample", "10", "--seed", "5",
              "--out-dir", str(tmp_path / name), "--quiet"])
    assert (tmp_path / "a/subset.jsonl").read_bytes() == (tmp_path / "b/subset.jsonl").read_bytes()


def test_subset_needs_exactly_one_selector(tmp_path, synth_dir):
    args = ["subset", "--data", str(synth_dir / "dev.jsonl"), "--out-dir", str(tmp_path), "--quiet"]
    assert main(args) == 1
    assert main(args + ["--k", "1", "--k-min", "2"]) == 1


def test_empty_subset_warns_and_succeeds(tmp_path, synth_dir):
    assert main(["subset", "--data", str(synth_dir / "train.jsonl"), "--k", "3",
                 "--out-dir", str(tmp_path), "--quiet"]) == 0
    assert len(load_dataset(tmp_path / "subset.jsonl")) == 0


# -- train / evaluate / audit -----------------------------------------------------------

TRAIN_FLAGS = ["--max-seq-len", "64", "--t", "48", "--d", "8", "--epochs", "1", "--quiet"]


@pytest.fixture(scope="module")
def lm_run(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("lm")
    code = main(["train", "--data", str(synth_dir / "train.jsonl"), "--objective", "learned_mixin",
                 "--prior", "sentence", "--out-dir", str(out), *TRAIN_FLAGS])
    assert code == 0
    return out


def test_train_writes_checkpoint_and_logs_gates(lm_run):
    for name in ("model.json", "prior.json", "config.cfg", "metrics.json", "manifest.json"):
        assert (lm_run / name).exists()
    metrics = json.loads((lm_run / "metrics.json").read_text())
    assert metrics[-1]["gate_start"] > 0
    assert _manifest(lm_run)["config"]["objective"] == "learned_mixin"


def test_train_none_computes_no_prior(tmp_path, synth_dir):
    assert main(["train", "--data", str(synth_dir / "train.jsonl"), "--out-dir", str(tmp_path), *TRAIN_FLAGS]) == 0
    assert not (tmp_path / "prior.json").exists()


def test_train_is_deterministic(tmp_path, synth_dir, lm_run):
    main(["train", "--data", str(synth_dir / "train.jsonl"), "--objective", "learned_mixin",
          "--prior", "sentence", "--out-dir", str(tmp_path), *TRAIN_FLAGS])
    assert (tmp_path / "model.json").read_bytes() == (lm_run / "model.json").read_bytes()


def test_train_config_file_round_trip(tmp_path, synth_dir, lm_run):
    code = main(["train", "--data", str(synth_dir / "train.jsonl"), "--config", str(lm_run / "config.cfg"),
                 "--out-dir", str(tmp_path), "--quiet"])
    assert code == 0
    assert (tmp_path / "model.json").read_bytes() == (lm_run / "model.json").read_bytes()


def test_train_objective_prior_mismatch_fails_before_reading_data(tmp_path):
    code = main(["train", "--data", str(tmp_path / "missing.jsonl"), "--objective", "bias_product",
                 "--out-dir", str(tmp_path), "--quiet"])
    assert code == 1
    assert not (tmp_path / "manifest.json").exists()


def test_evaluate_matches_library_call(tmp_path, synth_dir, lm_run):
    code = main(["evaluate", "--model", str(lm_run / "model.json"), "--data", str(synth_dir / "dev.jsonl"),
                 "--per-k", "--out-dir", str(tmp_path), "--quiet"])
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    direct = evaluate(load_dataset(synth_dir / "dev.jsonl"), load_model(lm_run / "model.json"), per_k=True)
    assert report == json.loads(json.dumps(direct.to_json()))
    b = report["buckets"]
    assert b["k=1"]["n"] + b["k=2,3,..."]["n"] == b["all"]["n"]


def test_evaluate_vocab_mismatch_is_an_error(tmp_path, squad_file, lm_run):
    main(["ingest", "--format", "squad", "--input", str(squad_file), "--out-dir", str(tmp_path / "sq"), "--quiet"])
    code = main(["evaluate", "--model", str(lm_run / "model.json"), "--data", str(tmp_path / "sq/dataset.jsonl"),
                 "--out-dir", str(tmp_path / "ev"), "--quiet"])
    assert code == 1


def test_audit_single_model(tmp_path, synth_dir, lm_run):
    code = main(["audit", "--model", str(lm_run / "model.json"), "--data", str(synth_dir / "dev.jsonl"),
                 "--layers", "1,3", "--out-dir", str(tmp_path), "--quiet"])
    assert code == 0
    for name in ("info_layer1.csv", "info_layer3.csv", "correlation_start.csv", "correlation_end.csv",
                 "histogram.csv", "summary.json"):
        assert (tmp_path / name).exists(), name
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary["layers"]) == {"1", "3"}


def test_audit_heatmap_two_by_two(tmp_path, synth_dir, lm_run):
    dev = synth_dir / "dev.jsonl"
    for k in (1, 2):
        main(["subset", "--data", str(dev), "--k", str(k), "--out-dir", str(tmp_path / f"k{k}"), "--quiet"])
    code = main(["audit", "--model", str(lm_run / "model.json"), "--data", str(dev), "--heatmap",
                 "--heatmap-model", f"1={lm_run / 'model.json'}", "--heatmap-model", f"2={lm_run / 'model.json'}",
                 "--heatmap-data", f"1={tmp_path / 'k1/subset.jsonl'}", "--heatmap-data", f"2={tmp_path / 'k2/subset.jsonl'}",
                 "--out-dir", str(tmp_path / "audit"), "--quiet"])
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "audit/heatmap.csv")))
    assert len(rows) == 3 and all(len(r) == 3 for r in rows)


def test_audit_heatmap_gap_is_reported(tmp_path, synth_dir, lm_run, capsys):
    code = main(["audit", "--model", str(lm_run / "model.json"), "--data", str(synth_dir / "dev.jsonl"),
                 "--heatmap", "--heatmap-model", f"1={lm_run / 'model.json'}",
                 "--heatmap-model", f"2={lm_run / 'model.json'}",
                 "--heatmap-data", f"1={synth_dir / 'dev.jsonl'}", "--out-dir", str(tmp_path), "--quiet"])
    assert code == 1
    assert "k=[2]" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "posbias.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0
    assert out.stdout.strip()
