"""Command-line front end.

    posbias synth    --out-dir runs/synth --placement "fixed_k(1)"
    posbias ingest   --format squad --input train-v1.1.json --out-dir runs/squad
    posbias subset   --data runs/squad/dataset.jsonl --k 1 --out-dir runs/k1
    posbias train    --data runs/k1/subset.jsonl --objective learned_mixin --prior sentence --out-dir runs/lm
    posbias evaluate --model runs/lm/model.json --data runs/dev/dataset.jsonl --out-dir runs/eval
    posbias audit    --model runs/lm/model.json --data runs/dev/dataset.jsonl --out-dir runs/audit

Every command writes ``manifest.json`` into ``--out-dir``. Exit codes: 0 on
success, 1 for usage or configuration errors, 2 for data errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import re
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .analysis import correlation_curve, cosine_info, sentence_info
from .bias_stats import (
    AnswerPrior,
    build_subset,
    build_subset_at_least,
    position_histogram,
    sample_matched,
)
from .corpus import (
    CorpusError,
    Dataset,
    load_dataset,
    load_mrqa,
    load_squad,
    map_first_sentence,
    map_shuffle_sentences,
    map_truncate_passage,
    save_dataset,
)
from .ensemble import OBJECTIVES, ConfigurationError, TrainConfig
from .evaluate import evaluate, heatmap
from .model import load_model, save_model, train
from .synth import SyntheticSpec, generate

logger = logging.getLogger("posbias")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.options = {k: v for k, v in vars(args).items() if k != "func"}
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.extra: dict = {}
        self.started = datetime.now(timezone.utc).isoformat()

    def input(self, path: str | Path) -> Path:
        self.inputs[str(path)] = _digest(path)
        return Path(path)

    def output(self, name: str) -> Path:
        path = self.out_dir / name
        self.outputs.append(str(path))
        return path

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "version": __version__,
            "options": self.options,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            **self.extra,
        }
        with open(self.out_dir / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True, default=str)


def _write_histogram(dataset: Dataset, path: Path) -> None:
    hist = position_histogram(dataset)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["unit", "index", "count"])
        w.writerows(hist.to_csv_rows())


# -- commands ---------------------------------------------------------------------


def cmd_ingest(args) -> int:
    run = Run("ingest", args)
    src = run.input(args.input)
    dataset = load_squad(src) if args.format == "squad" else load_mrqa(src)
    if args.first_sentence:
        dataset = map_first_sentence(build_subset(dataset, 1))
    if args.max_words:
        dataset = map_truncate_passage(dataset, args.max_words)
    if args.shuffle_sentences:
        dataset = map_shuffle_sentences(dataset, args.seed)
    save_dataset(dataset, run.output("dataset.jsonl"))
    dropped = sum(rec.get("dropped", 0) for rec in dataset.provenance)
    skipped = sum(rec.get("skipped_no_answer", 0) for rec in dataset.provenance)
    run.extra.update(n_examples=len(dataset), dropped=dropped, skipped_no_answer=skipped,
                     provenance=list(dataset.provenance))
    run.finish()
    logger.info("ingested %d examples (%d dropped, %d skipped)", len(dataset), dropped, skipped)
    return EXIT_OK


def cmd_subset(args) -> int:
    chosen = [x is not None for x in (args.k, args.k_min, args.sample)]
    if sum(chosen) != 1:
        raise UsageError("give exactly one of --k, --k-min, --sample")
    run = Run("subset", args)
    dataset = load_dataset(run.input(args.data))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if args.k is not None:
            subset = build_subset(dataset, args.k)
        elif args.k_min is not None:
            subset = build_subset_at_least(dataset, args.k_min)
        else:
            subset = sample_matched(dataset, args.sample, args.seed)
    for w in caught:
        logger.warning("%s", w.message)
    save_dataset(subset, run.output("subset.jsonl"))
    _write_histogram(subset, run.output("histogram.csv"))
    run.extra.update(n_examples=len(subset), source_examples=len(dataset))
    run.finish()
    logger.info("subset has %d of %d examples", len(subset), len(dataset))
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    values = TrainConfig.read(args.config).to_dict() if args.config else {}
    flags = {
        "objective": args.objective, "prior": args.prior, "prior_transform": args.prior_transform,
        "lam": args.lam, "t": args.t, "max_seq_len": args.max_seq_len, "d": args.d,
        "epochs": args.epochs, "learning_rate": args.lr, "batch_size": args.batch_size,
        "seed": args.seed,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    return TrainConfig.from_dict(values)


def cmd_train(args) -> int:
    config = _train_config(args)  # raises before any data is touched
    run = Run("train", args)
    dataset = load_dataset(run.input(args.data))
    prior = None
    if config.needs_prior:
        prior = AnswerPrior(config.prior, config.max_seq_len, config.prior_transform).fit(dataset)
        with open(run.output("prior.json"), "w", encoding="utf-8") as f:
            json.dump(prior.to_json(), f, indent=2, sort_keys=True)
    t0 = time.perf_counter()
    model = train(dataset, config, prior)
    save_model(model, run.output("model.json"))
    config.write(run.output("config.cfg"))
    with open(run.output("metrics.json"), "w", encoding="utf-8") as f:
        json.dump(model.metrics_log, f, indent=2)
    run.extra.update(config=config.to_dict(), train_seconds=round(time.perf_counter() - t0, 3))
    run.finish()
    return EXIT_OK


MIN_KNOWN_SHARE = 0.5  # below this share of in-vocabulary passage tokens the model is the wrong one


def _check_vocab(model, dataset: Dataset) -> None:
    total = known = 0
    for ex in dataset:
        for tok in ex.passage_tokens:
            total += 1
            known += tok.text in model.vocab
    if total and known < MIN_KNOWN_SHARE * total:
        raise ConfigurationError(
            f"only {known}/{total} passage tokens are in the model vocabulary; wrong model for this data?"
        )
    too_long = sum(ex.n_tokens > model.config.max_seq_len for ex in dataset)
    if too_long:
        raise ConfigurationError(
            f"{too_long} passages exceed the model's max_seq_len={model.config.max_seq_len}"
        )


def cmd_evaluate(args) -> int:
    run = Run("evaluate", args)
    model = load_model(run.input(args.model))
    dataset = load_dataset(run.input(args.data))
    _check_vocab(model, dataset)
    report = evaluate(dataset, model, per_k=args.per_k)
    report.write_json(run.output("report.json"))
    report.write_csv(run.output("report.csv"))
    run.extra.update(f1=report.f1, em=report.em, n=report.n)
    run.finish()
    for label, b in report.buckets.items():
        logger.info("%-10s n=%-6d EM=%6.2f F1=%6.2f", label, b.n, b.em, b.f1)
    return EXIT_OK


def _pairs(items: list[str] | None, flag: str) -> dict[int, str]:
    out = {}
    for item in items or []:
        key, sep, path = item.partition("=")
        if not sep or not key.strip().isdigit():
            raise UsageError(f"{flag} expects K=PATH, got {item!r}")
        out[int(key)] = path
    return out


def cmd_audit(args) -> int:
    hm_models = _pairs(args.heatmap_model, "--heatmap-model")
    hm_data = _pairs(args.heatmap_data, "--heatmap-data")
    if args.heatmap:
        gaps = sorted(set(hm_models) ^ set(hm_data))
        if not hm_models or gaps:
            raise ConfigurationError(
                f"--heatmap needs a model and a dev subset for each k; missing k={gaps or 'all'}"
            )
    run = Run("audit", args)
    model = load_model(run.input(args.model))
    dataset = load_dataset(run.input(args.data))
    _check_vocab(model, dataset)

    n_layers = len(model.hidden_states(dataset.examples[0]).layers)
    layers = [int(x) for x in args.layers.split(",")] if args.layers else [n_layers - 1]
    summary: dict = {"layers": {}}
    for layer in layers:
        curve = cosine_info(model, dataset, layer)
        curve.write_csv(run.output(f"info_layer{layer}.csv"))
        first, later = sentence_info(model, dataset, layer)
        summary["layers"][layer] = {"first_sentence_mean": first, "later_mean": later}
    for target in ("start", "end"):
        corr = correlation_curve(model, dataset, target)
        corr.write_csv(run.output(f"correlation_{target}.csv"))
        summary[f"correlation_{target}"] = dict(zip(corr.layers, corr.per_layer))
    _write_histogram(dataset, run.output("histogram.csv"))

    if args.heatmap:
        models = {k: load_model(run.input(p)) for k, p in hm_models.items()}
        subsets = {k: load_dataset(run.input(p)) for k, p in hm_data.items()}
        matrix = heatmap(models, subsets)
        matrix.write_csv(run.output("heatmap.csv"))
        summary["heatmap"] = {"diagonal_mean": matrix.diagonal_mean(),
                              "off_diagonal_mean": matrix.off_diagonal_mean()}
    with open(run.output("summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    run.finish()
    return EXIT_OK


def _range(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*(?:-\s*(\d+)\s*)?", text)
    if not m:
        raise argparse.ArgumentTypeError(f"expected N or MIN-MAX, got {text!r}")
    lo = int(m.group(1))
    return lo, int(m.group(2) or lo)


def _placement(text: str) -> str:
    m = re.fullmatch(r"fixed_k[(:](\d+)\)?", text)
    if m:
        return f"fixed_k({m.group(1)})"
    if text == "uniform":
        return text
    raise argparse.ArgumentTypeError(f"placement must be uniform or fixed_k(K), got {text!r}")


def cmd_synth(args) -> int:
    try:
        train_spec = SyntheticSpec(
            n_examples=args.n_examples, sentences_per_passage=args.sentences,
            tokens_per_sentence=args.tokens, vocab_size=args.vocab_size,
            answer_placement=args.placement, seed=args.seed, answer_len=args.answer_len,
            n_markers=args.n_markers,
        )
    except ValueError as err:
        raise UsageError(str(err)) from err
    run = Run("synth", args)
    full_spec = SyntheticSpec(**{**train_spec.__dict__, "answer_placement": "uniform"})
    dev_spec = SyntheticSpec(**{**full_spec.__dict__, "n_examples": args.n_dev, "seed": args.seed + 1})
    save_dataset(generate(train_spec, "train"), run.output("train.jsonl"))
    save_dataset(generate(full_spec, "train_full", id_prefix=f"full-{args.seed}"),
                 run.output("train_full.jsonl"))
    save_dataset(generate(dev_spec, "dev"), run.output("dev.jsonl"))
    run.extra.update(spec=train_spec.__dict__)
    run.finish()
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--quiet", action="store_true")

    parser = _Parser(prog="posbias", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="parse a SQuAD/MRQA file into a cache")
    p.add_argument("--format", choices=("squad", "mrqa"), required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--max-words", type=int, help="cut passages at a sentence end within N tokens")
    p.add_argument("--first-sentence", action="store_true",
                   help="keep k=1 examples and truncate their passages to sentence 1")
    p.add_argument("--shuffle-sentences", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("subset", parents=[common], help="biased or matched-size subsets")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--k-min", type=int)
    p.add_argument("--sample", type=int)
    p.set_defaults(func=cmd_subset)

    p = sub.add_parser("train", parents=[common], help="train the span model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="flat key = value TrainConfig file")
    p.add_argument("--objective", choices=OBJECTIVES)
    p.add_argument("--prior", choices=("none", "word", "sentence"))
    p.add_argument("--prior-transform", choices=("literal", "log_smoothed"))
    p.add_argument("--lam", type=float)
    p.add_argument("--t", type=int)
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="bucketed EM/F1")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--per-k", action="store_true", help="add one bucket per sentence index")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("audit", parents=[common], help="representation diagnostics and heatmap")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layers", help="comma-separated layer indices (default: final layer)")
    p.add_argument("--heatmap", action="store_true")
    p.add_argument("--heatmap-model", action="append", metavar="K=PATH")
    p.add_argument("--heatmap-data", action="append", metavar="K=PATH")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic marker-task corpora")
    p.add_argument("--n-examples", type=int, default=2000)
    p.add_argument("--n-dev", type=int, default=1000)
    p.add_argument("--sentences", type=_range, default=(4, 4))
    p.add_argument("--tokens", type=_range, default=(8, 12))
    p.add_argument("--answer-len", type=_range, default=(2, 2))
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--n-markers", type=int, default=40)
    p.add_argument("--placement", type=_placement, default="uniform")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as err:
        print(f"posbias {args.command}: error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, FileNotFoundError, json.JSONDecodeError, KeyError) as err:
        print(f"posbias {args.command}: data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
