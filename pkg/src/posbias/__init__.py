"""Position bias in extractive question answering: subsets, answer priors,
bias-ensemble training of a small span model, and bucketed evaluation."""

__version__ = "0.1.0"

from .bias_stats import AnswerPrior, build_subset, build_subset_at_least, sample_matched
from .corpus import Dataset, Example, load_dataset, load_mrqa, load_squad, save_dataset
from .ensemble import TrainConfig
from .evaluate import EvalReport, evaluate, heatmap
from .model import SpanExtractor, TrainedModel, load_model, predict, save_model, train

__all__ = [
    "AnswerPrior", "Dataset", "EvalReport", "Example", "SpanExtractor", "TrainConfig",
    "TrainedModel", "build_subset", "build_subset_at_least", "evaluate", "heatmap",
    "load_dataset", "load_model", "load_mrqa", "load_squad", "predict", "sample_matched",
    "save_dataset", "save_model", "train",
]
