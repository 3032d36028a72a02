"""Span-level influence explanations for text classifiers."""

from .data import Dataset, DataError, GeneratorSpec, generate_synthetic, load_dataset, load_jsonl
from .influence import (
    METHODS,
    SIX_METHODS,
    Explainer,
    IHVPCache,
    InfluenceConfig,
    MissingSpanError,
    Ranking,
    ScoredExplanation,
    VHPExplosion,
)
from .metrics import MetricReport, faithfulness_experiment, lag, ral, sag, spearman
from .model import Instance, ModelConfig, Span, SpanError, TextClassifier, Vocab, mask_span
from .training import Checkpoint, TrainConfig, build_model, make_delta_variants, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "DataError", "Dataset", "Explainer", "GeneratorSpec", "IHVPCache", "InfluenceConfig",
    "Instance", "METHODS", "MetricReport", "MissingSpanError", "ModelConfig", "Ranking", "SIX_METHODS",
    "ScoredExplanation", "Span", "SpanError", "TextClassifier", "TrainConfig", "VHPExplosion", "Vocab",
    "build_model", "faithfulness_experiment", "generate_synthetic", "lag", "load_dataset", "load_jsonl",
    "make_delta_variants", "mask_span", "ral", "sag", "spearman", "train",
]
