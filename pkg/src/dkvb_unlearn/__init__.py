"""Class unlearning in discrete key-value bottleneck models, with gradient baselines."""

from .baselines import LinearHead, LinearTrainConfig, ScrubConfig, neggrad_plus, scrub_unlearn
from .bottleneck import (BottleneckConfig, DegenerateModelError, KeyValueBottleneck, build_model,
                         load_checkpoint, save_checkpoint)
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import (DatasetBundle, EmbeddingFormatError, LabeledEmbeddings, SyntheticSpec,
                   generate_synthetic, load_embeddings, split_by_classes, write_embeddings)
from .evaluation import FlopLedger, MetricsReport, backward_flops, cmia_evaluate, parity_search, relative_change
from .training import TrainConfig, evaluate, train_values
from .unlearning import record_activations, unlearn_via_activations, unlearn_via_examples

__version__ = "0.1.0"

__all__ = [
    "BottleneckConfig", "ConfigError", "DatasetBundle", "DegenerateModelError", "EmbeddingFormatError",
    "ExperimentConfig", "FlopLedger", "KeyValueBottleneck", "LabeledEmbeddings", "LinearHead",
    "LinearTrainConfig", "MetricsReport", "ScrubConfig", "SyntheticSpec", "TrainConfig",
    "backward_flops", "build_model", "cmia_evaluate", "evaluate", "generate_synthetic", "load_checkpoint",
    "load_config", "load_embeddings", "neggrad_plus", "parity_search", "parse_config", "record_activations",
    "relative_change", "save_checkpoint", "scrub_unlearn", "split_by_classes", "train_values",
    "unlearn_via_activations", "unlearn_via_examples", "write_embeddings",
]
