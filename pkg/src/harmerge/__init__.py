"""Harmonized multi-source training and redundancy-aware model merging for
domain generalization on desk-scale cosine-prototype classifiers."""

from .config import RunConfig, default_config, load_config, resolve_config
from .data import Batch, Dataset, DomainSpec, Sample, SplitPair, generate
from .errors import CongruenceError, ConfigError, DataFormatError, NumericsError
from .estimator import HarmonizedMergeClassifier
from .merge import MergeInput, MergeReport, avg_merge, disjoint_mean_merge, rhm
from .model import CosineClassifier, EncoderConfig, Prototypes, init_prototypes
from .params import (
    BitMask,
    FlatLayout,
    FlatVec,
    ParamSet,
    load_checkpoint,
    save_checkpoint,
)
from .train import HarmonyConfig, TrainResult, train_all

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "BitMask",
    "CongruenceError",
    "ConfigError",
    "CosineClassifier",
    "DataFormatError",
    "Dataset",
    "DomainSpec",
    "EncoderConfig",
    "FlatLayout",
    "FlatVec",
    "HarmonizedMergeClassifier",
    "HarmonyConfig",
    "MergeInput",
    "MergeReport",
    "NumericsError",
    "ParamSet",
    "Prototypes",
    "RunConfig",
    "Sample",
    "SplitPair",
    "TrainResult",
    "avg_merge",
    "default_config",
    "disjoint_mean_merge",
    "generate",
    "init_prototypes",
    "load_checkpoint",
    "load_config",
    "resolve_config",
    "rhm",
    "save_checkpoint",
    "train_all",
    "__version__",
]
