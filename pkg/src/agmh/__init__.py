"""Attribute-guided multi-descriptor hashing on synthetic backbone features."""

from .errors import AGMHError, ArgumentError, DimensionError, FormatError, TrainingDivergedError
from .hashing import HashModel, TrainConfig, train
from .retrieval import CodeDatabase, PackedCode, hamming, mean_average_precision, pack, unpack
from .synth import FeatureSet, SyntheticSpec, generate

__version__ = "0.1.0"
