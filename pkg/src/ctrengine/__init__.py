"""Online CTR-prediction training engine."""

__version__ = "0.1.0"

from .errors import (AlignmentError, ConfigurationError, NumericalError, ParseError,  # noqa: E402
                     StreamOrderError, ValidationError)
from .features import Example, FeatureSpec, SynthConfig, collate, parse_examples, synthetic_dataset  # noqa: E402
from .model import CTRModel, Mask, ModelConfig  # noqa: E402
from .trainer import Trainer, TrainerConfig, train_online  # noqa: E402

__all__ = [
    "AlignmentError", "ConfigurationError", "NumericalError", "ParseError", "StreamOrderError",
    "ValidationError", "Example", "FeatureSpec", "SynthConfig", "collate", "parse_examples",
    "synthetic_dataset", "CTRModel", "Mask", "ModelConfig", "Trainer", "TrainerConfig", "train_online",
]
