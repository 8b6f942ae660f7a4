"""Desk-scale BERT-style encoder for financial sentiment analysis.

The package is pure numpy: a small reverse-mode autodiff engine
(:mod:`finsent.numerics`), a WordPiece tokenizer, a post-LN transformer
encoder with masked-LM, next-sentence and sentiment heads, BertAdam-style
training with discriminative learning rates, and a command-line front end.
"""

from .errors import (
    CheckpointError, ConfigError, ContractError, DataError, DimensionError, FinSentError, ModeError, NumericalError,
)
from .model import LABELS, EncoderModel, ModelConfig, init_model
from .tokenizer import Vocabulary, build_vocab, decode, encode
from .training import TrainConfig, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "ContractError", "DataError", "DimensionError", "EncoderModel",
    "FinSentError", "LABELS", "ModeError", "ModelConfig", "NumericalError", "TrainConfig", "Vocabulary",
    "build_vocab", "decode", "encode", "finetune", "init_model", "pretrain",
]
