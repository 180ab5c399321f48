"""Transformer over mixed categorical/numeric event streams with a class-value likelihood."""

from .errors import DataError, GenerationError, MVGPTError, NumericalError
from .model import ModelConfig, MultivariateGPT
from .sampler import SampleOptions, generate, infill_values
from .schema import EventRecord, Vocabulary, build_vocabulary
from .tokenizer import Token, TokenSequence, decode_sequence, encode_records, encode_sequence
from .training import TrainConfig, train

__all__ = [
    "DataError",
    "EventRecord",
    "GenerationError",
    "MVGPTError",
    "ModelConfig",
    "MultivariateGPT",
    "NumericalError",
    "SampleOptions",
    "Token",
    "TokenSequence",
    "TrainConfig",
    "Vocabulary",
    "build_vocabulary",
    "decode_sequence",
    "encode_records",
    "encode_sequence",
    "generate",
    "infill_values",
    "train",
]
