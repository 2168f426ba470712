"""Nested span tagging with one BO tagging head per word length over a shared LSTM encoder."""
from .spancodec import Span, TagSequence, assign_nested_levels, decode_spans, encode_bo
from .model import ModelSpec, PartlyLayeredNet, build_model, load_weights, save_weights
from .training import ClassWeightTable, TrainConfig, train
from .evaluation import evaluate, score_spans

__version__ = "0.1.0"

__all__ = [
    "Span", "TagSequence", "assign_nested_levels", "decode_spans", "encode_bo",
    "ModelSpec", "PartlyLayeredNet", "build_model", "load_weights", "save_weights",
    "ClassWeightTable", "TrainConfig", "train", "evaluate", "score_spans",
]
