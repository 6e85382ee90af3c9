"""Coarse-to-fine local feature matching with focused linear attention."""

from .attention import FocusedLinear, FocusParams, Linear, Softmax, attend
from .errors import FlatMatchError
from .matcher import MatcherConfig, MatchingModel, match_pipeline
from .transformer import TransformerConfig

__all__ = [
    "FlatMatchError", "FocusParams", "FocusedLinear", "Linear", "MatcherConfig",
    "MatchingModel", "Softmax", "TransformerConfig", "attend", "match_pipeline",
]
__version__ = "0.1.0"
