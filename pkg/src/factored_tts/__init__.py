"""Factored feed-forward acoustic models for extrapolating emotional expression.

A speaker factor and an emotion factor are attached to a shared linguistic
transform so that an unseen (speaker, emotion) combination can be generated.
"""

from factored_tts.errors import (
    DegenerateDimension,
    DegenerateVariance,
    EmptyInput,
    FactoredTTSError,
    InsufficientVoicedFrames,
    InvalidConfig,
    InvalidFactorIndex,
    InvalidPlacement,
    InvalidState,
    InvalidTopology,
    NumericalError,
    ReportError,
    ShapeError,
)
from factored_tts.factor_encoding import (
    NEUTRAL,
    Architecture,
    Placement,
    emotion_id,
    layer_aux,
    speaker_id,
)
from factored_tts.network import Network, build_architecture

__version__ = "0.1.0"

__all__ = [
    "NEUTRAL",
    "Architecture",
    "Placement",
    "emotion_id",
    "speaker_id",
    "layer_aux",
    "Network",
    "build_architecture",
    "FactoredTTSError",
    "DegenerateDimension",
    "DegenerateVariance",
    "EmptyInput",
    "InsufficientVoicedFrames",
    "InvalidConfig",
    "InvalidFactorIndex",
    "InvalidPlacement",
    "InvalidState",
    "InvalidTopology",
    "NumericalError",
    "ReportError",
    "ShapeError",
]
