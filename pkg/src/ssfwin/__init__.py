"""ssfwin: scale-space-flow video compression with windowed-transformer
autoencoders and a grouped checkerboard entropy model."""

__version__ = "0.1.0"

from .data_model import (  # noqa: F401
    Clip,
    Frame,
    FlowField,
    LatentKind,
    LatentTensor,
    ModelConfig,
    RDPoint,
    validate_clip,
)
