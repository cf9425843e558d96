"""Layered text-guided image editing: masked embedding optimization, layered
fine-tuning and iterative guidance, on a small trainable diffusion backend."""

from .core import (
    ConfigError,
    ContractError,
    DegenerateRegionError,
    EditSpec,
    FormatError,
    ImageTensor,
    LayerDiffError,
    Latent,
    LossWeights,
    Mask,
    NoiseSchedule,
    OptimizationError,
    RangeError,
    SamplingError,
    ShapeError,
    TensorTypeError,
    TextEmbedding,
    TrainingError,
    VocabularyError,
)

__version__ = "0.1.0"
