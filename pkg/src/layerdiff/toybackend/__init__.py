"""Toy text-conditioned diffusion backend."""

from .model import (
    PAD,
    BackendConfig,
    PixelCodec,
    ToyDiffusionModel,
    add_noise,
    checkpoint_meta,
    encode_text,
    grammar_vocab,
    latent_to_torch,
    load_checkpoint,
    predict_noise,
    q_sample,
    save_checkpoint,
    torch_to_array,
)
from .training import (
    CaptionBatcher,
    TrainConfig,
    TrainResult,
    evaluate_loss,
    masked_residual_loss,
    read_trace,
    train_base,
    write_trace,
)
