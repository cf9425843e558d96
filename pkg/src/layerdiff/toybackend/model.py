"""Toy latent-diffusion backend: codec, text encoder, noise process, checkpoints."""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np
import torch
from torch import nn

from ..core import (
    FormatError,
    ImageTensor,
    Latent,
    NoiseSchedule,
    ShapeError,
    TextEmbedding,
    VocabularyError,
    array_checksum,
    derive_seed,
    read_container,
    write_container,
)
from .. import synthdata
from .unet import Denoiser

PAD = "<pad>"


def grammar_vocab() -> tuple[str, ...]:
    words = {"a", "on", "background"}
    for field in synthdata.FIELDS:
        words.update(synthdata.VOCABULARIES[field])
    return (PAD,) + tuple(sorted(words))


@dataclass(frozen=True)
class BackendConfig:
    width: int = 32
    n_tokens: int = 10  # C
    token_dim: int = 32  # N
    T_steps: int = 1000
    heads: int = 4
    image_size: int = 32


class PixelCodec:
    """Pixel-space codec: the latent is the image itself, rescaled to [-1, 1]."""

    tolerance = 1e-6

    def __init__(self, image_size: int = 32):
        self.latent_shape = (image_size, image_size, 3)

    def encode(self, image: ImageTensor) -> Latent:
        if (image.height, image.width, 3) != self.latent_shape:
            raise ShapeError(f"codec expects {self.latent_shape}, got {image.data.shape}")
        return Latent(image.data * 2.0 - 1.0)

    def decode(self, latent: Latent | np.ndarray) -> ImageTensor:
        data = latent.data if isinstance(latent, Latent) else latent
        return ImageTensor.clipped((np.asarray(data, dtype=np.float32) + 1.0) / 2.0)


def latent_to_torch(latent: Latent | np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    data = latent.data if isinstance(latent, Latent) else latent
    return torch.from_numpy(np.ascontiguousarray(np.asarray(data).transpose(2, 0, 1))).to(dtype)[None]


def torch_to_array(x: torch.Tensor) -> np.ndarray:
    """(1, c, h, w) or (c, h, w) tensor to an h x w x c float32 array."""
    if x.ndim == 4:
        x = x[0]
    return x.detach().to(torch.float32).permute(1, 2, 0).contiguous().numpy()


def add_noise(x0: Latent, t: int, eps: Latent | np.ndarray, schedule: NoiseSchedule) -> Latent:
    """Closed-form forward marginal x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    schedule.check_timestep(t)
    eps_arr = eps.data if isinstance(eps, Latent) else np.asarray(eps)
    if eps_arr.shape != x0.data.shape:
        raise ShapeError(f"noise shape {eps_arr.shape} != latent shape {x0.data.shape}")
    ab = schedule.alpha_bar(t)
    xt = np.sqrt(ab) * x0.data.astype(np.float64) + np.sqrt(1.0 - ab) * eps_arr.astype(np.float64)
    return Latent(xt.astype(np.float32), timestep=int(t))


def q_sample(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Batched torch version of :func:`add_noise`; ``t`` is a (B,) integer tensor."""
    ab = torch.from_numpy(schedule.alpha_bars.copy())[t - 1]
    a = torch.sqrt(ab).to(x0.dtype)[:, None, None, None]
    s = torch.sqrt(1.0 - ab).to(x0.dtype)[:, None, None, None]
    return a * x0 + s * eps


class ToyDiffusionModel:
    """Denoiser parameters (theta), token table (phi), schedule and vocabulary."""

    def __init__(
        self,
        config: BackendConfig = BackendConfig(),
        seed: int = 0,
        vocab: tuple[str, ...] | None = None,
        schedule: NoiseSchedule | None = None,
    ):
        self.config = config
        self.vocab = tuple(vocab) if vocab is not None else grammar_vocab()
        if self.vocab[0] != PAD:
            raise ValueError("vocabulary must start with the padding token")
        self._index = {w: i for i, w in enumerate(self.vocab)}
        self.schedule = schedule if schedule is not None else NoiseSchedule.linear(config.T_steps)
        if self.schedule.T_steps != config.T_steps:
            raise ValueError("schedule length does not match config.T_steps")
        self.codec = PixelCodec(config.image_size)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "init") % (2**63))
            self.unet = Denoiser(config.width, 3, config.n_tokens, config.token_dim, config.heads)
            self.token_table = nn.Embedding(len(self.vocab), config.token_dim)
        self.unet.eval()

    # -- parameters -------------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return self.token_table.weight.dtype

    def parameters(self) -> list[nn.Parameter]:
        return list(self.unet.parameters()) + list(self.token_table.parameters())

    def freeze(self) -> "ToyDiffusionModel":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def unfreeze(self) -> "ToyDiffusionModel":
        for p in self.parameters():
            p.requires_grad_(True)
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def copy(self) -> "ToyDiffusionModel":
        return copy.deepcopy(self)

    def to_dtype(self, dtype: torch.dtype) -> "ToyDiffusionModel":
        """Copy with every parameter cast to ``dtype`` (float64 for gradient probes)."""
        other = self.copy()
        other.unet.to(dtype)
        other.token_table.to(dtype)
        return other

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"theta.{k}": v.detach().cpu().numpy() for k, v in self.unet.state_dict().items()}
        out["phi.token_table"] = self.token_table.weight.detach().cpu().numpy()
        return out

    def theta_checksum(self) -> str:
        return array_checksum(v.detach().cpu().numpy() for v in self.unet.state_dict().values())

    def checksum(self) -> str:
        return array_checksum(self.state_arrays().values())

    # -- text -------------------------------------------------------------

    def tokenize(self, caption: str) -> list[int]:
        words = caption.lower().split()
        if len(words) > self.config.n_tokens:
            raise VocabularyError(f"caption has {len(words)} tokens, limit is {self.config.n_tokens}")
        ids = []
        for w in words:
            if w not in self._index or w == PAD:
                raise VocabularyError(f"out-of-vocabulary token {w!r}", token=w)
            ids.append(self._index[w])
        return ids

    def pad_ids(self, ids: list[int]) -> list[int]:
        return ids + [0] * (self.config.n_tokens - len(ids))

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_table(ids)

    def pad_row(self) -> np.ndarray:
        return self.token_table.weight[0].detach().to(torch.float32).numpy()

    def encode_text(self, caption: str) -> TextEmbedding:
        ids = self.tokenize(caption)
        with torch.no_grad():
            rows = self.token_table(torch.tensor(self.pad_ids(ids)))
        return TextEmbedding(rows.to(torch.float32).numpy(), "raw", n_tokens=len(ids))

    # -- denoiser ---------------------------------------------------------

    def eps(self, x_t: torch.Tensor, t: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        """Batched noise prediction on (B, c, h, w) states and (B, C, N) contexts."""
        return self.unet(x_t, t, ctx)

    def check_embedding(self, e: TextEmbedding) -> None:
        want = (self.config.n_tokens, self.config.token_dim)
        if e.shape != want:
            raise ShapeError(f"embedding shape {e.shape} != {want}")

    def predict_noise(self, x_t: Latent, t: int, e: TextEmbedding) -> Latent:
        if x_t.shape != self.codec.latent_shape:
            raise ShapeError(f"latent shape {x_t.shape} != {self.codec.latent_shape}")
        self.check_embedding(e)
        self.schedule.check_timestep(t)
        with torch.no_grad():
            out = self.eps(
                latent_to_torch(x_t, self.dtype),
                torch.tensor([int(t)]),
                torch.from_numpy(np.array(e.data)).to(self.dtype)[None],
            )
        return Latent(torch_to_array(out), timestep=int(t))


def encode_text(model: ToyDiffusionModel, caption: str) -> TextEmbedding:
    return model.encode_text(caption)


def predict_noise(model: ToyDiffusionModel, x_t: Latent, t: int, e: TextEmbedding) -> Latent:
    return model.predict_noise(x_t, t, e)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: ToyDiffusionModel, path: str | os.PathLike, extra: dict[str, Any] | None = None) -> None:
    tensors = model.state_arrays()
    tensors["schedule.betas"] = model.schedule.betas
    meta = {
        "kind": "Checkpoint",
        "config": asdict(model.config),
        "vocab": list(model.vocab),
        "extra": extra or {},
    }
    write_container(path, tensors, meta)


def load_checkpoint(path: str | os.PathLike) -> ToyDiffusionModel:
    tensors, meta = read_container(path)
    if meta.get("kind") != "Checkpoint":
        raise FormatError(f"{path} is not a checkpoint (kind={meta.get('kind')!r})")
    try:
        config = BackendConfig(**meta["config"])
        model = ToyDiffusionModel(config, 0, tuple(meta["vocab"]), NoiseSchedule(tensors["schedule.betas"]))
        state = {k[len("theta."):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("theta.")}
        model.unet.load_state_dict(state, strict=True)
        with torch.no_grad():
            model.token_table.weight.copy_(torch.from_numpy(tensors["phi.token_table"].copy()))
    except (KeyError, RuntimeError, TypeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint: {exc}") from exc
    return model


def checkpoint_meta(path: str | os.PathLike) -> dict[str, Any]:
    return read_container(path)[1]


__all__ = [
    "PAD",
    "BackendConfig",
    "PixelCodec",
    "ToyDiffusionModel",
    "add_noise",
    "q_sample",
    "encode_text",
    "predict_noise",
    "save_checkpoint",
    "load_checkpoint",
    "latent_to_torch",
    "torch_to_array",
    "grammar_vocab",
]
