"""Masked optimization of the decomposed text embeddings and their interpolation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import (
    ConfigError,
    ContractError,
    EditSpec,
    Latent,
    Mask,
    OptimizationError,
    RangeError,
    ShapeError,
    TextEmbedding,
    VocabularyError,
    seeded_rng,
)
from .toybackend import ToyDiffusionModel, latent_to_torch, masked_residual_loss, q_sample
from . import masks as masklib


def decompose_target_text(model: ToyDiffusionModel, spec: EditSpec) -> tuple[TextEmbedding, TextEmbedding]:
    """Encode the user-supplied object / background split of the target text."""
    out = []
    for name in ("object_text", "background_text"):
        text = getattr(spec, name)
        if not text or not text.strip():
            raise ConfigError(f"{name} must be non-empty")
        try:
            out.append(model.encode_text(text))
        except VocabularyError as exc:
            raise VocabularyError(f"{name} {text!r}: {exc}", token=exc.token) from exc
    return out[0], out[1]


def token_count(e: TextEmbedding) -> int:
    return e.shape[0] if e.n_tokens is None else e.n_tokens


def concat_tokens(
    e_a: torch.Tensor, n_a: int, e_b: torch.Tensor, n_b: int, pad_row: torch.Tensor
) -> torch.Tensor:
    """Token rows of e_a, then of e_b, padded to C rows.

    On overflow the tail of e_b is dropped: object tokens take priority.
    """
    C = e_a.shape[0]
    n_a = min(n_a, C)
    n_b = min(n_b, C - n_a)
    parts = [e_a[:n_a], e_b[:n_b]]
    if n_a + n_b < C:
        parts.append(pad_row[None].expand(C - n_a - n_b, -1))
    return torch.cat(parts, dim=0)


def masked_objective(
    model: ToyDiffusionModel,
    x0: torch.Tensor,
    mask: torch.Tensor,
    e_a: torch.Tensor,
    e_b: torch.Tensor,
    n_a: int,
    n_b: int,
    t: torch.Tensor,
    eps: torch.Tensor,
) -> torch.Tensor:
    """||M * (eps - eps_theta(x_t, t, [e_a, e_b]))||^2 for a batch of (t, eps) draws."""
    pad = model.token_table.weight[0].detach().to(e_a.dtype)
    ctx = concat_tokens(e_a, n_a, e_b, n_b, pad)[None].expand(x0.shape[0], -1, -1)
    x_t = q_sample(x0, t, eps, model.schedule)
    return masked_residual_loss(eps, model.eps(x_t, t, ctx), mask)


@dataclass
class EmbedOptResult:
    e_a_hat: TextEmbedding
    e_b_hat: TextEmbedding
    losses: list[float]
    draws: int = 0


def _check_mask(mask: Mask, latent: Latent) -> torch.Tensor:
    if mask.shape != latent.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match latent grid {latent.shape[:2]}")
    return torch.from_numpy(mask.data.astype(np.float32))


def optimize_embeddings(
    model: ToyDiffusionModel,
    x0: Latent,
    mask: Mask,
    e_a: TextEmbedding,
    e_b: TextEmbedding,
    steps: int = 500,
    lr: float = 1e-3,
    seed: int = 0,
    batch: int = 1,
    mode: str = "joint",
    reference: Latent | None = None,
) -> EmbedOptResult:
    """Adam on (e_a, e_b) under the object mask, model parameters frozen.

    ``mode="joint"`` conditions one denoiser call on the concatenated tokens
    against the input latents. ``mode="per_stream"`` fits e_a alone under M on
    the input and e_b alone under 1-M on ``reference``.
    """
    if not model.frozen:
        raise ContractError("optimize_embeddings requires a frozen model")
    if steps < 1:
        raise RangeError("steps must be >= 1")
    if mode not in ("joint", "per_stream"):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "per_stream" and reference is None:
        raise ConfigError("per_stream mode needs a reference latent")
    model.check_embedding(e_a)
    model.check_embedding(e_b)
    m = _check_mask(mask, x0)
    dtype = model.dtype
    x_in = latent_to_torch(x0, dtype).expand(batch, -1, -1, -1)
    x_ref = latent_to_torch(reference, dtype).expand(batch, -1, -1, -1) if reference is not None else None
    n_a, n_b = token_count(e_a), token_count(e_b)
    ea = torch.tensor(np.array(e_a.data), dtype=dtype, requires_grad=True)
    eb = torch.tensor(np.array(e_b.data), dtype=dtype, requires_grad=True)
    opt = torch.optim.Adam([ea, eb], lr=lr)
    rng = seeded_rng(seed, "embedopt")
    shape = (batch,) + tuple(x_in.shape[1:])
    pad = model.token_table.weight[0].detach().to(dtype)
    losses: list[float] = []
    for step in range(steps):
        t = torch.from_numpy(np.asarray(rng.integers(1, model.schedule.T_steps, size=batch), dtype=np.int64))
        eps = torch.from_numpy(rng.normal(shape)).to(dtype)
        if mode == "joint":
            loss = masked_objective(model, x_in, m, ea, eb, n_a, n_b, t, eps)
        else:
            eps_b = torch.from_numpy(rng.normal(shape)).to(dtype)
            ctx_a = concat_tokens(ea, n_a, eb, 0, pad)[None].expand(batch, -1, -1)
            ctx_b = concat_tokens(eb, n_b, ea, 0, pad)[None].expand(batch, -1, -1)
            loss_a = masked_residual_loss(eps, model.eps(q_sample(x_in, t, eps, model.schedule), t, ctx_a), m)
            x_b = q_sample(x_ref, t, eps_b, model.schedule)
            loss = loss_a + masked_residual_loss(eps_b, model.eps(x_b, t, ctx_b), 1 - m)
        value = loss.item()
        if not math.isfinite(value):
            raise OptimizationError(f"embedding loss is not finite at step {step}", step=step)
        losses.append(value)
        opt.zero_grad(set_to_none=True)
        if loss.requires_grad:
            loss.backward()
        opt.step()
    out_a = TextEmbedding(ea.detach().to(torch.float32).numpy(), "optimized", e_a.n_tokens)
    out_b = TextEmbedding(eb.detach().to(torch.float32).numpy(), "optimized", e_b.n_tokens)
    return EmbedOptResult(out_a, out_b, losses, rng.draws)


def interpolate(e_a_hat: TextEmbedding, e_b_hat: TextEmbedding, alpha: float) -> TextEmbedding:
    """alpha * e_a_hat + (1 - alpha) * e_b_hat, evaluated in float64."""
    if e_a_hat.shape != e_b_hat.shape:
        raise ShapeError(f"cannot interpolate {e_a_hat.shape} with {e_b_hat.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise RangeError(f"alpha must lie in [0, 1], got {alpha}")
    a = e_a_hat.data.astype(np.float64)
    b = e_b_hat.data.astype(np.float64)
    mixed = alpha * a + (1.0 - alpha) * b
    n = e_a_hat.n_tokens if e_a_hat.n_tokens == e_b_hat.n_tokens else None
    return TextEmbedding(mixed.astype(np.float32), "interpolated", n)


def latent_mask(mask: Mask, latent_shape: tuple[int, ...]) -> Mask:
    return masklib.to_latent_res(mask, latent_shape)
