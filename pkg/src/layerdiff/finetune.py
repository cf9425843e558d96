"""Layered fine-tuning of the denoiser under a frozen interpolated embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import (
    ContractError,
    Latent,
    LossWeights,
    Mask,
    RangeError,
    ShapeError,
    TextEmbedding,
    TrainingError,
    seeded_rng,
)
from .toybackend import ToyDiffusionModel, latent_to_torch, masked_residual_loss, q_sample


def _mask_tensor(mask: Mask | None, latent: Latent) -> torch.Tensor | None:
    if mask is None:
        return None
    if mask.shape != latent.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match latent grid {latent.shape[:2]}")
    return torch.from_numpy(mask.data.astype(np.float32))


def _loss_tensor(
    model: ToyDiffusionModel,
    x0: torch.Tensor,
    ctx: torch.Tensor,
    mask: torch.Tensor | None,
    t: int,
    eps: torch.Tensor,
) -> torch.Tensor:
    tt = torch.tensor([int(t)])
    return masked_residual_loss(eps, model.eps(q_sample(x0, tt, eps, model.schedule), tt, ctx), mask)


def masked_diffusion_loss(
    model: ToyDiffusionModel,
    x0: Latent,
    e: TextEmbedding,
    mask: Mask | None,
    t: int,
    eps: Latent | np.ndarray,
) -> float:
    """||mask * (eps - eps_theta(x_t, t, e))||^2 / (h * w * c).

    Dividing by the full element count (not the masked count) keeps the
    loss additive over a mask and its complement. ``mask=None`` is the
    unmasked objective.
    """
    model.schedule.check_timestep(t)
    model.check_embedding(e)
    eps_arr = eps.data if isinstance(eps, Latent) else np.asarray(eps, dtype=np.float32)
    if eps_arr.shape != x0.shape:
        raise ShapeError(f"noise shape {eps_arr.shape} != latent shape {x0.shape}")
    m = _mask_tensor(mask, x0)
    dtype = model.dtype
    with torch.no_grad():
        loss = _loss_tensor(
            model,
            latent_to_torch(x0, dtype),
            torch.from_numpy(np.array(e.data)).to(dtype)[None],
            m,
            t,
            latent_to_torch(eps_arr, dtype),
        )
    return loss.item()


@dataclass
class FinetuneResult:
    model: ToyDiffusionModel
    trace: list[tuple[float, float, float]]  # (L_obj, L_bg, L_total) per step
    draws: int = 0


def finetune(
    model: ToyDiffusionModel,
    subject: Latent,
    reference: Latent,
    subject_mask: Mask,
    reference_mask: Mask,
    e_opt: TextEmbedding,
    weights: LossWeights = LossWeights(),
    steps: int = 250,
    lr: float = 1e-4,
    seed: int = 0,
) -> FinetuneResult:
    """Adapt theta to lambda_obj * L_obj + lambda_bg * L_bg with e_opt fixed.

    L_obj masks the noisy ``subject`` latents (normally O_t) by
    ``subject_mask``; L_bg masks the noisy ``reference`` latents (O_r) by the
    complement of ``reference_mask``. Both terms share one timestep per step
    and draw independent noise. The input model is left untouched.
    """
    if not e_opt.frozen:
        raise ContractError("finetune requires a frozen e_opt")
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    if steps < 0:
        raise RangeError("steps must be >= 0")
    model.check_embedding(e_opt)
    tuned = model.copy()
    if steps == 0:
        return FinetuneResult(tuned.freeze(), [])

    dtype = tuned.dtype
    m_obj = _mask_tensor(subject_mask, subject)
    m_bg = 1.0 - _mask_tensor(reference_mask, reference)
    x_obj = latent_to_torch(subject, dtype)
    x_bg = latent_to_torch(reference, dtype)
    ctx = torch.from_numpy(np.array(e_opt.data)).to(dtype)[None]
    params = list(tuned.unet.parameters())
    for p in params:
        p.requires_grad_(True)
    tuned.unet.train()
    opt = torch.optim.Adam(params, lr=lr)
    rng = seeded_rng(seed, "finetune")
    lam_obj, lam_bg = float(weights.lambda_obj), float(weights.lambda_bg)
    trace: list[tuple[float, float, float]] = []
    for step in range(steps):
        t = int(rng.integers(1, tuned.schedule.T_steps))
        eps_obj = torch.from_numpy(rng.normal(tuple(x_obj.shape))).to(dtype)
        eps_bg = torch.from_numpy(rng.normal(tuple(x_bg.shape))).to(dtype)
        # A zero-weight term is still evaluated (without a graph) so the trace stays complete.
        with torch.set_grad_enabled(lam_obj != 0):
            l_obj = _loss_tensor(tuned, x_obj, ctx, m_obj, t, eps_obj)
        with torch.set_grad_enabled(lam_bg != 0):
            l_bg = _loss_tensor(tuned, x_bg, ctx, m_bg, t, eps_bg)
        total = lam_obj * l_obj + lam_bg * l_bg
        row = (l_obj.item(), l_bg.item(), total.item())
        if not all(math.isfinite(v) for v in row):
            raise TrainingError(f"fine-tune loss is not finite at step {step}", step=step)
        trace.append(row)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
    tuned.unet.eval()
    return FinetuneResult(tuned.freeze(), trace, rng.draws)
