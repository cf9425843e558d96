"""Reverse diffusion with strided sub-schedules and alternating-condition guidance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .core import ConfigError, ImageTensor, Latent, RangeError, SamplingError, TextEmbedding, seeded_rng
from .toybackend import ToyDiffusionModel, latent_to_torch, torch_to_array


@dataclass(frozen=True)
class SamplerConfig:
    sample_steps: int = 50
    method: str = "ancestral"  # or "ddim" (deterministic, eta = 0)
    guidance: str = "plain"  # or "iterative"
    seed: int = 0
    # Which index the even/odd alternation reads: the sampler iteration or the raw timestep.
    parity: str = "iteration"
    clip_x0: bool = True

    def __post_init__(self) -> None:
        if self.sample_steps < 1:
            raise RangeError("sample_steps must be >= 1")
        if self.method not in ("ancestral", "ddim"):
            raise ConfigError(f"unknown sampling method {self.method!r}")
        if self.guidance not in ("plain", "iterative"):
            raise ConfigError(f"unknown guidance {self.guidance!r}")
        if self.parity not in ("iteration", "timestep"):
            raise ConfigError(f"unknown parity rule {self.parity!r}")


def timestep_subschedule(T_steps: int, sample_steps: int) -> list[int]:
    """Descending timesteps with a uniform stride, ending at t = 1."""
    if not 1 <= sample_steps <= T_steps:
        raise RangeError(f"sample_steps must lie in [1, {T_steps}], got {sample_steps}")
    stride = T_steps // sample_steps
    return [1 + stride * (sample_steps - 1 - i) for i in range(sample_steps)]


def condition_schedule(
    sample_steps: int,
    e_opt: TextEmbedding,
    e_a_hat: TextEmbedding,
    guidance: str = "iterative",
    parity: str = "iteration",
    timesteps: Sequence[int] | None = None,
) -> list[TextEmbedding]:
    """Per-step conditions, noisiest step first.

    Iterative guidance uses e_a_hat on even steps and e_opt on odd ones.
    With ``parity="timestep"`` the even/odd test reads the raw timestep
    instead of the step index; on the default stride this picks one
    condition for every step.
    """
    if sample_steps < 1:
        raise RangeError("sample_steps must be >= 1")
    if guidance == "plain":
        return [e_opt] * sample_steps
    if guidance != "iterative":
        raise ConfigError(f"unknown guidance {guidance!r}")
    if parity == "iteration":
        keys = list(range(sample_steps))
    else:
        if timesteps is None or len(timesteps) != sample_steps:
            raise ConfigError("timestep parity needs the sub-schedule timesteps")
        keys = list(timesteps)
    return [e_a_hat if k % 2 == 0 else e_opt for k in keys]


@dataclass
class SampleResult:
    images: list[ImageTensor]
    latents: list[Latent]
    # trajectory[k] is the (n, h, w, c) state after step k, recorded every ``trajectory_every`` steps.
    trajectory: list[tuple[int, np.ndarray]] = field(default_factory=list)
    initial: np.ndarray | None = None
    draws: int = 0


def _step_coeffs(model: ToyDiffusionModel, t: int, t_prev: int) -> tuple[float, float]:
    return model.schedule.alpha_bar(t), model.schedule.alpha_bar(t_prev)


def sample(
    model: ToyDiffusionModel,
    config: SamplerConfig,
    conditions: Sequence[TextEmbedding],
    n_samples: int = 1,
    x_T: np.ndarray | None = None,
    trajectory_every: int = 0,
) -> SampleResult:
    """Run the reverse process from I_T to I_0 and decode.

    Sample k draws its initial state and step noise from its own stream
    ``(seed, "sampler/k")``; the guidance mode only selects conditions, so
    plain and iterative runs share every noise draw. ``x_T`` (n, h, w, c)
    overrides the initial state.
    """
    steps = config.sample_steps
    if len(conditions) != steps:
        raise ConfigError(f"need {steps} conditions, got {len(conditions)}")
    for e in conditions:
        model.check_embedding(e)
    timesteps = timestep_subschedule(model.schedule.T_steps, steps)
    h, w, c = model.codec.latent_shape
    dtype = model.dtype
    streams = [seeded_rng(config.seed, f"sampler/{k}") for k in range(n_samples)]
    if x_T is None:
        x0_np = np.stack([s.normal((h, w, c)) for s in streams])
    else:
        x0_np = np.asarray(x_T, dtype=np.float32).reshape(n_samples, h, w, c)
    x = torch.from_numpy(x0_np.transpose(0, 3, 1, 2).copy()).to(dtype)
    ctx_cache: dict[int, torch.Tensor] = {}
    trajectory: list[tuple[int, np.ndarray]] = []

    with torch.no_grad():
        for i, t in enumerate(timesteps):
            t_prev = timesteps[i + 1] if i + 1 < steps else 0
            e = conditions[i]
            key = id(e)
            if key not in ctx_cache:
                ctx_cache[key] = torch.from_numpy(np.array(e.data)).to(dtype)[None].expand(n_samples, -1, -1)
            tt = torch.full((n_samples,), t, dtype=torch.int64)
            eps = model.eps(x, tt, ctx_cache[key])
            ab, ab_prev = _step_coeffs(model, t, t_prev)
            x0_hat = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
            if config.clip_x0:
                x0_hat = x0_hat.clamp(-1.0, 1.0)
                eps = (x - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)
            if config.method == "ddim":
                x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps
            else:
                a_step = ab / ab_prev
                beta = 1.0 - a_step
                mean = (math.sqrt(ab_prev) * beta / (1.0 - ab)) * x0_hat + (
                    math.sqrt(a_step) * (1.0 - ab_prev) / (1.0 - ab)
                ) * x
                if t_prev > 0:
                    var = beta * (1.0 - ab_prev) / (1.0 - ab)
                    z = np.stack([s.normal((h, w, c)) for s in streams]).transpose(0, 3, 1, 2)
                    x = mean + math.sqrt(var) * torch.from_numpy(z.copy()).to(dtype)
                else:
                    x = mean
            if not torch.isfinite(x).all():
                raise SamplingError(f"non-finite state at step {i} (t={t})", step=i)
            if trajectory_every and (i % trajectory_every == 0 or i == steps - 1):
                trajectory.append((i, x.detach().to(torch.float32).permute(0, 2, 3, 1).numpy().copy()))

    latents = [Latent(torch_to_array(x[k]), timestep=None) for k in range(n_samples)]
    images = [model.codec.decode(lat) for lat in latents]
    return SampleResult(images, latents, trajectory, x0_np, sum(s.draws for s in streams))


def ddim_invert(model: ToyDiffusionModel, x0: Latent, e: TextEmbedding, sample_steps: int) -> np.ndarray:
    """Deterministic DDIM map from a clean latent to its terminal noise."""
    timesteps = timestep_subschedule(model.schedule.T_steps, sample_steps)[::-1]
    dtype = model.dtype
    x = latent_to_torch(x0, dtype)
    ctx = torch.from_numpy(np.array(e.data)).to(dtype)[None]
    prev = 0
    with torch.no_grad():
        for t in timesteps:
            eps = model.eps(x, torch.tensor([t]), ctx)
            ab_prev, ab = model.schedule.alpha_bar(prev), model.schedule.alpha_bar(t)
            x0_hat = (x - math.sqrt(1.0 - ab_prev) * eps) / math.sqrt(ab_prev)
            x = math.sqrt(ab) * x0_hat + math.sqrt(1.0 - ab) * eps
            prev = t
    return torch_to_array(x)[None]


def generate(model: ToyDiffusionModel, e: TextEmbedding, seed: int, sample_steps: int = 50, n_samples: int = 1) -> SampleResult:
    """Plain ancestral sampling under one condition."""
    cfg = SamplerConfig(sample_steps=sample_steps, seed=seed)
    return sample(model, cfg, [e] * sample_steps, n_samples=n_samples)
