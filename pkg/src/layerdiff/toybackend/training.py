"""Base text-conditioned denoiser training."""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..core import RangeError, RngStream, TrainingError, seeded_rng
from ..synthdata import SceneSample
from .model import BackendConfig, ToyDiffusionModel, q_sample, save_checkpoint

log = logging.getLogger(__name__)

MIN_CORPUS = 256


def masked_residual_loss(eps: torch.Tensor, eps_hat: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Sum of squared (masked) residuals over the total element count.

    The reduction runs in float64 so that weighted sums of several losses can
    be reproduced exactly from their logged components. ``mask`` is (h, w)
    or (B, h, w) and broadcasts over channels.
    """
    r = (eps - eps_hat).to(torch.float64)
    if mask is not None:
        m = mask.to(torch.float64)
        if m.ndim == 2:
            m = m[None, None]
        elif m.ndim == 3:
            m = m[:, None]
        r = m * r
    return (r * r).sum() / r.numel()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch: int = 32
    seed: int = 0
    # Probability of keeping only the object clause / only the background clause.
    clause_dropout: float = 0.1
    grad_clip: float = 1.0
    # Cosine decay of the learning rate down to this fraction by the last step.
    final_lr_fraction: float = 0.1
    backend: BackendConfig = field(default_factory=BackendConfig)


@dataclass
class TrainResult:
    model: ToyDiffusionModel
    step_losses: list[float]
    epoch_losses: list[float]


class CaptionBatcher:
    """Token ids for a corpus, with the optional clause dropout applied per draw."""

    def __init__(self, model: ToyDiffusionModel, captions: Sequence[str]):
        self.full = []
        self.obj = []
        self.bg = []
        for c in captions:
            ids = model.tokenize(c)
            words = c.lower().split()
            cut = words.index("on") if "on" in words else len(words)
            self.full.append(model.pad_ids(ids))
            self.obj.append(model.pad_ids(ids[:cut]))
            self.bg.append(model.pad_ids(ids[cut:]))
        self.full_t = torch.tensor(self.full)
        self.obj_t = torch.tensor(self.obj)
        self.bg_t = torch.tensor(self.bg)

    def ids(self, idx: np.ndarray, rng: RngStream, dropout: float) -> torch.Tensor:
        index = torch.from_numpy(idx)
        out = self.full_t[index].clone()
        if dropout > 0:
            u = torch.from_numpy(rng.uniform(size=len(idx)))
            obj_only = u < dropout
            bg_only = (u >= dropout) & (u < 2 * dropout)
            out[obj_only] = self.obj_t[index][obj_only]
            out[bg_only] = self.bg_t[index][bg_only]
        return out


def stack_latents(model: ToyDiffusionModel, samples: Sequence[SceneSample]) -> torch.Tensor:
    arr = np.stack([model.codec.encode(s.image).data for s in samples])
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).copy()).to(model.dtype)


def diffusion_step_loss(
    model: ToyDiffusionModel, x0: torch.Tensor, ctx: torch.Tensor, rng: RngStream
) -> torch.Tensor:
    """One Monte-Carlo draw of the unmasked denoising objective for a batch."""
    b = x0.shape[0]
    t = torch.from_numpy(np.asarray(rng.integers(1, model.schedule.T_steps, size=b), dtype=np.int64))
    eps = torch.from_numpy(rng.normal(tuple(x0.shape))).to(x0.dtype)
    return masked_residual_loss(eps, model.eps(q_sample(x0, t, eps, model.schedule), t, ctx))


def evaluate_loss(model: ToyDiffusionModel, samples: Sequence[SceneSample], seed: int = 0, repeats: int = 4, batch: int = 64) -> float:
    """Mean denoising loss on ``samples`` with fixed (t, eps) draws."""
    rng = seeded_rng(seed, "eval-loss")
    x_all = stack_latents(model, samples)
    ids = torch.tensor([model.pad_ids(model.tokenize(s.caption)) for s in samples])
    total, count = 0.0, 0
    with torch.no_grad():
        for _ in range(repeats):
            for i in range(0, len(samples), batch):
                x0 = x_all[i : i + batch]
                loss = diffusion_step_loss(model, x0, model.embed_ids(ids[i : i + batch]), rng)
                total += float(loss) * x0.shape[0]
                count += x0.shape[0]
    return total / count


def train_base(
    corpus: Sequence[SceneSample],
    config: TrainConfig = TrainConfig(),
    checkpoint_path: str | os.PathLike | None = None,
    trace_path: str | os.PathLike | None = None,
    progress: Callable[[int, int, float], None] | None = None,
) -> TrainResult:
    """Fit theta and phi on E||eps_theta(x_t, t, tau_phi(y)) - eps||^2.

    The run is deterministic given ``config``: initialization, shuffling,
    timesteps, noise and clause dropout all come from sub-seeded streams.
    """
    if len(corpus) < MIN_CORPUS:
        raise RangeError(f"corpus must hold >= {MIN_CORPUS} samples, got {len(corpus)}")
    if config.epochs < 1 or config.batch < 1:
        raise RangeError("epochs and batch must be >= 1")
    model = ToyDiffusionModel(config.backend, seed=config.seed)
    model.unfreeze()
    model.unet.train()
    rng = seeded_rng(config.seed, "train-base")
    x_all = stack_latents(model, corpus)
    captions = CaptionBatcher(model, [s.caption for s in corpus])
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    total_steps = config.epochs * math.ceil(len(corpus) / config.batch)
    floor = config.final_lr_fraction
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * min(s, total_steps) / total_steps))
    )

    step_losses: list[float] = []
    epoch_losses: list[float] = []
    n = len(corpus)
    steps_per_epoch = math.ceil(n / config.batch)
    step = 0
    started = time.time()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        running = []
        for k in range(steps_per_epoch):
            idx = order[k * config.batch : (k + 1) * config.batch]
            ctx = model.embed_ids(captions.ids(idx, rng, config.clause_dropout))
            loss = diffusion_step_loss(model, x_all[torch.from_numpy(idx)], ctx, rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"loss diverged at step {step}", step=step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            sched.step()
            step_losses.append(value)
            running.append(value)
            step += 1
        epoch_losses.append(float(np.mean(running)))
        log.info("epoch %d/%d loss %.5f (%.0fs)", epoch + 1, config.epochs, epoch_losses[-1], time.time() - started)
        if progress is not None:
            progress(epoch + 1, config.epochs, epoch_losses[-1])

    model.unet.eval()
    model.freeze()
    if checkpoint_path is not None:
        rec = asdict(config)
        save_checkpoint(model, checkpoint_path, {"train_config": rec, "epoch_losses": epoch_losses})
    if trace_path is not None:
        write_trace(trace_path, ["step", "loss"], [(i, v) for i, v in enumerate(step_losses)])
    return TrainResult(model, step_losses, epoch_losses)


def write_trace(path: str | os.PathLike, header: Sequence[str], rows: Sequence[Sequence[float | int]]) -> None:
    """Tab-separated trace; floats use repr so values round-trip exactly."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) if isinstance(v, (int, np.integer)) else repr(float(v)) for v in row) + "\n")


def read_trace(path: str | os.PathLike) -> tuple[list[str], list[list[float]]]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = [[float(x) for x in line.rstrip("\n").split("\t")] for line in fh if line.strip()]
    return header, rows
