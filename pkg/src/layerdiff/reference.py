"""The cached reference base model shared by the edit experiments and the test suite."""

from __future__ import annotations

import logging
import os
from pathlib import Path

from . import synthdata
from .toybackend import ToyDiffusionModel, TrainConfig, load_checkpoint, train_base

log = logging.getLogger(__name__)

CORPUS_SIZE = 5000
CORPUS_SEED = 0
TRAIN_CONFIG = TrainConfig(epochs=30, lr=1e-3, batch=32, seed=0)


def default_checkpoint_path() -> Path:
    env = os.environ.get("LAYERDIFF_BASE_CKPT")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / ".cache" / "base-model.ckpt"


def ensure_base_checkpoint(path: str | os.PathLike | None = None) -> Path:
    """Train the reference model once (about 45 min on one CPU core) and cache it."""
    path = Path(path) if path is not None else default_checkpoint_path()
    if path.is_file():
        return path
    path.parent.mkdir(parents=True, exist_ok=True)
    log.info("training reference base model into %s", path)
    corpus = synthdata.sample_corpus(CORPUS_SIZE, CORPUS_SEED)
    train_base(corpus, TRAIN_CONFIG, checkpoint_path=path, trace_path=path.with_suffix(".trace.tsv"))
    return path


def load_base_model(path: str | os.PathLike | None = None) -> ToyDiffusionModel:
    return load_checkpoint(ensure_base_checkpoint(path)).freeze()
