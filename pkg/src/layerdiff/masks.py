"""Mask acquisition (synthetic oracle or external PNG) and mask algebra."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ImageTensor, Mask, RangeError, ShapeError
from . import imageio, synthdata


@dataclass(frozen=True)
class MaskProvider:
    """Where object masks come from.

    ``kind="file"`` is the hook for external segmenters: anything that can
    write a 0/255 single-channel PNG at image resolution plugs in here.
    """

    kind: str = "synthetic-oracle"
    source: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic-oracle", "file"):
            raise ValueError(f"unknown mask provider kind {self.kind!r}")
        if self.kind == "file" and not self.source:
            raise ValueError("file provider needs a path")

    @classmethod
    def from_spec(cls, source: str) -> "MaskProvider":
        if source == "synthetic-oracle":
            return cls()
        return cls("file", source)


def get_mask(provider: MaskProvider, image: ImageTensor) -> Mask:
    if provider.kind == "synthetic-oracle":
        return synthdata.foreground_mask(image)
    path = Path(provider.source)  # type: ignore[arg-type]
    if not path.is_file():
        raise OSError(f"mask file not found: {path}")
    mask = imageio.load_mask_png(path)
    if mask.shape != (image.height, image.width):
        raise ShapeError(f"mask {mask.shape} does not match image {(image.height, image.width)}")
    return mask


def to_latent_res(mask: Mask, latent_shape: tuple[int, ...]) -> Mask:
    """Area-average down to the latent grid, then threshold (>= 0.5 is foreground)."""
    h, w = int(latent_shape[0]), int(latent_shape[1])
    H, W = mask.shape
    if (H, W) == (h, w):
        return Mask(mask.data, "latent")
    if H % h or W % w:
        raise ShapeError(f"cannot downsample {H}x{W} to {h}x{w} by an integer factor")
    blocks = mask.data.astype(np.float64).reshape(h, H // h, w, W // w).mean(axis=(1, 3))
    return Mask((blocks >= 0.5).astype(np.uint8), "latent")


def complement(mask: Mask) -> Mask:
    return Mask(1 - mask.data, mask.resolution_tag)


def dilate(mask: Mask, r: int) -> Mask:
    """Grow the foreground by Chebyshev radius ``r``."""
    if r < 0:
        raise RangeError(f"dilation radius must be >= 0, got {r}")
    if r == 0:
        return mask
    grown = ndimage.maximum_filter(mask.data, size=2 * r + 1, mode="constant", cval=0)
    return Mask(grown, mask.resolution_tag)


def coverage(mask: Mask) -> float:
    return mask.coverage


def full(shape: tuple[int, int], resolution_tag: str = "latent") -> Mask:
    return Mask(np.ones(shape, dtype=np.uint8), resolution_tag)


def empty(shape: tuple[int, int], resolution_tag: str = "latent") -> Mask:
    return Mask(np.zeros(shape, dtype=np.uint8), resolution_tag)


def save_png(mask: Mask, path: str | os.PathLike) -> None:
    imageio.save_mask_png(mask, path)
