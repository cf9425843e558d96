"""PNG import/export for images and 0/255 masks."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .core import FormatError, ImageTensor, Mask


def save_image_png(image: ImageTensor, path: str | os.PathLike) -> None:
    arr = np.round(np.asarray(image.data) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image_png(path: str | os.PathLike) -> ImageTensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return ImageTensor(arr)


def save_mask_png(mask: Mask, path: str | os.PathLike) -> None:
    Image.fromarray((mask.data * 255).astype(np.uint8), mode="L").save(path)


def load_mask_png(path: str | os.PathLike, resolution_tag: str = "image") -> Mask:
    """Read a single-channel mask; values >= 128 count as foreground."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "1", "P", "I", "I;16"):
                raise FormatError(f"{path}: mask PNG must be single channel, got mode {im.mode}")
            arr = np.asarray(im.convert("L"))
    except FormatError:
        raise
    except OSError as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    return Mask((arr >= 128).astype(np.uint8), resolution_tag)
