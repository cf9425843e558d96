"""Shared domain types, RNG discipline and the tensor container format."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np

# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class LayerDiffError(Exception):
    """Base class for all package errors."""


class FormatError(LayerDiffError):
    """Malformed tensor container or other on-disk artifact."""


class TensorTypeError(LayerDiffError, TypeError):
    """A container holds a different core type than the caller asked for."""


class ShapeError(LayerDiffError, ValueError):
    pass


class RangeError(LayerDiffError, ValueError):
    pass


class VocabularyError(LayerDiffError, ValueError):
    def __init__(self, message: str, token: str | None = None):
        super().__init__(message)
        self.token = token


class ContractError(LayerDiffError):
    """A precondition about frozen/unfrozen state was violated."""


class TrainingError(LayerDiffError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class OptimizationError(TrainingError):
    pass


class SamplingError(LayerDiffError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ConfigError(LayerDiffError, ValueError):
    pass


class DegenerateRegionError(LayerDiffError, ValueError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


def _frozen_array(data: Any, dtype: Any) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """RGB image, H x W x 3 float32 in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = _frozen_array(self.data, np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"image must be HxWx3, got {arr.shape}")
        h, w = arr.shape[:2]
        if h < 8 or w < 8 or h % 4 or w % 4:
            raise ShapeError(f"image sides must be >= 8 and divisible by 4, got {h}x{w}")
        if not np.all(np.isfinite(arr)):
            raise RangeError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise RangeError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @classmethod
    def clipped(cls, data: np.ndarray) -> "ImageTensor":
        return cls(np.clip(np.asarray(data, dtype=np.float32), 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class Latent:
    """Diffusion state h x w x c. ``timestep`` is None for a clean latent."""

    data: np.ndarray
    timestep: int | None = None

    def __post_init__(self) -> None:
        arr = _frozen_array(self.data, np.float32)
        if arr.ndim != 3:
            raise ShapeError(f"latent must be h x w x c, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise RangeError("latent contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]


EMBEDDING_LABELS = ("raw", "optimized", "interpolated")


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    """C x N token embedding matrix.

    ``n_tokens`` counts the leading rows that carry real tokens (the rest are
    padding); it is None when the split is meaningless, e.g. after
    interpolating two embeddings with different token counts.
    """

    data: np.ndarray
    label: str = "raw"
    n_tokens: int | None = None
    frozen: bool = False

    def __post_init__(self) -> None:
        arr = _frozen_array(self.data, np.float32)
        if arr.ndim != 2:
            raise ShapeError(f"embedding must be C x N, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise RangeError("embedding contains non-finite values")
        if self.label not in EMBEDDING_LABELS:
            raise ValueError(f"unknown embedding label {self.label!r}")
        if self.n_tokens is not None and not 0 <= self.n_tokens <= arr.shape[0]:
            raise RangeError(f"n_tokens={self.n_tokens} outside [0, {arr.shape[0]}]")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def freeze(self) -> "TextEmbedding":
        return dataclasses.replace(self, frozen=True)

    def checksum(self) -> str:
        return hashlib.sha256(self.data.tobytes()).hexdigest()


MASK_RESOLUTIONS = ("image", "latent")


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary foreground map (1 = object)."""

    data: np.ndarray
    resolution_tag: str = "image"

    def __post_init__(self) -> None:
        raw = np.asarray(self.data)
        if raw.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got {raw.shape}")
        if not np.all((raw == 0) | (raw == 1)):
            raise RangeError("mask values must be exactly 0 or 1")
        if self.resolution_tag not in MASK_RESOLUTIONS:
            raise ValueError(f"unknown resolution tag {self.resolution_tag!r}")
        object.__setattr__(self, "data", _frozen_array(raw, np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    @property
    def coverage(self) -> float:
        return float(self.data.mean())


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Forward-process tables. Index ``t - 1`` holds the value for timestep t."""

    betas: np.ndarray

    def __post_init__(self) -> None:
        betas = _frozen_array(self.betas, np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ShapeError("betas must be a non-empty vector")
        if not np.all((betas > 0) & (betas < 1)):
            raise RangeError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        alpha_bars = np.cumprod(1.0 - betas)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "_alpha_bars", alpha_bars)
        if alpha_bars[0] <= 0.99:
            raise RangeError("alpha_bar at t=1 must exceed 0.99")

    @classmethod
    def linear(cls, T_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, T_steps, dtype=np.float64))

    @property
    def T_steps(self) -> int:
        return int(self.betas.size)

    @property
    def alpha_bars(self) -> np.ndarray:
        return self._alpha_bars  # type: ignore[attr-defined]

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at timestep t; t = 0 means clean (1.0)."""
        if t == 0:
            return 1.0
        self.check_timestep(t)
        return float(self.alpha_bars[t - 1])

    def check_timestep(self, t: int) -> None:
        if not 1 <= int(t) <= self.T_steps:
            raise RangeError(f"timestep {t} outside [1, {self.T_steps}]")


@dataclass(frozen=True)
class LossWeights:
    lambda_obj: float = 2.0
    lambda_bg: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda_obj < 0 or self.lambda_bg < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lambda_obj == 0 and self.lambda_bg == 0:
            raise ConfigError("lambda_obj and lambda_bg cannot both be zero")


# Defaults shared by EditSpec and the CLI.
DEFAULT_ALPHA = 0.7
DEFAULT_LAMBDA_OBJ = 2.0
DEFAULT_LAMBDA_BG = 1.0
DEFAULT_EMBED_STEPS = 500
DEFAULT_EMBED_LR = 1e-3
DEFAULT_FINETUNE_STEPS = 250
# Published rate for SD-scale models. The toy default is larger; on the toy
# backend both rates reach a similar fine-tune loss in 250 steps.
SD_FINETUNE_LR = 2e-6
DEFAULT_FINETUNE_LR = 1e-4
DEFAULT_SAMPLE_STEPS = 50
DEFAULT_N_SAMPLES = 4


@dataclass(frozen=True)
class EditSpec:
    """One edit job.

    ``reference_image=None`` asks the pipeline to generate O_r from the
    background text. ``object_mask_source`` is ``"synthetic-oracle"`` or a
    path to a 0/255 mask PNG.
    """

    input_image: ImageTensor
    target_text: str
    object_text: str
    background_text: str
    reference_image: ImageTensor | None = None
    alpha: float = DEFAULT_ALPHA
    lambda_obj: float = DEFAULT_LAMBDA_OBJ
    lambda_bg: float = DEFAULT_LAMBDA_BG
    embed_steps: int = DEFAULT_EMBED_STEPS
    embed_lr: float = DEFAULT_EMBED_LR
    finetune_steps: int = DEFAULT_FINETUNE_STEPS
    finetune_lr: float = DEFAULT_FINETUNE_LR
    sample_steps: int = DEFAULT_SAMPLE_STEPS
    seed: int = 0
    object_mask_source: str = "synthetic-oracle"
    n_samples: int = DEFAULT_N_SAMPLES
    # Ablation switches; all on reproduces the full method.
    use_embed_opt: bool = True
    use_finetune: bool = True
    guidance: str = "iterative"
    embed_mode: str = "joint"
    subject_source: str = "target"
    mask_dilation: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        LossWeights(self.lambda_obj, self.lambda_bg)
        for name in ("embed_steps", "finetune_steps", "sample_steps", "n_samples"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.object_text.strip():
            raise ConfigError("object_text must be non-empty")
        if not self.background_text.strip():
            raise ConfigError("background_text must be non-empty")
        if not self.target_text.strip():
            raise ConfigError("target_text must be non-empty")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.guidance not in ("plain", "iterative"):
            raise ConfigError(f"unknown guidance {self.guidance!r}")
        if self.embed_mode not in ("joint", "per_stream"):
            raise ConfigError(f"unknown embed_mode {self.embed_mode!r}")
        if self.subject_source not in ("target", "input"):
            raise ConfigError(f"unknown subject_source {self.subject_source!r}")
        if self.mask_dilation < 0:
            raise ConfigError("mask_dilation must be >= 0")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_obj, self.lambda_bg)

    def config_record(self) -> dict[str, Any]:
        """JSON-friendly view of every scalar field plus image digests."""
        rec: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, ImageTensor):
                value = hashlib.sha256(value.data.tobytes()).hexdigest()
            rec[f.name] = value
        return rec


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


def derive_seed(seed: int, stage: str | None = None) -> int:
    """Sub-seed for ``stage``: first 8 bytes of sha256("<seed>/<stage>")."""
    if seed < 0:
        raise RangeError("seed must be >= 0")
    if stage is None:
        return int(seed)
    digest = hashlib.sha256(f"{int(seed)}/{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class RngStream:
    """numpy Generator wrapper that counts how many values it has produced."""

    def __init__(self, seed: int, stage: str | None = None):
        self.seed = int(seed)
        self.stage = stage
        self._gen = np.random.Generator(np.random.PCG64(derive_seed(seed, stage)))
        self.draws = 0

    def normal(self, shape: tuple[int, ...] | int) -> np.ndarray:
        out = self._gen.standard_normal(shape, dtype=np.float32)
        self.draws += out.size
        return out

    def integers(self, low: int, high: int, size: tuple[int, ...] | int | None = None) -> Any:
        """Uniform integers in [low, high] inclusive."""
        out = self._gen.integers(low, high, size=size, endpoint=True)
        self.draws += int(np.size(out))
        return out

    def uniform(self, low: float = 0.0, high: float = 1.0, size: tuple[int, ...] | int | None = None) -> Any:
        out = self._gen.uniform(low, high, size=size)
        self.draws += int(np.size(out))
        return out

    def permutation(self, n: int) -> np.ndarray:
        out = self._gen.permutation(n)
        self.draws += n
        return out

    def choice(self, options: list[Any]) -> Any:
        self.draws += 1
        return options[int(self._gen.integers(0, len(options)))]


def seeded_rng(seed: int, stage: str | None = None) -> RngStream:
    return RngStream(seed, stage)


# ---------------------------------------------------------------------------
# Tensor container
#
# Layout: an ASCII header, one directive per line, terminated by "end\n",
# followed by the concatenated little-endian payloads in header order.
#
#   LAYERDIFF-TENSORS 1
#   meta {"kind": "TextEmbedding", ...}
#   tensor <name> <dtype> <dim0,dim1,...>
#   end
# ---------------------------------------------------------------------------

MAGIC = "LAYERDIFF-TENSORS 1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "uint8": "|u1", "int64": "<i8"}


def write_container(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    lines = [MAGIC, "meta " + json.dumps(meta, sort_keys=True)]
    payloads = []
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype}")
        shape = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"tensor {name} {dtype} {shape}")
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    lines.append("end")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    for p in payloads:
        buf.write(p)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_container(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    pos = 0
    entries = []
    meta: dict[str, Any] | None = None

    def next_line() -> str:
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated header")
        try:
            line = raw[pos:end].decode("ascii")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: non-ASCII header") from exc
        pos = end + 1
        return line

    if next_line() != MAGIC:
        raise FormatError(f"{path}: missing container magic")
    while True:
        line = next_line()
        if line == "end":
            break
        key, _, rest = line.partition(" ")
        if key == "meta":
            try:
                meta = json.loads(rest)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: bad meta record") from exc
        elif key == "tensor":
            parts = rest.split(" ")
            if len(parts) != 3 or parts[1] not in _DTYPES:
                raise FormatError(f"{path}: bad tensor directive {line!r}")
            try:
                shape = () if parts[2] == "-" else tuple(int(d) for d in parts[2].split(","))
            except ValueError as exc:
                raise FormatError(f"{path}: bad shape in {line!r}") from exc
            entries.append((parts[0], parts[1], shape))
        else:
            raise FormatError(f"{path}: unknown header directive {key!r}")
    if meta is None:
        raise FormatError(f"{path}: missing meta record")
    tensors = {}
    for name, dtype, shape in entries:
        dt = np.dtype(_DTYPES[dtype])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(raw):
            raise FormatError(f"{path}: payload for {name!r} is truncated")
        arr = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="))
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes after payload")
    return tensors, meta


CoreType = ImageTensor | Latent | TextEmbedding | Mask | NoiseSchedule


def save_tensor(obj: CoreType, path: str | os.PathLike, role: str = "") -> None:
    """Write one core object; ``role`` is a free-form label kept in the header."""
    kind = type(obj).__name__
    meta: dict[str, Any] = {"kind": kind, "role": role}
    if isinstance(obj, NoiseSchedule):
        write_container(path, {"betas": obj.betas}, meta)
        return
    if isinstance(obj, Latent):
        meta["timestep"] = obj.timestep
    elif isinstance(obj, TextEmbedding):
        meta.update(label=obj.label, n_tokens=obj.n_tokens, frozen=obj.frozen)
    elif isinstance(obj, Mask):
        meta["resolution_tag"] = obj.resolution_tag
    elif not isinstance(obj, ImageTensor):
        raise TypeError(f"cannot serialize {kind}")
    write_container(path, {"data": obj.data}, meta)


_KINDS = {cls.__name__: cls for cls in (ImageTensor, Latent, TextEmbedding, Mask, NoiseSchedule)}


def load_tensor(path: str | os.PathLike, expected: type | None = None) -> CoreType:
    tensors, meta = read_container(path)
    kind = meta.get("kind")
    if kind not in _KINDS:
        raise FormatError(f"{path}: unknown kind {kind!r}")
    cls = _KINDS[kind]
    if expected is not None and cls is not expected:
        raise TensorTypeError(f"{path} holds a {kind}, expected {expected.__name__}")
    try:
        if cls is NoiseSchedule:
            return NoiseSchedule(tensors["betas"])
        data = tensors["data"]
        if cls is Latent:
            return Latent(data, meta.get("timestep"))
        if cls is TextEmbedding:
            return TextEmbedding(data, meta.get("label", "raw"), meta.get("n_tokens"), bool(meta.get("frozen", False)))
        if cls is Mask:
            return Mask(data, meta.get("resolution_tag", "image"))
        return ImageTensor(data)
    except KeyError as exc:
        raise FormatError(f"{path}: missing tensor {exc}") from exc
    except (ShapeError, RangeError) as exc:
        raise TensorTypeError(f"{path}: payload violates {kind} invariants: {exc}") from exc


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def array_checksum(arrays: Iterable[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
