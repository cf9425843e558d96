"""Procedural captioned scenes with exact foreground masks, and their analytic inverse."""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ImageTensor, Mask, RangeError, seeded_rng
from . import imageio

CANVAS = 32

SHAPES = ("square", "circle", "triangle")
FG_COLORS = {
    "red": (0.88, 0.12, 0.10),
    "green": (0.08, 0.48, 0.10),
    "blue": (0.10, 0.16, 0.80),
    "yellow": (0.96, 0.86, 0.10),
}
SIZES = {"small": 4.0, "large": 8.0}
POSITIONS = {"left": 9.0, "center": 16.0, "right": 23.0}
BG_STYLES = {
    "blue": (0.55, 0.70, 0.95),
    "green": (0.45, 0.76, 0.40),
    "sand": (0.86, 0.76, 0.50),
    "gray": (0.50, 0.50, 0.50),
}
ABSENT = "absent"
WILDCARD = "*"

FIELDS = ("fg_shape", "fg_color", "fg_size", "fg_position", "bg_style")
VOCABULARIES = {
    "fg_shape": SHAPES,
    "fg_color": tuple(FG_COLORS),
    "fg_size": tuple(SIZES),
    "fg_position": tuple(POSITIONS),
    "bg_style": tuple(BG_STYLES),
}

# Seeded per-render variation; kept well inside the oracle's decision margins.
_BG_GRADIENT = 0.06
_FG_JITTER = 0.03
_FG_THRESHOLD = 0.2
_MIN_COMPONENT = 6


@dataclass(frozen=True)
class SceneFactors:
    fg_shape: str
    fg_color: str
    fg_size: str
    fg_position: str
    bg_style: str

    def __post_init__(self) -> None:
        for name in FIELDS:
            value = getattr(self, name)
            if value == WILDCARD or (value == ABSENT and name != "bg_style"):
                continue
            if value not in VOCABULARIES[name]:
                raise ValueError(f"{name}={value!r} not in {VOCABULARIES[name]}")

    @property
    def caption(self) -> str:
        return caption_for(self)

    def as_dict(self) -> dict[str, str]:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SceneSample:
    image: ImageTensor
    caption: str
    mask: Mask
    factors: SceneFactors
    seed: int


def factor_grid() -> list[SceneFactors]:
    return [SceneFactors(*combo) for combo in itertools.product(*(VOCABULARIES[f] for f in FIELDS))]


def caption_for(f: SceneFactors) -> str:
    return f"a {f.fg_size} {f.fg_color} {f.fg_shape} on a {f.bg_style} background"


def parse_caption(text: str) -> dict[str, str]:
    """Map the words of a grammar caption (or a fragment of one) to factor fields.

    Colour words are ambiguous between object and background; a colour that
    follows "on a" is read as the background.
    """
    words = text.lower().split()
    out: dict[str, str] = {}
    after_on = False
    for i, w in enumerate(words):
        if w == "on":
            after_on = True
        elif w in SIZES:
            out["fg_size"] = w
        elif w in SHAPES:
            out["fg_shape"] = w
        elif after_on and w in BG_STYLES:
            out["bg_style"] = w
        elif w in FG_COLORS:
            out["fg_color"] = w
        elif w in BG_STYLES:
            out["bg_style"] = w
    return out


def _shape_mask(shape: str, size: float, cx: float, cy: float) -> np.ndarray:
    py, px = np.mgrid[0:CANVAS, 0:CANVAS].astype(np.float64) + 0.5
    dx, dy = px - cx, py - cy
    if shape == "square":
        m = (np.abs(dx) <= size) & (np.abs(dy) <= size)
    elif shape == "circle":
        m = dx * dx + dy * dy <= size * size
    else:
        # upward isosceles triangle, base 2*size, height 2*size
        m = (dy <= size) & (np.abs(dx) <= (dy + size) / 2.0)
    return m.astype(np.uint8)


def render_scene(factors: SceneFactors, seed: int) -> SceneSample:
    """Draw ``factors`` on a 32x32 canvas.

    The seed controls a faint background gradient, a small object shade
    jitter and a +-1 px vertical offset; none of these change the factors.
    """
    rng = seeded_rng(seed, "render")
    angle = rng.uniform(0.0, 2 * np.pi)
    shade = rng.uniform(-_FG_JITTER, _FG_JITTER, size=3)
    dy = int(rng.integers(-1, 1))

    py, px = np.mgrid[0:CANVAS, 0:CANVAS].astype(np.float64) + 0.5
    ramp = ((px - CANVAS / 2) * np.cos(angle) + (py - CANVAS / 2) * np.sin(angle)) / (CANVAS / 2)
    bg = np.asarray(BG_STYLES[factors.bg_style])[None, None, :] + _BG_GRADIENT * ramp[..., None]
    mask = _shape_mask(factors.fg_shape, SIZES[factors.fg_size], POSITIONS[factors.fg_position], CANVAS / 2 + dy)
    fg = np.clip(np.asarray(FG_COLORS[factors.fg_color]) + shade, 0.0, 1.0)
    img = np.where(mask[..., None] == 1, fg[None, None, :], bg)
    return SceneSample(
        image=ImageTensor(np.clip(img, 0.0, 1.0)),
        caption=caption_for(factors),
        mask=Mask(mask, "image"),
        factors=factors,
        seed=int(seed),
    )


def sample_corpus(n: int, seed: int) -> list[SceneSample]:
    if n < 1:
        raise RangeError(f"corpus size must be >= 1, got {n}")
    rng = seeded_rng(seed, "corpus")
    out = []
    for _ in range(n):
        picks = [VOCABULARIES[f][int(rng.integers(0, len(VOCABULARIES[f]) - 1))] for f in FIELDS]
        sub = int(rng.integers(0, 2**31 - 1))
        out.append(render_scene(SceneFactors(*picks), sub))
    return out


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OracleReport:
    factors: SceneFactors
    confidence: dict[str, float]
    component: np.ndarray  # uint8 foreground map, all zero when absent

    @property
    def has_foreground(self) -> bool:
        return self.factors.fg_shape != ABSENT


def _nearest(value: np.ndarray, table: dict[str, tuple[float, ...]] | dict[str, float]) -> tuple[str, float]:
    names = list(table)
    refs = np.asarray([table[k] for k in names], dtype=np.float64)
    d = np.linalg.norm(refs - value, axis=-1) if refs.ndim > 1 else np.abs(refs - value)
    order = np.argsort(d, kind="stable")
    best, second = d[order[0]], d[order[1]]
    conf = 1.0 - best / second if second > 0 else 1.0
    return names[order[0]], float(conf)


def _bg_estimate(img: np.ndarray) -> np.ndarray:
    border = np.concatenate([img[0], img[-1], img[1:-1, 0], img[1:-1, -1]])
    return np.median(border, axis=0)


def analyze(image: ImageTensor) -> OracleReport:
    """Recover scene factors from pixels.

    The largest connected region that departs from the border colour is
    taken as the object. Shape comes from how much of its bounding box the
    region fills (square ~1, circle ~pi/4, triangle ~1/2).
    """
    img = np.asarray(image.data, dtype=np.float64)
    if img.shape != (CANVAS, CANVAS, 3):
        raise ValueError(f"oracle expects a {CANVAS}x{CANVAS} RGB image, got {img.shape}")
    bg_ref = _bg_estimate(img)
    fg_pix = np.linalg.norm(img - bg_ref, axis=-1) > _FG_THRESHOLD
    labels, n = ndimage.label(fg_pix)
    comp = np.zeros(fg_pix.shape, dtype=np.uint8)
    if n:
        sizes = ndimage.sum_labels(fg_pix, labels, index=np.arange(1, n + 1))
        k = int(np.argmax(sizes))
        if sizes[k] >= _MIN_COMPONENT:
            comp = ndimage.binary_fill_holes(labels == k + 1).astype(np.uint8)

    bg_pixels = img[comp == 0]
    bg_colour = np.median(bg_pixels, axis=0) if len(bg_pixels) else bg_ref
    bg_style, bg_conf = _nearest(bg_colour, BG_STYLES)
    if not comp.any():
        absent = SceneFactors(ABSENT, ABSENT, ABSENT, ABSENT, bg_style)
        conf = {f: 0.0 for f in FIELDS}
        conf["bg_style"] = bg_conf
        return OracleReport(absent, conf, comp)

    ys, xs = np.nonzero(comp)
    h = ys.max() - ys.min() + 1
    w = xs.max() - xs.min() + 1
    fill = comp.sum() / float(h * w)
    shape, shape_conf = _nearest(np.asarray(fill), {"square": 1.0, "circle": np.pi / 4, "triangle": 0.5})
    extent = float(max(h, w))
    size, size_conf = _nearest(np.asarray(extent), {k: 2 * v for k, v in SIZES.items()})
    position, pos_conf = _nearest(np.asarray(xs.mean() + 0.5), POSITIONS)
    color, color_conf = _nearest(np.median(img[comp == 1], axis=0), FG_COLORS)
    factors = SceneFactors(shape, color, size, position, bg_style)
    conf = {
        "fg_shape": shape_conf,
        "fg_color": color_conf,
        "fg_size": size_conf,
        "fg_position": pos_conf,
        "bg_style": bg_conf,
    }
    return OracleReport(factors, conf, comp)


def factor_oracle(image: ImageTensor) -> SceneFactors:
    return analyze(image).factors


def foreground_mask(image: ImageTensor) -> Mask:
    return Mask(analyze(image).component, "image")


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------


def export_corpus(samples: list[SceneSample], out_dir: str | os.PathLike) -> Path:
    """Write PNG images, mask PNGs and ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i, s in enumerate(samples):
            img_rel = f"images/{i:06d}.png"
            mask_rel = f"masks/{i:06d}.png"
            imageio.save_image_png(s.image, out / img_rel)
            imageio.save_mask_png(s.mask, out / mask_rel)
            rec = {"image": img_rel, "mask": mask_rel, "caption": s.caption, "seed": s.seed, "factors": s.factors.as_dict()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def load_corpus(corpus_dir: str | os.PathLike) -> list[SceneSample]:
    root = Path(corpus_dir)
    out = []
    with open(root / "manifest.jsonl") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                SceneSample(
                    image=imageio.load_image_png(root / rec["image"]),
                    caption=rec["caption"],
                    mask=imageio.load_mask_png(root / rec["mask"]),
                    factors=SceneFactors(**rec["factors"]),
                    seed=int(rec["seed"]),
                )
            )
    return out
