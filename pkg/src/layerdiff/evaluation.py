"""Edit scoring, masked similarity, ablation grid and alpha sweep."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median
from typing import Any, Callable, Sequence

import numpy as np

from .core import DegenerateRegionError, EditSpec, ImageTensor, LayerDiffError, Mask, ShapeError
from . import imageio, synthdata
from .synthdata import FIELDS, WILDCARD, SceneFactors

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def expected_from_text(text: str, wildcard: Sequence[str] = ("fg_position",)) -> SceneFactors:
    """Factors a caption asks for; unnamed fields and ``wildcard`` fields match anything."""
    parsed = synthdata.parse_caption(text)
    return SceneFactors(**{f: (WILDCARD if f in wildcard else parsed.get(f, WILDCARD)) for f in FIELDS})


@dataclass(frozen=True)
class SuccessReport:
    success: bool
    observed: SceneFactors
    fields: dict[str, bool]
    confidence: dict[str, float]


def edit_success(image: ImageTensor, expected: SceneFactors) -> SuccessReport:
    if (image.height, image.width) != (synthdata.CANVAS, synthdata.CANVAS):
        raise ShapeError(f"edit_success expects a {synthdata.CANVAS}x{synthdata.CANVAS} image")
    report = synthdata.analyze(image)
    fields = {}
    for f in FIELDS:
        want = getattr(expected, f)
        if want == WILDCARD:
            continue
        fields[f] = getattr(report.factors, f) == want
    return SuccessReport(all(fields.values()), report.factors, fields, report.confidence)


def masked_similarity(img: ImageTensor, ref: ImageTensor, mask: Mask, region: str = "inside") -> float:
    """Mean squared error over the pixels inside (mask = 1) or outside (mask = 0) the mask."""
    if img.data.shape != ref.data.shape:
        raise ShapeError(f"image {img.data.shape} vs reference {ref.data.shape}")
    if mask.shape != img.data.shape[:2]:
        raise ShapeError(f"mask {mask.shape} vs image {img.data.shape[:2]}")
    if region not in ("inside", "outside"):
        raise ValueError(f"region must be 'inside' or 'outside', got {region!r}")
    sel = mask.data == (1 if region == "inside" else 0)
    if not sel.any():
        raise DegenerateRegionError(f"the {region} region of the mask is empty")
    diff = img.data.astype(np.float64)[sel] - ref.data.astype(np.float64)[sel]
    return float(np.mean(diff * diff))


# ---------------------------------------------------------------------------
# External scorer
# ---------------------------------------------------------------------------


@dataclass
class ScoreResult:
    scores: list[float | None]
    status: str  # "ok", "n/a" (no scorer) or "error: ..."


def external_score_hook(
    images: Sequence[ImageTensor | str | os.PathLike],
    texts: Sequence[str],
    scorer: str | Sequence[str] | Callable[[list[tuple[str, str]]], list[float]] | None = None,
    timeout: float = 300.0,
) -> ScoreResult:
    """Forward (image, text) pairs to an external scorer such as a CLIP service.

    Line protocol for executables: the scorer reads ``<image path>\\t<text>``
    lines on stdin and writes one float per line on stdout, in order. A
    Python callable taking the list of pairs is accepted as well. Without a
    scorer (argument or ``LAYERDIFF_SCORER``) the result is marked ``n/a``.
    """
    if len(images) != len(texts):
        raise ValueError("images and texts must have the same length")
    if scorer is None:
        scorer = os.environ.get("LAYERDIFF_SCORER") or None
    if scorer is None:
        log.info("no external scorer registered; skipping")
        return ScoreResult([None] * len(images), "n/a")

    with tempfile.TemporaryDirectory() as tmp:
        pairs = []
        for i, (img, text) in enumerate(zip(images, texts)):
            if isinstance(img, ImageTensor):
                path = Path(tmp) / f"{i:05d}.png"
                imageio.save_image_png(img, path)
            else:
                path = Path(img)
            pairs.append((str(path), text.replace("\t", " ").replace("\n", " ")))
        try:
            if callable(scorer):
                raw = list(scorer(pairs))
            else:
                cmd = shlex.split(scorer) if isinstance(scorer, str) else list(scorer)
                payload = "".join(f"{p}\t{t}\n" for p, t in pairs)
                proc = subprocess.run(cmd, input=payload, capture_output=True, text=True, timeout=timeout, check=True)
                raw = [line for line in proc.stdout.splitlines() if line.strip()]
            scores = [float(x) for x in raw]
            if len(scores) != len(pairs):
                raise ValueError(f"scorer returned {len(scores)} scores for {len(pairs)} pairs")
        except (OSError, subprocess.SubprocessError, ValueError) as exc:
            log.warning("external scorer failed: %s", exc)
            return ScoreResult([None] * len(images), f"error: {exc}")
    return ScoreResult(scores, "ok")


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

# Rows of the published ablation table as EditSpec overrides.
ABLATION_ROWS: dict[str, tuple[str, dict[str, Any]]] = {
    "a": ("without L_obj", {"lambda_obj": 0.0}),
    "b": ("without L_bg", {"lambda_bg": 0.0}),
    "c": ("lambda_obj=1", {"lambda_obj": 1.0}),
    "d": ("lambda_obj=3", {"lambda_obj": 3.0}),
    "e": ("lambda_obj=1, lambda_bg=3", {"lambda_obj": 1.0, "lambda_bg": 3.0}),
    "f": ("full method", {}),
    "g": ("without layered controlled optimization", {"use_embed_opt": False}),
    "h": ("without fine-tuning", {"use_finetune": False}),
    "i": ("without iterative guidance", {"guidance": "plain"}),
    "j": ("alpha=1", {"alpha": 1.0}),
    "k": ("alpha=0", {"alpha": 0.0}),
}


@dataclass
class EditOutcome:
    row: str
    seed: int
    sample: int
    success: bool
    inside_mse: float | None
    outside_mse: float | None
    observed: SceneFactors


@dataclass
class AblationRow:
    row: str
    description: str
    outcomes: list[EditOutcome] = field(default_factory=list)
    error: str | None = None
    clip_score: float | None = None
    clip_status: str = "n/a"

    @property
    def success_rate(self) -> float:
        return float(np.mean([o.success for o in self.outcomes])) if self.outcomes else 0.0

    def _median(self, attr: str) -> float | None:
        vals = [getattr(o, attr) for o in self.outcomes if getattr(o, attr) is not None]
        return float(median(vals)) if vals else None

    @property
    def median_inside_mse(self) -> float | None:
        return self._median("inside_mse")

    @property
    def median_outside_mse(self) -> float | None:
        return self._median("outside_mse")


@dataclass
class AblationTable:
    rows: dict[str, AblationRow]

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "setting", "n", "success_rate", "median_inside_mse", "median_outside_mse", "clip_score", "error"])
            for key, r in self.rows.items():
                w.writerow([
                    key,
                    r.description,
                    len(r.outcomes),
                    f"{r.success_rate:.4f}",
                    "" if r.median_inside_mse is None else f"{r.median_inside_mse:.6f}",
                    "" if r.median_outside_mse is None else f"{r.median_outside_mse:.6f}",
                    "n/a" if r.clip_score is None else f"{r.clip_score:.4f}",
                    r.error or "",
                ])

    def write_outcomes_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "seed", "sample", "success", "inside_mse", "outside_mse"] + list(FIELDS))
            for r in self.rows.values():
                for o in r.outcomes:
                    w.writerow(
                        [o.row, o.seed, o.sample, int(o.success), o.inside_mse, o.outside_mse]
                        + [getattr(o.observed, f) for f in FIELDS]
                    )


def _safe_mse(img: ImageTensor, ref: ImageTensor, mask: Mask, region: str) -> float | None:
    try:
        return masked_similarity(img, ref, mask, region)
    except DegenerateRegionError:
        return None


def ablation_run(
    model: Any,
    base_spec: EditSpec,
    rows: Sequence[str] = tuple(ABLATION_ROWS),
    n_seeds: int = 20,
    seeds: Sequence[int] | None = None,
    out_dir: str | os.PathLike | None = None,
    scorer: Any = None,
) -> AblationTable:
    """Run each ablation row over the same edit seeds.

    Per seed, the stages a row does not change (target generation, masks,
    embedding optimization) are computed once and shared; fine-tuned models
    are shared between rows with identical fine-tune settings. Every seed
    yields ``base_spec.n_samples`` outputs per row.
    """
    from . import pipeline

    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise ValueError(f"unknown ablation rows {unknown}")
    seed_list = list(seeds) if seeds is not None else [base_spec.seed + i for i in range(n_seeds)]
    table = AblationTable({r: AblationRow(r, ABLATION_ROWS[r][0]) for r in rows})
    expected = expected_from_text(base_spec.target_text)
    row_images: dict[str, list[ImageTensor]] = {r: [] for r in rows}
    for seed in seed_list:
        spec_s = dataclasses.replace(base_spec, seed=seed)
        prep = pipeline.prepare(model, spec_s, optimize=any(ABLATION_ROWS[r][1].get("use_embed_opt", True) for r in rows))
        tuned_cache: dict[tuple, Any] = {}
        for r in rows:
            row = table.rows[r]
            if row.error:
                continue
            try:
                spec_r = dataclasses.replace(spec_s, **ABLATION_ROWS[r][1])
                key = (spec_r.alpha, spec_r.lambda_obj, spec_r.lambda_bg, spec_r.use_embed_opt, spec_r.use_finetune)
                if key not in tuned_cache:
                    tuned_cache[key] = pipeline.tune(prep, spec_r)
                embeds, tuned = tuned_cache[key]
                images = pipeline.render(tuned, spec_r, embeds).images
            except LayerDiffError as exc:
                log.warning("ablation row %s failed at seed %d: %s", r, seed, exc)
                row.error = f"{type(exc).__name__}: {exc}"
                continue
            if scorer is not None:
                row_images[r].extend(images)
            for k, img in enumerate(images):
                rep = edit_success(img, expected)
                row.outcomes.append(
                    EditOutcome(
                        r,
                        seed,
                        k,
                        rep.success,
                        _safe_mse(img, prep.subject_image(spec_r), prep.subject_mask_image(spec_r), "inside"),
                        _safe_mse(img, prep.reference, prep.reference_mask, "outside"),
                        rep.observed,
                    )
                )
        log.info(
            "seed %d: %s", seed, ", ".join(f"{r}={table.rows[r].success_rate:.2f}" for r in rows)
        )
    if scorer is not None:
        for r, imgs in row_images.items():
            res = external_score_hook(imgs, [base_spec.target_text] * len(imgs), scorer)
            table.rows[r].clip_status = res.status
            if res.status == "ok" and res.scores:
                table.rows[r].clip_score = float(np.mean(res.scores))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.write_csv(out / "ablation.csv")
        table.write_outcomes_csv(out / "ablation_outcomes.csv")
    return table


# ---------------------------------------------------------------------------
# Alpha sweep
# ---------------------------------------------------------------------------

DEFAULT_ALPHAS = (0.0, 0.3, 0.7, 1.0)


@dataclass
class AlphaSweep:
    counts: dict[float, int]
    totals: dict[float, int]

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["alpha", "successes", "n", "success_rate"])
            for a in self.counts:
                n = self.totals[a]
                w.writerow([a, self.counts[a], n, f"{self.counts[a] / n:.4f}" if n else ""])


def alpha_sweep(
    model: Any,
    spec: EditSpec,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    n_seeds: int = 50,
    seeds: Sequence[int] | None = None,
    out_path: str | os.PathLike | None = None,
) -> AlphaSweep:
    """Count successful edits per interpolation weight over shared seeds."""
    from . import pipeline

    seed_list = list(seeds) if seeds is not None else [spec.seed + i for i in range(n_seeds)]
    expected = expected_from_text(spec.target_text)
    counts = {float(a): 0 for a in alphas}
    totals = {float(a): 0 for a in alphas}
    for seed in seed_list:
        spec_s = dataclasses.replace(spec, seed=seed)
        prep = pipeline.prepare(model, spec_s)
        for a in alphas:
            spec_a = dataclasses.replace(spec_s, alpha=float(a))
            embeds, tuned = pipeline.tune(prep, spec_a)
            for img in pipeline.render(tuned, spec_a, embeds).images:
                counts[float(a)] += int(edit_success(img, expected).success)
                totals[float(a)] += 1
    sweep = AlphaSweep(counts, totals)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        sweep.write_csv(out_path)
    return sweep
