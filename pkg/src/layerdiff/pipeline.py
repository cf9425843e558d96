"""Edit-job orchestration: target generation, masks, embedding optimization,
fine-tuning and guided sampling, with a resumable job directory.

Job directory layout::

    job_dir/
      spec.json          scalar spec fields, image digests, base model checksum
      status.tsv         stage <TAB> pending|done|failed <TAB> cause
      manifest.tsv       stage <TAB> relative path <TAB> sha256 <TAB> rng draws
      inputs/            input (and supplied reference) image containers
      target-gen/ masks/ embed-opt/ fine-tune/ sample/
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .core import (
    ConfigError,
    EditSpec,
    ImageTensor,
    LayerDiffError,
    Latent,
    Mask,
    TextEmbedding,
    derive_seed,
    file_sha256,
    load_tensor,
    save_tensor,
)
from . import embedopt, evaluation, imageio, masks, sampler
from .finetune import finetune
from .toybackend import ToyDiffusionModel, load_checkpoint, save_checkpoint, write_trace

log = logging.getLogger(__name__)

STAGES = ("target-gen", "masks", "embed-opt", "fine-tune", "sample")


def stage_seed(seed: int, stage: str) -> int:
    return derive_seed(seed, stage)


def generate_target_image(model: ToyDiffusionModel, text: str, seed: int, sample_steps: int = 50) -> ImageTensor:
    """Plain sample conditioned on the full target text."""
    return _generate(model, text, seed, sample_steps)[0]


def _generate(model: ToyDiffusionModel, text: str, seed: int, sample_steps: int) -> tuple[ImageTensor, int]:
    if not text or not text.strip():
        raise ConfigError("text prompt must be non-empty")
    res = sampler.generate(model, model.encode_text(text), seed, sample_steps)
    return res.images[0], res.draws


# ---------------------------------------------------------------------------
# In-memory stages
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    """Outputs of the stages that precede fine-tuning."""

    model: ToyDiffusionModel
    spec: EditSpec
    target: ImageTensor
    reference: ImageTensor
    input_mask: Mask
    target_mask: Mask
    reference_mask: Mask
    e_a: TextEmbedding
    e_b: TextEmbedding
    opt: embedopt.EmbedOptResult | None = None
    draws: dict[str, int] = field(default_factory=dict)

    def latent(self, image: ImageTensor) -> Latent:
        return self.model.codec.encode(image)

    def latent_mask(self, mask: Mask) -> Mask:
        return masks.to_latent_res(mask, self.model.codec.latent_shape)

    def subject_image(self, spec: EditSpec | None = None) -> ImageTensor:
        spec = spec or self.spec
        return self.target if spec.subject_source == "target" else self.spec.input_image

    def subject_mask_image(self, spec: EditSpec | None = None) -> Mask:
        spec = spec or self.spec
        return self.target_mask if spec.subject_source == "target" else self.input_mask


@dataclass
class Embeddings:
    e_a_hat: TextEmbedding
    e_b_hat: TextEmbedding
    e_opt: TextEmbedding


def run_target_stage(model: ToyDiffusionModel, spec: EditSpec) -> tuple[ImageTensor, ImageTensor, int]:
    seed = stage_seed(spec.seed, "target-gen")
    target, draws = _generate(model, spec.target_text, seed, spec.sample_steps)
    if spec.reference_image is not None:
        reference = spec.reference_image
    else:
        reference, more = _generate(model, spec.background_text, stage_seed(spec.seed, "reference-gen"), spec.sample_steps)
        draws += more
    return target, reference, draws


def run_mask_stage(spec: EditSpec, target: ImageTensor, reference: ImageTensor) -> tuple[Mask, Mask, Mask]:
    provider = masks.MaskProvider.from_spec(spec.object_mask_source)
    oracle = masks.MaskProvider()
    found = (
        masks.get_mask(provider, spec.input_image),
        masks.get_mask(oracle, target),
        masks.get_mask(oracle, reference),
    )
    return tuple(masks.dilate(m, spec.mask_dilation) for m in found)  # type: ignore[return-value]


def run_embed_stage(
    model: ToyDiffusionModel, spec: EditSpec, input_mask: Mask, reference: ImageTensor
) -> tuple[TextEmbedding, TextEmbedding, embedopt.EmbedOptResult]:
    e_a, e_b = embedopt.decompose_target_text(model, spec)
    shape = model.codec.latent_shape
    result = embedopt.optimize_embeddings(
        model,
        model.codec.encode(spec.input_image),
        masks.to_latent_res(input_mask, shape),
        e_a,
        e_b,
        steps=spec.embed_steps,
        lr=spec.embed_lr,
        seed=stage_seed(spec.seed, "embed-opt"),
        mode=spec.embed_mode,
        reference=model.codec.encode(reference) if spec.embed_mode == "per_stream" else None,
    )
    return e_a, e_b, result


def prepare(model: ToyDiffusionModel, spec: EditSpec, optimize: bool = True) -> Prepared:
    """Run target generation, masks and (optionally) embedding optimization in memory."""
    model.freeze()
    target, reference, draws = run_target_stage(model, spec)
    m_in, m_t, m_r = run_mask_stage(spec, target, reference)
    prep = Prepared(model, spec, target, reference, m_in, m_t, m_r, *embedopt.decompose_target_text(model, spec))
    prep.draws["target-gen"] = draws
    if optimize and spec.use_embed_opt:
        _, _, prep.opt = run_embed_stage(model, spec, m_in, reference)
        prep.draws["embed-opt"] = prep.opt.draws
    return prep


def embeddings_for(prep: Prepared, spec: EditSpec) -> Embeddings:
    if spec.use_embed_opt:
        if prep.opt is None:
            raise ConfigError("embedding optimization was not run for this edit")
        e_a_hat, e_b_hat = prep.opt.e_a_hat, prep.opt.e_b_hat
    else:
        e_a_hat, e_b_hat = prep.e_a, prep.e_b
    return Embeddings(e_a_hat, e_b_hat, embedopt.interpolate(e_a_hat, e_b_hat, spec.alpha).freeze())


def run_finetune_stage(
    model: ToyDiffusionModel,
    spec: EditSpec,
    embeds: Embeddings,
    subject: ImageTensor,
    subject_mask: Mask,
    reference: ImageTensor,
    reference_mask: Mask,
):
    shape = model.codec.latent_shape
    return finetune(
        model,
        model.codec.encode(subject),
        model.codec.encode(reference),
        masks.to_latent_res(subject_mask, shape),
        masks.to_latent_res(reference_mask, shape),
        embeds.e_opt,
        spec.weights,
        steps=spec.finetune_steps,
        lr=spec.finetune_lr,
        seed=stage_seed(spec.seed, "fine-tune"),
    )


def tune(prep: Prepared, spec: EditSpec) -> tuple[Embeddings, ToyDiffusionModel]:
    """Interpolate the embeddings for ``spec`` and fine-tune a copy of the base model."""
    embeds = embeddings_for(prep, spec)
    if not spec.use_finetune:
        return embeds, prep.model
    res = run_finetune_stage(
        prep.model,
        spec,
        embeds,
        prep.subject_image(spec),
        prep.subject_mask_image(spec),
        prep.reference,
        prep.reference_mask,
    )
    return embeds, res.model


def render(model: ToyDiffusionModel, spec: EditSpec, embeds: Embeddings) -> sampler.SampleResult:
    cfg = sampler.SamplerConfig(
        sample_steps=spec.sample_steps,
        guidance=spec.guidance,
        seed=stage_seed(spec.seed, "sample"),
    )
    conds = sampler.condition_schedule(cfg.sample_steps, embeds.e_opt, embeds.e_a_hat, cfg.guidance)
    return sampler.sample(model, cfg, conds, n_samples=spec.n_samples)


# ---------------------------------------------------------------------------
# Persistent jobs
# ---------------------------------------------------------------------------


@dataclass
class EditResult:
    images: list[ImageTensor]
    metrics: dict[str, Any]
    job_dir: Path
    executed: list[str]


class EditJob:
    """A job directory with per-stage status and a hashed artifact manifest."""

    def __init__(self, spec: EditSpec, job_dir: str | os.PathLike):
        self.spec = spec
        self.job_dir = Path(job_dir)
        self.stage_status: dict[str, tuple[str, str]] = {s: ("pending", "") for s in STAGES}
        self.artifacts: dict[str, list[tuple[str, str, int]]] = {s: [] for s in STAGES}

    # -- bookkeeping ------------------------------------------------------

    @property
    def status_path(self) -> Path:
        return self.job_dir / "status.tsv"

    @property
    def manifest_path(self) -> Path:
        return self.job_dir / "manifest.tsv"

    def load(self) -> None:
        if self.status_path.is_file():
            for line in self.status_path.read_text().splitlines()[1:]:
                stage, status, cause = (line.split("\t") + [""])[:3]
                if stage in self.stage_status:
                    self.stage_status[stage] = (status, cause)
        if self.manifest_path.is_file():
            for line in self.manifest_path.read_text().splitlines()[1:]:
                stage, rel, digest, draws = line.split("\t")
                if stage in self.artifacts:
                    self.artifacts[stage].append((rel, digest, int(draws)))

    def save(self) -> None:
        lines = ["stage\tstatus\tcause"] + [f"{s}\t{st}\t{cause}" for s, (st, cause) in self.stage_status.items()]
        _write_text(self.status_path, "\n".join(lines) + "\n")
        rows = ["stage\tpath\tsha256\tdraws"]
        for s in STAGES:
            rows += [f"{s}\t{rel}\t{digest}\t{draws}" for rel, digest, draws in self.artifacts[s]]
        _write_text(self.manifest_path, "\n".join(rows) + "\n")

    def verified(self, stage: str) -> bool:
        if self.stage_status[stage][0] != "done" or not self.artifacts[stage]:
            return False
        for rel, digest, _ in self.artifacts[stage]:
            path = self.job_dir / rel
            if not path.is_file() or file_sha256(path) != digest:
                return False
        return True

    def record(self, stage: str, paths: list[Path], draws: int) -> None:
        """Register a finished stage; the stage's RNG draw count goes on its first artifact."""
        entries = []
        for i, p in enumerate(paths):
            entries.append((p.relative_to(self.job_dir).as_posix(), file_sha256(p), draws if i == 0 else 0))
        self.artifacts[stage] = entries
        self.stage_status[stage] = ("done", "")

    def stage_draws(self, stage: str) -> int:
        return sum(d for _, _, d in self.artifacts[stage])

    def stage_dir(self, stage: str) -> Path:
        d = self.job_dir / stage
        d.mkdir(parents=True, exist_ok=True)
        return d


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _spec_record(spec: EditSpec, model: ToyDiffusionModel) -> dict[str, Any]:
    rec = spec.config_record()
    rec["base_model_checksum"] = model.checksum()
    return rec


def run_edit(
    spec: EditSpec,
    job_dir: str | os.PathLike,
    model: ToyDiffusionModel | str | os.PathLike,
) -> EditResult:
    """Run (or resume) an edit job.

    Stages already marked done whose artifacts still match their recorded
    hashes are loaded instead of recomputed; the first stage that fails
    verification and every stage after it rerun.
    """
    if not isinstance(model, ToyDiffusionModel):
        model = load_checkpoint(model)
    model.freeze()
    job = EditJob(spec, job_dir)
    job.job_dir.mkdir(parents=True, exist_ok=True)
    spec_path = job.job_dir / "spec.json"
    record = json.loads(json.dumps(_spec_record(spec, model)))
    if spec_path.is_file():
        stored = json.loads(spec_path.read_text())
        if stored != record:
            changed = sorted(k for k in set(stored) | set(record) if stored.get(k) != record.get(k))
            raise ConfigError(f"{job.job_dir} belongs to a different edit spec (differs in {', '.join(changed)})")
        job.load()
    else:
        _write_text(spec_path, json.dumps(record, indent=2, sort_keys=True) + "\n")
    inputs = job.stage_dir("inputs")
    # spec.json already pins the input digests, so existing copies are left alone.
    if not (inputs / "input.tensor").is_file():
        save_tensor(spec.input_image, inputs / "input.tensor", role="input")
        imageio.save_image_png(spec.input_image, inputs / "input.png")
    if spec.reference_image is not None and not (inputs / "reference.tensor").is_file():
        save_tensor(spec.reference_image, inputs / "reference.tensor", role="reference")

    state: dict[str, Any] = {}
    executed: list[str] = []
    invalid = False
    for stage in STAGES:
        if not invalid and job.verified(stage):
            _load_stage(job, stage, state, model)
            continue
        invalid = True
        for later in STAGES[STAGES.index(stage):]:
            job.stage_status[later] = ("pending", "")
            job.artifacts[later] = []
        shutil.rmtree(job.job_dir / stage, ignore_errors=True)
        try:
            _run_stage(job, stage, state, model)
        except (LayerDiffError, OSError) as exc:
            job.stage_status[stage] = ("failed", f"{type(exc).__name__}: {exc}".replace("\t", " ").replace("\n", " "))
            job.save()
            raise
        executed.append(stage)
        job.save()
    log.info("job %s: ran %s", job.job_dir, ", ".join(executed) or "nothing (all stages cached)")
    return EditResult(state["images"], state["metrics"], job.job_dir, executed)


def _run_stage(job: EditJob, stage: str, state: dict[str, Any], model: ToyDiffusionModel) -> None:
    spec = job.spec
    d = job.stage_dir(stage)
    if stage == "target-gen":
        target, reference, draws = run_target_stage(model, spec)
        save_tensor(target, d / "target.tensor", role="O_t")
        save_tensor(reference, d / "reference.tensor", role="O_r")
        imageio.save_image_png(target, d / "target.png")
        imageio.save_image_png(reference, d / "reference.png")
        job.record(stage, [d / "target.tensor", d / "reference.tensor"], draws)
        state.update(target=target, reference=reference)
    elif stage == "masks":
        m_in, m_t, m_r = run_mask_stage(spec, state["target"], state["reference"])
        paths = []
        for name, m in (("input_mask", m_in), ("target_mask", m_t), ("reference_mask", m_r)):
            save_tensor(m, d / f"{name}.tensor", role=name)
            masks.save_png(m, d / f"{name}.png")
            paths.append(d / f"{name}.tensor")
        job.record(stage, paths, 0)
        state.update(input_mask=m_in, target_mask=m_t, reference_mask=m_r)
    elif stage == "embed-opt":
        if spec.use_embed_opt:
            e_a, e_b, res = run_embed_stage(model, spec, state["input_mask"], state["reference"])
            e_a_hat, e_b_hat, draws = res.e_a_hat, res.e_b_hat, res.draws
            write_trace(d / "trace.tsv", ["step", "masked_loss"], list(enumerate(res.losses)))
        else:
            e_a, e_b = embedopt.decompose_target_text(model, spec)
            e_a_hat, e_b_hat, draws = e_a, e_b, 0
        e_opt = embedopt.interpolate(e_a_hat, e_b_hat, spec.alpha).freeze()
        paths = []
        for name, e in (("e_a_hat", e_a_hat), ("e_b_hat", e_b_hat), ("e_opt", e_opt), ("e_a", e_a), ("e_b", e_b)):
            save_tensor(e, d / f"{name}.tensor", role=name)
            paths.append(d / f"{name}.tensor")
        job.record(stage, paths, draws)
        state["embeds"] = Embeddings(e_a_hat, e_b_hat, e_opt)
    elif stage == "fine-tune":
        ckpt = d / "model.ckpt"
        if spec.use_finetune:
            subject = state["target"] if spec.subject_source == "target" else spec.input_image
            subject_mask = state["target_mask"] if spec.subject_source == "target" else state["input_mask"]
            res = run_finetune_stage(
                model, spec, state["embeds"], subject, subject_mask, state["reference"], state["reference_mask"]
            )
            write_trace(d / "trace.tsv", ["step", "L_obj", "L_bg", "L_total"], [(i, *row) for i, row in enumerate(res.trace)])
            tuned, draws = res.model, res.draws
        else:
            tuned, draws = model, 0
        save_checkpoint(tuned, ckpt, {"stage": "fine-tune", "finetuned": spec.use_finetune})
        job.record(stage, [ckpt], draws)
        state["model"] = tuned
    elif stage == "sample":
        res = render(state["model"], spec, state["embeds"])
        paths = []
        for k, img in enumerate(res.images):
            save_tensor(img, d / f"sample_{k:02d}.tensor", role="output")
            imageio.save_image_png(img, d / f"sample_{k:02d}.png")
            paths.append(d / f"sample_{k:02d}.tensor")
        metrics = compute_metrics(spec, res.images, state)
        (d / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        paths.append(d / "metrics.json")
        job.record(stage, paths, res.draws)
        state.update(images=res.images, metrics=metrics)


def _load_stage(job: EditJob, stage: str, state: dict[str, Any], model: ToyDiffusionModel) -> None:
    d = job.job_dir / stage
    if stage == "target-gen":
        state.update(target=load_tensor(d / "target.tensor", ImageTensor), reference=load_tensor(d / "reference.tensor", ImageTensor))
    elif stage == "masks":
        for name in ("input_mask", "target_mask", "reference_mask"):
            state[name] = load_tensor(d / f"{name}.tensor", Mask)
    elif stage == "embed-opt":
        state["embeds"] = Embeddings(*(load_tensor(d / f"{n}.tensor", TextEmbedding) for n in ("e_a_hat", "e_b_hat", "e_opt")))
    elif stage == "fine-tune":
        state["model"] = load_checkpoint(d / "model.ckpt").freeze()
    elif stage == "sample":
        n = job.spec.n_samples
        state["images"] = [load_tensor(d / f"sample_{k:02d}.tensor", ImageTensor) for k in range(n)]
        state["metrics"] = json.loads((d / "metrics.json").read_text())


def compute_metrics(spec: EditSpec, images: list[ImageTensor], state: dict[str, Any]) -> dict[str, Any]:
    """Oracle factors, success and masked MSEs for each output image."""
    expected = evaluation.expected_from_text(spec.target_text)
    subject = state["target"] if spec.subject_source == "target" else spec.input_image
    subject_mask = state["target_mask"] if spec.subject_source == "target" else state["input_mask"]
    outputs = []
    for img in images:
        rep = evaluation.edit_success(img, expected)
        outputs.append(
            {
                "factors": rep.observed.as_dict(),
                "success": rep.success,
                "inside_mse_vs_subject": evaluation._safe_mse(img, subject, subject_mask, "inside"),
                "outside_mse_vs_reference": evaluation._safe_mse(img, state["reference"], state["reference_mask"], "outside"),
            }
        )
    return {
        "expected": expected.as_dict(),
        "success_rate": sum(o["success"] for o in outputs) / len(outputs),
        "outputs": outputs,
    }


def default_job_root() -> Path:
    return Path(os.environ.get("LAYERDIFF_JOBROOT", "jobs"))
