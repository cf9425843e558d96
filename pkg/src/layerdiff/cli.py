"""Command-line entry point: ``layerdiff <command> [flags]``.

Every command accepts ``--config FILE``, an INI file whose ``[<command>]``
section (and ``[common]``) supplies flag values by their long name, with
dashes or underscores. Explicit flags win over the file. Example::

    [edit]
    target-text = a large red square on a green background
    object-text = a large red square
    background-text = on a green background
    alpha = 0.7
    seed = 7

Exit codes: 0 ok, 1 other error, 2 config/usage, 3 vocabulary, 4 training,
5 sampling, 6 I/O.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from . import core, evaluation, imageio, pipeline, reference, synthdata
from .core import (
    ConfigError,
    EditSpec,
    FormatError,
    LayerDiffError,
    SamplingError,
    TrainingError,
    VocabularyError,
)

log = logging.getLogger("layerdiff")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_VOCAB = 3
EXIT_TRAINING = 4
EXIT_SAMPLING = 5
EXIT_IO = 6

_EDIT_DEFAULTS = {f.name: f.default for f in dataclasses.fields(EditSpec)}


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map onto the config exit code."""

    def error(self, message: str):  # type: ignore[override]
        raise ConfigError(f"{self.prog}: {message}")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


# ---------------------------------------------------------------------------
# Flag groups
# ---------------------------------------------------------------------------


def _add_checkpoint(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--checkpoint",
        default=str(reference.default_checkpoint_path()),
        help="base model checkpoint (trained on first use when it is the default path and missing)",
    )


def _add_edit_flags(p: argparse.ArgumentParser) -> None:
    d = _EDIT_DEFAULTS
    g = p.add_argument_group("edit spec")
    g.add_argument("--input", default=None, help="input image PNG (required)")
    g.add_argument("--reference", default=None, help="reference background PNG; generated from the background text if omitted")
    g.add_argument("--target-text", default=None, help="full target prompt (required)")
    g.add_argument("--object-text", default=None, help="object part of the target prompt (required)")
    g.add_argument("--background-text", default=None, help="background part of the target prompt (required)")
    g.add_argument("--mask", default=d["object_mask_source"], help="'synthetic-oracle' or a 0/255 mask PNG for the input")
    g.add_argument("--alpha", type=float, default=d["alpha"], help="interpolation weight of the object embedding")
    g.add_argument("--lambda-obj", type=float, default=d["lambda_obj"], help="object loss weight")
    g.add_argument("--lambda-bg", type=float, default=d["lambda_bg"], help="background loss weight")
    g.add_argument("--embed-steps", type=int, default=d["embed_steps"], help="embedding optimization steps")
    g.add_argument("--embed-lr", type=float, default=d["embed_lr"], help="embedding optimization learning rate")
    g.add_argument("--finetune-steps", type=int, default=d["finetune_steps"], help="fine-tuning steps")
    g.add_argument("--finetune-lr", type=float, default=d["finetune_lr"], help="fine-tuning learning rate")
    g.add_argument("--sample-steps", type=int, default=d["sample_steps"], help="sampler steps")
    g.add_argument("--n-samples", type=int, default=d["n_samples"], help="output images per edit")
    g.add_argument("--seed", type=int, default=d["seed"], help="edit seed")
    g.add_argument("--guidance", choices=("plain", "iterative"), default=d["guidance"], help="sampling guidance")
    g.add_argument("--embed-mode", choices=("joint", "per_stream"), default=d["embed_mode"], help="embedding objective variant")
    g.add_argument("--subject-source", choices=("target", "input"), default=d["subject_source"], help="image whose object region the fine-tune fits")
    g.add_argument("--mask-dilation", type=int, default=d["mask_dilation"], help="dilate masks by this many pixels")
    g.add_argument("--no-embed-opt", action="store_true", default=False, help="skip embedding optimization")
    g.add_argument("--no-finetune", action="store_true", default=False, help="skip fine-tuning")


_REQUIRED_EDIT = ("input", "target_text", "object_text", "background_text")


def _spec_from_args(args: argparse.Namespace) -> EditSpec:
    for name in _REQUIRED_EDIT:
        if not getattr(args, name):
            raise ConfigError(f"missing required flag --{name.replace('_', '-')}")
    reference_image = imageio.load_image_png(args.reference) if args.reference else None
    return EditSpec(
        input_image=imageio.load_image_png(args.input),
        target_text=args.target_text,
        object_text=args.object_text,
        background_text=args.background_text,
        reference_image=reference_image,
        alpha=args.alpha,
        lambda_obj=args.lambda_obj,
        lambda_bg=args.lambda_bg,
        embed_steps=args.embed_steps,
        embed_lr=args.embed_lr,
        finetune_steps=args.finetune_steps,
        finetune_lr=args.finetune_lr,
        sample_steps=args.sample_steps,
        seed=args.seed,
        object_mask_source=args.mask,
        n_samples=args.n_samples,
        use_embed_opt=not args.no_embed_opt,
        use_finetune=not args.no_finetune,
        guidance=args.guidance,
        embed_mode=args.embed_mode,
        subject_source=args.subject_source,
        mask_dilation=args.mask_dilation,
    )


def _load_model(path: str):
    ckpt = Path(path)
    if not ckpt.is_file() and ckpt.resolve() == reference.default_checkpoint_path().resolve():
        reference.ensure_base_checkpoint(ckpt)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    return reference.load_base_model(ckpt)


def _seed_list(args: argparse.Namespace) -> list[int]:
    return [args.seed + i for i in range(args.n_seeds)]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_make_corpus(args: argparse.Namespace) -> int:
    samples = synthdata.sample_corpus(args.n, args.seed)
    manifest = synthdata.export_corpus(samples, args.out)
    print(f"wrote {len(samples)} samples to {manifest}")
    return EXIT_OK


def cmd_train_base(args: argparse.Namespace) -> int:
    from .toybackend import BackendConfig, TrainConfig, train_base

    if args.corpus:
        corpus = synthdata.load_corpus(args.corpus)
    else:
        corpus = synthdata.sample_corpus(args.corpus_size, args.corpus_seed)
    config = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        batch=args.batch,
        seed=args.seed,
        clause_dropout=args.clause_dropout,
        backend=BackendConfig(width=args.width),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = train_base(corpus, config, checkpoint_path=out, trace_path=args.trace or out.with_suffix(".trace.tsv"))
    print(f"final epoch loss {result.epoch_losses[-1]:.5f}; checkpoint {out}")
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    from .sampler import generate

    model = _load_model(args.checkpoint)
    if not args.text or not args.text.strip():
        raise ConfigError("missing required flag --text")
    res = generate(model, model.encode_text(args.text), args.seed, args.sample_steps, args.n_samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(res.images):
        imageio.save_image_png(img, out / f"sample_{k:02d}.png")
        print(out / f"sample_{k:02d}.png", synthdata.factor_oracle(img).caption)
    return EXIT_OK


def cmd_edit(args: argparse.Namespace) -> int:
    spec = _spec_from_args(args)
    out = Path(args.out) if args.out else pipeline.default_job_root() / f"edit-seed{spec.seed}"
    result = pipeline.run_edit(spec, out, _load_model(args.checkpoint))
    ran = ", ".join(result.executed) if result.executed else "none (resumed completed job)"
    print(f"job {result.job_dir}: stages run: {ran}")
    print(f"success rate {result.metrics['success_rate']:.3f} over {len(result.images)} samples")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    spec = _spec_from_args(args)
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    out = Path(args.out) if args.out else pipeline.default_job_root() / "ablation"
    table = evaluation.ablation_run(
        _load_model(args.checkpoint), spec, rows, seeds=_seed_list(args), out_dir=out, scorer=args.scorer
    )
    for r, row in table.rows.items():
        print(
            f"({r}) {row.description:45s} success={row.success_rate:.3f} "
            f"inside_mse={row.median_inside_mse} outside_mse={row.median_outside_mse} clip={row.clip_status}"
        )
    print(f"tables in {out}")
    return EXIT_OK


def cmd_alpha_sweep(args: argparse.Namespace) -> int:
    spec = _spec_from_args(args)
    alphas = [float(a) for a in args.alphas.split(",")]
    out = Path(args.out) if args.out else pipeline.default_job_root() / "alpha_sweep.csv"
    sweep = evaluation.alpha_sweep(_load_model(args.checkpoint), spec, alphas, seeds=_seed_list(args), out_path=out)
    for a in sweep.counts:
        print(f"alpha={a:.2f} successes {sweep.counts[a]}/{sweep.totals[a]}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if not args.target_text:
        raise ConfigError("missing required flag --target-text")
    expected = evaluation.expected_from_text(args.target_text)
    images = [imageio.load_image_png(p) for p in args.images]
    scores = evaluation.external_score_hook(args.images, [args.target_text] * len(images), args.scorer)
    rows = []
    for path, img, score in zip(args.images, images, scores.scores):
        rep = evaluation.edit_success(img, expected)
        rows.append([path, int(rep.success), rep.observed.caption, "" if score is None else score])
        print(f"{path}\t{'ok' if rep.success else 'fail'}\t{rep.observed.caption}")
    n_ok = sum(r[1] for r in rows)
    print(f"success {n_ok}/{len(rows)}; external score: {scores.status}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "success", "observed", "score"])
            w.writerows(rows)
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    job = Path(args.job_dir)
    if not (job / "spec.json").is_file():
        raise FileNotFoundError(f"{job} is not a job directory (no spec.json)")
    spec = json.loads((job / "spec.json").read_text())
    print(f"job {job}")
    print(f"  target: {spec.get('target_text')!r}  seed {spec.get('seed')}  alpha {spec.get('alpha')}")
    status = {}
    if (job / "status.tsv").is_file():
        for line in (job / "status.tsv").read_text().splitlines()[1:]:
            stage, st, cause = (line.split("\t") + [""])[:3]
            status[stage] = (st, cause)
    entries: dict[str, list[list[str]]] = {}
    if (job / "manifest.tsv").is_file():
        for line in (job / "manifest.tsv").read_text().splitlines()[1:]:
            parts = line.split("\t")
            entries.setdefault(parts[0], []).append(parts)
    for stage in pipeline.STAGES:
        st, cause = status.get(stage, ("pending", ""))
        arts = entries.get(stage, [])
        draws = sum(int(a[3]) for a in arts)
        ok = all((job / a[1]).is_file() and core.file_sha256(job / a[1]) == a[2] for a in arts)
        check = "verified" if arts and ok else ("MODIFIED" if arts else "-")
        extra = f"  ({cause})" if cause else ""
        print(f"  {stage:11s} {st:8s} {len(arts):2d} artifacts  {draws:8d} draws  {check}{extra}")
    metrics = job / "sample" / "metrics.json"
    if metrics.is_file():
        print(f"  success rate {json.loads(metrics.read_text())['success_rate']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="layerdiff", description=__doc__, formatter_class=_Formatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name: str, fn: Callable[[argparse.Namespace], int], help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_Formatter)
        p.add_argument("--config", default=None, help="INI file supplying flag values (flags win)")
        p.set_defaults(func=fn)
        return p

    p = add("make-corpus", cmd_make_corpus, "render a captioned synthetic corpus with masks")
    p.add_argument("--n", type=int, default=reference.CORPUS_SIZE, help="number of samples")
    p.add_argument("--seed", type=int, default=reference.CORPUS_SEED, help="corpus seed")
    p.add_argument("--out", default="corpus", help="output directory")

    cfg = reference.TRAIN_CONFIG
    p = add("train-base", cmd_train_base, "train the toy text-to-image base model")
    p.add_argument("--corpus", default=None, help="corpus directory from make-corpus; rendered in memory if omitted")
    p.add_argument("--corpus-size", type=int, default=reference.CORPUS_SIZE, help="in-memory corpus size")
    p.add_argument("--corpus-seed", type=int, default=reference.CORPUS_SEED, help="in-memory corpus seed")
    p.add_argument("--epochs", type=int, default=cfg.epochs, help="training epochs")
    p.add_argument("--lr", type=float, default=cfg.lr, help="peak learning rate")
    p.add_argument("--batch", type=int, default=cfg.batch, help="batch size")
    p.add_argument("--seed", type=int, default=cfg.seed, help="training seed")
    p.add_argument("--clause-dropout", type=float, default=cfg.clause_dropout, help="probability of each partial caption")
    p.add_argument("--width", type=int, default=cfg.backend.width, help="base channel width of the denoiser")
    p.add_argument("--out", default=str(reference.default_checkpoint_path()), help="checkpoint path")
    p.add_argument("--trace", default=None, help="per-step loss trace TSV; unset means next to the checkpoint")

    p = add("generate", cmd_generate, "sample images from a text prompt")
    _add_checkpoint(p)
    p.add_argument("--text", default=None, help="prompt (required)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--sample-steps", type=int, default=core.DEFAULT_SAMPLE_STEPS, help="sampler steps")
    p.add_argument("--n-samples", type=int, default=1, help="number of images")
    p.add_argument("--out", default="samples", help="output directory")

    p = add("edit", cmd_edit, "run (or resume) one edit job")
    _add_checkpoint(p)
    _add_edit_flags(p)
    p.add_argument("--out", default=None, help="job directory; unset means $LAYERDIFF_JOBROOT/edit-seed<seed>")

    p = add("ablate", cmd_ablate, "run ablation rows over a range of edit seeds")
    _add_checkpoint(p)
    _add_edit_flags(p)
    p.add_argument("--rows", default=",".join(evaluation.ABLATION_ROWS), help="comma-separated row letters")
    p.add_argument("--n-seeds", type=int, default=20, help="edit seeds, starting at --seed")
    p.add_argument("--scorer", default=None, help="external scorer command (line protocol); $LAYERDIFF_SCORER if unset")
    p.add_argument("--out", default=None, help="output directory for CSV tables; unset means $LAYERDIFF_JOBROOT/ablation")

    p = add("alpha-sweep", cmd_alpha_sweep, "count successful edits per interpolation weight")
    _add_checkpoint(p)
    _add_edit_flags(p)
    p.add_argument("--alphas", default=",".join(str(a) for a in evaluation.DEFAULT_ALPHAS), help="comma-separated weights")
    p.add_argument("--n-seeds", type=int, default=50, help="edit seeds, starting at --seed")
    p.add_argument("--out", default=None, help="CSV path; unset means $LAYERDIFF_JOBROOT/alpha_sweep.csv")

    p = add("eval", cmd_eval, "score images against a target caption with the factor oracle")
    p.add_argument("images", nargs="+", help="PNG images")
    p.add_argument("--target-text", default=None, help="caption the images should match (required)")
    p.add_argument("--scorer", default=None, help="external scorer command; $LAYERDIFF_SCORER if unset")
    p.add_argument("--out", default=None, help="optional CSV output")

    p = add("inspect", cmd_inspect, "summarize a job directory's manifest and status")
    p.add_argument("job_dir", help="job directory")
    return parser


def _config_defaults(parser: argparse.ArgumentParser, path: str, command: str) -> dict[str, Any]:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    values: dict[str, str] = {}
    for section in ("common", command):
        if cp.has_section(section):
            values.update(cp.items(section))
    actions = {a.dest: a for a in parser._actions}
    out: dict[str, Any] = {}
    for key, raw in values.items():
        dest = key.strip().replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("config", "help", "func"):
            raise ConfigError(f"unknown key {key!r} in config {path} [{command}]")
        if isinstance(action, argparse._StoreTrueAction):
            try:
                out[dest] = cp.BOOLEAN_STATES[raw.strip().lower()]
            except KeyError as exc:
                raise ConfigError(f"config key {key!r} expects a boolean, got {raw!r}") from exc
        elif action.type is not None:
            try:
                out[dest] = action.type(raw)
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from exc
        else:
            out[dest] = raw
        if action.choices is not None and out[dest] not in action.choices:
            raise ConfigError(f"config key {key!r} must be one of {list(action.choices)}")
    return out


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise ConfigError("no command given (try --help)")
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
        sub.set_defaults(**_config_defaults(sub, args.config, args.command))
        args = parser.parse_args(argv)
    return args


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, VocabularyError):
        return EXIT_VOCAB
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    if isinstance(exc, SamplingError):
        return EXIT_SAMPLING
    if isinstance(exc, (OSError, FormatError)):
        return EXIT_IO
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return EXIT_OTHER


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (LayerDiffError, OSError, ValueError) as exc:
        print(f"layerdiff: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
