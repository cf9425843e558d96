from __future__ import annotations

import dataclasses
import re
import subprocess
import sys

import pytest

from layerdiff import cli, imageio, synthdata
from layerdiff.core import EditSpec


def _subparsers():
    parser = cli.build_parser()
    return parser._subparsers._group_actions[0].choices


def test_commands_present():
    assert set(_subparsers()) == {"make-corpus", "train-base", "generate", "edit", "ablate", "alpha-sweep", "eval", "inspect"}


@pytest.mark.parametrize("command", ["make-corpus", "train-base", "generate", "edit", "ablate", "alpha-sweep", "eval", "inspect"])
def test_help_lists_every_flag_with_default(command):
    sub = _subparsers()[command]
    text = re.sub(r"\s+", " ", sub.format_help())
    flags = [a.option_strings[-1] for a in sub._actions if a.option_strings and a.dest != "help"]
    for i, flag in enumerate(flags):
        start = text.index(f" {flag} ", text.index("options:"))
        nxt = [text.find(f" {f} ", start + 1) for f in flags[i + 1 :]]
        nxt = [n for n in nxt if n > 0]
        chunk = text[start : min(nxt) if nxt else len(text)]
        assert "(default:" in chunk, flag


def test_edit_flag_defaults_match_spec():
    sub = _subparsers()["edit"]
    defaults = {a.dest: a.default for a in sub._actions}
    spec_defaults = {f.name: f.default for f in dataclasses.fields(EditSpec)}
    for name in ("alpha", "lambda_obj", "lambda_bg", "embed_steps", "embed_lr", "finetune_steps", "finetune_lr",
                 "sample_steps", "n_samples", "seed", "guidance", "embed_mode", "subject_source", "mask_dilation"):
        assert defaults[name] == spec_defaults[name], name
    assert (defaults["alpha"], defaults["lambda_obj"], defaults["lambda_bg"]) == (0.7, 2.0, 1.0)
    assert (defaults["embed_steps"], defaults["finetune_steps"], defaults["sample_steps"]) == (500, 250, 50)


@pytest.fixture(scope="module")
def pngs(tmp_path_factory):
    d = tmp_path_factory.mktemp("png")
    src = synthdata.render_scene(synthdata.SceneFactors("square", "red", "large", "center", "blue"), 1)
    ref = synthdata.render_scene(synthdata.SceneFactors("circle", "blue", "small", "left", "green"), 2)
    imageio.save_image_png(src.image, d / "in.png")
    imageio.save_image_png(ref.image, d / "ref.png")
    return d


def _edit_args(pngs, ckpt, out, *extra):
    return [
        "edit", "--checkpoint", str(ckpt), "--input", str(pngs / "in.png"), "--reference", str(pngs / "ref.png"),
        "--target-text", "a large red square on a green background", "--object-text", "a large red square",
        "--background-text", "on a green background", "--alpha", "0.7", "--lambda-obj", "2", "--lambda-bg", "1",
        "--seed", "7", "--embed-steps", "3", "--finetune-steps", "3", "--sample-steps", "4", "--n-samples", "1",
        "--out", str(out), *extra,
    ]


def test_edit_then_resume_then_inspect(pngs, tiny_ckpt, tmp_path, capsys):
    out = tmp_path / "job"
    assert cli.main(_edit_args(pngs, tiny_ckpt, out)) == 0
    assert "target-gen, masks, embed-opt, fine-tune, sample" in capsys.readouterr().out
    assert (out / "sample" / "sample_00.png").is_file()
    assert cli.main(_edit_args(pngs, tiny_ckpt, out)) == 0
    assert "none (resumed completed job)" in capsys.readouterr().out
    assert cli.main(["inspect", str(out)]) == 0
    text = capsys.readouterr().out
    for stage in ("target-gen", "masks", "embed-opt", "fine-tune", "sample"):
        assert re.search(rf"{stage}\s+done .* verified", text), stage


def test_missing_object_text_is_config_error(pngs, tiny_ckpt, tmp_path, capsys):
    args = _edit_args(pngs, tiny_ckpt, tmp_path / "j")
    i = args.index("--object-text")
    del args[i : i + 2]
    assert cli.main(args) == cli.EXIT_CONFIG
    assert "--object-text" in capsys.readouterr().err


def test_usage_errors_are_config_errors(capsys):
    assert cli.main(["edit", "--no-such-flag"]) == cli.EXIT_CONFIG
    assert cli.main(["edit", "--alpha", "lots"]) == cli.EXIT_CONFIG
    assert cli.main([]) == cli.EXIT_CONFIG
    assert cli.main(["frobnicate"]) == cli.EXIT_CONFIG


def test_vocabulary_error_exit_code(pngs, tiny_ckpt, tmp_path, capsys):
    args = _edit_args(pngs, tiny_ckpt, tmp_path / "j")
    args[args.index("--object-text") + 1] = "a large magenta square"
    assert cli.main(args) == cli.EXIT_VOCAB
    assert "magenta" in capsys.readouterr().err


def test_io_error_exit_code(pngs, tiny_ckpt, tmp_path, capsys):
    args = _edit_args(pngs, tiny_ckpt, tmp_path / "j")
    args[args.index("--input") + 1] = str(tmp_path / "nope.png")
    assert cli.main(args) == cli.EXIT_IO
    assert cli.main(["inspect", str(tmp_path)]) == cli.EXIT_IO


def test_exit_code_table():
    from layerdiff import core

    assert cli.exit_code_for(core.ConfigError("x")) == 2
    assert cli.exit_code_for(core.VocabularyError("x")) == 3
    assert cli.exit_code_for(core.TrainingError("x")) == 4
    assert cli.exit_code_for(core.OptimizationError("x")) == 4
    assert cli.exit_code_for(core.SamplingError("x")) == 5
    assert cli.exit_code_for(OSError("x")) == 6
    assert cli.exit_code_for(core.FormatError("x")) == 6
    assert len({2, 3, 4, 5, 6}) == 5


def test_config_file_merges_under_flags(pngs, tiny_ckpt, tmp_path):
    cfg = tmp_path / "edit.ini"
    cfg.write_text(
        "[common]\nseed = 3\n\n[edit]\n"
        f"input = {pngs / 'in.png'}\n"
        "target-text = a large red square on a green background\n"
        "object_text = a large red square\n"
        "background-text = on a green background\n"
        "alpha = 0.4\nembed-steps = 2\nno-finetune = yes\n"
    )
    args = cli.parse_args(["edit", "--config", str(cfg), "--alpha", "0.9"])
    assert args.alpha == 0.9  # flag wins
    assert args.embed_steps == 2 and args.seed == 3 and args.no_finetune is True
    assert args.object_text == "a large red square"
    spec = cli._spec_from_args(args)
    assert spec.use_finetune is False and spec.alpha == 0.9


def test_bad_config_files(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("this is not ini\n")
    assert cli.main(["edit", "--config", str(bad)]) == cli.EXIT_CONFIG
    bad.write_text("[edit]\nflavour = strawberry\n")
    assert cli.main(["edit", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert "flavour" in capsys.readouterr().err
    bad.write_text("[edit]\nalpha = high\n")
    assert cli.main(["edit", "--config", str(bad)]) == cli.EXIT_CONFIG
    bad.write_text("[edit]\nguidance = sideways\n")
    assert cli.main(["edit", "--config", str(bad)]) == cli.EXIT_CONFIG


def test_make_corpus_and_eval(tmp_path, capsys):
    assert cli.main(["make-corpus", "--n", "5", "--seed", "1", "--out", str(tmp_path / "c")]) == 0
    manifest = (tmp_path / "c" / "manifest.jsonl").read_text().splitlines()
    assert len(manifest) == 5
    imgs = sorted(str(p) for p in (tmp_path / "c" / "images").glob("*.png"))
    capsys.readouterr()
    assert cli.main(["eval", *imgs, "--target-text", "a small red circle", "--out", str(tmp_path / "e.csv")]) == 0
    out = capsys.readouterr().out
    assert "external score: n/a" in out
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 6


def test_generate(tiny_ckpt, tmp_path, capsys):
    assert cli.main(["generate", "--checkpoint", str(tiny_ckpt), "--text", "a red square", "--sample-steps", "3",
                     "--n-samples", "2", "--out", str(tmp_path / "g")]) == 0
    assert len(list((tmp_path / "g").glob("*.png"))) == 2
    assert cli.main(["generate", "--checkpoint", str(tiny_ckpt), "--text", "a pink square", "--out", str(tmp_path)]) == cli.EXIT_VOCAB


def test_jobroot_env(pngs, tiny_ckpt, tmp_path, monkeypatch):
    monkeypatch.setenv("LAYERDIFF_JOBROOT", str(tmp_path / "root"))
    args = _edit_args(pngs, tiny_ckpt, "x")
    i = args.index("--out")
    del args[i : i + 2]
    assert cli.main(args) == 0
    assert (tmp_path / "root" / "edit-seed7" / "manifest.tsv").is_file()


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "layerdiff.cli", "edit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--lambda-obj" in proc.stdout and "(default: 2.0)" in proc.stdout


def test_ablate_and_alpha_sweep(pngs, tiny_ckpt, tmp_path, capsys):
    base = _edit_args(pngs, tiny_ckpt, tmp_path / "abl")[1:]
    assert cli.main(["ablate", *base, "--rows", "f,i", "--n-seeds", "1"]) == 0
    assert (tmp_path / "abl" / "ablation.csv").is_file()
    assert "(f) full method" in capsys.readouterr().out
    base = _edit_args(pngs, tiny_ckpt, tmp_path / "sweep.csv")[1:]
    assert cli.main(["alpha-sweep", *base, "--alphas", "0,1", "--n-seeds", "1"]) == 0
    assert "alpha=1.00 successes" in capsys.readouterr().out
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 3
