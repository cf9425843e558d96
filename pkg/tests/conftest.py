from __future__ import annotations

import pytest

from layerdiff import synthdata
from layerdiff.core import EditSpec
from layerdiff.toybackend import BackendConfig, ToyDiffusionModel, save_checkpoint

EDIT_INPUT = synthdata.SceneFactors("square", "red", "large", "center", "blue")
EDIT_TARGET = "a large red square on a green background"
EDIT_OBJECT = "a large red square"
EDIT_BACKGROUND = "on a green background"


@pytest.fixture(scope="session")
def tiny_model() -> ToyDiffusionModel:
    """Untrained width-8 model: fast, deterministic, fine for contracts."""
    return ToyDiffusionModel(BackendConfig(width=8), seed=0).freeze()


@pytest.fixture(scope="session")
def tiny_ckpt(tmp_path_factory, tiny_model):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    save_checkpoint(tiny_model, path)
    return path


@pytest.fixture(scope="session")
def edit_input():
    return synthdata.render_scene(EDIT_INPUT, 1).image


def make_spec(image, **kw) -> EditSpec:
    base = dict(
        target_text=EDIT_TARGET,
        object_text=EDIT_OBJECT,
        background_text=EDIT_BACKGROUND,
        embed_steps=4,
        finetune_steps=4,
        sample_steps=5,
        n_samples=2,
    )
    base.update(kw)
    return EditSpec(image, **base)


@pytest.fixture
def small_spec(edit_input):
    return make_spec(edit_input)


@pytest.fixture(scope="session")
def base_model():
    """The cached reference checkpoint (trained on first use, about 45 min)."""
    from layerdiff import reference

    return reference.load_base_model()


# Edit experiment on the trained model: 10 edit seeds x 2 samples = 20 seeded
# outcomes per ablation row, each sample drawn from its own sampler stream.
EDIT_SEEDS = list(range(10))
SAMPLES_PER_SEED = 2
ABLATION_ROWS = ["a", "b", "f", "h", "i"]
# Mask growth radius for the edit experiment, calibrated on held-out edit
# seeds 10-19: radius 0 succeeds 0.15, radius 3 succeeds 0.65. Generated
# objects carry a soft halo the oracle mask leaves out.
EDIT_DILATION = 3


@pytest.fixture(scope="session")
def ablation(base_model, tmp_path_factory):
    from layerdiff import evaluation

    image = synthdata.render_scene(EDIT_INPUT, 1).image
    spec = EditSpec(
        image, EDIT_TARGET, EDIT_OBJECT, EDIT_BACKGROUND, n_samples=SAMPLES_PER_SEED, mask_dilation=EDIT_DILATION
    )
    out = tmp_path_factory.mktemp("ablation")
    table = evaluation.ablation_run(base_model, spec, ABLATION_ROWS, seeds=EDIT_SEEDS, out_dir=out)
    for r, row in table.rows.items():
        print(
            f"row ({r}) {row.description}: success {row.success_rate:.3f} "
            f"inside {row.median_inside_mse} outside {row.median_outside_mse}"
        )
    return table


# ---------------------------------------------------------------------------
# Acceptance reporting: one line per criterion in the terminal summary
# ---------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    _CRITERIA[n] = (ok, detail)
    print(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
