from __future__ import annotations

import csv
import sys

import numpy as np
import pytest

from layerdiff import evaluation, synthdata
from layerdiff.core import DegenerateRegionError, ImageTensor, Mask, ShapeError
from layerdiff.synthdata import SceneFactors
from conftest import make_spec


def test_expected_from_text():
    exp = evaluation.expected_from_text("a large red square on a green background")
    assert exp == SceneFactors("square", "red", "large", "*", "green")
    assert evaluation.expected_from_text("on a sand background") == SceneFactors("*", "*", "*", "*", "sand")


def test_edit_success_on_rendered_scenes():
    exp = evaluation.expected_from_text("a large red square on a green background")
    hit = synthdata.render_scene(SceneFactors("square", "red", "large", "left", "green"), 0).image
    miss = synthdata.render_scene(SceneFactors("square", "red", "large", "left", "blue"), 0).image
    assert evaluation.edit_success(hit, exp).success
    rep = evaluation.edit_success(miss, exp)
    assert not rep.success and rep.fields == {"fg_shape": True, "fg_color": True, "fg_size": True, "bg_style": False}
    with pytest.raises(ShapeError):
        evaluation.edit_success(ImageTensor(np.zeros((8, 8, 3))), exp)


def test_masked_similarity():
    a = ImageTensor(np.zeros((8, 8, 3)))
    b = np.zeros((8, 8, 3))
    b[:4] = 0.5
    m = np.zeros((8, 8), np.uint8)
    m[:4] = 1
    assert evaluation.masked_similarity(a, ImageTensor(b), Mask(m), "inside") == pytest.approx(0.25)
    assert evaluation.masked_similarity(a, ImageTensor(b), Mask(m), "outside") == 0.0
    with pytest.raises(DegenerateRegionError):
        evaluation.masked_similarity(a, a, Mask(np.zeros((8, 8), np.uint8)), "inside")
    with pytest.raises(DegenerateRegionError):
        evaluation.masked_similarity(a, a, Mask(np.ones((8, 8), np.uint8)), "outside")
    with pytest.raises(ValueError):
        evaluation.masked_similarity(a, a, Mask(m), "edge")


def _images(n=3):
    return [synthdata.render_scene(f, 0).image for f in synthdata.factor_grid()[:n]]


def test_score_hook_without_scorer(monkeypatch):
    monkeypatch.delenv("LAYERDIFF_SCORER", raising=False)
    res = evaluation.external_score_hook(_images(), ["x"] * 3)
    assert res.status == "n/a" and res.scores == [None] * 3


def test_score_hook_line_protocol(tmp_path, monkeypatch):
    script = tmp_path / "scorer.py"
    script.write_text(
        "import sys\n"
        "for line in sys.stdin:\n"
        "    path, text = line.rstrip('\\n').split('\\t')\n"
        "    print(len(text) + (0.5 if path.endswith('.png') else 0))\n"
    )
    res = evaluation.external_score_hook(_images(2), ["ab", "abcd"], f"{sys.executable} {script}")
    assert res.status == "ok" and res.scores == [2.5, 4.5]
    monkeypatch.setenv("LAYERDIFF_SCORER", f"{sys.executable} {script}")
    assert evaluation.external_score_hook(_images(1), ["abc"]).scores == [3.5]


def test_score_hook_callable_and_errors(tmp_path):
    res = evaluation.external_score_hook(_images(2), ["a", "b"], lambda pairs: [1.0 for _ in pairs])
    assert res.scores == [1.0, 1.0]
    short = evaluation.external_score_hook(_images(2), ["a", "b"], lambda pairs: [1.0])
    assert short.status.startswith("error") and short.scores == [None, None]
    gone = evaluation.external_score_hook(_images(1), ["a"], str(tmp_path / "no-such-binary"))
    assert gone.status.startswith("error")
    with pytest.raises(ValueError):
        evaluation.external_score_hook(_images(2), ["a"], None)


@pytest.fixture(scope="module")
def tiny_ablation(tmp_path_factory, tiny_model, edit_input):
    spec = make_spec(edit_input, n_samples=2)
    out = tmp_path_factory.mktemp("abl")
    table = evaluation.ablation_run(tiny_model, spec, ["a", "b", "f", "h", "i"], seeds=[0, 1], out_dir=out, scorer=lambda p: [0.5] * len(p))
    return spec, out, table


def test_ablation_table_shape(tiny_ablation):
    spec, out, table = tiny_ablation
    assert list(table.rows) == ["a", "b", "f", "h", "i"]
    for row in table.rows.values():
        assert row.error is None
        assert len(row.outcomes) == 2 * 2
        assert 0.0 <= row.success_rate <= 1.0
        for v in (row.median_inside_mse, row.median_outside_mse):
            assert v is None or v >= 0
        assert row.clip_status == "ok" and row.clip_score == 0.5
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["row"] for r in rows] == ["a", "b", "f", "h", "i"]
    with open(out / "ablation_outcomes.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 5 * 4


def test_ablation_reproducible(tiny_ablation, tiny_model):
    spec, out, table = tiny_ablation
    again = evaluation.ablation_run(tiny_model, spec, ["a", "b", "f", "h", "i"], seeds=[0, 1])
    for r in table.rows:
        a = [(o.success, o.inside_mse, o.outside_mse) for o in table.rows[r].outcomes]
        b = [(o.success, o.inside_mse, o.outside_mse) for o in again.rows[r].outcomes]
        assert a == b


def test_ablation_rows_cover_published_grid():
    assert list(evaluation.ABLATION_ROWS) == list("abcdefghijk")
    with pytest.raises(ValueError):
        evaluation.ablation_run(None, None, ["z"])


def test_alpha_sweep(tmp_path, tiny_model, edit_input):
    spec = make_spec(edit_input, n_samples=1)
    sweep = evaluation.alpha_sweep(tiny_model, spec, (0.0, 1.0), seeds=[0], out_path=tmp_path / "s.csv")
    assert sweep.totals == {0.0: 1, 1.0: 1}
    assert all(0 <= c <= 1 for c in sweep.counts.values())
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 3


def test_uniform_gray_is_failure_with_absent_object():
    gray = ImageTensor(np.full((32, 32, 3), 0.5))
    rep = evaluation.edit_success(gray, evaluation.expected_from_text("a small blue circle on a gray background"))
    assert not rep.success and rep.observed.fg_shape == "absent"


def test_masked_similarity_identities():
    rng = np.random.default_rng(0)
    a = ImageTensor(rng.uniform(size=(8, 8, 3)))
    b = ImageTensor(rng.uniform(size=(8, 8, 3)))
    m = Mask(rng.integers(0, 2, (8, 8)).astype(np.uint8) | np.eye(8, dtype=np.uint8))
    assert evaluation.masked_similarity(a, a, m, "inside") == 0.0
    ones = Mask(np.ones((8, 8), np.uint8))
    plain = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
    assert evaluation.masked_similarity(a, b, ones, "inside") == pytest.approx(plain, rel=1e-12)
    for region in ("inside", "outside"):
        if region == "outside" and m.data.all():
            continue
        assert evaluation.masked_similarity(a, b, m, region) == evaluation.masked_similarity(b, a, m, region)


def test_alpha_sweep_single_alpha(tmp_path, tiny_model, edit_input):
    sweep = evaluation.alpha_sweep(tiny_model, make_spec(edit_input, n_samples=1), (0.7,), n_seeds=1, out_path=tmp_path / "s.csv")
    assert list(sweep.counts) == [0.7]
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 2
