from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from layerdiff.core import (
    ConfigError,
    EditSpec,
    FormatError,
    ImageTensor,
    Latent,
    LossWeights,
    Mask,
    NoiseSchedule,
    RangeError,
    RngStream,
    ShapeError,
    TensorTypeError,
    TextEmbedding,
    derive_seed,
    load_tensor,
    read_container,
    save_tensor,
    write_container,
)
from layerdiff import core


def test_image_validation():
    ImageTensor(np.zeros((8, 12, 3)))
    with pytest.raises(ShapeError):
        ImageTensor(np.zeros((8, 10, 3)))
    with pytest.raises(ShapeError):
        ImageTensor(np.zeros((4, 4, 3)))
    with pytest.raises(RangeError):
        ImageTensor(np.full((8, 8, 3), 1.5))
    with pytest.raises(RangeError):
        ImageTensor(np.full((8, 8, 3), np.nan))
    assert ImageTensor.clipped(np.full((8, 8, 3), 2.0)).data.max() == 1.0


def test_arrays_are_read_only():
    img = ImageTensor(np.zeros((8, 8, 3)))
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 1.0
    src = np.zeros((8, 8, 3), np.float32)
    img = ImageTensor(src)
    src[0, 0, 0] = 1.0
    assert img.data[0, 0, 0] == 0.0


def test_mask_and_embedding_validation():
    with pytest.raises(RangeError):
        Mask(np.full((4, 4), 2))
    with pytest.raises(ShapeError):
        Mask(np.zeros(4))
    with pytest.raises(ShapeError):
        TextEmbedding(np.zeros(5))
    with pytest.raises(RangeError):
        TextEmbedding(np.zeros((3, 2)), n_tokens=4)
    e = TextEmbedding(np.ones((3, 2)))
    assert not e.frozen and e.freeze().frozen
    assert e.freeze().checksum() == e.checksum()


def test_schedule_matches_oracle():
    s = NoiseSchedule.linear()
    ref_betas = oracles.linear_betas(1000)
    np.testing.assert_allclose(s.betas, ref_betas, rtol=0, atol=1e-15)
    ref = oracles.alpha_bars(ref_betas)
    np.testing.assert_allclose(s.alpha_bars, ref, rtol=1e-12)
    assert s.alpha_bar(0) == 1.0
    assert s.alpha_bar(1) == pytest.approx(1 - 1e-4, abs=1e-15)
    assert s.alpha_bar(1000) == pytest.approx(ref[-1], rel=1e-12)
    assert s.betas.dtype == np.float64
    for bad in (-1, 1001):
        with pytest.raises(RangeError):
            s.check_timestep(bad)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-5, 0.0099), st.lists(st.floats(1e-5, 0.05), max_size=50))
def test_alpha_bar_monotone(first, rest):
    betas = [first] + rest
    s = NoiseSchedule(np.asarray(betas))
    ab = s.alpha_bars
    assert np.all(np.diff(ab) < 0) and np.all(ab > 0) and np.all(ab <= 1)
    np.testing.assert_allclose(ab, oracles.alpha_bars(betas), rtol=1e-12)


def test_schedule_rejects_bad_betas():
    with pytest.raises(RangeError):
        NoiseSchedule(np.array([0.0, 0.1]))
    with pytest.raises(RangeError):
        NoiseSchedule(np.array([0.5]))


def test_loss_weights():
    with pytest.raises(ConfigError):
        LossWeights(-1, 1)
    with pytest.raises(ConfigError):
        LossWeights(0, 0)
    LossWeights(0, 1)


def test_edit_spec_defaults_and_validation():
    img = ImageTensor(np.zeros((32, 32, 3)))
    spec = EditSpec(img, "a b", "a", "b")
    assert (spec.alpha, spec.lambda_obj, spec.lambda_bg) == (0.7, 2.0, 1.0)
    assert (spec.embed_steps, spec.finetune_steps, spec.sample_steps) == (500, 250, 50)
    assert spec.embed_lr == 1e-3
    assert core.SD_FINETUNE_LR == 2e-6 and spec.finetune_lr == 1e-4
    for bad in (dict(alpha=1.5), dict(object_text=" "), dict(seed=-1), dict(guidance="x"), dict(lambda_obj=-1)):
        with pytest.raises(ConfigError):
            dataclasses.replace(spec, **bad)
    rec = spec.config_record()
    assert isinstance(rec["input_image"], str) and len(rec["input_image"]) == 64
    assert rec["reference_image"] is None


def test_derive_seed_matches_oracle():
    for seed, stage in [(0, "init"), (7, "embed-opt"), (123456, "sampler/3")]:
        assert derive_seed(seed, stage) == oracles.sub_seed(seed, stage)
    assert derive_seed(5) == 5
    assert derive_seed(1, "a") != derive_seed(1, "b")
    with pytest.raises(RangeError):
        derive_seed(-1, "x")


def test_rng_stream_counts_draws():
    r = RngStream(3, "x")
    r.normal((2, 3))
    r.integers(1, 10, size=4)
    r.uniform(size=2)
    r.permutation(5)
    r.choice(["a", "b"])
    assert r.draws == 6 + 4 + 2 + 5 + 1
    v = RngStream(3, "x").integers(1, 1, size=20)
    assert set(v.tolist()) == {1}  # inclusive upper bound


def test_rng_streams_reproducible():
    a = RngStream(11, "s").normal(10)
    b = RngStream(11, "s").normal(10)
    c = RngStream(11, "t").normal(10)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@settings(max_examples=30, deadline=None)
@given(
    hnp.arrays(
        st.sampled_from([np.float32, np.float64, np.uint8, np.int64]),
        hnp.array_shapes(min_dims=0, max_dims=3, max_side=5),
    )
)
def test_container_roundtrip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("c") / "x.tensor"
    write_container(path, {"a": arr, "b": np.arange(3, dtype=np.int64)}, {"k": [1, "x"]})
    tensors, meta = read_container(path)
    assert meta == {"k": [1, "x"]}
    assert tensors["a"].dtype == arr.dtype and tensors["a"].shape == arr.shape
    np.testing.assert_array_equal(tensors["a"], arr)


def test_container_rejects_corruption(tmp_path):
    path = tmp_path / "x.tensor"
    write_container(path, {"a": np.ones((2, 2), np.float32)}, {})
    raw = path.read_bytes()
    for bad in (raw[:-1], raw + b"x", b"NOPE" + raw[4:], raw.replace(b"float32", b"float99"), raw[:10]):
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            read_container(path)
    with pytest.raises(TypeError):
        write_container(path, {"a": np.ones(2, np.int16)}, {})


def test_save_load_core_types(tmp_path):
    objs = [
        ImageTensor(np.random.default_rng(0).uniform(size=(8, 8, 3))),
        Latent(np.ones((4, 4, 3)), timestep=5),
        TextEmbedding(np.ones((3, 2)), "optimized", 2, True),
        Mask(np.eye(4, dtype=np.uint8), "latent"),
        NoiseSchedule.linear(10),
    ]
    for i, obj in enumerate(objs):
        p = tmp_path / f"{i}.tensor"
        save_tensor(obj, p, role="r")
        back = load_tensor(p, type(obj))
        assert type(back) is type(obj)
        field = "betas" if isinstance(obj, NoiseSchedule) else "data"
        np.testing.assert_array_equal(getattr(back, field), getattr(obj, field))
    emb = load_tensor(tmp_path / "2.tensor")
    assert (emb.label, emb.n_tokens, emb.frozen) == ("optimized", 2, True)
    assert load_tensor(tmp_path / "1.tensor").timestep == 5
    with pytest.raises(TensorTypeError):
        load_tensor(tmp_path / "0.tensor", Mask)


def test_load_rejects_invariant_violation(tmp_path):
    p = tmp_path / "bad.tensor"
    write_container(p, {"data": np.full((8, 8, 3), 3.0, np.float32)}, {"kind": "ImageTensor"})
    with pytest.raises(TensorTypeError):
        load_tensor(p)
