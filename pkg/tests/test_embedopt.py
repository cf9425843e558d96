from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import gradcheck
import oracles
from layerdiff import embedopt, masks
from layerdiff.core import ConfigError, ContractError, Mask, RangeError, ShapeError, TextEmbedding, VocabularyError
from conftest import make_spec


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10), st.integers(0, 10), st.integers(0, 2**16))
def test_concat_matches_oracle(n_a, n_b, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
    pad = rng.normal(size=4)
    got = embedopt.concat_tokens(torch.from_numpy(a), n_a, torch.from_numpy(b), n_b, torch.from_numpy(pad))
    np.testing.assert_array_equal(got.numpy(), oracles.concat(a, min(n_a, 10), b, n_b, pad))


def test_concat_overflow_drops_background_tail():
    a = torch.ones(10, 2)
    b = torch.full((10, 2), 2.0)
    out = embedopt.concat_tokens(a, 7, b, 5, torch.zeros(2))
    assert out[:7].eq(1).all() and out[7:].eq(2).all()


def test_decompose_target_text(tiny_model, small_spec):
    e_a, e_b = embedopt.decompose_target_text(tiny_model, small_spec)
    assert (e_a.n_tokens, e_b.n_tokens) == (4, 4)
    bad = make_spec(small_spec.input_image, object_text="a large violet square")
    with pytest.raises(VocabularyError) as info:
        embedopt.decompose_target_text(tiny_model, bad)
    assert info.value.token == "violet" and "object_text" in str(info.value)


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.float32, (3, 4), elements=st.floats(-10, 10, width=32)),
    hnp.arrays(np.float32, (3, 4), elements=st.floats(-10, 10, width=32)),
    st.floats(0, 1),
)
def test_interpolation_matches_oracle(a, b, alpha):
    ea, eb = TextEmbedding(a, "optimized", 2), TextEmbedding(b, "optimized", 2)
    out = embedopt.interpolate(ea, eb, alpha)
    np.testing.assert_array_equal(out.data, oracles.interpolate(a, b, alpha))
    assert out.label == "interpolated" and out.n_tokens == 2
    assert np.array_equal(embedopt.interpolate(ea, eb, 1.0).data, a)
    assert np.array_equal(embedopt.interpolate(ea, eb, 0.0).data, b)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    assert np.all(out.data >= lo - 1e-5) and np.all(out.data <= hi + 1e-5)


def test_interpolation_errors():
    a = TextEmbedding(np.zeros((3, 4)))
    with pytest.raises(RangeError):
        embedopt.interpolate(a, a, 1.2)
    with pytest.raises(ShapeError):
        embedopt.interpolate(a, TextEmbedding(np.zeros((2, 4))), 0.5)
    assert embedopt.interpolate(TextEmbedding(np.zeros((3, 4)), n_tokens=1), TextEmbedding(np.zeros((3, 4)), n_tokens=2), 0.5).n_tokens is None


@pytest.mark.parametrize("k", range(6))
def test_gradient_matches_finite_differences(k):
    model = gradcheck.probe_model()
    assert gradcheck.check(model, gradcheck.random_config(model, k)) < 1e-3


def _inputs(model, spec):
    x0 = model.codec.encode(spec.input_image)
    m = masks.to_latent_res(masks.get_mask(masks.MaskProvider(), spec.input_image), model.codec.latent_shape)
    e_a, e_b = embedopt.decompose_target_text(model, spec)
    return x0, m, e_a, e_b


def test_optimize_contracts(tiny_model, small_spec):
    x0, m, e_a, e_b = _inputs(tiny_model, small_spec)
    before = tiny_model.checksum()
    res = embedopt.optimize_embeddings(tiny_model, x0, m, e_a, e_b, steps=5, seed=3)
    assert tiny_model.checksum() == before
    assert len(res.losses) == 5 and all(np.isfinite(res.losses))
    assert res.e_a_hat.label == "optimized" and res.e_a_hat.n_tokens == e_a.n_tokens
    assert not np.array_equal(res.e_a_hat.data, e_a.data)
    assert res.draws == 5 * (1 + 32 * 32 * 3)
    again = embedopt.optimize_embeddings(tiny_model, x0, m, e_a, e_b, steps=5, seed=3)
    assert np.array_equal(again.e_a_hat.data, res.e_a_hat.data) and again.losses == res.losses

    with pytest.raises(ContractError):
        embedopt.optimize_embeddings(tiny_model.copy().unfreeze(), x0, m, e_a, e_b, steps=1)
    with pytest.raises(ShapeError):
        embedopt.optimize_embeddings(tiny_model, x0, Mask(np.ones((8, 8), np.uint8)), e_a, e_b, steps=1)
    with pytest.raises(RangeError):
        embedopt.optimize_embeddings(tiny_model, x0, m, e_a, e_b, steps=0)
    with pytest.raises(ConfigError):
        embedopt.optimize_embeddings(tiny_model, x0, m, e_a, e_b, steps=1, mode="per_stream")


def test_optimization_lowers_objective(tiny_model, small_spec):
    x0, m, e_a, e_b = _inputs(tiny_model, small_spec)
    res = embedopt.optimize_embeddings(tiny_model, x0, m, e_a, e_b, steps=60, lr=5e-2, seed=0, batch=4)
    assert np.mean(res.losses[-10:]) < np.mean(res.losses[:10])


def test_empty_mask_leaves_embeddings_unchanged(tiny_model, small_spec):
    """Zero mask means zero loss and zero gradient."""
    x0, _, e_a, e_b = _inputs(tiny_model, small_spec)
    res = embedopt.optimize_embeddings(tiny_model, x0, masks.empty((32, 32)), e_a, e_b, steps=3)
    assert res.losses == [0.0, 0.0, 0.0]
    assert np.array_equal(res.e_a_hat.data, e_a.data) and np.array_equal(res.e_b_hat.data, e_b.data)


def test_per_stream_mode(tiny_model, small_spec):
    x0, m, e_a, e_b = _inputs(tiny_model, small_spec)
    res = embedopt.optimize_embeddings(tiny_model, x0, m, e_a, e_b, steps=3, mode="per_stream", reference=x0)
    assert len(res.losses) == 3
    joint = embedopt.optimize_embeddings(tiny_model, x0, m, e_a, e_b, steps=3)
    assert not np.array_equal(res.e_b_hat.data, joint.e_b_hat.data)
