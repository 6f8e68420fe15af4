import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from vipseg.backend import PatchGrid, Source
from vipseg.correction import corrected_adapter_forward, self_similarity_attention
from vipseg.errors import InputContractError
from vipseg.synthetic import SyntheticBackend, SyntheticWorld, make_scene


def _grid(tokens, gh, gw):
    return PatchGrid(np.asarray(tokens, dtype=np.float32), gh, gw, Source.BACKBONE)


def test_orthonormal_rows():
    attn = self_similarity_attention(_grid(np.eye(3), 1, 3))
    row = oracles.softmax([1 / math.sqrt(3), 0.0, 0.0])
    for i in range(3):
        expected = np.roll(row, i)
        np.testing.assert_allclose(attn[i], expected, atol=1e-12)


def test_equal_rows_uniform():
    attn = self_similarity_attention(_grid(np.ones((4, 5)), 2, 2))
    np.testing.assert_allclose(attn, 0.25, atol=1e-12)


def test_random_matches_oracle(rng):
    v = rng.normal(size=(4, 6)).astype(np.float32)
    ref = oracles.self_similarity(v.astype(np.float64).tolist())
    np.testing.assert_allclose(self_similarity_attention(_grid(v, 2, 2)), ref, atol=1e-6)


def test_zero_dim_rejected():
    with pytest.raises(InputContractError):
        self_similarity_attention(PatchGrid(np.zeros((4, 0), np.float32), 2, 2, Source.BACKBONE))


@given(st.integers(1, 12), st.integers(1, 8), st.integers(0, 2**31))
def test_rows_stochastic_and_diagonal_dominant(hw, d, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(hw, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    attn = self_similarity_attention(_grid(v, 1, hw))
    np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-6)
    # with unit rows the diagonal is a row maximum
    assert np.all(attn.diagonal() >= attn.max(axis=1) - 1e-7)


@pytest.fixture(scope="module")
def setup():
    world = SyntheticWorld(["a", "b"], dim=16, seed=3)
    backend = SyntheticBackend(world, patch_size=4, seed=3)
    image, _ = make_scene(world, 3, 4, 4, 4, [0, 1])
    v, _ = backend.encode_backbone(image)
    return backend, v


def test_corrected_equals_manual_injection(setup):
    backend, v = setup
    attn = self_similarity_attention(v)
    out = corrected_adapter_forward(v, backend)
    np.testing.assert_array_equal(out.tokens, backend.adapter_forward(v, [attn, attn]).tokens)


def test_corrected_differs_from_native(setup):
    backend, v = setup
    assert not np.allclose(corrected_adapter_forward(v, backend).tokens, backend.adapter_forward(v).tokens)


def test_disabled_is_native(setup):
    backend, v = setup
    np.testing.assert_array_equal(corrected_adapter_forward(v, backend, enabled=False).tokens,
                                  backend.adapter_forward(v).tokens)


def test_native_attention_injection_is_identity(setup):
    backend, v = setup
    x = v.tokens.astype(np.float64)
    # the synthetic adapter's first block attention computed from its own input
    first = backend.native_attention(x, 0)
    partial = backend.adapter_forward(v, [first, backend.native_attention(_after_block0(backend, x), 1)])
    np.testing.assert_allclose(partial.tokens, backend.adapter_forward(v).tokens, atol=1e-5)


def _after_block0(backend, x):
    return backend._block(x, 0, backend.native_attention(x, 0))


def test_requires_backbone_tokens(setup):
    backend, v = setup
    i = backend.adapter_forward(v)
    with pytest.raises(InputContractError):
        corrected_adapter_forward(i, backend)
