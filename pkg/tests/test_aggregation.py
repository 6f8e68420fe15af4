import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import stochastic
from vipseg.aggregation import (
    assemble_class_map,
    class_scores,
    free_energy_aggregate,
    modulate,
    plain_class_scores,
    saliency_factors,
)
from vipseg.aliases import QuerySet, VocabClass, Vocabulary
from vipseg.backend import PatchGrid, QueryKind, Source, TextQuery
from vipseg.errors import InputContractError
from vipseg.synthetic import SyntheticBackend, SyntheticWorld


def _q(vec, k=0):
    v = np.asarray(vec, dtype=np.float64)
    return TextQuery(0, f"q{k}", QueryKind.ALIAS, v / np.linalg.norm(v))


def test_single_query_weight_is_one(rng):
    i = PatchGrid(rng.normal(size=(4, 3)), 2, 2, Source.ADAPTER)
    np.testing.assert_array_equal(saliency_factors(i, [_q([1, 2, 3])]), [1.0])


def test_equal_responses_uniform(rng):
    i = PatchGrid(rng.normal(size=(4, 3)), 2, 2, Source.ADAPTER)
    np.testing.assert_allclose(saliency_factors(i, [_q([1, 0, 0], k) for k in range(4)]), 0.25)


def test_saliency_matches_oracle(rng):
    tokens = rng.normal(size=(6, 5)).astype(np.float32)
    qs = [_q(rng.normal(size=5), k) for k in range(3)]
    g = tokens.astype(np.float64).mean(axis=0)
    cos = [float(g @ q.embedding / np.linalg.norm(g)) for q in qs]
    delta = saliency_factors(PatchGrid(tokens, 2, 3, Source.ADAPTER), qs)
    np.testing.assert_allclose(delta, oracles.softmax(cos), atol=1e-7)


def test_zero_global_feature_uniform(caplog):
    tokens = np.array([[1.0, 0.0], [-1.0, 0.0]])
    with caplog.at_level("WARNING"):
        delta = saliency_factors(PatchGrid(tokens, 1, 2, Source.ADAPTER), [_q([1, 0]), _q([0, 1], 1)])
    np.testing.assert_allclose(delta, 0.5)
    assert "zero global feature" in caplog.text


def test_modulate_cases(rng):
    m = stochastic(rng, 6, 3)
    s = modulate(m, [0.0, 1.0, 0.0])
    assert np.all(s[:, [0, 2]] == 0) and np.array_equal(s[:, 1], m[:, 1])
    np.testing.assert_allclose(modulate(m, np.full(3, 1 / 3)), m / 3)
    d = oracles.softmax(list(rng.normal(size=3)))
    ref = [[d[k] * row[k] for k in range(3)] for row in m]
    np.testing.assert_allclose(modulate(m, d), ref, atol=1e-7)
    with pytest.raises(InputContractError):
        modulate(m, [1.0])


def test_free_energy_cases(rng):
    s = rng.random((5, 1))
    np.testing.assert_array_equal(free_energy_aggregate(s, 4.0), s[:, 0])
    np.testing.assert_allclose(free_energy_aggregate(np.full((3, 4), 0.2), 4.0), 0.2 + math.log(4) / 4)
    s = rng.random((5, 4))
    np.testing.assert_allclose(free_energy_aggregate(s, 4.0), [oracles.lse(list(r), 4.0) for r in s], atol=1e-6)
    with pytest.raises(InputContractError):
        free_energy_aggregate(s, 0.0)


def test_free_energy_no_overflow():
    out = free_energy_aggregate(np.array([[1e4, 1e4 - 1]]), 4.0)
    assert np.isfinite(out).all()


@given(st.integers(1, 8), st.integers(1, 6), st.floats(0.1, 20), st.integers(0, 2**31))
def test_lse_bounds(hw, k, tau, seed):
    s = np.random.default_rng(seed).random((hw, k))
    out = free_energy_aggregate(s, tau)
    top = s.max(axis=1)
    assert np.all(out >= top - 1e-12)
    assert np.all(out <= top + math.log(k) / tau + 1e-12)


def test_assemble_class_map():
    m = assemble_class_map([np.ones(4), np.zeros(4)], 2, 2)
    assert m.values.shape == (4, 2) and not m.normalized
    np.testing.assert_array_equal(m.labels(), 0)
    assert assemble_class_map([np.ones(4)], 2, 2).labels().ravel().tolist() == [0] * 4
    with pytest.raises(InputContractError):
        assemble_class_map([np.ones(4), None], 2, 2)


@pytest.fixture(scope="module")
def world_backend():
    world = SyntheticWorld(["a", "b", "c"], seed=2)
    return world, SyntheticBackend(world, seed=2)


def test_anchor_only_free_energy_equals_plain(world_backend, rng):
    world, backend = world_backend
    qs = QuerySet.build(Vocabulary.from_names(world.class_names), backend)
    sims = rng.uniform(-0.2, 0.4, size=(16, 3)).astype(np.float32)
    fe = class_scores(sims, rng.random(3), qs, 100.0, 4.0, "free_energy")
    np.testing.assert_array_equal(fe, plain_class_scores(sims, qs, 100.0))


def test_class_scores_union_softmax(world_backend, rng):
    world, backend = world_backend
    vocab = Vocabulary([VocabClass("a", ["x a"]), VocabClass("b"), VocabClass("c")])
    qs = QuerySet.build(vocab, backend)
    sims = rng.uniform(-0.2, 0.4, size=(5, 4))
    g = rng.uniform(-0.2, 0.4, size=4)
    out = class_scores(sims, g, qs, 100.0, 4.0, "free_energy")
    for p in range(5):
        probs = oracles.softmax(list(100.0 * sims[p]))
        d = oracles.softmax(list(g[:2]))
        assert out[p, 0] == pytest.approx(oracles.lse([d[0] * probs[0], d[1] * probs[1]], 4.0), abs=1e-9)
        assert out[p, 1] == pytest.approx(probs[2], abs=1e-9)
    mx = class_scores(sims, g, qs, 100.0, 4.0, "max")
    np.testing.assert_allclose(mx[:, 0], np.max([[oracles.softmax(list(100 * r))[k] for k in (0, 1)]
                                                 for r in sims], axis=1), atol=1e-12)
    with pytest.raises(InputContractError):
        class_scores(sims, g, qs, 100.0, 4.0, "median")
