import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from affseg.diffusion import (
    NeighborSparseMatrix,
    build_affinity_matrix,
    load_neighbor_matrix,
    propagate,
    save_neighbor_matrix,
    transition_matrix,
)
from affseg.errors import DimMismatch, NotPowerOfTwo, ValidationError
from affseg.grid import radius_offsets
from affseg.seed_maps import ScoreStack

from oracles import dense_affinity, dense_transition


def random_stack(rng, c, h, w):
    scores = rng.random((c + 1, h, w)).astype(np.float32)
    return ScoreStack(scores, np.ones(c, dtype=bool))


def test_constant_features_give_unit_affinity():
    w = build_affinity_matrix(np.full((3, 4, 4), 0.7), 2.0)
    assert np.all(w.values[w.in_bounds()] == 1.0)
    assert np.all(w.values[~w.in_bounds()] == 0.0)


def test_interior_neighbour_count_small_radius():
    w = build_affinity_matrix(np.zeros((1, 3, 3)), 1.5)
    assert len(w.offsets) == 9
    center = w.in_bounds()[:, 1, 1]
    assert center.sum() == 9
    assert len(radius_offsets(1.5, forward_only=True)) == 4


def test_two_pixel_transition_row():
    f = np.array([[[0.0, 1.0]]])
    t = transition_matrix(build_affinity_matrix(f, 1.5), 1.0)
    dense = t.to_csr().toarray()
    assert dense[0] == pytest.approx([0.731059, 0.268941], abs=1e-6)


def test_large_beta_tends_to_identity():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(3, 5, 5)) * 3
    t = transition_matrix(build_affinity_matrix(f, 2.0), 200.0).to_csr().toarray()
    assert np.diag(t).min() > 0.999


def test_uniform_affinity_is_uniform_average():
    t = transition_matrix(build_affinity_matrix(np.zeros((1, 1, 3)), 1.5), 8.0)
    dense = t.to_csr().toarray()
    assert dense[1] == pytest.approx([1 / 3, 1 / 3, 1 / 3])
    assert dense[0] == pytest.approx([0.5, 0.5, 0.0])


def test_two_state_averaging():
    t = transition_matrix(build_affinity_matrix(np.zeros((1, 1, 2)), 1.5), 1.0)
    stack = ScoreStack(np.array([[[1.0, 0.0]], [[0.0, 1.0]]], np.float32), np.ones(1, bool))
    out = propagate(t, stack, 1)
    np.testing.assert_allclose(out.scores[:, 0, :], 0.5, rtol=1e-7)


@given(seed=st.integers(0, 2**32 - 1), gamma=st.floats(1.0, 3.5), beta=st.sampled_from([1.0, 3.0, 8.0]))
def test_matches_dense_oracle(seed, gamma, beta):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(2, 4, 5))
    w = build_affinity_matrix(f, gamma)
    wd = dense_affinity(f.astype(np.float32), gamma)
    np.testing.assert_allclose(w.to_csr().toarray(), wd, rtol=1e-6, atol=1e-7)
    t = transition_matrix(w, beta).to_csr().toarray()
    np.testing.assert_allclose(t, dense_transition(w.to_csr().toarray(), beta), rtol=1e-12)


@given(seed=st.integers(0, 2**32 - 1))
def test_affinity_bitwise_symmetric(seed):
    f = np.random.default_rng(seed).normal(size=(3, 6, 5))
    dense = build_affinity_matrix(f, 2.5).to_csr().toarray()
    assert np.array_equal(dense, dense.T)


@given(seed=st.integers(0, 2**32 - 1), beta=st.floats(1.0, 12.0))
def test_rows_sum_to_one(seed, beta):
    f = np.random.default_rng(seed).normal(size=(4, 7, 6)) * 2
    t = transition_matrix(build_affinity_matrix(f, 3.0), beta)
    assert np.abs(t.row_sums() - 1).max() < 1e-9


@given(seed=st.integers(0, 2**32 - 1), steps=st.sampled_from([1, 2, 8, 32]))
def test_maximum_principle(seed, steps):
    rng = np.random.default_rng(seed)
    t = transition_matrix(build_affinity_matrix(rng.normal(size=(3, 6, 6)), 2.5), 4.0)
    stack = random_stack(rng, 2, 6, 6)
    out = propagate(t, stack, steps)
    for c in range(3):
        assert out.scores[c].min() >= stack.scores[c].min()
        assert out.scores[c].max() <= stack.scores[c].max()


@given(seed=st.integers(0, 2**32 - 1), steps=st.sampled_from([1, 4, 64]))
def test_modes_agree(seed, steps):
    rng = np.random.default_rng(seed)
    t = transition_matrix(build_affinity_matrix(rng.normal(size=(3, 8, 8)), 3.0), 8.0)
    stack = random_stack(rng, 2, 8, 8)
    a = propagate(t, stack, steps, mode="iterative").scores
    b = propagate(t, stack, steps, mode="squaring").scores
    assert np.abs(a - b).max() <= 1e-6 * np.abs(b).max()


def test_disconnected_regions_do_not_mix():
    f = np.zeros((1, 4, 8))
    f[:, :, 4:] = 1e6  # affinity across the cut underflows to zero
    t = transition_matrix(build_affinity_matrix(f, 2.0), 1.0)
    scores = np.zeros((2, 4, 8), np.float32)
    scores[1, :, :4] = 1.0
    out = propagate(t, ScoreStack(scores, np.ones(1, bool)), 64)
    assert np.all(out.scores[1, :, 4:] == 0)
    assert np.all(np.isfinite(out.scores))


def test_constant_map_is_fixed_point():
    rng = np.random.default_rng(2)
    t = transition_matrix(build_affinity_matrix(rng.normal(size=(2, 5, 5)), 2.0), 2.0)
    stack = ScoreStack(np.full((2, 5, 5), 0.4, np.float32), np.ones(1, bool))
    out = propagate(t, stack, 16)
    np.testing.assert_allclose(out.scores, 0.4, rtol=1e-6)


def test_t_one_is_single_step():
    rng = np.random.default_rng(3)
    t = transition_matrix(build_affinity_matrix(rng.normal(size=(2, 4, 4)), 2.0), 2.0)
    stack = random_stack(rng, 1, 4, 4)
    out = propagate(t, stack, 1)
    expected = (t.to_csr() @ stack.scores.reshape(2, -1).astype(np.float64).T).T
    np.testing.assert_allclose(out.scores.reshape(2, -1), expected, rtol=1e-6)


def test_squaring_falls_back_when_over_budget(caplog):
    rng = np.random.default_rng(4)
    t = transition_matrix(build_affinity_matrix(rng.normal(size=(2, 8, 8)), 3.0), 8.0)
    stack = random_stack(rng, 1, 8, 8)
    with caplog.at_level(logging.INFO, logger="affseg.diffusion"):
        out = propagate(t, stack, 64, mode="squaring", max_entries=100)
    assert "falling back" in caplog.text
    assert np.array_equal(out.scores, propagate(t, stack, 64).scores)


@pytest.mark.parametrize("steps", [0, 3, 100, -4])
def test_non_power_of_two_rejected(steps):
    t = transition_matrix(build_affinity_matrix(np.zeros((1, 2, 2)), 1.5), 1.0)
    with pytest.raises(NotPowerOfTwo):
        propagate(t, ScoreStack(np.zeros((2, 2, 2), np.float32), np.ones(1, bool)), steps)


def test_shape_mismatch_rejected():
    t = transition_matrix(build_affinity_matrix(np.zeros((1, 2, 2)), 1.5), 1.0)
    with pytest.raises(DimMismatch):
        propagate(t, ScoreStack(np.zeros((2, 3, 2), np.float32), np.ones(1, bool)), 1)


def test_bad_beta_and_mode_rejected():
    w = build_affinity_matrix(np.zeros((1, 2, 2)), 1.5)
    with pytest.raises(ValidationError):
        transition_matrix(w, 0.5)
    with pytest.raises(ValidationError):
        propagate(transition_matrix(w, 1.0), ScoreStack(np.zeros((2, 2, 2), np.float32), np.ones(1, bool)), 1, mode="magic")


def test_single_pixel_graph():
    t = transition_matrix(build_affinity_matrix(np.zeros((2, 1, 1)), 5.0), 8.0)
    stack = ScoreStack(np.array([[[0.3]], [[0.6]]], np.float32), np.ones(1, bool))
    assert np.array_equal(propagate(t, stack, 256, mode="squaring").scores, stack.scores)


def test_save_load_roundtrip(tmp_path):
    w = build_affinity_matrix(np.random.default_rng(5).normal(size=(2, 4, 3)), 2.0)
    save_neighbor_matrix(w, tmp_path / "w.aft")
    back = load_neighbor_matrix(tmp_path / "w.aft")
    assert isinstance(back, NeighborSparseMatrix)
    assert back.offsets == w.offsets and back.kind == "affinity"
    assert np.array_equal(back.values, w.values)
