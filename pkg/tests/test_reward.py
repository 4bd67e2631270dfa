"""Disagreement and uncertainty reward math."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eits.reward import (
    RewardConfig,
    combine,
    disagreement_reward,
    smoothed,
    step_reward,
    uncertainty_reward,
    uncertainty_value,
)
from eits.semap import MapConfig, VoxelObservation, fuse, init_map

SMALL = MapConfig(length=8, width=8, height=8)


def vobs_of(rows, counts=None, indices=None):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    n, C = rows.shape
    if counts is None:
        counts = np.full(n, 3, dtype=np.int64)
    if indices is None:
        # row i sits at voxel (i+1, i+1, i+1), matching map_with defaults
        indices = np.stack([np.arange(1, n + 1)] * 3, axis=1)
    return VoxelObservation(
        indices=np.asarray(indices, dtype=np.int64),
        dists=rows,
        class_counts=np.asarray(counts, dtype=np.int64),
        hit=np.ones(n, dtype=bool),
    )


def map_with(idx, dist, C=2):
    m = init_map(C, SMALL)
    vobs = VoxelObservation(
        indices=np.array([idx], dtype=np.int64),
        dists=np.array([dist], dtype=float),
        class_counts=np.array([3], dtype=np.int64),
        hit=np.array([True]),
    )
    fuse(m, vobs, in_place=True)
    return m


# ---------------------------------------------------------------------------
# smoothing


def test_smoothed_keeps_simplex():
    p = np.array([0.75, 0.25])
    q = smoothed(p, 1e-6)
    assert q.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.all(q > 0)
    # one-hot gains strictly positive mass everywhere
    assert np.all(smoothed(np.array([1.0, 0.0, 0.0]), 1e-6) > 0)


# ---------------------------------------------------------------------------
# disagreement


def test_kl_closed_form_three_quarters():
    """KL([.75,.25] || [.25,.75]) = 0.5 ln 3, up to bounded smoothing error."""
    eps = 1e-6
    m = map_with((1, 1, 1), [0.25, 0.75])
    r, n = disagreement_reward(vobs_of([[0.75, 0.25]]), m, epsilon=eps)
    assert n == 1
    p = smoothed(np.array([0.75, 0.25]), eps)
    q = smoothed(np.array([0.25, 0.75]), eps)
    exact_smoothed = float(np.sum(p * np.log(p / q)))
    assert r == pytest.approx(exact_smoothed, abs=1e-12)
    assert abs(r - 0.5 * np.log(3.0)) < 3 * eps


def test_disagreement_identical_is_zero():
    m = map_with((1, 1, 1), [0.3, 0.7])
    r, n = disagreement_reward(vobs_of([[0.3, 0.7]]), m, epsilon=1e-6)
    assert n == 1
    assert r == pytest.approx(0.0, abs=1e-9)


def test_disagreement_skips_first_visits_and_structure():
    # prior map is empty: nothing to compare against
    m = init_map(2, SMALL)
    r, n = disagreement_reward(vobs_of([[0.6, 0.4]]), m, epsilon=1e-6)
    assert (r, n) == (0.0, 0)
    # structure-only voxel (no class pixels) never contributes
    m = map_with((0, 1, 2), [0.5, 0.5])
    vobs = VoxelObservation(
        indices=np.array([[0, 1, 2]], dtype=np.int64),
        dists=np.array([[0.9, 0.1]]),
        class_counts=np.array([0], dtype=np.int64),
        hit=np.array([True]),
    )
    assert disagreement_reward(vobs, m, epsilon=1e-6) == (0.0, 0)


def test_disagreement_mean_vs_sum():
    m = init_map(2, SMALL)
    for idx in [(1, 1, 1), (2, 2, 2)]:
        fuse(m, vobs_of([[0.2, 0.8]]).__class__(
            indices=np.array([idx], dtype=np.int64),
            dists=np.array([[0.2, 0.8]]),
            class_counts=np.array([3], dtype=np.int64),
            hit=np.array([True]),
        ), in_place=True)
    vobs = VoxelObservation(
        indices=np.array([[1, 1, 1], [2, 2, 2]], dtype=np.int64),
        dists=np.array([[0.8, 0.2], [0.2, 0.8]]),
        class_counts=np.array([3, 3], dtype=np.int64),
        hit=np.array([True, True]),
    )
    r_mean, n1 = disagreement_reward(vobs, m, epsilon=1e-6, aggregation="mean")
    r_sum, n2 = disagreement_reward(vobs, m, epsilon=1e-6, aggregation="sum")
    assert n1 == n2 == 2
    assert r_sum == pytest.approx(2 * r_mean, rel=1e-12)
    # one of the two pairs is identical, so the sum equals the single
    # disagreeing pair's divergence
    single, _ = disagreement_reward(vobs_of([[0.8, 0.2]]), map_with((1, 1, 1), [0.2, 0.8]),
                                    epsilon=1e-6)
    assert r_sum == pytest.approx(single, rel=1e-12)


def test_disagreement_rejects_bad_args():
    m = init_map(2, SMALL)
    with pytest.raises(ValueError):
        disagreement_reward(vobs_of([[0.5, 0.5]]), m, epsilon=0.0)
    with pytest.raises(ValueError):
        disagreement_reward(vobs_of([[0.5, 0.5]]), m, epsilon=1e-6, aggregation="median")


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(1e-3, 1.0), min_size=4, max_size=4),
       st.lists(st.floats(1e-3, 1.0), min_size=4, max_size=4))
def test_kl_nonnegative_fuzzed(a, b):
    p = np.asarray(a) / np.sum(a)
    q = np.asarray(b) / np.sum(b)
    m = map_with((1, 1, 1), q, C=4)
    r, _ = disagreement_reward(vobs_of([p]), m, epsilon=1e-6)
    assert r >= 0.0
    if np.allclose(p, q, atol=0):
        assert r == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------------------
# uncertainty


def test_second_max_values():
    assert uncertainty_value(np.array([0.7, 0.2, 0.1])) == pytest.approx(0.2)
    assert uncertainty_value(np.array([1.0, 0.0, 0.0])) == 0.0
    assert uncertainty_value(np.array([0.5, 0.5])) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        uncertainty_value(np.array([1.0]))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=8).filter(lambda v: sum(v) > 1e-6))
def test_second_max_bounded_by_half(vals):
    d = np.asarray(vals) / np.sum(vals)
    assert uncertainty_value(d) <= 0.5 + 1e-12


class P:
    def __init__(self, d):
        self.distribution = np.asarray(d, dtype=float)


def test_uncertainty_reward_is_a_strict_any_trigger():
    preds = [P([0.8, 0.1, 0.1]), P([0.5, 0.4, 0.1]), P([0.45, 0.45, 0.1])]
    # u values are 0.1, 0.4, 0.45
    assert uncertainty_reward(preds, delta=0.1) == 1.0
    assert uncertainty_reward(preds, delta=0.4) == 1.0  # 0.45 still exceeds
    assert uncertainty_reward(preds, delta=0.45) == 0.0  # strict: equal fails
    assert uncertainty_reward([P([0.6, 0.4])], delta=0.4) == 0.0
    assert uncertainty_reward([], delta=0.1) == 0.0


def test_triggered_frames_monotone_in_delta():
    """Raising the threshold can only reduce the number of rewarded frames."""
    rng = np.random.default_rng(0)
    frames = [[P(rng.dirichlet(np.ones(5))) for _ in range(3)] for _ in range(200)]
    counts = [
        sum(uncertainty_reward(fr, delta=d) for fr in frames)
        for d in (0.05, 0.1, 0.2, 0.3, 0.45)
    ]
    assert counts[0] > counts[-1]  # the sweep actually separates
    assert all(a >= b for a, b in zip(counts, counts[1:]))


# ---------------------------------------------------------------------------
# combination


def test_combine_weights_and_scale():
    cfg = RewardConfig(w_disagreement=1.0, w_uncertainty=0.5, reward_coeff=0.02)
    assert combine(1.5, 2.0, cfg) == pytest.approx(0.02 * 2.5)
    with pytest.raises(ValueError):
        combine(1.0, 1.0, RewardConfig(w_disagreement=-1.0))


def test_step_reward_breakdown():
    cfg = RewardConfig(delta=0.1, w_disagreement=2.0, w_uncertainty=3.0, reward_coeff=0.02)
    m = map_with((1, 1, 1), [0.25, 0.75])
    vobs = vobs_of([[0.75, 0.25]])
    bd = step_reward(vobs, m, [P([0.6, 0.4])], cfg)
    r_d, _ = disagreement_reward(vobs, m, epsilon=cfg.epsilon)
    assert bd.voxels_compared == 1
    assert bd.disagreement == pytest.approx(r_d)
    assert bd.uncertainty == 1.0  # 0.4 runner-up beats delta
    assert bd.combined == pytest.approx(0.02 * (2.0 * r_d + 3.0))
    row = bd.row()
    assert set(row) == {"r_d", "r_u", "reward", "voxels_compared"}
    assert row["reward"] == pytest.approx(bd.combined)
