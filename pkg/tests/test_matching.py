"""Match costs, the Hungarian solver vs its oracle, and the set loss."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tadlab import autodiff as ad
from tadlab.autodiff import Tensor
from tadlab.errors import ConfigError, ShapeError
from tadlab.matching import (MatchCostConfig, assignment_total,
                             binary_relabel, brute_force_assignment,
                             cost_matrix, detr_loss, hungarian,
                             interval_to_span, match_cost, match_predictions,
                             reg_loss, span_to_interval)
from tadlab.model import ForwardResult
from tadlab.seeding import rng_from

UNIT = MatchCostConfig(1.0, 1.0, 1.0)


# -- interval conversions --------------------------------------------------------

def test_span_round_trip():
    spans = np.array([[0.1, 0.4], [0.25, 0.9]])
    assert np.allclose(interval_to_span(span_to_interval(spans)), spans)


def test_span_clamps_to_unit_interval():
    assert np.allclose(interval_to_span([0.05, 0.3]), [0.0, 0.2])
    assert np.allclose(interval_to_span([0.95, 0.3]), [0.8, 1.0])


# -- pairwise cost ----------------------------------------------------------------

def test_perfect_prediction_cost():
    probs = np.array([0.0, 1.0, 0.0])
    cost = match_cost(1, (0.4, 0.2), probs, (0.4, 0.2), UNIT)
    assert cost == pytest.approx(-1.0)


def test_disjoint_prediction_cost():
    # p(gt class)=0, L1 = 0.5, tIoU = 0 -> 0 + 0.5 + 1
    probs = np.array([1.0, 0.0])
    cost = match_cost(1, (0.25, 0.1), probs, (0.75, 0.1), UNIT)
    assert cost == pytest.approx(1.5)


def test_cost_monotone_in_class_probability():
    last = np.inf
    for p in (0.0, 0.3, 0.7, 1.0):
        probs = np.array([p, 1.0 - p])
        cost = match_cost(0, (0.5, 0.2), probs, (0.7, 0.3), UNIT)
        assert cost < last
        last = cost


def test_cost_matrix_matches_scalar_costs():
    rng = rng_from(0)
    gt_classes = np.array([0, 2, 1])
    gt_intervals = rng.uniform(0.1, 0.9, (3, 2))
    probs = rng.dirichlet(np.ones(4), size=5)
    preds = rng.uniform(0.1, 0.9, (5, 2))
    cfg = MatchCostConfig(2.0, 5.0, 2.0)
    matrix = cost_matrix(gt_classes, gt_intervals, probs, preds, cfg)
    for i in range(3):
        for j in range(5):
            expected = match_cost(gt_classes[i], gt_intervals[i], probs[j], preds[j], cfg)
            assert matrix[i, j] == pytest.approx(expected, abs=1e-12)


def test_cost_config_validation():
    with pytest.raises(ConfigError):
        MatchCostConfig(-1.0, 1.0, 1.0).validate()
    with pytest.raises(ConfigError):
        MatchCostConfig(0.0, 0.0, 0.0).validate()


def test_reg_loss_cases():
    assert reg_loss((0.5, 0.4), (0.5, 0.4), UNIT) == 0.0
    # L1 = 0.2; spans [0.3,0.7] vs [0.4,0.6]: tIoU = 0.5
    assert reg_loss((0.5, 0.4), (0.5, 0.2), UNIT) == pytest.approx(0.7)
    a, b = (0.3, 0.2), (0.6, 0.3)
    assert reg_loss(a, b, UNIT) == pytest.approx(reg_loss(b, a, UNIT))


# -- Hungarian solver ---------------------------------------------------------------

def test_diagonal_dominant():
    assignment = hungarian([[1.0, 2.0], [2.0, 1.0]])
    assert assignment.tolist() == [0, 1]
    assert assignment_total([[1, 2], [2, 1]], assignment) == 2.0


def test_anti_diagonal():
    assignment = hungarian([[2.0, 1.0], [1.0, 2.0]])
    assert assignment.tolist() == [1, 0]
    assert assignment_total([[2, 1], [1, 2]], assignment) == 2.0


def test_single_row_picks_argmin():
    assert hungarian([[3.0, 1.0, 2.0]]).tolist() == [1]


def test_empty_matrix():
    assert hungarian(np.zeros((0, 4))).size == 0
    assert brute_force_assignment(np.zeros((0, 4))).size == 0


def test_more_rows_than_columns_rejected():
    with pytest.raises(ShapeError):
        hungarian(np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        brute_force_assignment(np.zeros((3, 2)))


def test_non_finite_cost_rejected():
    with pytest.raises(ConfigError):
        hungarian([[np.inf, 1.0], [1.0, 2.0]])


def test_ties_resolve_lexicographically():
    assert hungarian(np.zeros((3, 5))).tolist() == [0, 1, 2]
    assert hungarian(np.ones((2, 2))).tolist() == [0, 1]
    # forcing row 0 to a later column must still give the smallest vector
    cost = np.array([[1.0, 0.0, 0.0],
                     [0.0, 0.0, 1.0]])
    assert hungarian(cost).tolist() == [1, 0]


def test_row_shift_invariance():
    rng = rng_from(1)
    cost = rng.uniform(0, 5, (4, 6))
    shifted = cost.copy()
    shifted[2] += 17.0
    assert hungarian(cost).tolist() == hungarian(shifted).tolist()


def test_matches_brute_force_on_random_corpus():
    rng = rng_from(2)
    for trial in range(150):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(n, 8))
        cost = rng.uniform(-3, 3, (n, m))
        fast = hungarian(cost)
        slow = brute_force_assignment(cost)
        assert assignment_total(cost, fast) == pytest.approx(
            assignment_total(cost, slow), abs=1e-9), f"trial {trial}"


def test_matches_brute_force_exactly_on_tie_heavy_costs():
    # small integer costs create many optimal assignments; both sides must
    # pick the same lexicographically-first one
    rng = rng_from(3)
    for trial in range(200):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(n, 7))
        cost = rng.integers(0, 3, (n, m)).astype(np.float64)
        assert hungarian(cost).tolist() == brute_force_assignment(cost).tolist(), \
            f"trial {trial}:\n{cost}"


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_never_beaten_by_sampled_injections(seed):
    rng = rng_from(4, seed)
    n = int(rng.integers(1, 7))
    m = int(rng.integers(n, 9))
    cost = rng.uniform(-1, 1, (n, m))
    best = assignment_total(cost, hungarian(cost))
    for _ in range(30):
        candidate = rng.permutation(m)[:n]
        assert best <= assignment_total(cost, candidate) + 1e-9


# -- loss ------------------------------------------------------------------------

def _loss_inputs(probs, intervals):
    return Tensor(np.asarray(probs, dtype=np.float64), requires_grad=True), \
        Tensor(np.asarray(intervals, dtype=np.float64), requires_grad=True)


def test_binary_relabel():
    out = binary_relabel(np.array([17, 3, 17]))
    assert out.tolist() == [0, 0, 0]
    assert out.dtype == np.intp


def test_perfect_prediction_loss_is_zero():
    probs, intervals = _loss_inputs(
        [[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]],   # class 0, bg, bg
        [[0.4, 0.2], [0.5, 0.5], [0.5, 0.5]])
    loss = detr_loss([0], [[0.4, 0.2]], probs, intervals, [0], UNIT)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_pure_background_loss_is_zero():
    probs, intervals = _loss_inputs([[0.0, 1.0]] * 4, [[0.5, 0.5]] * 4)
    loss = detr_loss([], np.zeros((0, 2)), probs, intervals, [], UNIT)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_zero_probability_stays_finite():
    probs, intervals = _loss_inputs([[0.0, 1.0]], [[0.4, 0.2]])
    loss = detr_loss([0], [[0.4, 0.2]], probs, intervals, [0], UNIT)
    assert np.isfinite(loss.item())


def test_loss_decreases_as_interval_approaches_gt():
    def loss_at(center):
        probs, intervals = _loss_inputs(
            [[0.9, 0.1], [0.1, 0.9]],
            [[center, 0.2], [0.5, 0.5]])
        return detr_loss([0], [[0.3, 0.2]], probs, intervals, [0], UNIT).item()

    assert loss_at(0.4) < loss_at(0.6) < loss_at(0.8)


def test_loss_invariant_under_binary_relabel():
    rng = rng_from(5)
    intervals_np = rng.uniform(0.2, 0.8, (3, 2))
    gt = rng.uniform(0.2, 0.8, (2, 2))

    def loss_for(category_id):
        # one foreground slot regardless of the original id
        classes = binary_relabel([category_id, category_id])
        probs, intervals = _loss_inputs(rng_from(6).dirichlet([1.0, 1.0], 3),
                                        intervals_np)
        return detr_loss(classes, gt, probs, intervals, [0, 2], UNIT).item()

    assert loss_for(17) == pytest.approx(loss_for(3), abs=1e-12)


def test_loss_matches_reg_loss_on_matched_pair():
    # classification saturated: remaining loss is exactly the regression part
    gt = [[0.5, 0.4]]
    probs, intervals = _loss_inputs([[1.0, 0.0], [0.0, 1.0]],
                                    [[0.5, 0.2], [0.5, 0.5]])
    loss = detr_loss([0], gt, probs, intervals, [0], UNIT)
    assert loss.item() == pytest.approx(reg_loss((0.5, 0.4), (0.5, 0.2), UNIT))


def test_assignment_length_checked():
    probs, intervals = _loss_inputs([[1.0, 0.0]], [[0.5, 0.2]])
    with pytest.raises(ShapeError):
        detr_loss([0, 1], np.zeros((2, 2)), probs, intervals, [0], UNIT)


def test_loss_gradients_match_finite_differences():
    rng = rng_from(7)
    probs_np = rng.dirichlet(np.ones(3), size=4)
    intervals_np = rng.uniform(0.25, 0.75, (4, 2))
    gt_classes = np.array([1, 0])
    gt_intervals = np.array([[0.3, 0.2], [0.7, 0.15]])
    probs, intervals = _loss_inputs(probs_np, intervals_np)

    def loss():
        return detr_loss(gt_classes, gt_intervals, probs, intervals, [2, 0],
                         MatchCostConfig(2.0, 5.0, 2.0))

    err = ad.grad_check(loss, [probs, intervals], num_samples=50, rng=rng_from(8))
    assert err < 1e-6


def test_match_predictions_uses_forward_result():
    rng = rng_from(9)
    result = ForwardResult(
        class_probs=Tensor(rng.dirichlet(np.ones(3), size=5)),
        intervals=Tensor(rng.uniform(0.1, 0.9, (5, 2))))
    gt_classes = np.array([0, 1])
    gt_intervals = rng.uniform(0.1, 0.9, (2, 2))
    assignment = match_predictions(gt_classes, gt_intervals, result, UNIT)
    cost = cost_matrix(gt_classes, gt_intervals, result.class_probs.data,
                       result.intervals.data, UNIT)
    assert assignment.tolist() == brute_force_assignment(cost).tolist()
    assert match_predictions(np.zeros(0, dtype=np.intp), np.zeros((0, 2)),
                             result, UNIT).size == 0
