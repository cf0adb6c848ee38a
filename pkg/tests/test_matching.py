import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from desksgg.boxes import box_iou
from desksgg.matching import (
    FOCAL_ALPHA,
    FOCAL_EPS,
    FOCAL_GAMMA,
    assign_triplets,
    class_cost,
    entity_cost,
    hungarian,
    match_entities,
    triplet_cost,
    triplet_cost_matrix,
)
from desksgg.structures import EntitySet, TripletTargets
from scenes import C_E, C_P, fig5_predictions, fig5_targets, random_boxes, random_triplet_set


def brute_force(cost):
    """Column -> row map minimizing the total, by enumerating row permutations."""
    rows, cols = cost.shape
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(rows), cols):
        total = sum(cost[r, c] for c, r in enumerate(perm))
        if total < best:
            best, best_perm = total, perm
    return np.array(best_perm), best


class TestClassCost:
    def test_half(self):
        assert class_cost(0.5) == pytest.approx(-0.086643, abs=1e-6)

    def test_one(self):
        assert class_cost(1.0) == pytest.approx(-13.8155, abs=1e-3)

    def test_hand_formula(self):
        p = 0.3
        expected = FOCAL_ALPHA * 0.7 ** FOCAL_GAMMA * -np.log(0.3 + FOCAL_EPS) - (1 - FOCAL_ALPHA) * 0.09 * -np.log(0.7 + FOCAL_EPS)
        assert class_cost(p) == pytest.approx(expected, rel=1e-12)

    def test_monotone_decreasing(self):
        p = np.linspace(0.01, 0.99, 99)
        assert np.all(np.diff(class_cost(p)) < 0)

    def test_entity_cost_without_box(self):
        logits = np.zeros(C_E + 1)
        assert entity_cost(logits, None, 0) == pytest.approx(class_cost(1 / (C_E + 1)))

    def test_entity_cost_with_box(self):
        logits = np.zeros(C_E + 1)
        box = np.array([0.5, 0.5, 0.2, 0.2])
        assert entity_cost(logits, box, 2, box) == pytest.approx(class_cost(1 / (C_E + 1)))

    def test_matrix_matches_scalar(self, rng):
        preds = random_triplet_set(rng, 5)
        gts = TripletTargets(rng.integers(0, C_E, 3), random_boxes(rng, 3), rng.integers(0, C_P, 3),
                             rng.integers(0, C_E, 3), random_boxes(rng, 3))
        m = triplet_cost_matrix(preds, gts)
        for i in range(5):
            for j in range(3):
                assert m[i, j] == pytest.approx(triplet_cost(preds, i, gts, j), rel=1e-12)


class TestHungarian:
    def test_two_by_two(self):
        out = hungarian(np.array([[1.0, 2.0], [2.0, 4.0]]))
        np.testing.assert_array_equal(out, [1, 0])

    def test_identity(self):
        c = np.ones((5, 5)) - np.eye(5)
        np.testing.assert_array_equal(hungarian(c), np.arange(5))

    def test_ties_lowest_row(self):
        np.testing.assert_array_equal(hungarian(np.zeros((4, 1))), [0])

    def test_rectangular(self, rng):
        c = rng.random((7, 3))
        perm, best = brute_force(c)
        out = hungarian(c)
        assert c[out, np.arange(3)].sum() == pytest.approx(best, abs=1e-12)
        np.testing.assert_array_equal(out, perm)

    def test_random_against_brute_force(self, rng):
        for _ in range(200):
            cols = int(rng.integers(1, 7))
            rows = int(rng.integers(cols, 7))
            c = rng.normal(size=(rows, cols))
            perm, _ = brute_force(c)
            np.testing.assert_array_equal(hungarian(c), perm)

    def test_constant_shift_invariant(self, rng):
        c = rng.random((6, 4))
        np.testing.assert_array_equal(hungarian(c), hungarian(c + 17.5))

    def test_errors(self):
        with pytest.raises(ValueError):
            hungarian(np.ones((2, 3)))
        with pytest.raises(ValueError):
            hungarian(np.array([[np.nan]]))

    def test_empty(self):
        assert hungarian(np.zeros((3, 0))).shape == (0,)


class TestAssignment:
    def test_proposal_a_full_targets(self):
        res = assign_triplets(fig5_predictions(), fig5_targets(), 0.7)
        np.testing.assert_array_equal(res.pred_for_gt, [0])
        gts = fig5_targets()
        assert res.sub_labels[0] == gts.sub_labels[0] and res.obj_labels[0] == gts.obj_labels[0]
        assert res.prd_labels[0] == gts.prd_labels[0]
        np.testing.assert_array_equal(res.sub_boxes[0], gts.sub_boxes[0])

    def test_unmatched_background(self):
        res = assign_triplets(fig5_predictions(), fig5_targets(), 0.7)
        np.testing.assert_array_equal(res.sub_labels[1:], C_E)
        np.testing.assert_array_equal(res.obj_labels[1:], C_E)
        np.testing.assert_array_equal(res.prd_labels[1:], C_P)

    def test_proposal_c(self):
        preds = fig5_predictions()
        assert box_iou(preds.sub_boxes[2], fig5_targets().sub_boxes[0]) == pytest.approx(0.8)
        res = assign_triplets(preds, fig5_targets(), 0.7)
        assert (res.theta_sub[2], res.theta_obj[2]) == (0.0, 1.0)

    def test_proposal_d_label_must_match(self):
        res = assign_triplets(fig5_predictions(), fig5_targets(), 0.7)
        assert (res.theta_sub[3], res.theta_obj[3]) == (1.0, 0.0)

    def test_t_one_disables(self):
        res = assign_triplets(fig5_predictions(), fig5_targets(), 1.0)
        assert np.all(res.theta_sub == 1) and np.all(res.theta_obj == 1)

    def test_bad_threshold(self):
        for t in (0.0, 1.5):
            with pytest.raises(ValueError):
                assign_triplets(fig5_predictions(), fig5_targets(), t)

    def test_too_few_queries(self, rng):
        gts = TripletTargets(np.zeros(5, int), random_boxes(rng, 5), np.zeros(5, int), np.ones(5, int), random_boxes(rng, 5))
        with pytest.raises(ValueError, match="query"):
            assign_triplets(random_triplet_set(rng, 4), gts, 0.7)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_in_threshold(self, seed):
        rng = np.random.default_rng(seed)
        preds = random_triplet_set(rng, 6)
        g = int(rng.integers(1, 4))
        gts = TripletTargets(rng.integers(0, C_E, g), preds.sub_boxes[:g] + 0.01, rng.integers(0, C_P, g),
                             rng.integers(0, C_E, g), preds.obj_boxes[:g] + 0.01)
        prev = None
        for t in (0.95, 0.8, 0.6, 0.4, 0.2):
            res = assign_triplets(preds, gts, t)
            if prev is not None:
                assert np.all(res.theta_sub <= prev.theta_sub) and np.all(res.theta_obj <= prev.theta_obj)
            assert np.all(res.theta_sub[res.matched] == 1) and np.all(res.theta_obj[res.matched] == 1)
            prev = res

    def test_every_gt_assigned_once(self, rng):
        for _ in range(50):
            preds = random_triplet_set(rng, 6)
            g = int(rng.integers(0, 7))
            gts = TripletTargets(rng.integers(0, C_E, g), random_boxes(rng, g), rng.integers(0, C_P, g),
                                 rng.integers(0, C_E, g), random_boxes(rng, g))
            res = assign_triplets(preds, gts, 0.7)
            assert len(set(res.pred_for_gt.tolist())) == g
            np.testing.assert_array_equal(res.prd_labels[res.pred_for_gt], gts.prd_labels)
            np.testing.assert_array_equal(res.obj_boxes[res.pred_for_gt], gts.obj_boxes)


class TestEntityMatching:
    def test_picks_best_slot(self):
        logits = np.zeros((3, C_E + 1))
        logits[2, 4] = 10.0
        boxes = np.array([[0.2, 0.2, 0.1, 0.1], [0.5, 0.5, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])
        out = match_entities(EntitySet(logits, boxes), np.array([4]), np.array([[0.7, 0.7, 0.2, 0.2]]))
        np.testing.assert_array_equal(out, [2])
