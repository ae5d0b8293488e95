"""Loss and matching tests: analytic focal values, brute-force assignment
oracle, term recomposition, and finite-difference gradients."""

import itertools
import math

import numpy as np
import pytest

from eqdec import tensor as tc
from eqdec.geometry import Box, giou
from eqdec.losses import (
    Assignment,
    LossWeights,
    batch_set_loss,
    focal_loss,
    focal_terms_t,
    hungarian_match,
    match_cost,
    set_loss,
)

from helpers import check_grads, rel_err

IMAGE = (128, 128)


def brute_force_total(cost: np.ndarray) -> float:
    n, m = cost.shape
    best = math.inf
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            best = min(best, sum(cost[i, c] for i, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n), m):
            best = min(best, sum(cost[r, j] for j, r in enumerate(rows)))
    return best


def assignment_total(cost: np.ndarray, a: Assignment) -> float:
    return float(sum(cost[i, j] for i, j in a.pairs))


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_focal, w.lambda_l1, w.lambda_giou) == (2.0, 5.0, 2.0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_l1=-1.0)

    def test_scaled(self):
        w = LossWeights().scaled(3.0)
        assert (w.lambda_focal, w.lambda_l1, w.lambda_giou) == (6.0, 15.0, 6.0)


class TestAssignment:
    def test_injectivity_enforced(self):
        with pytest.raises(ValueError):
            Assignment(((0, 0), (0, 1)))
        with pytest.raises(ValueError):
            Assignment(((0, 1), (1, 1)))

    def test_len(self):
        assert len(Assignment(((0, 0), (1, 2)))) == 2


class TestFocalLoss:
    def test_reduces_to_cross_entropy_when_flat(self):
        # gamma=0, alpha=1, positive at p=0.5 -> ln 2
        loss = focal_loss(np.array([[0.0]]), np.array([0]), gamma=0.0, alpha=1.0)
        assert abs(loss - math.log(2.0)) < 1e-12

    def test_down_weighted_easy_positive(self):
        # gamma=2, alpha=0.25 at p=0.9: 0.25 * 0.1^2 * (-ln 0.9)
        logit = math.log(9.0)  # sigmoid^-1(0.9)
        loss = focal_loss(np.array([[logit]]), np.array([0]))
        want = 0.25 * 0.01 * (-math.log(0.9))
        assert rel_err(loss, want) < 1e-12

    def test_confident_correct_vanishes(self):
        logits = np.array([[40.0, -40.0], [-40.0, 40.0]])
        assert focal_loss(logits, np.array([0, 1])) < 1e-12

    def test_background_contributes_negative_terms_only(self):
        logits = np.array([[-40.0, -40.0]])
        assert focal_loss(logits, np.array([-1])) < 1e-12
        hot = focal_loss(np.array([[3.0, -40.0]]), np.array([-1]))
        assert hot > 1e-3  # a confident prediction on background is punished

    def test_validation(self):
        logits = np.zeros((2, 3))
        with pytest.raises(ValueError):
            focal_loss(logits, np.array([0, 3]))
        with pytest.raises(ValueError):
            focal_loss(logits, np.array([0, -2]))
        with pytest.raises(ValueError):
            focal_loss(logits, np.array([0, 1]), gamma=-1.0)
        with pytest.raises(ValueError):
            focal_loss(logits, np.array([0, 1]), alpha=1.5)

    def test_taped_terms_agree_with_plain_route(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(5, 3)) * 3.0
        targets = np.array([-1, 0, 2, 1, -1])
        plain = focal_loss(logits, targets)
        mask = np.zeros((5, 3))
        for i, t in enumerate(targets):
            if t >= 0:
                mask[i, t] = 1.0
        taped = tc.reduce_mean(focal_terms_t(tc.constant(logits), mask))
        assert rel_err(float(taped.data), plain) < 1e-12

    def test_taped_terms_gradients(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(4, 3)) * 2.0
        mask = np.zeros((4, 3))
        mask[0, 1] = mask[2, 0] = 1.0
        check_grads(
            lambda p: tc.reduce_mean(focal_terms_t(p["logits"], mask)),
            {"logits": logits},
        )

    def test_extreme_logits_stay_finite(self):
        logits = np.array([[40.0, -40.0], [-35.0, 38.0]])
        mask = np.array([[1.0, 0.0], [0.0, 1.0]])
        with np.errstate(all="raise"):
            out = tc.reduce_sum(focal_terms_t(tc.constant(logits), mask))
            plain = focal_loss(logits, np.array([0, 1]))
        assert np.isfinite(out.data) and np.isfinite(plain)


class TestHungarianMatch:
    def test_diagonal_dominant(self):
        a = hungarian_match(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert a.pairs == ((0, 0), (1, 1))

    def test_three_by_three_known_optimum(self):
        cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
        a = hungarian_match(cost)
        assert a.pairs == ((0, 1), (1, 0), (2, 2))
        assert assignment_total(cost, a) == 5.0

    def test_pair_count_is_min_dimension(self):
        rng = np.random.default_rng(0)
        assert len(hungarian_match(rng.normal(size=(5, 2)))) == 2
        assert len(hungarian_match(rng.normal(size=(2, 5)))) == 2

    def test_empty_dimensions(self):
        assert hungarian_match(np.zeros((0, 3))).pairs == ()
        assert hungarian_match(np.zeros((3, 0))).pairs == ()

    def test_nan_and_inf_rejected(self):
        with pytest.raises(ValueError):
            hungarian_match(np.array([[1.0, np.nan], [0.0, 1.0]]))
        with pytest.raises(ValueError):
            hungarian_match(np.array([[1.0, np.inf], [0.0, 1.0]]))

    def test_ties_prefer_low_indices(self):
        assert hungarian_match(np.ones((2, 2))).pairs == ((0, 0), (1, 1))
        assert hungarian_match(np.ones((2, 1))).pairs == ((0, 0),)
        assert hungarian_match(np.ones((1, 2))).pairs == ((0, 0),)

    def test_matches_brute_force_on_random_matrices(self):
        rng = np.random.default_rng(7)
        for trial in range(200):
            n = int(rng.integers(1, 7))
            m = int(rng.integers(1, 7))
            cost = rng.normal(size=(n, m)) * 3.0
            a = hungarian_match(cost)
            assert len(a) == min(n, m)
            assert abs(assignment_total(cost, a) - brute_force_total(cost)) < 1e-9

    def test_matches_brute_force_with_heavy_ties(self):
        rng = np.random.default_rng(8)
        for trial in range(100):
            n = int(rng.integers(1, 6))
            m = int(rng.integers(1, 6))
            cost = rng.integers(0, 3, size=(n, m)).astype(np.float64)
            a = hungarian_match(cost)
            assert abs(assignment_total(cost, a) - brute_force_total(cost)) < 1e-12


class TestMatchCost:
    def make_instance(self, seed=5, n=4, m=3, k=3):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(n, k)) * 2.0
        corners = rng.uniform(5.0, 60.0, size=(n, 2, 2))
        boxes = np.concatenate(
            [corners.min(axis=1), corners.min(axis=1) + rng.uniform(3.0, 50.0, (n, 2))],
            axis=1,
        )
        gtc = rng.uniform(5.0, 60.0, size=(m, 2, 2))
        gt_boxes = np.concatenate(
            [gtc.min(axis=1), gtc.min(axis=1) + rng.uniform(3.0, 50.0, (m, 2))], axis=1
        )
        gt_classes = rng.integers(0, k, size=m)
        return logits, boxes, gt_boxes, gt_classes

    def test_zero_weights_zero_cost(self):
        logits, boxes, gtb, gtc = self.make_instance()
        cost = match_cost(logits, boxes, gtb, gtc, IMAGE, LossWeights(0.0, 0.0, 0.0))
        assert np.array_equal(cost, np.zeros((4, 3)))

    def test_exact_match_is_row_minimum(self):
        logits, boxes, gtb, gtc = self.make_instance()
        boxes = boxes.copy()
        boxes[0] = gtb[0]
        logits = logits.copy()
        logits[0] = -8.0
        logits[0, gtc[0]] = 8.0
        cost = match_cost(logits, boxes, gtb, gtc, IMAGE, LossWeights())
        assert int(np.argmin(cost[0])) == 0

    def test_recomposition_against_scalar_terms(self):
        logits, boxes, gtb, gtc = self.make_instance(seed=11)
        w = LossWeights(1.7, 3.1, 0.9)
        cost = match_cost(logits, boxes, gtb, gtc, IMAGE, w)
        scale = np.array([IMAGE[1], IMAGE[0], IMAGE[1], IMAGE[0]], dtype=np.float64)
        for i in range(4):
            for j in range(3):
                s = logits[i, gtc[j]]
                p = 1.0 / (1.0 + math.exp(-s))
                pos = 0.25 * (1.0 - p) ** 2 * (-math.log(p))
                neg = 0.75 * p ** 2 * (-math.log(1.0 - p))
                l1 = np.abs(boxes[i] / scale - gtb[j] / scale).sum()
                g = giou(Box.from_corners(*boxes[i]), Box.from_corners(*gtb[j]))
                want = w.lambda_focal * (pos - neg) + w.lambda_l1 * l1 + w.lambda_giou * (1.0 - g)
                assert rel_err(cost[i, j], want) < 1e-10

    def test_empty_ground_truth(self):
        logits, boxes, _, _ = self.make_instance()
        cost = match_cost(logits, boxes, np.zeros((0, 4)), np.zeros(0, dtype=int), IMAGE, LossWeights())
        assert cost.shape == (4, 0)

    def test_class_out_of_range(self):
        logits, boxes, gtb, gtc = self.make_instance()
        with pytest.raises(ValueError):
            match_cost(logits, boxes, gtb, np.array([0, 1, 5]), IMAGE, LossWeights())


def make_set_instance(seed=9, n=4, m=2, k=3):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, k)) * 2.0
    mins = rng.uniform(5.0, 50.0, size=(n, 2))
    boxes = np.concatenate([mins, mins + rng.uniform(4.0, 40.0, (n, 2))], axis=1)
    gmins = rng.uniform(5.0, 50.0, size=(m, 2))
    gt_boxes = np.concatenate([gmins, gmins + rng.uniform(4.0, 40.0, (m, 2))], axis=1)
    gt_classes = rng.integers(0, k, size=m)
    assignment = Assignment(tuple((i, i) for i in range(m)))
    return logits, boxes, gt_boxes, gt_classes, assignment


class TestSetLoss:
    def test_perfect_predictions(self):
        k = 3
        gt_boxes = np.array([[10.0, 12.0, 40.0, 50.0], [60.0, 20.0, 100.0, 90.0]])
        gt_classes = np.array([0, 2])
        logits = np.full((2, k), -14.0)
        logits[0, 0] = 14.0
        logits[1, 2] = 14.0
        a = Assignment(((0, 0), (1, 1)))
        total, parts = set_loss(
            tc.constant(logits), tc.constant(gt_boxes), gt_boxes, gt_classes,
            IMAGE, a, LossWeights(),
        )
        assert parts["l1"] < 1e-12
        assert parts["giou"] < 1e-12
        assert float(total.data) < 1e-9

    def test_empty_ground_truth_is_background_only(self):
        logits, boxes, _, _, _ = make_set_instance()
        total, parts = set_loss(
            tc.constant(logits), tc.constant(boxes), np.zeros((0, 4)),
            np.zeros(0, dtype=int), IMAGE, Assignment(()), LossWeights(),
        )
        n, k = logits.shape
        want = 2.0 * focal_loss(logits, np.full(n, -1)) * n * k  # sum = mean * count
        assert rel_err(float(total.data), want) < 1e-12
        assert parts["l1"] == 0.0 and parts["giou"] == 0.0

    def test_breakdown_sums_to_total(self):
        logits, boxes, gtb, gtc, a = make_set_instance()
        total, parts = set_loss(
            tc.constant(logits), tc.constant(boxes), gtb, gtc, IMAGE, a, LossWeights()
        )
        assert rel_err(parts["focal"] + parts["l1"] + parts["giou"], float(total.data)) < 1e-12

    def test_gradients_match_finite_differences(self):
        logits, boxes, gtb, gtc, a = make_set_instance(seed=15)
        check_grads(
            lambda p: set_loss(p["logits"], p["boxes"], gtb, gtc, IMAGE, a, LossWeights())[0],
            {"logits": logits, "boxes": boxes},
            rtol=1e-4,
        )

    def test_loss_decreases_toward_target(self):
        logits = np.array([[6.0, -6.0]])
        gt = np.array([[60.0, 50.0, 120.0, 110.0]])
        gtc = np.array([0])
        a = Assignment(((0, 0),))
        for start in (
            np.array([[10.0, 10.0, 40.0, 30.0]]),     # disjoint start
            np.array([[50.0, 40.0, 100.0, 125.0]]),   # overlapping start
        ):
            values = []
            for t in np.linspace(0.0, 1.0, 21):
                box = (1.0 - t) * start + t * gt
                total, _ = set_loss(
                    tc.constant(logits), tc.constant(box), gt, gtc,
                    IMAGE, a, LossWeights(),
                )
                values.append(float(total.data))
            for v1, v2 in zip(values, values[1:]):
                assert v2 <= v1 + 1e-10

    def test_weight_scaling_scales_loss_and_keeps_assignment(self):
        logits, boxes, gtb, gtc, a = make_set_instance(seed=23)
        w, w3 = LossWeights(), LossWeights().scaled(3.0)
        t1, _ = set_loss(tc.constant(logits), tc.constant(boxes), gtb, gtc, IMAGE, a, w)
        t3, _ = set_loss(tc.constant(logits), tc.constant(boxes), gtb, gtc, IMAGE, a, w3)
        assert rel_err(float(t3.data), 3.0 * float(t1.data)) < 1e-12
        a1 = hungarian_match(match_cost(logits, boxes, gtb, gtc, IMAGE, w))
        a3 = hungarian_match(match_cost(logits, boxes, gtb, gtc, IMAGE, w3))
        assert a1.pairs == a3.pairs

    def test_assignment_out_of_range_rejected(self):
        logits, boxes, gtb, gtc, _ = make_set_instance()
        with pytest.raises(ValueError):
            set_loss(
                tc.constant(logits), tc.constant(boxes), gtb, gtc, IMAGE,
                Assignment(((0, 7),)), LossWeights(),
            )


class TestBatchSetLoss:
    def make_batch(self, seed=31, b=3, n=5, k=4):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(b, n, k)) * 2.0
        mins = rng.uniform(5.0, 50.0, size=(b, n, 2))
        boxes = np.concatenate([mins, mins + rng.uniform(4.0, 40.0, (b, n, 2))], axis=2)
        gt_boxes, gt_classes, assignments = [], [], []
        for bi, m in enumerate((2, 0, 3)):
            gmins = rng.uniform(5.0, 50.0, size=(m, 2))
            gt_boxes.append(
                np.concatenate([gmins, gmins + rng.uniform(4.0, 40.0, (m, 2))], axis=1)
            )
            gt_classes.append(rng.integers(0, k, size=m))
            assignments.append(Assignment(tuple((i + bi % 2, i) for i in range(m))))
        return logits, boxes, gt_boxes, gt_classes, assignments

    def test_equals_mean_of_single_item_losses(self):
        logits, boxes, gtb, gtc, assigns = self.make_batch()
        b = logits.shape[0]

        tape = tc.Tape()
        with tc.use_tape(tape):
            lt = tc.leaf(logits)
            bt = tc.leaf(boxes)
            total, parts = batch_set_loss(lt, bt, gtb, gtc, IMAGE, assigns, LossWeights())
            grads = tc.backward(total, tape)
        batch_val = float(total.data)
        batch_glog = grads[lt.node]
        batch_gbox = grads[bt.node]

        singles, glog, gbox = [], [], []
        for bi in range(b):
            tape_i = tc.Tape()
            with tc.use_tape(tape_i):
                li = tc.leaf(logits[bi])
                bx = tc.leaf(boxes[bi])
                ti, _ = set_loss(li, bx, gtb[bi], gtc[bi], IMAGE, assigns[bi], LossWeights())
                gi = tc.backward(ti, tape_i)
            singles.append(float(ti.data))
            glog.append(gi[li.node])
            gbox.append(gi[bx.node])

        assert rel_err(batch_val, np.mean(singles)) < 1e-12
        assert rel_err(batch_glog, np.stack(glog) / b, floor=1e-9) < 1e-12
        assert rel_err(batch_gbox, np.stack(gbox) / b, floor=1e-9) < 1e-12

    def test_breakdown_sums_to_total(self):
        logits, boxes, gtb, gtc, assigns = self.make_batch(seed=37)
        total, parts = batch_set_loss(
            tc.constant(logits), tc.constant(boxes), gtb, gtc, IMAGE, assigns, LossWeights()
        )
        assert rel_err(parts["focal"] + parts["l1"] + parts["giou"], float(total.data)) < 1e-12

    def test_batch_size_mismatch_rejected(self):
        logits, boxes, gtb, gtc, assigns = self.make_batch()
        with pytest.raises(ValueError):
            batch_set_loss(
                tc.constant(logits), tc.constant(boxes), gtb[:2], gtc, IMAGE, assigns, LossWeights()
            )
