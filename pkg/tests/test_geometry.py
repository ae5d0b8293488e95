"""Box codec and overlap measures, checked against hand arithmetic and
against each other across the scalar / vectorized / taped routes."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqdec import geometry as geo
from eqdec import tensor as tc
from helpers import check_grads, rel_err


coord = st.floats(-100.0, 100.0, allow_nan=False)
side = st.floats(0.05, 50.0, allow_nan=False)


def boxes(draw):
    cx, cy = draw(coord), draw(coord)
    w, h = draw(side), draw(side)
    return geo.Box.from_center(cx, cy, w, h)


box_strategy = st.builds(
    geo.Box.from_center, cx=coord, cy=coord, w=side, h=side
)


class TestCodec:
    def test_known_encoding(self):
        b = geo.Box.from_corners(10, 20, 30, 60)  # w=20, h=40
        p = geo.encode_box(b)
        assert p.x == pytest.approx(20.0)
        assert p.y == pytest.approx(40.0)
        assert p.z == pytest.approx(np.log2(np.sqrt(800.0)))
        assert p.r == pytest.approx(1.0)  # log2(40/20)

    def test_decode_formulas(self):
        p = geo.PositionalVector(0.0, 0.0, 3.0, 2.0)
        b = geo.decode_pos(p)
        assert b.width == pytest.approx(2.0 ** (3.0 - 1.0))
        assert b.height == pytest.approx(2.0 ** (3.0 + 1.0))

    @settings(max_examples=200, deadline=None)
    @given(box_strategy)
    def test_roundtrip(self, b):
        rb = geo.decode_pos(geo.encode_box(b))
        assert np.max(np.abs(rb.as_array() - b.as_array())) < 1e-9

    def test_roundtrip_array_route(self):
        rng = np.random.default_rng(7)
        n = 1000
        c = np.empty((n, 4))
        c[:, 0] = rng.uniform(-50, 50, n)
        c[:, 1] = rng.uniform(-50, 50, n)
        c[:, 2] = c[:, 0] + rng.uniform(0.1, 40, n)
        c[:, 3] = c[:, 1] + rng.uniform(0.1, 40, n)
        back = geo.decode_arr(geo.encode_arr(c))
        assert np.max(np.abs(back - c)) < 1e-9

    def test_array_matches_scalar(self):
        b = geo.Box.from_corners(-3, 2, 5, 4)
        arr = geo.encode_arr(b.as_array()[None, :])[0]
        assert np.allclose(arr, geo.encode_box(b).as_array(), atol=1e-14)

    def test_canonicalize_swapped_corners(self):
        b = geo.Box.from_corners(3, 5, 1, 2)
        assert (b.x1, b.y1, b.x2, b.y2) == (1, 2, 3, 5)

    def test_degenerate_rejected(self):
        with pytest.raises(geo.GeometryError):
            geo.Box.from_center(0, 0, 0.0, 1.0)
        with pytest.raises(geo.GeometryError):
            geo.encode_box(geo.Box.from_corners(0, 0, 0, 1))


class TestBoxDelta:
    def test_center_shift_scales_with_z(self):
        p = geo.PositionalVector(0.0, 0.0, 3.0, 0.0)
        q = geo.apply_box_delta(p, (1.0, 0.0, 0.0, 0.0))
        assert q.x == pytest.approx(8.0)  # 2**3
        assert (q.y, q.z, q.r) == (0.0, 3.0, 0.0)

    def test_zero_delta_is_identity(self):
        p = geo.PositionalVector(1.5, -2.0, 0.7, -0.3)
        q = geo.apply_box_delta(p, np.zeros(4))
        assert q == p

    def test_scale_aspect_additive(self):
        p = geo.PositionalVector(0, 0, 1.0, 0.5)
        q = geo.apply_box_delta(p, (0, 0, 0.25, -0.5))
        assert q.z == pytest.approx(1.25)
        assert q.r == pytest.approx(0.0)


class TestOverlap:
    def test_hand_case(self):
        a = geo.Box.from_corners(0, 0, 2, 2)
        b = geo.Box.from_corners(1, 1, 3, 3)
        assert geo.iou(a, b) == pytest.approx(1.0 / 7.0, abs=1e-15)
        assert geo.giou(a, b) == pytest.approx(-5.0 / 63.0, abs=1e-12)

    def test_identical_boxes(self):
        a = geo.Box.from_corners(-1, -1, 4, 2)
        assert geo.iou(a, a) == pytest.approx(1.0)
        assert geo.giou(a, a) == pytest.approx(1.0)

    def test_disjoint_boxes(self):
        a = geo.Box.from_corners(0, 0, 1, 1)
        b = geo.Box.from_corners(100, 0, 101, 1)
        assert geo.iou(a, b) == 0.0
        assert geo.giou(a, b) < -0.9

    @settings(max_examples=200, deadline=None)
    @given(box_strategy, box_strategy)
    def test_bounds_and_ordering(self, a, b):
        i = geo.iou(a, b)
        g = geo.giou(a, b)
        assert 0.0 <= i <= 1.0 + 1e-12
        assert -1.0 < g <= 1.0 + 1e-12
        assert g <= i + 1e-12

    def test_matrix_routes_match_scalar(self):
        rng = np.random.default_rng(3)
        a = np.sort(rng.uniform(-10, 10, size=(5, 2, 2)), axis=-1)
        b = np.sort(rng.uniform(-10, 10, size=(4, 2, 2)), axis=-1)
        a = a.transpose(0, 2, 1).reshape(5, 4)  # x1,y1,x2,y2
        b = b.transpose(0, 2, 1).reshape(4, 4)
        im = geo.iou_matrix(a, b)
        gm = geo.giou_matrix(a, b)
        for i in range(5):
            for j in range(4):
                ba = geo.Box.from_corners(*a[i])
                bb = geo.Box.from_corners(*b[j])
                assert im[i, j] == pytest.approx(geo.iou(ba, bb), abs=1e-12)
                assert gm[i, j] == pytest.approx(geo.giou(ba, bb), abs=1e-12)


class TestTapedRoutes:
    def test_decode_pos_t_matches_scalar(self):
        rng = np.random.default_rng(5)
        pos = rng.normal(size=(6, 4))
        out = geo.decode_pos_t(tc.constant(pos))
        expect = geo.decode_arr(pos)
        assert np.max(np.abs(out.data - expect)) < 1e-12

    def test_decode_pos_t_grads(self):
        rng = np.random.default_rng(6)
        pos = rng.normal(size=(3, 4)) * 0.5
        w = rng.normal(size=(3, 4))
        check_grads(
            lambda p: tc.reduce_sum(tc.mul(geo.decode_pos_t(p["pos"]), tc.constant(w))),
            {"pos": pos},
            rtol=1e-5,
        )

    def test_giou_pairs_t_matches_scalar(self):
        rng = np.random.default_rng(8)
        pred = np.sort(rng.uniform(0, 10, size=(7, 2, 2)), axis=-1).transpose(0, 2, 1).reshape(7, 4)
        gt = np.sort(rng.uniform(0, 10, size=(7, 2, 2)), axis=-1).transpose(0, 2, 1).reshape(7, 4)
        out = geo.giou_pairs_t(tc.constant(pred), tc.constant(gt))
        for i in range(7):
            expect = geo.giou(geo.Box.from_corners(*pred[i]), geo.Box.from_corners(*gt[i]))
            assert out.data[i, 0] == pytest.approx(expect, abs=1e-12)

    def test_giou_pairs_t_grads(self):
        # overlapping, non-degenerate pair: gradient well defined
        pred = np.array([[0.0, 0.0, 2.0, 2.0], [1.0, 0.5, 4.0, 3.2]])
        gt = np.array([[0.5, 0.5, 2.5, 2.5], [0.0, 0.0, 3.0, 2.8]])

        def fn(p):
            return tc.reduce_sum(geo.giou_pairs_t(p["pred"], tc.constant(gt)))

        check_grads(fn, {"pred": pred}, rtol=1e-5)
