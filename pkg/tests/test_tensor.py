"""Autodiff core: every primitive's backward is checked against central
finite differences, plus the tape-accounting and detach contracts."""

import numpy as np
import pytest

from eqdec import tensor as tc
from helpers import check_grads, rel_err, run_taped


RNG = np.random.default_rng(42)


class TestBasics:
    def test_mul_self_gradient(self):
        # d(x*x)/dx at x=3 is 6
        _, grads, _ = run_taped(lambda p: tc.mul(p["x"], p["x"]), {"x": 3.0})
        assert grads["x"] == pytest.approx(6.0, abs=1e-12)

    def test_backward_product_plus_term(self):
        # y = x1*x2 + x3 at (2,3,4) -> grads (3,2,1)
        def fn(p):
            return tc.add(tc.mul(p["x1"], p["x2"]), p["x3"])

        _, g, _ = run_taped(fn, {"x1": 2.0, "x2": 3.0, "x3": 4.0})
        assert g["x1"] == pytest.approx(3.0)
        assert g["x2"] == pytest.approx(2.0)
        assert g["x3"] == pytest.approx(1.0)

    def test_backward_requires_scalar(self):
        tape = tc.Tape()
        with tc.use_tape(tape):
            x = tc.leaf(np.ones(3))
            y = tc.scale(x, 2.0)
            with pytest.raises(tc.ShapeError):
                tc.backward(y, tape)

    def test_untouched_leaf_gets_zeros(self):
        tape = tc.Tape()
        with tc.use_tape(tape):
            x = tc.leaf(np.ones((2, 2)))
            unused = tc.leaf(np.ones((3,)))
            loss = tc.reduce_sum(tc.mul(x, x))
            grads = tc.backward(loss, tape)
        assert np.array_equal(grads[unused.node], np.zeros(3))
        assert np.allclose(grads[x.node], 2.0)

    def test_detach_blocks_gradient(self):
        # y = x * detach(x): only the live factor contributes, grad = x
        def fn(p):
            return tc.mul(p["x"], tc.detach(p["x"]))

        _, g, _ = run_taped(fn, {"x": 3.0})
        assert g["x"] == pytest.approx(3.0, abs=1e-12)

    def test_finite_diff_oracle_on_square(self):
        fd = tc.finite_diff_grad(lambda p: float(p["x"] ** 2), {"x": np.array(3.0)})
        assert fd["x"] == pytest.approx(6.0, abs=1e-9)


class TestTapeAccounting:
    def test_node_count_exact(self):
        tape = tc.Tape()
        with tc.use_tape(tape):
            x = tc.leaf(np.ones((2, 2)))
            y = tc.add(x, x)
            y = tc.mul(y, x)
            y = tc.reduce_sum(y)
        assert tape.node_count() == 3

    def test_constant_only_ops_record_nothing(self):
        tape = tc.Tape()
        with tc.use_tape(tape):
            a = tc.constant(np.ones(4))
            b = tc.add(a, a)
        assert tape.node_count() == 0
        assert b.node is None

    def test_no_grad_records_zero_nodes_same_values(self):
        x = RNG.normal(size=(3, 4))
        tape = tc.Tape()
        with tc.use_tape(tape):
            xl = tc.leaf(x)
            y1 = tc.gelu(tc.matmul(xl, xl, transpose_b=True))
            n_recorded = tape.node_count()
            with tc.no_grad():
                y2 = tc.gelu(tc.matmul(xl, xl, transpose_b=True))
            assert tape.node_count() == n_recorded
        assert y2.node is None
        assert np.array_equal(y1.data, y2.data)

    def test_group_marks(self):
        tape = tc.Tape()
        with tc.use_tape(tape):
            tape.mark_group("block")
            with tc.no_grad():
                tape.mark_group("block")
            tape.mark_group("other")
        assert tape.group_count("block") == 1
        assert tape.group_count("other") == 1

    def test_vjp_tape_reusable(self):
        tape = tc.Tape()
        with tc.use_tape(tape):
            x = tc.leaf(np.array([1.0, 2.0]))
            y = tc.mul(x, x)
        g1 = tc.vjp(y, np.array([1.0, 0.0]), tape)[x.node]
        g2 = tc.vjp(y, np.array([0.0, 1.0]), tape)[x.node]
        assert np.allclose(g1, [2.0, 0.0])
        assert np.allclose(g2, [0.0, 4.0])


class TestPrimitiveGradients:
    """Backward vs central finite differences, scale-aware epsilon."""

    def _weights(self, shape):
        return RNG.normal(size=shape)

    def _scalarize(self, t, w):
        return tc.reduce_sum(tc.mul(t, tc.constant(w)))

    def test_add_broadcast(self):
        w = self._weights((2, 3))
        check_grads(
            lambda p: self._scalarize(tc.add(p["a"], p["b"]), w),
            {"a": RNG.normal(size=(2, 3)), "b": RNG.normal(size=(3,))},
        )

    def test_sub_broadcast(self):
        w = self._weights((2, 3))
        check_grads(
            lambda p: self._scalarize(tc.sub(p["a"], p["b"]), w),
            {"a": RNG.normal(size=(2, 1)), "b": RNG.normal(size=(2, 3))},
        )

    def test_mul_broadcast(self):
        w = self._weights((4, 3))
        check_grads(
            lambda p: self._scalarize(tc.mul(p["a"], p["b"]), w),
            {"a": RNG.normal(size=(4, 3)), "b": RNG.normal(size=(1, 3))},
        )

    def test_matmul(self):
        w = self._weights((2, 4))
        check_grads(
            lambda p: self._scalarize(tc.matmul(p["a"], p["b"]), w),
            {"a": RNG.normal(size=(2, 3)), "b": RNG.normal(size=(3, 4))},
            rtol=1e-6,
        )

    def test_matmul_batched(self):
        w = self._weights((2, 5, 4))
        check_grads(
            lambda p: self._scalarize(tc.matmul(p["a"], p["b"]), w),
            {"a": RNG.normal(size=(2, 5, 3)), "b": RNG.normal(size=(3, 4))},
        )

    def test_matmul_transpose_b(self):
        a = RNG.normal(size=(2, 3))
        b = RNG.normal(size=(4, 3))
        out = tc.matmul(tc.constant(a), tc.constant(b), transpose_b=True)
        assert np.allclose(out.data, a @ b.T)
        w = self._weights((2, 4))
        check_grads(
            lambda p: self._scalarize(tc.matmul(p["a"], p["b"], transpose_b=True), w),
            {"a": a, "b": b},
        )

    def test_matmul_shape_error(self):
        with pytest.raises(tc.ShapeError):
            tc.matmul(tc.constant(np.ones((2, 3))), tc.constant(np.ones((4, 5))))

    def test_relu(self):
        x = RNG.normal(size=(3, 3))
        x[np.abs(x) < 0.05] = 0.5  # keep clear of the kink
        w = self._weights((3, 3))
        check_grads(lambda p: self._scalarize(tc.relu(p["x"]), w), {"x": x})

    def test_gelu(self):
        w = self._weights((8,))
        check_grads(
            lambda p: self._scalarize(tc.gelu(p["x"]), w),
            {"x": RNG.normal(size=(8,))},
        )

    def test_tanh_sigmoid(self):
        w = self._weights((6,))
        x = RNG.normal(size=(6,))
        check_grads(lambda p: self._scalarize(tc.tanh(p["x"]), w), {"x": x})
        check_grads(lambda p: self._scalarize(tc.sigmoid(p["x"]), w), {"x": x})

    def test_sigmoid_extreme_values_stable(self):
        y = tc.sigmoid(tc.constant(np.array([-800.0, 0.0, 800.0])))
        assert np.all(np.isfinite(y.data))
        assert y.data[0] == 0.0 and y.data[2] == 1.0

    def test_softmax_rows_sum_to_one(self):
        x = RNG.normal(size=(5, 7)) * 10
        y = tc.softmax(tc.constant(x), axis=-1)
        assert np.max(np.abs(y.data.sum(axis=-1) - 1.0)) < 1e-12

    def test_softmax_grad(self):
        w = self._weights((3, 4))
        check_grads(
            lambda p: self._scalarize(tc.softmax(p["x"], axis=-1), w),
            {"x": RNG.normal(size=(3, 4))},
        )
        check_grads(
            lambda p: self._scalarize(tc.softmax(p["x"], axis=0), w),
            {"x": RNG.normal(size=(3, 4))},
        )

    def test_log_exp(self):
        w = self._weights((5,))
        check_grads(
            lambda p: self._scalarize(tc.log(p["x"]), w),
            {"x": RNG.uniform(0.5, 2.0, size=(5,))},
        )
        check_grads(
            lambda p: self._scalarize(tc.exp(p["x"]), w),
            {"x": RNG.normal(size=(5,))},
        )

    def test_sum_mean_axes(self):
        x = RNG.normal(size=(2, 3, 4))
        for axis in (None, 0, 2, (0, 2), -1):
            w_shape = np.sum(x, axis=axis).shape
            w = self._weights(w_shape)
            check_grads(
                lambda p, a=axis, ww=w: self._scalarize(tc.reduce_sum(p["x"], a), ww),
                {"x": x},
            )
            check_grads(
                lambda p, a=axis, ww=w: self._scalarize(tc.reduce_mean(p["x"], a), ww),
                {"x": x},
            )

    def test_layer_norm(self):
        w = self._weights((3, 6))
        check_grads(
            lambda p: self._scalarize(tc.layer_norm(p["x"]), w),
            {"x": RNG.normal(size=(3, 6)) * 2.0},
            rtol=1e-4,
        )
        y = tc.layer_norm(tc.constant(RNG.normal(size=(4, 8))))
        assert np.max(np.abs(y.data.mean(axis=-1))) < 1e-12

    def test_concat_narrow_take_reshape_scale(self):
        w = self._weights((2, 5))
        check_grads(
            lambda p: self._scalarize(tc.concat([p["a"], p["b"]], axis=1), w),
            {"a": RNG.normal(size=(2, 2)), "b": RNG.normal(size=(2, 3))},
        )
        w2 = self._weights((2, 2))
        check_grads(
            lambda p: self._scalarize(
                tc.narrow(p["x"], (slice(0, 2), slice(1, 3))), w2
            ),
            {"x": RNG.normal(size=(4, 4))},
        )
        # repeated rows exercise gradient accumulation in the gather
        w3 = self._weights((4, 3))
        check_grads(
            lambda p: self._scalarize(tc.take(p["x"], [0, 2, 2, 1]), w3),
            {"x": RNG.normal(size=(3, 3))},
        )
        w4 = self._weights((6,))
        check_grads(
            lambda p: self._scalarize(tc.reshape(p["x"], (6,)), w4),
            {"x": RNG.normal(size=(2, 3))},
        )
        w5 = self._weights((3,))
        check_grads(
            lambda p: self._scalarize(tc.scale(p["x"], -2.5), w5),
            {"x": RNG.normal(size=(3,))},
        )


class TestBilinearSample:
    def test_hand_case_center(self):
        m = tc.constant(np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None])
        pts = tc.constant(np.array([[0.5, 0.5]]))
        out = tc.bilinear_sample(m, pts)
        assert out.data[0, 0] == pytest.approx(1.5, abs=1e-15)

    def test_integer_points_hit_cells(self):
        m = tc.constant(np.arange(12.0).reshape(3, 4, 1))
        pts = tc.constant(np.array([[0.0, 0.0], [2.0, 3.0], [1.0, 2.0]]))
        out = tc.bilinear_sample(m, pts)
        assert np.allclose(out.data[:, 0], [0.0, 11.0, 6.0])

    def test_out_of_bounds_reads_zero(self):
        m = tc.constant(np.ones((3, 3, 2)))
        pts = tc.constant(np.array([[-5.0, 1.0], [1.0, 7.5], [-1.0, -1.0]]))
        out = tc.bilinear_sample(m, pts)
        assert np.all(out.data == 0.0)

    def test_border_fade(self):
        # half a cell past the edge: only the in-bounds tap remains
        m = tc.constant(np.full((2, 2, 1), 4.0))
        pts = tc.constant(np.array([[-0.5, 0.0]]))
        out = tc.bilinear_sample(m, pts)
        assert out.data[0, 0] == pytest.approx(2.0)

    def test_grads_vs_fd(self):
        m = RNG.normal(size=(4, 5, 3))
        pts = RNG.uniform(0.2, 2.8, size=(6, 2))
        pts[0] = [-0.4, 1.3]  # partially out of bounds
        w = RNG.normal(size=(6, 3))

        def fn(p):
            out = tc.bilinear_sample(p["m"], p["pts"])
            return tc.reduce_sum(tc.mul(out, tc.constant(w)))

        check_grads(fn, {"m": m, "pts": pts}, eps=1e-6, rtol=1e-5)

    def test_batched_matches_per_item(self):
        maps = RNG.normal(size=(3, 4, 4, 2))
        pts = RNG.uniform(0.0, 3.0, size=(3, 5, 2))
        batched = tc.bilinear_sample(tc.constant(maps), tc.constant(pts))
        for b in range(3):
            single = tc.bilinear_sample(tc.constant(maps[b]), tc.constant(pts[b]))
            assert np.allclose(batched.data[b], single.data, atol=1e-15)

    def test_batched_grads_vs_fd(self):
        maps = RNG.normal(size=(2, 3, 3, 2))
        pts = RNG.uniform(0.2, 1.8, size=(2, 4, 2))
        w = RNG.normal(size=(2, 4, 2))

        def fn(p):
            out = tc.bilinear_sample(p["m"], p["pts"])
            return tc.reduce_sum(tc.mul(out, tc.constant(w)))

        check_grads(fn, {"m": maps, "pts": pts}, eps=1e-6, rtol=1e-5)


class TestCompositeGraph:
    def test_mlp_like_chain(self):
        p = {
            "w1": RNG.normal(size=(4, 6)) * 0.3,
            "b1": RNG.normal(size=(6,)) * 0.1,
            "w2": RNG.normal(size=(6, 2)) * 0.3,
        }
        x = RNG.normal(size=(5, 4))

        def fn(pp):
            h = tc.gelu(tc.add(tc.matmul(tc.constant(x), pp["w1"]), pp["b1"]))
            h = tc.layer_norm(h)
            out = tc.softmax(tc.matmul(h, pp["w2"]), axis=-1)
            return tc.reduce_mean(tc.mul(out, out))

        check_grads(fn, p, rtol=1e-4)

    def test_apply_primitive_surface(self):
        a = tc.constant(np.ones((2, 2)))
        out = tc.apply_primitive("add", (a, a))
        assert np.allclose(out.data, 2.0)
        with pytest.raises(ValueError):
            tc.apply_primitive("not_an_op", (a,))
