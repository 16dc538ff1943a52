import math
import threading

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qfsum import numgrad as ng
from qfsum.numgrad import DiffArray, Tape


def leaf(x):
    return DiffArray(x, requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = ng.matmul(DiffArray(np.eye(2)), DiffArray([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.values, [[3.0], [4.0]])

    def test_hand_product(self):
        out = ng.matmul(DiffArray([[1.0, 2.0], [3.0, 4.0]]), DiffArray([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.values, [[3.0], [7.0]])

    def test_zero_matrix(self):
        out = ng.matmul(DiffArray(np.zeros((2, 3))), DiffArray(np.arange(3.0).reshape(3, 1)))
        np.testing.assert_array_equal(out.values, np.zeros((2, 1)))

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ng.DimensionError, match=r"\(2, 3\).*\(2, 1\)"):
            ng.matmul(DiffArray(np.zeros((2, 3))), DiffArray(np.zeros((2, 1))))

    def test_backward_rule(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng.normal(size=(3, 2))), leaf(rng.normal(size=(2, 4)))
        g = rng.normal(size=(3, 4))
        with Tape() as tape:
            out = ng.total(ng.mul(ng.matmul(a, b), DiffArray(g)))
        tape.backward(out)
        np.testing.assert_allclose(a.grad, g @ b.values.T, rtol=1e-14)
        np.testing.assert_allclose(b.grad, a.values.T @ g, rtol=1e-14)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert ng.sigmoid(DiffArray(0.0)).values == 0.5

    def test_tanh_zero(self):
        assert ng.tanh(DiffArray(0.0)).values == 0.0

    def test_mul(self):
        np.testing.assert_array_equal(ng.mul(DiffArray([1.0, 2.0]), DiffArray([3.0, 4.0])).values, [3.0, 8.0])

    def test_dispatch_by_name(self):
        x = DiffArray([0.5, 1.5])
        for name in ("sigmoid", "tanh", "oneminus", "exp", "log", "neg"):
            np.testing.assert_array_equal(ng.elementwise(name, x).values, getattr(ng, name)(x).values)
        np.testing.assert_array_equal(ng.elementwise("sub", x, x).values, [0.0, 0.0])

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            ng.elementwise("cube", DiffArray([1.0]))

    def test_shape_mismatch(self):
        with pytest.raises(ng.DimensionError):
            ng.add(DiffArray([1.0, 2.0]), DiffArray([1.0, 2.0, 3.0]))

    @pytest.mark.parametrize("bad", [0.0, -1.0, float("nan")])
    def test_log_domain(self, bad):
        with pytest.raises(ng.NumericDomainError):
            ng.log(DiffArray([1.0, bad]))

    def test_sigmoid_extremes_are_finite(self):
        s = ng.sigmoid(DiffArray([-800.0, 800.0])).values
        np.testing.assert_array_equal(s, [0.0, 1.0])
        ls = ng.log_sigmoid(DiffArray([-800.0, 800.0])).values
        assert ls[0] == -800.0 and ls[1] == 0.0

    def test_sigmoid_local_gradient(self):
        x = leaf([0.3, -1.2])
        with Tape() as tape:
            out = ng.total(ng.sigmoid(x))
        tape.backward(out)
        s = 1 / (1 + np.exp(-x.values))
        np.testing.assert_allclose(x.grad, s * (1 - s), rtol=1e-14)


class TestConcat:
    def test_vectors(self):
        np.testing.assert_array_equal(ng.concat([DiffArray([1.0, 2.0]), DiffArray([3.0])]).values, [1, 2, 3])

    def test_bidirectional_width(self):
        out = ng.concat([DiffArray(np.zeros(512)), DiffArray(np.zeros(512))])
        assert out.shape == (1024,)

    def test_empty_part(self):
        x = DiffArray([1.0, 2.0])
        np.testing.assert_array_equal(ng.concat([x, DiffArray(np.zeros(0))]).values, x.values)

    def test_incompatible(self):
        with pytest.raises(ng.DimensionError):
            ng.concat([DiffArray(np.zeros((2, 3))), DiffArray(np.zeros((3, 3)))], axis=1)

    def test_gradient_slices_back(self):
        a, b = leaf([1.0, 2.0]), leaf([3.0])
        with Tape() as tape:
            out = ng.total(ng.mul(ng.concat([a, b]), DiffArray([10.0, 20.0, 30.0])))
        tape.backward(out)
        np.testing.assert_array_equal(a.grad, [10.0, 20.0])
        np.testing.assert_array_equal(b.grad, [30.0])


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(ng.softmax(DiffArray([0.0, 0.0])).values, [0.5, 0.5])

    def test_ln2(self):
        np.testing.assert_allclose(ng.softmax(DiffArray([math.log(2), 0.0])).values, [2 / 3, 1 / 3], rtol=1e-15)

    def test_large_input_matches_high_precision(self):
        x = [1000.0, 0.0]
        got = ng.softmax(DiffArray(x)).values
        mpmath.mp.dps = 50
        denom = sum(mpmath.e ** mpmath.mpf(v) for v in x)
        want = [float(mpmath.e ** mpmath.mpf(v) / denom) for v in x]
        assert np.all(np.isfinite(got))
        np.testing.assert_allclose(got, want, rtol=1e-15, atol=1e-300)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(FloatingPointError):
            ng.softmax(DiffArray([0.0, bad]))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=16))
    def test_distribution(self, xs):
        p = ng.softmax(DiffArray(xs)).values
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-12

    def test_log_softmax_agrees(self):
        x = DiffArray(np.random.default_rng(1).normal(size=7) * 30)
        np.testing.assert_allclose(np.exp(ng.log_softmax(x).values), ng.softmax(x).values, rtol=1e-12)


class TestBackward:
    def test_sum(self):
        w = leaf([1.0, -2.0, 5.0])
        with Tape() as tape:
            loss = ng.total(w)
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, [1.0, 1.0, 1.0])

    def test_zero_input_sigmoid(self):
        w = leaf([0.7, -0.2, 3.0])
        with Tape() as tape:
            loss = ng.total(ng.sigmoid(ng.scale(w, 0.0)))
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, np.zeros(3))

    def test_loss_grad_is_one(self):
        w = leaf([0.5, 0.25])
        with Tape() as tape:
            loss = ng.total(ng.tanh(w))
        tape.backward(loss)
        assert loss.grad == 1.0

    def test_non_scalar_loss(self):
        w = leaf([1.0, 2.0])
        with Tape() as tape:
            out = ng.tanh(w)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(out)

    def test_module_level_backward(self):
        w = leaf([2.0])
        with Tape():
            loss = ng.total(ng.mul(w, w))
        ng.backward(loss)
        np.testing.assert_array_equal(w.grad, [4.0])
        with pytest.raises(ValueError):
            ng.backward(DiffArray(1.0))

    def test_three_layer_composite(self):
        rng = np.random.default_rng(7)
        W1, W2, W3 = (leaf(rng.normal(size=s)) for s in [(5, 4), (3, 5), (1, 3)])
        x = DiffArray(rng.normal(size=4))

        def f():
            h = ng.tanh(ng.matmul(W1, x))
            h = ng.sigmoid(ng.matmul(W2, h))
            return ng.total(ng.matmul(W3, h))

        report = ng.grad_check(f, {"W1": W1, "W2": W2, "W3": W3}, eps=1e-5, tol=1e-6)
        assert report.passed, report.max_rel_error

    def test_unused_parameter_stays_zero(self):
        used, unused = leaf([1.0, 2.0]), leaf([3.0, 4.0])
        with Tape() as tape:
            _ = ng.exp(unused)  # recorded but not part of the loss
            loss = ng.total(ng.mul(used, used))
        tape.backward(loss)
        assert np.array_equal(unused.grad, np.zeros(2))

    def test_accumulates_without_reset(self):
        w = leaf([0.3, -0.8, 1.1])
        with Tape() as tape:
            loss = ng.total(ng.mul(ng.tanh(w), ng.exp(w)))
        tape.backward(loss)
        g1 = w.grad.copy()
        tape.backward(loss)
        assert np.array_equal(w.grad, 2 * g1)

    def test_repeated_row_gather_accumulates(self):
        table = leaf(np.arange(6.0).reshape(3, 2))
        with Tape() as tape:
            loss = ng.total(ng.gather_rows(table, [1, 1, 2]))
        tape.backward(loss)
        np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [1, 1]])


class TestTape:
    def test_parents_precede_children(self):
        a, b = leaf([1.0, 2.0]), leaf([0.5, 0.5])
        with Tape() as tape:
            c = ng.mul(a, b)
            d = ng.tanh(c)
            ng.total(ng.add(c, d))
        for node in tape.nodes:
            for parent in node._parents:
                if parent._tape is tape:
                    assert parent.tape_id < node.tape_id
        assert [n.tape_id for n in tape.nodes] == list(range(len(tape)))

    def test_each_node_visited_once(self):
        calls = []
        x = leaf([1.0])

        def counted(values, parents):
            return ng.custom_op(values, parents, lambda g: (calls.append(1), (g,))[1])

        with Tape() as tape:
            y = counted(x.values * 2, [x])
            z = ng.add(y, y)
            loss = ng.total(z)
        tape.backward(loss)
        assert len(calls) == 1
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_constants_not_recorded(self):
        with Tape() as tape:
            ng.tanh(DiffArray([1.0]))
        assert len(tape) == 0

    def test_threads_have_independent_tapes(self):
        results = {}

        def work(k):
            w = leaf([float(k)])
            with Tape() as tape:
                loss = ng.total(ng.mul(w, w))
            tape.backward(loss)
            results[k] = float(w.grad[0])

        threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {k: 2.0 * k for k in range(1, 5)}


class TestGradCheck:
    def test_square(self):
        x = leaf(3.0)
        report = ng.grad_check(lambda: ng.mul(x, x), {"x": x}, eps=1e-5)
        assert report.passed
        # relative error of 6 vs 6 +- 1e-9
        assert report.max_rel_error["x"] * 6 < 1e-9

    def test_corrupted_gradient_fails(self):
        x = leaf([0.4, -1.3])

        def wrong_square(a):
            return ng.custom_op(a.values**2, (a,), lambda g: (g * 2 * a.values * 1.01,))

        report = ng.grad_check(lambda: ng.total(wrong_square(x)), {"x": x})
        assert not report.passed
        assert report.failures == ["x"]

    def test_eps_range(self):
        x = leaf(1.0)
        with pytest.raises(ValueError):
            ng.grad_check(lambda: ng.mul(x, x), {"x": x}, eps=1e-2)


shapes = st.tuples(st.integers(1, 8), st.integers(1, 8))


def _check_unary(fn, values):
    x = leaf(values)
    w = DiffArray(np.random.default_rng(0).normal(size=x.shape))
    report = ng.grad_check(lambda: ng.total(ng.mul(fn(x), w)), {"x": x})
    assert report.passed, report.max_rel_error


class TestOpGradientsProperty:
    """Every op against central differences on random shapes up to 8."""

    @settings(max_examples=20, deadline=None)
    @given(shapes, st.integers(0, 2**31 - 1), st.sampled_from(["sigmoid", "tanh", "oneminus", "exp", "neg", "log_sigmoid"]))
    def test_unary(self, shape, seed, op):
        vals = np.random.default_rng(seed).normal(size=shape)
        _check_unary(getattr(ng, op), vals)

    @settings(max_examples=10, deadline=None)
    @given(shapes, st.integers(0, 2**31 - 1))
    def test_log(self, shape, seed):
        _check_unary(ng.log, np.random.default_rng(seed).uniform(0.5, 3.0, size=shape))

    @settings(max_examples=15, deadline=None)
    @given(shapes, st.integers(0, 2**31 - 1), st.sampled_from(["add", "sub", "mul"]))
    def test_binary(self, shape, seed, op):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng.normal(size=shape)), leaf(rng.normal(size=shape))
        w = DiffArray(rng.normal(size=shape))
        report = ng.grad_check(lambda: ng.total(ng.mul(getattr(ng, op)(a, b), w)), {"a": a, "b": b})
        assert report.passed, report.max_rel_error

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_matmul(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng.normal(size=(m, k))), leaf(rng.normal(size=(k, n)))
        w = DiffArray(rng.normal(size=(m, n)))
        report = ng.grad_check(lambda: ng.total(ng.mul(ng.matmul(a, b), w)), {"a": a, "b": b})
        assert report.passed, report.max_rel_error

    @settings(max_examples=15, deadline=None)
    @given(shapes, st.integers(0, 2**31 - 1), st.sampled_from(["softmax", "log_softmax"]))
    def test_softmax_family(self, shape, seed, op):
        _check_unary(getattr(ng, op), np.random.default_rng(seed).normal(size=shape) * 3)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_structural(self, n, d, seed):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng.normal(size=(n, d))), leaf(rng.normal(size=d))
        rows = rng.integers(0, n, size=3).tolist()

        def f():
            parts = [
                ng.concat([ng.take(a, 0), b]),
                ng.concat([b, ng.take(ng.transpose(a), (slice(None), 0))]),
            ]
            stacked = ng.stack(parts)
            gathered = ng.gather_rows(a, rows)
            tiled = ng.repeat_rows(b, 2)
            return ng.add(ng.add(ng.total(ng.tanh(stacked)), ng.total(ng.sigmoid(gathered))), ng.total(ng.exp(tiled)))

        report = ng.grad_check(f, {"a": a, "b": b})
        assert report.passed, report.max_rel_error
