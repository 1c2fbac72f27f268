"""Reverse-mode engine: primitive semantics, gradients, and error contracts."""

import numpy as np
import pytest

from spatialchoice import autodiff as ad
from spatialchoice.autodiff import ParamStore, Tensor
from spatialchoice.errors import NumericalError, ShapeError


def numeric_grad(fn, x, step=1e-6):
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return out.reshape(x.shape)


def check_op_grad(build, x, rtol=1e-6):
    """Compare tape gradient of sum(op(x)) against central differences."""
    t = Tensor(x)
    loss = ad.tsum(build(t))
    ad.backward(loss)
    fd = numeric_grad(lambda v: float(ad.tsum(build(Tensor(v))).value), x.copy())
    np.testing.assert_allclose(t.grad, fd, rtol=rtol, atol=1e-7)


class TestPrimitiveValues:
    def test_logsumexp_pair_of_zeros(self):
        out = ad.logsumexp(Tensor([0.0, 0.0]), axis=0)
        assert abs(float(out.value) - np.log(2.0)) < 1e-15

    def test_softmax_shift_invariance(self):
        for a in (-100.0, 0.0, 55.0):
            out = ad.softmax(Tensor([a, a, a]), axis=0)
            np.testing.assert_allclose(out.value, [1 / 3] * 3, atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = rng.normal(scale=30.0, size=(40, 7))
        s = ad.softmax(Tensor(x), axis=-1).value
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
        assert (s > 0).all()

    def test_logsumexp_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            x = rng.normal(scale=rng.uniform(0.1, 50), size=rng.integers(1, 9))
            lse = float(ad.logsumexp(Tensor(x), axis=0).value)
            assert lse >= x.max() - 1e-12
            assert lse <= x.max() + np.log(len(x)) + 1e-12

    def test_segment_max_routes_largest(self):
        # messages 0->1: 2.0 and 2->1: 5.0 land in segment 1; max takes 5.0
        # (segment 0 gets a message too: max over an empty segment errors)
        vals = Tensor(np.array([[-1.0], [2.0], [5.0]]))
        out = ad.segment_aggregate(vals, "max", np.array([0, 1, 1]), 2)
        assert float(out.value[1, 0]) == 5.0

    def test_segment_sum_and_mean_empty_segment(self):
        vals = Tensor(np.array([[1.0], [3.0]]))
        for kind, expected in (("sum", 0.0), ("mean", 0.0), ("lse", 0.0)):
            out = ad.segment_aggregate(vals, kind, np.array([0, 0]), 2)
            assert float(out.value[1, 0]) == expected

    def test_segment_max_empty_segment_errors(self):
        with pytest.raises(NumericalError):
            ad.segment_aggregate(Tensor(np.ones((2, 1))), "max", np.array([0, 0]), 2)

    def test_segment_lse_matches_dense(self):
        rng = np.random.default_rng(2)
        vals = rng.normal(size=(4, 10, 3))
        seg = rng.integers(0, 5, size=10)
        out = ad.segment_aggregate(Tensor(vals), "lse", seg, 5).value
        for s in range(5):
            members = vals[:, seg == s, :]
            if members.shape[1]:
                expected = np.log(np.exp(members).sum(axis=1))
                np.testing.assert_allclose(out[:, s, :], expected, atol=1e-12)

    def test_sigmoid_extreme_inputs_stable(self):
        out = ad.sigmoid(Tensor([-800.0, 0.0, 800.0])).value
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-12)


class TestBackward:
    def test_linear_loss_gradient(self):
        w = Tensor([3.0, 4.0])
        x = np.array([1.0, 2.0])
        loss = ad.tsum(w * x)
        ad.backward(loss)
        np.testing.assert_allclose(w.grad, x)

    def test_scalar_project_gradients(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 5, 6))
        w = rng.normal(size=6)
        xt, wt = Tensor(x), Tensor(w)
        loss = ad.tsum(ad.scalar_project(xt, wt))
        ad.backward(loss)
        fd_w = numeric_grad(lambda v: float(ad.tsum(ad.scalar_project(Tensor(x), Tensor(v))).value), w.copy())
        np.testing.assert_allclose(wt.grad, fd_w, rtol=1e-6)

    @pytest.mark.parametrize(
        "name,build",
        [
            ("relu_chain", lambda t: ad.relu(t * 1.7 + 0.3)),
            ("leaky", lambda t: ad.leaky_relu(t * 1.3 - 0.2, 0.2)),
            ("sigmoid", lambda t: ad.sigmoid(t * 2.0)),
            ("exp", lambda t: ad.exp(t * 0.5)),
            ("log", lambda t: ad.log(ad.exp(t) + 1.0)),
            ("lse", lambda t: ad.logsumexp(t, axis=-1)),
            ("softmax", lambda t: ad.softmax(t, axis=-1)),
            ("div", lambda t: t / (ad.exp(t) + 2.0)),
            ("concat", lambda t: ad.concat([t, t * 2.0], axis=-1)),
            ("reshape", lambda t: ad.reshape(t * 1.1, (6, 2))),
            ("mean", lambda t: ad.tmean(t, axis=0)),
        ],
    )
    def test_primitive_gradients(self, name, build):
        rng = np.random.default_rng(abs(hash(name)) % 2**31)
        x = rng.normal(size=(3, 4)) + 0.1
        check_op_grad(build, x)

    def test_matmul_gradients(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(4, 5))
        at, bt = Tensor(a), Tensor(b)
        loss = ad.tsum(ad.matmul(at, bt))
        ad.backward(loss)
        fd_a = numeric_grad(lambda v: float(ad.tsum(ad.matmul(Tensor(v), Tensor(b))).value), a.copy())
        fd_b = numeric_grad(lambda v: float(ad.tsum(ad.matmul(Tensor(a), Tensor(v))).value), b.copy())
        np.testing.assert_allclose(at.grad, fd_a, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(bt.grad, fd_b, rtol=1e-6, atol=1e-8)

    def test_take_and_gather_gradients(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(3, 5))
        idx = np.array([0, 2, 2, 4])
        xt = Tensor(x)
        loss = ad.tsum(ad.take(xt, idx, axis=-1) * np.arange(1.0, 5.0))
        ad.backward(loss)
        fd = numeric_grad(
            lambda v: float(ad.tsum(ad.take(Tensor(v), idx, axis=-1) * np.arange(1.0, 5.0)).value),
            x.copy(),
        )
        np.testing.assert_allclose(xt.grad, fd, rtol=1e-6)

        xt2 = Tensor(x)
        rows = np.array([1, 0, 2])
        loss2 = ad.tsum(ad.gather_rows(xt2, rows))
        ad.backward(loss2)
        expected = np.zeros_like(x)
        expected[np.arange(3), rows] = 1.0
        np.testing.assert_allclose(xt2.grad, expected)

    @pytest.mark.parametrize("kind", ["sum", "mean", "max", "lse"])
    def test_segment_aggregate_gradients(self, kind):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 7, 3))
        seg = np.array([0, 1, 1, 2, 2, 2, 0])
        def build(t):
            return ad.segment_aggregate(t, kind, seg, 3)
        check_op_grad(build, x)

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor([2.0])
        loss = ad.tsum(x * x)  # d/dx x^2 = 2x
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, [4.0])

    def test_backward_requires_scalar(self):
        with pytest.raises(ShapeError):
            ad.backward(Tensor([1.0, 2.0]))


class TestDropout:
    def test_eval_mode_is_identity_node(self):
        x = Tensor(np.ones(5))
        out = ad.dropout(x, 0.5, train=False, rng=None)
        assert out is x  # same tape node: gradients match a dropout-free graph

    def test_same_seed_same_mask(self):
        x = np.ones((8, 8))
        a = ad.dropout(Tensor(x), 0.3, True, np.random.default_rng(42)).value
        b = ad.dropout(Tensor(x), 0.3, True, np.random.default_rng(42)).value
        assert np.array_equal(a, b)
        c = ad.dropout(Tensor(x), 0.3, True, np.random.default_rng(43)).value
        assert not np.array_equal(a, c)

    def test_inverted_scaling(self):
        x = np.ones((2000,))
        out = ad.dropout(Tensor(x), 0.25, True, np.random.default_rng(0)).value
        kept = out[out > 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)


class TestErrorContracts:
    def test_overflow_raises_not_nan(self):
        with pytest.raises(NumericalError):
            ad.exp(Tensor([1000.0]))

    def test_log_of_negative_raises(self):
        with pytest.raises(NumericalError):
            ad.log(Tensor([-1.0]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_segment_id_out_of_range(self):
        with pytest.raises(ShapeError):
            ad.segment_aggregate(Tensor(np.ones((2, 1))), "sum", np.array([0, 5]), 2)


class TestParamStore:
    def test_flat_roundtrip(self):
        store = ParamStore()
        store.add("a", np.arange(6.0).reshape(2, 3))
        store.add("b", np.array(5.0))
        store.add("frozen", np.ones(2), trainable=False)
        vec = store.flat_values()
        assert vec.size == 7
        store.set_flat_values(vec * 2)
        np.testing.assert_allclose(store.value("a"), np.arange(6.0).reshape(2, 3) * 2)
        np.testing.assert_allclose(store.value("frozen"), np.ones(2))

    def test_nonparticipating_gets_zero_grad(self):
        store = ParamStore()
        store.add("used", np.array([1.0, 2.0]))
        store.add("unused", np.array([5.0]))
        leaves = store.leaves()
        loss = ad.tsum(leaves["used"] * 3.0)
        ad.backward(loss)
        store.collect_grads(leaves)
        np.testing.assert_allclose(store.grad("used"), [3.0, 3.0])
        np.testing.assert_allclose(store.grad("unused"), [0.0])

    def test_payload_roundtrip(self, tmp_path):
        store = ParamStore()
        store.add("w", np.random.default_rng(1).normal(size=(3, 2)))
        store.add("flag", np.array(0.25), trainable=False)
        path = tmp_path / "params.json"
        store.save(path)
        loaded = ParamStore.load(path)
        assert loaded.names() == store.names()
        np.testing.assert_array_equal(loaded.value("w"), store.value("w"))
        assert loaded.trainable_names() == ("w",)

    def test_duplicate_name_rejected(self):
        store = ParamStore()
        store.add("x", np.zeros(1))
        with pytest.raises(ShapeError):
            store.add("x", np.zeros(1))
