import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustkit import tensor as T
from robustkit.errors import NonFiniteError, ShapeError
from robustkit.tensor import (Tape, Tensor, finite_diff_check, forward_backward, read_tensor,
                              tensor_from_bytes, tensor_to_bytes, write_tensor)


class TestTensorValues:
    def test_shape_and_flat_values(self):
        t = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        assert t.shape == (2, 3)
        assert t.size == len(t.values) == 6
        assert list(t.values) == [1, 2, 3, 4, 5, 6]

    def test_rejects_empty_extent(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_values_are_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.numpy()[0] = 5.0

    def test_source_array_not_aliased(self):
        a = np.array([1.0, 2.0])
        t = Tensor(a)
        a[0] = 9.0
        assert t.values[0] == 1.0

    def test_nonfinite_result_names_layer(self):
        with T.layer_scope(4):
            with pytest.raises(NonFiniteError, match="layer 4") as info:
                T.log(Tensor([0.0]))
        assert info.value.layer == 4

    def test_shape_mismatch_names_operation(self):
        with pytest.raises(ShapeError, match="matmul"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


class TestForwardBackward:
    def test_square(self):
        loss, grads = forward_backward(lambda p, _: p["x"] * p["x"], {"x": 3.0})
        assert loss == 9.0
        assert grads["x"].item() == 6.0

    def test_identity_gradient_is_one(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        _, grads = forward_backward(lambda p, _: p["x"], {"x": x}, loss_reduction=lambda y: y.sum())
        np.testing.assert_array_equal(grads["x"].numpy(), np.ones((3, 4)))

    def test_two_layer_affine_relu_matches_differences(self):
        rng = np.random.default_rng(1)
        point = {"W1": rng.normal(size=(5, 4)), "b1": rng.normal(size=5),
                 "W2": rng.normal(size=(1, 5)), "x": rng.normal(size=(1, 4))}

        def program(p):
            h = T.relu(p["x"] @ p["W1"].T + p["b1"])
            return (h @ p["W2"].T).sum()

        assert finite_diff_check(program, point) < 1e-5

    def test_unused_parameter_gets_exact_zero(self):
        _, grads = forward_backward(lambda p, _: (p["a"] * 2.0).sum(), {"a": [1.0, 2.0], "b": [[3.0]]})
        assert grads["b"].shape == (1, 1)
        assert grads["b"].item() == 0.0

    def test_tape_visits_each_record_once(self):
        calls = []
        with Tape() as tape:
            x = tape.watch(Tensor([2.0]))
            y = x * x
            z = y + y
        for rec in tape.records:
            original = rec.backward

            def counted(g, original=original, name=rec.name):
                calls.append(name)
                return original(g)

            rec.backward = counted
        (g,) = tape.gradient(z, [x])
        assert g.item() == 8.0
        assert calls == ["add", "mul"]

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            forward_backward(lambda p, _: p["x"] * 2.0, {"x": [1.0, 2.0]})

    def test_inputs_are_not_differentiated(self):
        loss, grads = forward_backward(lambda p, x: (p["w"] * x).sum(), {"w": [1.0, 1.0]}, inputs=[2.0, 3.0])
        assert loss == 5.0
        assert list(grads) == ["w"]
        np.testing.assert_array_equal(grads["w"].numpy(), [2.0, 3.0])


class TestFiniteDiffCheck:
    def test_quadratic(self):
        assert finite_diff_check(lambda x: (x * x).sum(), Tensor([3.0])) < 1e-8

    def test_relu_smooth_point(self):
        assert finite_diff_check(lambda x: T.relu(x).sum(), Tensor([1.0])) < 1e-6

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(3)
        onehot = np.eye(3)[[0, 2]]
        err = finite_diff_check(lambda z: T.cross_entropy(z, onehot), Tensor(rng.normal(size=(2, 3))))
        assert err < 1e-5

    def test_nonfinite_probe_is_reported(self):
        # log is finite at 1e-7 but the negative probe leaves the domain
        with pytest.raises(NonFiniteError, match="finite-difference probe"):
            finite_diff_check(lambda x: T.log(x).sum(), Tensor([1e-7]), step=1e-6)

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda x: x.sum(), Tensor([1.0]), step=0.0)


PRIMITIVES = {
    "exp": lambda x: T.exp(x),
    "log": lambda x: T.log(x * x + 1.0),
    "sqrt": lambda x: T.sqrt(x * x + 0.5),
    "power": lambda x: T.power(x * x + 1.0, 1.5),
    "sigmoid": T.sigmoid,
    "abs": T.tabs,
    "softmax": lambda x: T.softmax(x),
    "log_softmax": lambda x: T.log_softmax(x),
    "transpose": lambda x: x.T @ x,
    "mean": lambda x: x.mean(axis=0, keepdims=True) * x,
    "div": lambda x: x / (x * x + 1.0),
    "pairwise": lambda x: T.pairwise_distances(x),
}


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_against_central_differences(self, name):
        f = PRIMITIVES[name]
        for seed in range(5):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(4, 3))
            w = rng.normal(size=f(Tensor(x)).shape)
            assert finite_diff_check(lambda t: (f(t) * w).sum(), Tensor(x)) < 1e-5, (name, seed)

    def test_relu_subgradient_zero_at_kink(self):
        with Tape() as tape:
            x = tape.watch(Tensor([0.0, 1.0, -1.0]))
            y = T.relu(x).sum()
        np.testing.assert_array_equal(tape.gradient(y, [x])[0].numpy(), [0.0, 1.0, 0.0])

    def test_coincident_rows_have_zero_distance_gradient(self):
        with Tape() as tape:
            x = tape.watch(Tensor([[1.0, 2.0], [1.0, 2.0]]))
            d = T.pairwise_distances(x).sum()
        assert d.item() == 0.0
        np.testing.assert_array_equal(tape.gradient(d, [x])[0].numpy(), np.zeros((2, 2)))


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(finite, min_size=2, max_size=6), st.lists(finite, min_size=2, max_size=6))
    def test_gradient_of_sum_is_sum_of_gradients(self, a, b):
        n = min(len(a), len(b))
        w1, w2 = np.array(a[:n]), np.array(b[:n])
        x = np.linspace(-1.0, 1.0, n)

        def f(p, _):
            return (T.sigmoid(p["x"]) * w1).sum()

        def g(p, _):
            return (T.exp(p["x"] * 0.5) * w2).sum()

        _, gf = forward_backward(f, {"x": x})
        _, gg = forward_backward(g, {"x": x})
        _, gs = forward_backward(lambda p, i: f(p, i) + g(p, i), {"x": x})
        np.testing.assert_allclose(gs["x"].numpy(), gf["x"].numpy() + gg["x"].numpy(), rtol=0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=0, max_size=3), st.integers(0, 2 ** 31))
    def test_serialization_round_trip(self, shape, seed):
        values = np.random.default_rng(seed).normal(size=shape) * 1e3
        t = Tensor(values)
        buf = tensor_to_bytes(t)
        assert len(buf) == 8 * (1 + len(shape) + t.size)
        back, offset = tensor_from_bytes(buf)
        assert offset == len(buf)
        assert back.shape == t.shape
        assert back.values.tobytes() == t.values.tobytes()


class TestSerialization:
    def test_layout_is_rank_extents_values(self):
        buf = tensor_to_bytes(Tensor([[1.0, 2.0]]))
        ints = np.frombuffer(buf[:24], dtype="<i8")
        assert list(ints) == [2, 1, 2]
        assert list(np.frombuffer(buf[24:], dtype="<f8")) == [1.0, 2.0]

    def test_stream_helpers(self):
        fp = io.BytesIO()
        write_tensor(fp, Tensor([1.5, -2.5, 3.25]))
        write_tensor(fp, Tensor([[7.0]]))
        fp.seek(0)
        assert list(read_tensor(fp).values) == [1.5, -2.5, 3.25]
        assert read_tensor(fp).shape == (1, 1)

    def test_truncated_record_rejected(self):
        buf = tensor_to_bytes(Tensor([1.0, 2.0]))
        with pytest.raises(ValueError, match="truncated"):
            tensor_from_bytes(buf[:-3])
