"""Reverse-mode engine checks.

Every differentiable op gets a central-difference sweep over all input
scalars against the vector-Jacobian products, plus structural tests for the
tape (accumulation, topological order, shape validation), the optimizer
(hand-computed steps), and the checkpoint format (bitwise round trip).

OP_CASES and fd_worst_error are shared with the acceptance suite.
"""

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import pytest

import stereosplat.autodiff as ad
from stereosplat.autodiff import (
    Adam,
    AdamState,
    CheckpointError,
    ShapeError,
    Value,
    adam_step,
    backward,
    load_checkpoint,
    save_checkpoint,
)


def _kink_free(rng: np.random.Generator, shape) -> np.ndarray:
    """Values bounded away from zero so relu/abs stay differentiable under FD."""
    return rng.uniform(0.1, 1.5, shape) * rng.choice([-1.0, 1.0], shape)


@dataclass
class OpCase:
    name: str
    build: Callable[[np.random.Generator], tuple[list[np.ndarray], Callable[..., Value]]]


def _case_add(rng):
    return [rng.normal(size=(3, 4)), rng.normal(size=(4,))], ad.add


def _case_sub(rng):
    return [rng.normal(size=(3, 4)), rng.normal(size=())], ad.sub


def _case_mul(rng):
    return [rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 1))], ad.mul


def _case_matmul(rng):
    return [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], ad.matmul


def _case_transpose(rng):
    return [rng.normal(size=(3, 5))], ad.transpose


def _case_exp(rng):
    return [rng.uniform(-2.0, 2.0, (2, 3))], ad.exp


def _case_sigmoid(rng):
    return [rng.normal(size=(2, 3))], ad.sigmoid


def _case_relu(rng):
    return [_kink_free(rng, (3, 4))], ad.relu


def _case_absolute(rng):
    return [_kink_free(rng, (3, 4))], ad.absolute


def _case_softmax(rng):
    axis = int(rng.integers(0, 2)) - 1  # -1 or 0
    return [rng.normal(size=(3, 5))], lambda a: ad.softmax(a, axis=axis)


def _case_layer_norm(rng):
    arrays = [rng.normal(size=(4, 6)), rng.uniform(0.5, 1.5, 6), rng.normal(size=6)]
    return arrays, ad.layer_norm


def _case_conv2d(rng):
    arrays = [
        rng.normal(size=(4, 5, 2)),
        rng.normal(size=(3, 3, 2, 3)) * 0.3,
        rng.normal(size=3),
    ]
    return arrays, ad.conv2d


def _case_concat(rng):
    axis = int(rng.integers(0, 2))
    shapes = [(2, 3), (2, 3), (2, 3)] if axis == 0 else [(2, 2), (2, 3), (2, 1)]
    arrays = [rng.normal(size=s) for s in shapes]
    return arrays, lambda *vs: ad.concat(vs, axis=axis)


def _case_reshape(rng):
    return [rng.normal(size=(2, 6))], lambda a: ad.reshape(a, (3, 4))


def _case_slice(rng):
    key = (slice(1, 4), slice(None, None, 2))
    return [rng.normal(size=(5, 6))], lambda a: ad.slice_(a, key)


def _case_gather_rows(rng):
    idx = rng.integers(0, 6, 8)  # duplicates exercise accumulation
    return [rng.normal(size=(6, 3))], lambda a: ad.gather_rows(a, idx)


def _case_scatter_rows(rng):
    idx = rng.integers(0, 9, 5)
    return [rng.normal(size=(5, 3))], lambda a: ad.scatter_rows(a, idx, 9)


def _case_take_per_row(rng):
    idx = rng.integers(0, 5, 6)
    return [rng.normal(size=(6, 5))], lambda a: ad.take_per_row(a, idx)


def _case_sum(rng):
    axis = (None, 0, -1)[rng.integers(0, 3)]
    return [rng.normal(size=(3, 4))], lambda a: ad.sum_(a, axis=axis)


def _case_mean(rng):
    axis = (None, 0, -1)[rng.integers(0, 3)]
    return [rng.normal(size=(3, 4))], lambda a: ad.mean(a, axis=axis)


def _case_mse(rng):
    return [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], ad.mse


OP_CASES = [
    OpCase("add", _case_add),
    OpCase("sub", _case_sub),
    OpCase("mul", _case_mul),
    OpCase("matmul", _case_matmul),
    OpCase("transpose", _case_transpose),
    OpCase("exp", _case_exp),
    OpCase("sigmoid", _case_sigmoid),
    OpCase("relu", _case_relu),
    OpCase("absolute", _case_absolute),
    OpCase("softmax", _case_softmax),
    OpCase("layer_norm", _case_layer_norm),
    OpCase("conv2d", _case_conv2d),
    OpCase("concat", _case_concat),
    OpCase("reshape", _case_reshape),
    OpCase("slice", _case_slice),
    OpCase("gather_rows", _case_gather_rows),
    OpCase("scatter_rows", _case_scatter_rows),
    OpCase("take_per_row", _case_take_per_row),
    OpCase("sum", _case_sum),
    OpCase("mean", _case_mean),
    OpCase("mse", _case_mse),
]


def fd_worst_error(case: OpCase, rng: np.random.Generator, step: float = 1e-6) -> float:
    """Worst excess of |fd - analytic| over max(1e-6*|analytic|, 1e-8), signed
    so that any positive return value is a failure."""
    arrays, fn = case.build(rng)
    leaves = [Value(a) for a in arrays]
    out = fn(*leaves)
    cotangent = rng.normal(size=out.data.shape)
    backward(ad.sum_(ad.mul(out, cotangent)))

    def objective(flat_arrays):
        result = fn(*[Value(a) for a in flat_arrays])
        return float(np.sum(result.data * cotangent))

    worst = -math.inf
    for i, base in enumerate(arrays):
        analytic = leaves[i].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        analytic = np.asarray(analytic).ravel()
        for j in range(base.size):
            probe = [a.copy() for a in arrays]
            probe[i].ravel()[j] = base.ravel()[j] + step
            hi = objective(probe)
            probe[i].ravel()[j] = base.ravel()[j] - step
            lo = objective(probe)
            fd = (hi - lo) / (2.0 * step)
            allowance = max(1e-6 * abs(analytic[j]), 1e-8)
            worst = max(worst, abs(fd - analytic[j]) - allowance)
    return worst


class TestFiniteDifferences:
    @pytest.mark.parametrize("case", OP_CASES, ids=lambda c: c.name)
    def test_vjp_matches_central_differences(self, case):
        rng = np.random.default_rng(hash(case.name) % 2**32)
        for _ in range(5):
            assert fd_worst_error(case, rng) <= 0.0


class TestTape:
    def test_diamond_graph_accumulates(self):
        """x feeding two branches sums both contributions: d/dx(3x * 2x) = 12x."""
        x = Value(1.75)
        loss = ad.mul(ad.mul(x, 3.0), ad.mul(x, 2.0))
        backward(loss)
        np.testing.assert_allclose(x.grad, 12.0 * 1.75, rtol=1e-15)

    def test_reused_node_accumulates(self):
        x = Value(np.array([2.0, 3.0]))
        y = ad.add(x, x)
        backward(ad.sum_(y))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_operator_sugar(self):
        x = Value(np.array([[1.0, 2.0]]))
        w = Value(np.array([[3.0], [4.0]]))
        out = (x @ w) * 2.0 - 1.0
        backward(ad.sum_(out))
        np.testing.assert_array_equal(out.data, [[21.0]])
        np.testing.assert_array_equal(x.grad, [[6.0, 8.0]])
        np.testing.assert_array_equal(w.grad, [[2.0], [4.0]])

    def test_getitem_routes_gradient(self):
        x = Value(np.arange(6.0).reshape(2, 3))
        backward(ad.sum_(x[1]))
        np.testing.assert_array_equal(x.grad, [[0, 0, 0], [1, 1, 1]])

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ShapeError):
            backward(Value(np.zeros(3)))

    def test_constant_leaves_have_no_grad(self):
        x = Value(2.0)
        y = ad.mul(x, 5.0)
        backward(y)
        assert x.grad == 5.0

    def test_unreachable_branch_untouched(self):
        x = Value(1.0)
        y = Value(1.0)
        backward(ad.mul(x, 2.0))
        assert y.grad is None

    @pytest.mark.parametrize(
        "build",
        [
            lambda: ad.add(Value(np.zeros((2, 3))), Value(np.zeros((4,)))),
            lambda: ad.matmul(Value(np.zeros((2, 3))), Value(np.zeros((2, 3)))),
            lambda: ad.transpose(Value(np.zeros(3))),
            lambda: ad.conv2d(Value(np.zeros((4, 4))), Value(np.zeros((3, 3, 1, 2))), Value(np.zeros(2))),
            lambda: ad.conv2d(Value(np.zeros((4, 4, 1))), Value(np.zeros((3, 3, 2, 2))), Value(np.zeros(2))),
            lambda: ad.reshape(Value(np.zeros((2, 3))), (4, 2)),
            lambda: ad.gather_rows(Value(np.zeros((4, 2))), np.zeros((2, 2), dtype=int)),
            lambda: ad.take_per_row(Value(np.zeros((4, 2))), np.zeros(3, dtype=int)),
            lambda: ad.layer_norm(Value(np.zeros((2, 4))), Value(np.zeros(3)), Value(np.zeros(4))),
            lambda: ad.concat([], axis=0),
        ],
    )
    def test_shape_errors_at_build_time(self, build):
        with pytest.raises(ShapeError):
            build()


class TestCustomNode:
    def test_forward_and_vjp_spliced_in(self):
        x = Value(np.array([1.0, 2.0, 3.0]))
        node = ad.custom_node([x], lambda a: a**2, lambda g: (g * 2.0 * x.data,), "square")
        backward(ad.sum_(node))
        np.testing.assert_array_equal(node.data, [1.0, 4.0, 9.0])
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_none_gradient_skips_input(self):
        x = Value(np.ones(2))
        c = Value(np.ones(2))
        node = ad.custom_node([x, c], lambda a, b: a + b, lambda g: (g, None))
        backward(ad.sum_(node))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])
        assert c.grad is None

    def test_wrong_gradient_count_rejected(self):
        x = Value(np.ones(2))
        node = ad.custom_node([x], lambda a: a, lambda g: (g, g))
        with pytest.raises(ShapeError):
            backward(ad.sum_(node))

    def test_wrong_gradient_shape_rejected(self):
        x = Value(np.ones(2))
        node = ad.custom_node([x], lambda a: a, lambda g: (np.zeros(3),))
        with pytest.raises(ShapeError):
            backward(ad.sum_(node))


class TestAdam:
    def test_first_step_hand_computed(self):
        """With fresh moments the bias correction cancels exactly, so step one
        moves by lr * g / (|g| + eps) regardless of the gradient scale."""
        theta = np.array([1.0, -2.0])
        g = np.array([0.3, -40.0])
        lr, eps = 0.01, 1e-8
        updated, state = adam_step({"w": theta}, {"w": g}, AdamState(), lr=lr, eps=eps)
        expected = theta - lr * g / (np.abs(g) + eps)
        np.testing.assert_allclose(updated["w"], expected, rtol=1e-12)
        assert state.step == 1

    def test_two_steps_match_reference_loop(self):
        rng = np.random.default_rng(3)
        theta = rng.normal(size=(2, 3))
        grads = [rng.normal(size=(2, 3)) for _ in range(2)]
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8

        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        ref = theta.copy()
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref = ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)

        params = {"w": theta}
        state = AdamState()
        for g in grads:
            params, state = adam_step(params, {"w": g}, state, lr=lr, beta1=b1, beta2=b2, eps=eps)
        np.testing.assert_allclose(params["w"], ref, rtol=1e-14)

    def test_missing_gradient_leaves_parameter(self):
        params, state = adam_step(
            {"a": np.ones(2), "b": np.zeros(2)}, {"a": np.ones(2)}, AdamState()
        )
        np.testing.assert_array_equal(params["b"], np.zeros(2))
        assert "b" not in state.m

    def test_gradient_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            adam_step({"a": np.ones(2)}, {"a": np.ones(3)}, AdamState())

    def test_class_matches_functional_form(self):
        x = Value(np.array([1.0, 2.0]), name="x")
        opt = Adam({"x": x}, lr=0.1)
        backward(ad.sum_(ad.mul(x, x)))
        grad = x.grad.copy()
        opt.step()
        expected, _ = adam_step({"x": np.array([1.0, 2.0])}, {"x": grad}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(x.data, expected["x"])
        opt.zero_grad()
        assert x.grad is None


class TestCheckpoints:
    def test_round_trip_is_bitwise(self, tmp_path):
        rng = np.random.default_rng(11)
        params = {
            "conv.w": rng.normal(size=(3, 3, 2, 4)),
            "bias": rng.normal(size=4),
            "scalar": np.asarray(rng.normal()),
        }
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert sorted(loaded) == sorted(params)
        for name in params:
            assert loaded[name].tobytes() == params[name].tobytes()
            assert loaded[name].shape == params[name].shape

    def test_value_and_ndarray_inputs_serialize_identically(self, tmp_path):
        arr = np.arange(6.0).reshape(2, 3)
        save_checkpoint(tmp_path / "a.ckpt", {"w": arr})
        save_checkpoint(tmp_path / "b.ckpt", {"w": Value(arr)})
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"w": np.zeros(2)})
        blob = path.read_bytes()
        assert blob[:4] == b"SPCK"
        assert blob[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_unsupported_version_rejected(self, tmp_path):
        path = tmp_path / "v9.ckpt"
        save_checkpoint(path, {"w": np.zeros(2)})
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
