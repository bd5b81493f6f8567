#    clinaudit - A safety audit toolkit for clinical classifiers and language models
#    Copyright (C) 2026  The clinaudit authors

#    This program is free software: you can redistribute it and/or modify
#    it under the terms of the GNU General Public License as published by
#    the Free Software Foundation, either version 3 of the License, or
#    (at your option) any later version.

#    This program is distributed in the hope that it will be useful,
#    but WITHOUT ANY WARRANTY; without even the implied warranty of
#    MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
#    GNU General Public License for more details.

#    You should have received a copy of the GNU General Public License
#    along with this program.  If not, see <https://www.gnu.org/licenses/>.

import unittest
import numpy as np
from typing import Callable, List, Sequence
import helpers
from clinaudit import ops
from clinaudit.errors import DimensionError, UsageError, ValidationError
from clinaudit.tensor import Tensor, ComputeGraph, active_graph

SEEDS = range(20)
H = 1e-3
F64 = np.float64


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def projected(fn: Callable[..., Tensor], projection: np.ndarray) -> Callable[..., Tensor]:
    # Random projection gives every output element a distinct weight in the loss
    def _loss(*tensors: Tensor) -> Tensor:
        out = fn(*tensors)
        return ops.sum_all(ops.mul(out, Tensor(projection, dtype=F64)))
    return _loss


def analytic(loss_fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> List[np.ndarray]:
    tensors = [Tensor(a, requires_grad=True, dtype=F64) for a in arrays]

    with ComputeGraph() as graph:
        loss = loss_fn(*tensors)
        graph.backward(loss)

    return [t.grad for t in tensors]


def numeric(loss_fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int) -> np.ndarray:
    base = np.array(arrays[index], dtype=F64)
    grad = np.zeros_like(base)

    for idx in np.ndindex(base.shape):
        values = list()

        for sign in (1.0, -1.0):
            moved = base.copy()
            moved[idx] += sign * H
            args = [Tensor(moved if i == index else a, dtype=F64) for i, a in enumerate(arrays)]
            values.append(loss_fn(*args).item())

        grad[idx] = (values[0] - values[1]) / (2 * H)

    return grad


class TestPrimitiveGradients(unittest.TestCase):
    def check(self, fn: Callable[..., Tensor], make: Callable[[np.random.Generator], List[np.ndarray]],
              scalar: bool = False, tolerance: float = 1e-3):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            arrays = make(rng)

            if scalar:
                loss_fn = fn
            else:
                out = fn(*(Tensor(a, dtype=F64) for a in arrays))
                loss_fn = projected(fn, rng.normal(size=out.shape))

            grads = analytic(loss_fn, arrays)

            for i in range(len(arrays)):
                with self.subTest(seed=seed, operand=i):
                    self.assertLess(relative_error(grads[i], numeric(loss_fn, arrays, i)), tolerance)

    def test_add(self):
        self.check(ops.add, lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))])

    def test_mul(self):
        self.check(ops.mul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))])

    def test_scale(self):
        self.check(lambda a: ops.scale(a, 1.7), lambda r: [r.normal(size=(4,))])

    def test_relu(self):
        # keep values away from the kink so finite differences stay on one side
        def _make(r):
            x = r.normal(size=(3, 5))
            return [np.where(np.abs(x) < 0.05, 0.5, x)]

        self.check(ops.relu, _make)

    def test_channel_affine(self):
        self.check(lambda x: ops.channel_affine(x, [2.0, 0.5], [-1.0, 0.25]), lambda r: [r.normal(size=(2, 2, 3, 3))])

    def test_conv2d_padded(self):
        self.check(lambda x, k, b: ops.conv2d(x, k, b, padding=1),
                   lambda r: [r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))])

    def test_conv2d_strided(self):
        self.check(lambda x, k, b: ops.conv2d(x, k, b, stride=2),
                   lambda r: [r.normal(size=(1, 2, 6, 6)), r.normal(size=(2, 2, 3, 3)), r.normal(size=(2,))])

    def test_concat_channels(self):
        self.check(ops.concat_channels, lambda r: [r.normal(size=(2, 1, 3, 3)), r.normal(size=(2, 2, 3, 3))])

    def test_avgpool2d(self):
        self.check(lambda x: ops.avgpool2d(x, 2), lambda r: [r.normal(size=(2, 2, 5, 5))])

    def test_flatten_linear(self):
        self.check(lambda x, w, b: ops.linear(ops.flatten(x), w, b),
                   lambda r: [r.normal(size=(2, 2, 2, 2)), r.normal(size=(3, 8)), r.normal(size=(3,))])

    def test_softmax_cross_entropy(self):
        labels = [0, 2, 1, 2]
        self.check(lambda z: ops.softmax_cross_entropy(z, labels), lambda r: [r.normal(size=(4, 3)) * 3], scalar=True)


class TestModelInputGradient(unittest.TestCase):
    def test_end_to_end(self):
        for seed in SEEDS:
            model = helpers.small_model(seed=seed, dtype=F64)
            rng = np.random.default_rng(100 + seed)
            pixels = rng.uniform(0.1, 0.9, size=(2, 1, 16, 16))
            labels = [seed % 3, (seed + 1) % 3]
            _, grad = model.input_gradient(pixels, labels)
            coords = [tuple(c) for c in zip(*(rng.integers(0, n, size=24) for n in pixels.shape))]
            fd = np.zeros(len(coords))

            for i, idx in enumerate(coords):
                plus, minus = pixels.copy(), pixels.copy()
                plus[idx] += H
                minus[idx] -= H
                fd[i] = (model.per_image_loss(plus, labels).mean() - model.per_image_loss(minus, labels).mean()) / (2 * H)

            with self.subTest(seed=seed):
                self.assertLess(relative_error(np.array([grad[c] for c in coords]), fd), 1e-2)

    def test_gradient_dtype_follows_model(self):
        model = helpers.small_model()
        pixels = np.full((1, 1, 16, 16), 0.5, dtype=np.float32)
        _, grad = model.input_gradient(pixels, [1])
        self.assertEqual(np.float32, grad.dtype)
        self.assertEqual(pixels.shape, grad.shape)


class TestComputeGraph(unittest.TestCase):
    def test_ops_preserve_dtype(self):
        for dtype in (np.float32, np.float64):
            a = Tensor(np.ones((1, 1, 4, 4)), dtype=dtype)
            k = Tensor(np.ones((2, 1, 3, 3)), dtype=dtype)
            b = Tensor(np.zeros(2), dtype=dtype)
            self.assertEqual(dtype, ops.relu(ops.conv2d(a, k, b, padding=1)).dtype)
            self.assertEqual(dtype, ops.avgpool2d(a, 2).dtype)

    def test_relu_derivative_at_zero(self):
        x = Tensor([0.0, 1.0, -1.0], requires_grad=True, dtype=F64)

        with ComputeGraph() as graph:
            graph.backward(ops.sum_all(ops.relu(x)))

        np.testing.assert_array_equal([0.0, 1.0, 0.0], x.grad)

    def test_forward_only_outside_graph(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = ops.scale(x, 2.0)
        self.assertIsNone(active_graph())
        self.assertIsNone(y.graph)
        self.assertRaises(UsageError, y.backward)

    def test_graph_scope_is_restored(self):
        with ComputeGraph() as outer:
            with ComputeGraph() as inner:
                self.assertIs(inner, active_graph())
            self.assertIs(outer, active_graph())
        self.assertIsNone(active_graph())

    def test_unreached_leaf_gets_zero_gradient(self):
        a = Tensor([1.0, 2.0], requires_grad=True, dtype=F64)
        b = Tensor([3.0, 4.0], requires_grad=True, dtype=F64)

        with ComputeGraph() as graph:
            ops.add(a, b)
            loss = ops.sum_all(ops.scale(a, 3.0))
            graph.backward(loss)

        np.testing.assert_array_equal([3.0, 3.0], a.grad)
        np.testing.assert_array_equal([0.0, 0.0], b.grad)

    def test_shared_input_accumulates(self):
        a = Tensor([2.0, -1.0], requires_grad=True, dtype=F64)

        with ComputeGraph() as graph:
            loss = ops.sum_all(ops.mul(a, a))
            graph.backward(loss)

        np.testing.assert_allclose([4.0, -2.0], a.grad)

    def test_backward_is_deterministic(self):
        rng = np.random.default_rng(3)
        x, k, b = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        first = analytic(lambda *t: ops.sum_all(ops.relu(ops.conv2d(*t, padding=1))), [x, k, b])
        second = analytic(lambda *t: ops.sum_all(ops.relu(ops.conv2d(*t, padding=1))), [x, k, b])

        for g1, g2 in zip(first, second):
            np.testing.assert_array_equal(g1, g2)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)

        with ComputeGraph() as graph:
            y = ops.scale(x, 2.0)
            self.assertRaises(UsageError, graph.backward, y)

    def test_tensor_values_are_frozen(self):
        x = Tensor([1.0, 2.0])

        with self.assertRaises(ValueError):
            x.data[0] = 5.0

    def test_shape_errors_name_the_axis(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        k = Tensor(np.zeros((3, 1, 3, 3)))

        with self.assertRaises(DimensionError) as ctx:
            ops.conv2d(x, k, Tensor(np.zeros(3)))

        self.assertIn("axis C", str(ctx.exception))
        self.assertRaises(DimensionError, ops.add, Tensor([1.0]), Tensor([1.0, 2.0]))
        self.assertRaises(ValidationError, ops.softmax_cross_entropy, Tensor(np.zeros((2, 3))), [0, 3])

    def test_softmax_rows_sum_to_one(self):
        probs = ops.softmax(np.array([[1000.0, 1000.0, -1000.0], [0.0, 1.0, 2.0]]))
        np.testing.assert_allclose([1.0, 1.0], probs.sum(axis=1))
        np.testing.assert_allclose([0.5, 0.5, 0.0], probs[0], atol=1e-12)


if __name__ == "__main__":
    unittest.main()
