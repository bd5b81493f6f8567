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

"""
Differentiable primitives. Each op computes its forward value with numpy
and, when a ComputeGraph is active and some operand requires a gradient,
records a closure mapping the output gradient to operand gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from typing import Sequence
from .tensor import Tensor, BackwardFn, active_graph
from .errors import DimensionError, ValidationError


def _result(kind: str, inputs: Sequence[Tensor], data: np.ndarray, backward: BackwardFn, **saved) -> Tensor:
    graph = active_graph()
    tracked = graph is not None and any(t.requires_grad for t in inputs)
    data = np.asarray(data)
    if not data.flags.c_contiguous:
        data = np.ascontiguousarray(data)
    out = Tensor.wrap(data, requires_grad=tracked)

    if tracked:
        graph.record(kind, inputs, out, backward, **saved)

    return out


def _require_ndim(t: Tensor, ndim: int, op: str):
    if t.ndim != ndim:
        raise DimensionError(f"{op} expects a {ndim}-d tensor, got shape {t.shape}", axis="ndim")


def _require_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op} operands differ in shape: {a.shape} vs {b.shape}", axis="shape")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")

    def _backward(g):
        return (g if a.requires_grad else None,
                g if b.requires_grad else None)

    return _result("add", (a, b), a.data + b.data, _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")

    def _backward(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _result("mul", (a, b), a.data * b.data, _backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.dtype.type(factor)
    return _result("scale", (a,), a.data * factor, lambda g: (g * factor,))


def sum_all(a: Tensor) -> Tensor:
    def _backward(g):
        return (np.full(a.shape, g.reshape(-1)[0], dtype=a.dtype),)

    return _result("sum", (a,), np.array(a.data.sum(), dtype=a.dtype), _backward)


def relu(a: Tensor) -> Tensor:
    # relu'(0) = 0
    mask = a.data > 0
    return _result("relu", (a,), np.where(mask, a.data, 0).astype(a.dtype), lambda g: (g * mask,), mask=mask)


def channel_affine(x: Tensor, weight: Sequence[float], shift: Sequence[float]) -> Tensor:
    """
    Per-channel x * weight[c] + shift[c] over an [N,C,H,W] tensor; the
    normalisation transform expressed as a differentiable op.

    @param x: Input tensor.
    @param weight: One multiplier per channel.
    @param shift: One offset per channel.
    @return: Tensor of the same shape.
    """
    _require_ndim(x, 4, "channel_affine")
    w = np.asarray(weight, dtype=x.dtype).reshape(1, -1, 1, 1)
    s = np.asarray(shift, dtype=x.dtype).reshape(1, -1, 1, 1)

    if w.shape[1] != x.shape[1] or s.shape[1] != x.shape[1]:
        raise DimensionError(f"channel_affine has {w.shape[1]} coefficients for {x.shape[1]} channels", axis="C")

    return _result("channel_affine", (x,), x.data * w + s, lambda g: (g * w,))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation over zero-padded input, computed as an
    im2col matrix product.

    @param x: Input [N,C,H,W].
    @param kernel: Filters [K,C,kh,kw].
    @param bias: Offsets [K].
    @param stride: Step between windows, >= 1.
    @param padding: Zero rows/columns added on every border.
    @return: Output [N,K,H',W'] with H' = (H + 2p - kh) // stride + 1.
    """
    _require_ndim(x, 4, "conv2d input")
    _require_ndim(kernel, 4, "conv2d kernel")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape

    if stride < 1:
        raise ValidationError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValidationError(f"conv2d padding must be >= 0, got {padding}")
    if kc != c:
        raise DimensionError(f"conv2d kernel expects {kc} input channels, input has {c}", axis="C")
    if bias.shape != (k,):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match {k} filters", axis="K")
    if kh > h + 2 * padding:
        raise DimensionError(f"conv2d kernel height {kh} exceeds padded input height {h + 2 * padding}", axis="H")
    if kw > w + 2 * padding:
        raise DimensionError(f"conv2d kernel width {kw} exceeds padded input width {w + 2 * padding}", axis="W")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    w2 = kernel.data.reshape(k, c * kh * kw)
    out = (cols @ w2.T + bias.data).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    def _backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, k)
        gx = gk = gb = None

        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(k, c, kh, kw)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)

            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)

            gx = gxp[:, :, padding:padding + h, padding:padding + w]

        return gx, gk, gb

    return _result("conv2d", (x, kernel, bias), out, _backward, stride=stride, padding=padding)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """
    Join two feature maps along the channel axis; a's channels come first.

    @param a: Tensor [N,C1,H,W].
    @param b: Tensor [N,C2,H,W].
    @return: Tensor [N,C1+C2,H,W].
    """
    _require_ndim(a, 4, "concat_channels")
    _require_ndim(b, 4, "concat_channels")

    for axis, name in ((0, 'N'), (2, 'H'), (3, 'W')):
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(f"concat_channels operands differ: {a.shape} vs {b.shape}", axis=name)

    split = a.shape[1]

    def _backward(g):
        return (g[:, :split] if a.requires_grad else None,
                g[:, split:] if b.requires_grad else None)

    return _result("concat_channels", (a, b), np.concatenate((a.data, b.data), axis=1), _backward)


def avgpool2d(x: Tensor, kernel: int) -> Tensor:
    """
    Non-overlapping mean pooling (stride = kernel). Trailing rows or
    columns that do not fill a window are dropped.

    @param x: Input [N,C,H,W].
    @param kernel: Window edge length.
    @return: Tensor [N,C,H//kernel,W//kernel].
    """
    _require_ndim(x, 4, "avgpool2d")
    n, c, h, w = x.shape

    if kernel < 1:
        raise ValidationError(f"avgpool2d kernel must be >= 1, got {kernel}")
    if kernel > h:
        raise DimensionError(f"avgpool2d kernel {kernel} exceeds height {h}", axis="H")
    if kernel > w:
        raise DimensionError(f"avgpool2d kernel {kernel} exceeds width {w}", axis="W")

    ho, wo = h // kernel, w // kernel
    area = x.dtype.type(kernel * kernel)
    out = x.data[:, :, :ho * kernel, :wo * kernel].reshape(n, c, ho, kernel, wo, kernel).sum(axis=(3, 5)) / area

    def _backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        spread = np.repeat(np.repeat(g / area, kernel, axis=2), kernel, axis=3)
        gx[:, :, :ho * kernel, :wo * kernel] = spread
        return (gx,)

    return _result("avgpool2d", (x,), out, _backward, kernel=kernel)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _result("flatten", (x,), x.data.reshape(shape[0], -1), lambda g: (g.reshape(shape),))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Affine map x @ weight.T + bias.

    @param x: Input [N,F].
    @param weight: Matrix [K,F].
    @param bias: Offsets [K].
    @return: Tensor [N,K].
    """
    _require_ndim(x, 2, "linear input")
    _require_ndim(weight, 2, "linear weight")

    if weight.shape[1] != x.shape[1]:
        raise DimensionError(f"linear weight expects {weight.shape[1]} features, input has {x.shape[1]}", axis="F")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear bias shape {bias.shape} does not match {weight.shape[0]} outputs", axis="K")

    def _backward(g):
        return (g @ weight.data if x.requires_grad else None,
                g.T @ x.data if weight.requires_grad else None,
                g.sum(axis=0) if bias.requires_grad else None)

    return _result("linear", (x, weight, bias), x.data @ weight.data.T + bias.data, _backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """
    Row-wise softmax of a plain array, stabilised by max subtraction.

    @param logits: Array [N,K].
    @return: Probabilities [N,K], rows summing to 1.
    """
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """
    Mean negative log-likelihood of the true classes. The recorded
    backward node yields (softmax - onehot) / N for the logits.

    @param logits: Scores [N,K].
    @param labels: Class index per row, each in [0, K).
    @return: Scalar loss tensor.
    """
    _require_ndim(logits, 2, "softmax_cross_entropy")
    n, k = logits.shape
    y = np.asarray(labels, dtype=np.int64)

    if y.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy got {y.shape[0] if y.ndim else 0} labels for {n} rows", axis="N")
    if n and (y.min() < 0 or y.max() >= k):
        raise ValidationError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    rows = np.arange(n)
    loss = np.array(-log_probs[rows, y].mean(), dtype=logits.dtype)

    def _backward(g):
        grad = np.exp(log_probs)
        grad[rows, y] -= 1
        return (grad * (g.reshape(-1)[0] / n),)

    return _result("softmax_cross_entropy", (logits,), loss, _backward)
