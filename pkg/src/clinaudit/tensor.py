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

from __future__ import annotations

import numpy as np
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
from .constants import DTYPE
from .errors import UsageError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active_graph: ContextVar[Optional["ComputeGraph"]] = ContextVar("clinaudit_graph", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "graph", "name")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Optional[np.dtype] = None, name: str = ''):
        """
        Dense array with an optional gradient. The values are copied and
        frozen; only grad changes after construction.

        @param data: Array-like values.
        @param requires_grad: Whether backward() populates grad for this tensor.
        @param dtype: Floating dtype; defaults to the engine dtype (float32).
        @param name: Optional label, used in error messages.
        """
        arr = np.array(data, dtype=dtype or DTYPE)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.graph: Optional[ComputeGraph] = None
        self.name = name

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> Tensor:
        """
        Adopt an array produced by an op without copying it.

        @param arr: Freshly computed array owned by nobody else.
        @param requires_grad: Gradient flag.
        @return: Tensor.
        """
        tensor = cls.__new__(cls)
        arr.flags.writeable = False
        tensor.data = arr
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.graph = None
        tensor.name = ''
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """
        Backpropagate from this scalar through the graph that produced it.

        @return: None
        """
        if self.graph is None:
            raise UsageError("backward() needs a tensor produced inside an active ComputeGraph")
        self.graph.backward(self)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ''
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    kind: str
    inputs: Tuple[int, ...]
    output: int
    backward: BackwardFn
    saved: Dict[str, Any] = field(default_factory=dict)


class ComputeGraph:
    def __init__(self):
        """
        Define-by-run tape. Ops executed while the graph is active append
        one Node each; because inputs always exist before the op runs, the
        tape is already in topological order.
        """
        self.nodes: List[Node] = list()
        self.tensors: List[Tensor] = list()
        self._ids: Dict[int, int] = dict()
        self._produced: set = set()
        self._token = None

    def __enter__(self) -> ComputeGraph:
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc):
        _active_graph.reset(self._token)
        self._token = None

    def _watch(self, tensor: Tensor) -> int:
        key = id(tensor)
        index = self._ids.get(key)

        if index is None:
            index = len(self.tensors)
            self._ids[key] = index
            self.tensors.append(tensor)

        return index

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn, **saved):
        """
        Append a node for an executed primitive.

        @param kind: Primitive name, e.g. "conv2d".
        @param inputs: Operand tensors, in the order backward returns their gradients.
        @param output: Result tensor; it becomes owned by this graph.
        @param backward: Maps the output gradient to one gradient (or None) per input.
        @param saved: Forward values kept for inspection.
        @return: None
        """
        ids = tuple(self._watch(t) for t in inputs)
        out_id = self._watch(output)
        output.graph = self
        self._produced.add(out_id)
        self.nodes.append(Node(kind, ids, out_id, backward, dict(saved)))

    def backward(self, loss: Tensor):
        """
        Reverse sweep over the tape. Every node is visited once, in reverse
        recording order, and gradients are summed in a fixed order, so two
        sweeps over the same graph produce bit-identical results.

        @param loss: Scalar tensor recorded in this graph.
        @return: None
        """
        if loss.data.size != 1:
            raise UsageError(f"backward() requires a scalar loss, got shape {loss.shape}")
        if loss.graph is not self:
            raise UsageError("backward() called with a tensor recorded in a different graph")

        grads: Dict[int, np.ndarray] = {self._ids[id(loss)]: np.ones_like(loss.data)}

        for node in reversed(self.nodes):
            g = grads.pop(node.output, None)

            if g is None:
                continue

            for index, ig in zip(node.inputs, node.backward(g)):
                if ig is None:
                    continue
                if index in grads:
                    grads[index] = grads[index] + ig
                else:
                    grads[index] = ig

        for index, tensor in enumerate(self.tensors):
            if index in self._produced or not tensor.requires_grad:
                continue

            g = grads.get(index)

            if g is None:
                g = np.zeros_like(tensor.data)
            else:
                g = g.astype(tensor.dtype, copy=False)

            tensor.grad = g if tensor.grad is None else tensor.grad + g


def active_graph() -> Optional[ComputeGraph]:
    return _active_graph.get()
