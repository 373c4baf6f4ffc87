"""
Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation is a `Function` subclass. Applying a function
records the resulting node on the active `GradTape` (when one is open) and keeps
a reference to its inputs, so `backward` can replay the graph in reverse
topological order. All data is stored as float64 numpy arrays.
"""
import itertools
import logging
import threading
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy.special import erf

from prompt_decoupler.errors import ContractError, ShapeError, TapeLookupError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_node_ids = itertools.count(1)
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _tape_stack() -> List["GradTape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (inference and finite differences)."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class GradTape:
    """
    Topologically ordered record of the operations of one forward pass.

    Nodes are appended in creation order, which is a valid topological order for
    a define-by-run graph. A tape is confined to the thread that opened it.
    """

    def __init__(self):
        self.nodes: List["Tensor"] = []
        self._node_ids: Set[int] = set()
        self.gradients: Dict[int, np.ndarray] = {}

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)
        self._node_ids.add(node.node_id)

    def __contains__(self, node: "Tensor") -> bool:
        return node.node_id in self._node_ids

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """
    n-dimensional float64 array participating in a reverse-mode graph.

    Attributes:
        data: Values in row-major order
        requires_grad: Whether gradients flow into this tensor
        grad: Accumulated gradient for leaves after `backward`, same shape as data
        node_id: Graph handle, unique per process
    """

    __array_priority__ = 100.0

    def __init__(self, data: Any, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self._ctx: Optional["Function"] = None
        self._tape: Optional[GradTape] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, ctx: Optional["Function"], requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = requires_grad
        out.grad = None
        out.node_id = next(_node_ids)
        out._ctx = ctx
        out._tape = None
        if ctx is not None:
            stack = _tape_stack()
            if stack:
                out._tape = stack[-1]
                stack[-1].record(out)
        return out

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Return a constant copy that is not connected to any graph."""
        return Tensor(self.data.copy())

    def watch(self) -> "Tensor":
        """Identity node that always participates in the graph, used to tap activations."""
        return Watch.apply(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -------------------------------------------------------------- arithmetic
    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(other, self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return MatMul.apply(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    # -------------------------------------------------------------- functional
    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=axes)

    def broadcast_to(self, shape: Tuple[int, ...]) -> "Tensor":
        return BroadcastTo.apply(self, shape=tuple(shape))

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def relu(self) -> "Tensor":
        return ReLU.apply(self)

    def gelu(self) -> "Tensor":
        return GELU.apply(self)

    def softplus(self) -> "Tensor":
        return Softplus.apply(self)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added so grad matches shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward` on raw arrays and `backward`, which maps the
    gradient of the output to one gradient (or None) per input.
    """

    force_grad = False

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs: Any) -> Tensor:
        tensors = tuple(as_tensor(value) for value in inputs)
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _grad_enabled() and (cls.force_grad or any(t.requires_grad for t in tensors))
        return Tensor._from_op(out, fn if requires_grad else None, requires_grad)


class Watch(Function):
    force_grad = True

    def forward(self, a):
        return a.copy()

    def backward(self, grad):
        return (grad,)


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, grad):
        a, b = self.inputs
        grad_a = grad / b.data
        grad_b = -grad * a.data / (b.data * b.data)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.inputs
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, grad):
        return (grad / self.inputs[0].data,)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Abs(Function):
    def forward(self, a):
        return np.abs(a)

    def backward(self, grad):
        # np.sign is 0 at 0, the chosen subgradient
        return (grad * np.sign(self.inputs[0].data),)


class ReLU(Function):
    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, grad):
        return (grad * (self.inputs[0].data > 0.0),)


class GELU(Function):
    """Exact GELU, x * Phi(x)."""

    def forward(self, a):
        self.cdf = 0.5 * (1.0 + erf(a / np.sqrt(2.0)))
        return a * self.cdf

    def backward(self, grad):
        x = self.inputs[0].data
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (grad * (self.cdf + x * pdf),)


class Softplus(Function):
    def forward(self, a):
        return np.logaddexp(0.0, a)

    def backward(self, grad):
        x = self.inputs[0].data
        sigmoid = np.exp(-np.logaddexp(0.0, -x))
        return (grad * sigmoid,)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = tuple(ax % len(shape) for ax in axes)
            for ax in sorted(axes):
                grad = np.expand_dims(grad, ax)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims
        out = np.mean(a, axis=axis, keepdims=keepdims)
        self.count = a.size // max(np.asarray(out).size, 1)
        return out

    def backward(self, grad):
        shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = tuple(ax % len(shape) for ax in axes)
            for ax in sorted(axes):
                grad = np.expand_dims(grad, ax)
        return (np.broadcast_to(grad, shape) / self.count,)


class Reshape(Function):
    def forward(self, a, shape=()):
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, a, axes=()):
        self.axes = tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class BroadcastTo(Function):
    def forward(self, a, shape=()):
        return np.broadcast_to(a, shape).copy()

    def backward(self, grad):
        return (_unbroadcast(grad, self.inputs[0].shape),)


class GetItem(Function):
    def forward(self, a, index=None):
        self.index = index
        return np.array(a[index], dtype=np.float64)

    def backward(self, grad):
        full = np.zeros(self.inputs[0].shape)
        np.add.at(full, self.index, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class LayerNorm(Function):
    """Normalization over the last axis without affine parameters."""

    def forward(self, a, eps=1e-5):
        mu = a.mean(axis=-1, keepdims=True)
        var = a.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (a - mu) * self.inv_std
        return self.xhat

    def backward(self, grad):
        n = self.xhat.shape[-1]
        sum_g = grad.sum(axis=-1, keepdims=True)
        sum_gx = (grad * self.xhat).sum(axis=-1, keepdims=True)
        return (self.inv_std * (grad - sum_g / n - self.xhat * sum_gx / n),)


class Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        inner = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


class LogSoftmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        self.out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        return self.out

    def backward(self, grad):
        probs = np.exp(self.out)
        return (grad - probs * grad.sum(axis=self.axis, keepdims=True),)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def layer_norm(x: ArrayLike, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, eps=eps)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    return concat([t.reshape((1,) + t.shape) for t in tensors], axis=0)


class Gradients:
    """
    Gradient table produced by `backward`, keyed by node id.

    Looking up a tensor that received no gradient returns zeros of its shape.
    """

    def __init__(self, table: Dict[int, np.ndarray]):
        self._table = table

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self._table.get(tensor.node_id)
        return np.zeros(tensor.shape) if grad is None else grad

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.node_id in self._table

    def __len__(self) -> int:
        return len(self._table)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited: Set[int] = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        if node._ctx is not None:
            for parent in reversed(node._ctx.inputs):
                if parent.requires_grad and parent.node_id not in visited:
                    stack.append((parent, False))
    return order


def _propagate(root: Tensor) -> Dict[int, np.ndarray]:
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    table: Dict[int, np.ndarray] = {root.node_id: np.ones(root.shape)}
    if not root.requires_grad:
        return table
    for node in reversed(_topological_order(root)):
        grad = table.get(node.node_id)
        if grad is None or node._ctx is None:
            continue
        for parent, parent_grad in zip(node._ctx.inputs, node._ctx.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            previous = table.get(parent.node_id)
            table[parent.node_id] = parent_grad if previous is None else previous + parent_grad
    return table


def backward(root: Tensor) -> Gradients:
    """
    Differentiate a scalar root with respect to every node on its graph.

    Leaves with requires_grad accumulate the result into `.grad`.

    Args:
        root: Scalar tensor produced by differentiable operations

    Returns:
        Gradient table for all reached nodes

    Raises:
        ContractError: If root is not a scalar
    """
    table = _propagate(root)
    for node in _topological_order(root):
        if node.is_leaf and node.requires_grad and node.node_id in table:
            grad = table[node.node_id]
            node.grad = grad.copy() if node.grad is None else node.grad + grad
    if root._tape is not None:
        root._tape.gradients = dict(table)
    return Gradients(table)


def grad_tap(root: Tensor, node: Tensor) -> np.ndarray:
    """
    Gradient of a scalar root with respect to an intermediate node.

    Args:
        root: Scalar tensor
        node: Tensor recorded on the same tape as root, or a differentiable leaf

    Returns:
        Array with node's shape; zeros when node has no path to root

    Raises:
        TapeLookupError: If node was never recorded alongside root
    """
    if node is root:
        return np.ones(root.shape)
    table = _propagate(root)
    if node.node_id in table:
        return table[node.node_id]
    same_tape = node._tape is not None and node._tape is root._tape
    if same_tape or (node.is_leaf and node.requires_grad):
        return np.zeros(node.shape)
    raise TapeLookupError(f"node {node.node_id} with shape {node.shape} is not on the tape of root {root.node_id}")
