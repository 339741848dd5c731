"""
Tensor Autodiff Module
Dense numpy tensors with reverse-mode automatic differentiation.

Every primitive is a ``Function`` subclass with a ``forward`` on raw arrays and a
``backward`` returning one gradient per input. ``Function.apply`` records the
call on the output tensor; ``Tensor.backward`` builds a ``Graph`` (the
topologically ordered record of those calls) and walks it in reverse.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError, GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_DTYPES = {'float64': np.float64, 'float32': np.float32}
_default_dtype = np.float64
_grad_enabled = True

Number = Union[int, float]


def set_default_dtype(name: str) -> None:
    """
    Select the floating point precision for newly created tensors

    Args:
        name: 'float64' (default, used by every gradient check) or 'float32'
    """
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unsupported precision '{name}', expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default dtype"""
    previous = get_default_dtype().name
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them in a graph"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Function:
    """
    Base class for differentiable primitives.

    Subclasses implement ``forward`` on numpy arrays and ``backward`` taking the
    gradient with respect to the output and returning the gradients with respect
    to each input (``None`` for inputs that need none).
    """

    name = 'function'

    def __init__(self, *inputs: 'Tensor'):
        self.inputs: Tuple['Tensor', ...] = inputs
        self.arrays: Tuple[np.ndarray, ...] = tuple(t.data for t in inputs)
        self.consumed = False

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"forward not implemented for {self.name}")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"backward not implemented for {self.name}")

    def release(self) -> None:
        """Drop saved activations once the backward pass has used them"""
        self.arrays = ()
        self.consumed = True

    @classmethod
    def apply(cls, *inputs: 'Tensor', **kwargs) -> 'Tensor':
        fn = cls(*inputs)
        out = fn.forward(*fn.arrays, **kwargs)
        requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
        if not requires_grad:
            fn.arrays = ()
        return Tensor(out, requires_grad=requires_grad, _creator=fn if requires_grad else None)


class Tensor:
    """
    A dense row-major array that can take part in reverse-mode differentiation

    Args:
        data: array-like values
        requires_grad: whether gradients should be accumulated into ``grad``
    """

    def __init__(self, data, requires_grad: bool = False, _creator: Optional[Function] = None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            array = data
        else:
            array = np.asarray(data, dtype=_default_dtype)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator = _creator

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def detach(self) -> 'Tensor':
        """Same values, no graph history"""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, name: str = 'tensor') -> 'Tensor':
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{name} contains NaN or Inf")
        return self

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        if _is_number(other):
            return AddScalar.apply(self, value=float(other))
        return Add.apply(self, _as_tensor(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if _is_number(other):
            return AddScalar.apply(self, value=-float(other))
        return Sub.apply(self, _as_tensor(other))

    def __rsub__(self, other):
        if _is_number(other):
            return AddScalar.apply(Neg.apply(self), value=float(other))
        return Sub.apply(_as_tensor(other), self)

    def __mul__(self, other):
        if _is_number(other):
            return Scale.apply(self, factor=float(other))
        return Mul.apply(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if _is_number(other):
            return ScalarDiv.apply(self, divisor=float(other))
        return Div.apply(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return Div.apply(_as_tensor(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, _as_tensor(other))

    def __getitem__(self, key):
        return Slice.apply(self, key=key)

    # --------------------------------------------------------------- methods
    def exp(self) -> 'Tensor':
        return Exp.apply(self)

    def log(self) -> 'Tensor':
        return Log.apply(self)

    def softplus(self) -> 'Tensor':
        return Softplus.apply(self)

    def relu(self) -> 'Tensor':
        return Relu.apply(self)

    def square(self) -> 'Tensor':
        return Mul.apply(self, self)

    def sum(self, axis: Optional[int] = None) -> 'Tensor':
        return Sum.apply(self, axis=axis)

    def mean(self, axis: Optional[int] = None) -> 'Tensor':
        return Mean.apply(self, axis=axis)

    def norm(self, axis: Optional[int] = None) -> 'Tensor':
        return Norm.apply(self, axis=axis)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self) -> 'Tensor':
        return Transpose.apply(self)

    @property
    def T(self) -> 'Tensor':
        return self.transpose()

    def expand(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Expand.apply(self, shape=tuple(shape))

    def softmax(self) -> 'Tensor':
        return Softmax.apply(self)

    def log_softmax(self) -> 'Tensor':
        return LogSoftmax.apply(self)

    def chunk(self, chunks: int, axis: int = -1) -> List['Tensor']:
        return chunk(self, chunks, axis)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf"""
        Graph(self).backward()


def _is_number(value) -> bool:
    return isinstance(value, (int, float, np.floating, np.integer)) and not isinstance(value, bool)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_default_dtype), requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=_default_dtype), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# graph
# --------------------------------------------------------------------------
@dataclass
class GraphNode:
    """One recorded primitive call"""
    op: str
    input_ids: Tuple[int, ...]
    output_id: int


@dataclass
class Graph:
    """
    Topologically ordered record of the primitives that produced ``output``

    Built fresh from the output tensor every time ``backward`` is called; the
    primitives release their saved activations afterwards, so a second backward
    over the same forward pass fails.
    """
    output: Tensor
    order: List[Tensor] = field(init=False)
    nodes: List[GraphNode] = field(init=False)

    def __post_init__(self):
        self.order = self._toposort(self.output)
        self.nodes = [
            GraphNode(t.creator.name, tuple(id(i) for i in t.creator.inputs), id(t))
            for t in self.order if t.creator is not None
        ]

    @staticmethod
    def _toposort(output: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in reversed(node.creator.inputs):
                    if id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def backward(self) -> None:
        output = self.output
        if output.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {output.shape}")
        if not output.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")
        if not np.all(np.isfinite(output.data)):
            raise NonFiniteError("loss is NaN or Inf")
        for node in self.order:
            if node.creator is not None and node.creator.consumed:
                raise GraphError("graph already consumed by a previous backward; run forward again")

        grads: Dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self.order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            fn = node.creator
            if fn is None:
                if node.requires_grad:
                    node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            input_grads = fn.backward(grad)
            for parent, parent_grad in zip(fn.inputs, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
            fn.release()


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------
def _binary_shapes(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar-tensor broadcasting)")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


class Add(Function):
    name = 'add'

    def forward(self, a, b):
        _binary_shapes(a, b, self.name)
        return a + b

    def backward(self, grad):
        a, b = self.arrays
        return _reduce_to(grad, a.shape), _reduce_to(grad, b.shape)


class Sub(Function):
    name = 'sub'

    def forward(self, a, b):
        _binary_shapes(a, b, self.name)
        return a - b

    def backward(self, grad):
        a, b = self.arrays
        return _reduce_to(grad, a.shape), _reduce_to(-grad, b.shape)


class Mul(Function):
    name = 'mul'

    def forward(self, a, b):
        _binary_shapes(a, b, self.name)
        return a * b

    def backward(self, grad):
        a, b = self.arrays
        return _reduce_to(grad * b, a.shape), _reduce_to(grad * a, b.shape)


class Div(Function):
    name = 'div'

    def forward(self, a, b):
        _binary_shapes(a, b, self.name)
        if np.any(b == 0):
            raise DomainError("div: denominator contains zero; add a stabilizer")
        return a / b

    def backward(self, grad):
        a, b = self.arrays
        return _reduce_to(grad / b, a.shape), _reduce_to(-grad * a / (b * b), b.shape)


class Neg(Function):
    name = 'neg'

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Scale(Function):
    name = 'scale'

    def forward(self, a, factor: float = 1.0):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


class ScalarDiv(Function):
    name = 'scalar_div'

    def forward(self, a, divisor: float = 1.0):
        if divisor == 0:
            raise DomainError("div: division by zero scalar")
        self.divisor = divisor
        return a / divisor

    def backward(self, grad):
        return (grad / self.divisor,)


class AddScalar(Function):
    name = 'add_scalar'

    def forward(self, a, value: float = 0.0):
        return a + value

    def backward(self, grad):
        return (grad,)


class MatMul(Function):
    name = 'matmul'

    def forward(self, a, b):
        if a.ndim != b.ndim or a.ndim not in (2, 3):
            raise ShapeError(f"matmul: expected two 2-D or two 3-D operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        if a.ndim == 3 and a.shape[0] != b.shape[0]:
            raise ShapeError(f"matmul: batch sizes differ, {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, grad):
        a, b = self.arrays
        return grad @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ grad


class Transpose(Function):
    name = 'transpose'

    def forward(self, a):
        if a.ndim < 2:
            raise ShapeError(f"transpose: needs at least 2 dimensions, got {a.shape}")
        return np.swapaxes(a, -1, -2)

    def backward(self, grad):
        return (np.swapaxes(grad, -1, -2),)


class Reshape(Function):
    name = 'reshape'

    def forward(self, a, shape: Tuple[int, ...] = ()):
        shape = tuple(int(d) for d in shape)
        unknown = [i for i, d in enumerate(shape) if d == -1]
        if len(unknown) > 1 or any(d < -1 for d in shape):
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
        if unknown:
            known = int(np.prod([d for d in shape if d != -1], dtype=np.int64))
            if known == 0 or a.size % known:
                raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
            shape = tuple(a.size // known if d == -1 else d for d in shape)
        if int(np.prod(shape, dtype=np.int64)) != a.size:
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.arrays[0].shape),)


class Expand(Function):
    """Explicit broadcast of size-1 axes to ``shape``"""
    name = 'expand'

    def forward(self, a, shape: Tuple[int, ...] = ()):
        if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
            raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}")
        return np.broadcast_to(a, shape).copy()

    def backward(self, grad):
        source = self.arrays[0].shape
        axes = tuple(i for i, (s, t) in enumerate(zip(source, grad.shape)) if s == 1 and t != 1)
        return (grad.sum(axis=axes, keepdims=True) if axes else grad,)


class Exp(Function):
    name = 'exp'

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)

    def release(self):
        super().release()
        self.out = None


class Log(Function):
    name = 'log'

    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError("log: input contains non-positive values; add a stabilizer")
        return np.log(a)

    def backward(self, grad):
        return (grad / self.arrays[0],)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -a))


class Softplus(Function):
    name = 'softplus'

    def forward(self, a):
        return np.logaddexp(0.0, a)

    def backward(self, grad):
        return (grad * _sigmoid(self.arrays[0]),)


class Relu(Function):
    name = 'relu'

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, grad):
        return (grad * (self.arrays[0] > 0),)


class Softmax(Function):
    """Softmax over the last axis"""
    name = 'softmax'

    def forward(self, a):
        shifted = np.exp(a - a.max(axis=-1, keepdims=True))
        self.out = shifted / shifted.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)

    def release(self):
        super().release()
        self.out = None


class LogSoftmax(Function):
    """Log-softmax over the last axis via log-sum-exp"""
    name = 'log_softmax'

    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        self.out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return self.out

    def backward(self, grad):
        return (grad - np.exp(self.out) * grad.sum(axis=-1, keepdims=True),)

    def release(self):
        super().release()
        self.out = None


class Sum(Function):
    name = 'sum'

    def forward(self, a, axis: Optional[int] = None):
        self.axis = axis
        return np.asarray(a.sum(axis=axis))

    def backward(self, grad):
        shape = self.arrays[0].shape
        if self.axis is None:
            return (np.full(shape, grad, dtype=grad.dtype),)
        return (np.broadcast_to(np.expand_dims(grad, self.axis), shape).copy(),)


class Mean(Function):
    name = 'mean'

    def forward(self, a, axis: Optional[int] = None):
        self.axis = axis
        self.count = a.size if axis is None else a.shape[axis]
        return np.asarray(a.mean(axis=axis))

    def backward(self, grad):
        shape = self.arrays[0].shape
        if self.axis is None:
            return (np.full(shape, grad / self.count, dtype=grad.dtype),)
        return (np.broadcast_to(np.expand_dims(grad / self.count, self.axis), shape).copy(),)


class Norm(Function):
    """L2 norm over all elements or along one axis"""
    name = 'norm'

    def forward(self, a, axis: Optional[int] = None):
        self.axis = axis
        self.out = np.asarray(np.sqrt((a * a).sum(axis=axis)))
        return self.out

    def backward(self, grad):
        a = self.arrays[0]
        norm = self.out if self.axis is None else np.expand_dims(self.out, self.axis)
        grad = grad if self.axis is None else np.expand_dims(grad, self.axis)
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, grad * a / safe, 0.0),)

    def release(self):
        super().release()
        self.out = None


class Concat(Function):
    name = 'concat'

    def forward(self, *arrays, axis: int = 0):
        reference = arrays[0]
        for other in arrays[1:]:
            if other.ndim != reference.ndim or any(
                    s != t for i, (s, t) in enumerate(zip(reference.shape, other.shape)) if i != axis % reference.ndim):
                raise ShapeError(f"concat: shapes {reference.shape} and {other.shape} disagree off axis {axis}")
        self.axis = axis
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        sizes = [a.shape[self.axis] for a in self.arrays]
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class Slice(Function):
    name = 'slice'

    def forward(self, a, key=None):
        self.key = key
        return np.array(a[key])

    def backward(self, grad):
        full = np.zeros_like(self.arrays[0])
        np.add.at(full, self.key, grad)
        return (full,)


# --------------------------------------------------------------------------
# functional helpers
# --------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def softplus(x: Tensor) -> Tensor:
    return Softplus.apply(x)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no tensors given")
    return Concat.apply(*tensors, axis=axis)


def chunk(x: Tensor, chunks: int, axis: int = -1) -> List[Tensor]:
    axis = axis % x.ndim
    if chunks <= 0 or x.shape[axis] % chunks:
        raise ShapeError(f"chunk: axis {axis} of {x.shape} is not divisible into {chunks} pieces")
    width = x.shape[axis] // chunks
    pieces = []
    for i in range(chunks):
        key = [slice(None)] * x.ndim
        key[axis] = slice(i * width, (i + 1) * width)
        pieces.append(x[tuple(key)])
    return pieces


def softplus_value(x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Stable log(1 + exp(x)) on plain numbers"""
    out = np.logaddexp(0.0, x)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------
@dataclass
class GradCheckReport:
    """Per-leaf maximum relative error between analytic and central-difference gradients"""
    max_rel_errors: List[float]
    tol: float
    value: float

    @property
    def max_error(self) -> float:
        return max(self.max_rel_errors) if self.max_rel_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def grad_check(f: Callable[..., Tensor], point: Sequence[Tensor],
               h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """
    Compare backward() against central finite differences

    ``f`` must be deterministic (re-seed any sampling inside it). The relative
    error of each element is |a - n| / max(|a|, |n|, floor) where the floor is
    the round-off level of the central difference for the value of ``f``.

    Args:
        f: function of the point tensors returning a scalar tensor
        point: leaf tensors to differentiate; mutated in place and restored
        h: finite-difference step
        tol: pass threshold on the maximum relative error

    Returns:
        GradCheckReport
    """
    for leaf in point:
        leaf.requires_grad = True
        leaf.grad = None
    out = f(*point)
    value = out.item()
    if not np.isfinite(value):
        raise NonFiniteError("grad_check: f(point) is not finite")
    if out.requires_grad:
        out.backward()

    floor = 10.0 * np.finfo(np.float64).eps * max(1.0, abs(value)) / (h * tol)
    errors = []
    for leaf in point:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        with no_grad():
            for index in range(flat.size):
                original = flat[index]
                flat[index] = original + h
                plus = f(*point).item()
                flat[index] = original - h
                minus = f(*point).item()
                flat[index] = original
                numeric.reshape(-1)[index] = (plus - minus) / (2.0 * h)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        errors.append(float(np.max(np.abs(analytic - numeric) / scale)) if flat.size else 0.0)
        leaf.grad = None
    logger.debug("grad_check value=%.6g errors=%s", value, errors)
    return GradCheckReport(max_rel_errors=errors, tol=tol, value=value)
