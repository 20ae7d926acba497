"""
dedetr - Dense tensor kernel with reverse-mode differentiation.

Values live in float64 numpy arrays. Every differentiable op executed while
gradients are enabled is appended to a thread-local Tape; backward() walks
the graph back from the loss in reverse topological order and clears the
tape. Broadcasting is limited to leading-batch expansion: one operand's shape
must be a suffix of the other's.
"""

import builtins
import logging
import threading
from contextlib import contextmanager
from numbers import Real
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import AxisError, ContractError, NumericError, ShapeError

logger = logging.getLogger(__name__)

INVERSE_SIGMOID_EPS = 1e-6

Axis = Union[int, Sequence[int], None]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check_dims(arr.shape)
        _check_finite(arr, "leaf")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, Real):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Real):
            return scale(self, 1.0 / float(other))
        return div(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return index(self, key)


class Tape:
    """Ordered record of differentiable ops; append order is topological."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


class _GradState(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _GradState()


def current_tape() -> Tape:
    """The tape of the calling thread."""
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.enabled


@contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    previous = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def create(
    dims: Sequence[int],
    init: str = "zeros",
    *,
    value: float = 0.0,
    lo: float = -1.0,
    hi: float = 1.0,
    seed: int = 0,
    requires_grad: bool = False,
) -> Tensor:
    """
    Create a tensor of the given shape.

    Args:
        dims: Positive extents
        init: "zeros", "constant" (uses value) or "uniform" (uses lo, hi, seed)
        requires_grad: Whether backward() should populate grad

    Returns:
        New leaf tensor
    """
    shape = tuple(int(d) for d in dims)
    if not shape:
        raise ShapeError("dims must be non-empty")
    _check_dims(shape)
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "constant":
        data = np.full(shape, float(value))
    elif init == "uniform":
        if not lo < hi:
            raise ContractError(f"uniform init needs lo < hi, got lo={lo}, hi={hi}")
        data = np.random.default_rng(seed).uniform(lo, hi, size=shape)
    else:
        raise ContractError(f"unknown init '{init}'")
    return Tensor(data, requires_grad=requires_grad)


def zeros(dims: Sequence[int], requires_grad: bool = False) -> Tensor:
    return create(dims, "zeros", requires_grad=requires_grad)


def constant(dims: Sequence[int], value: float, requires_grad: bool = False) -> Tensor:
    return create(dims, "constant", value=value, requires_grad=requires_grad)


def uniform(dims: Sequence[int], lo: float, hi: float, seed: int,
            requires_grad: bool = False) -> Tensor:
    return create(dims, "uniform", lo=lo, hi=hi, seed=seed, requires_grad=requires_grad)


def detach(x: Tensor) -> Tensor:
    return x.detach()


# ---------------------------------------------------------------------------
# internals
# ---------------------------------------------------------------------------

def _check_dims(shape: tuple) -> None:
    if any(d < 1 for d in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by '{op}'")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    _check_finite(arr, op)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out.op = op
    track = _state.enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
        _state.tape.record(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _axis(x: Tensor, axis: int) -> int:
    ndim = x.data.ndim
    if not -ndim <= axis < ndim:
        raise AxisError(f"axis {axis} out of range for dims {x.dims}")
    return axis % ndim


def _axes(x: Tensor, axis: Axis) -> tuple:
    if axis is None:
        return tuple(range(x.data.ndim))
    if isinstance(axis, int):
        return (_axis(x, axis),)
    return tuple(sorted(_axis(x, a) for a in axis))


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    if a.dims == b.dims:
        return a.dims
    longer, shorter = (a, b) if a.data.ndim >= b.data.ndim else (b, a)
    tail = longer.dims[longer.data.ndim - shorter.data.ndim:]
    if tail == shorter.dims:
        return longer.dims
    raise ShapeError(f"{op}: dims {a.dims} and {b.dims} are not compatible")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def _swap_last(arr: np.ndarray) -> np.ndarray:
    return np.swapaxes(arr, -1, -2)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.dims), _unbroadcast(g, b.dims)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.dims), -_unbroadcast(g, b.dims)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.dims), _unbroadcast(g * a.data, b.dims)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "div")

    def backward(g):
        return (_unbroadcast(g / b.data, a.dims),
                _unbroadcast(-g * a.data / (b.data * b.data), b.dims))

    return _result(a.data / b.data, (a, b), backward, "div")


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "maximum")
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.dims), _unbroadcast(g * ~pick_a, b.dims)

    return _result(np.where(pick_a, a.data, b.data), (a, b), backward, "maximum")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "minimum")
    pick_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.dims), _unbroadcast(g * ~pick_a, b.dims)

    return _result(np.where(pick_a, a.data, b.data), (a, b), backward, "minimum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = np.exp(-np.logaddexp(0.0, -x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def inverse_sigmoid(x: Tensor, eps: float = INVERSE_SIGMOID_EPS) -> Tensor:
    """log(x / (1 - x)) with x clamped to [eps, 1 - eps]."""
    clamped = np.clip(x.data, eps, 1.0 - eps)
    inside = (x.data >= eps) & (x.data <= 1.0 - eps)
    y = np.log(clamped) - np.log1p(-clamped)

    def backward(g):
        return (g * inside / (clamped * (1.0 - clamped)),)

    return _result(y, (x,), backward, "inverse_sigmoid")


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; b may be 2-D and shared across a's batch."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.dims} and {b.dims}")
    if a.dims[-1] != b.dims[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.dims} @ {b.dims}")
    if b.data.ndim != 2 and a.dims[:-2] != b.dims[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.dims} @ {b.dims}")

    def backward(g):
        ga = np.matmul(g, _swap_last(b.data))
        gb = np.matmul(_swap_last(a.data), g)
        return _unbroadcast(ga, a.dims), _unbroadcast(gb, b.dims)

    return _result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias with weight laid out [in, out]."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(x, axis)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(x, axis)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=ax, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=ax, keepdims=True),)

    return _result(y, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along axis (affine applied by the caller)."""
    ax = _axis(x, axis)
    mu = x.data.mean(axis=ax, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=ax, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        gm = g.mean(axis=ax, keepdims=True)
        gx = (g * xhat).mean(axis=ax, keepdims=True)
        return (inv_std * (g - gm - xhat * gx),)

    return _result(xhat, (x,), backward, "layer_norm")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in dims)
    _check_dims(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.dims} into {shape}")
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.dims),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    ndim = x.data.ndim
    perm = tuple(reversed(range(ndim))) if axes is None else tuple(_axis(x, a) for a in axes)
    if sorted(perm) != list(range(ndim)):
        raise AxisError(f"axes {axes} is not a permutation of {ndim} axes")
    inverse = tuple(np.argsort(perm))
    return _result(np.transpose(x.data, perm), (x,),
                   lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ax = _axis(tensors[0], axis)
    ref = tensors[0].dims
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or any(
            d != r for i, (d, r) in enumerate(zip(t.dims, ref)) if i != ax
        ):
            raise ShapeError(f"concat: dims {t.dims} incompatible with {ref} on axis {ax}")
    splits = np.cumsum([t.dims[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax),
                   tuple(tensors), backward, "concat")


def index(x: Tensor, key) -> Tensor:
    """Numpy-style slicing or gather; gradient scatters back with accumulation."""
    try:
        picked = x.data[key]
    except IndexError as exc:
        raise ShapeError(f"index {key!r} invalid for dims {x.dims}: {exc}") from exc
    raw_shape = np.shape(picked)
    if 0 in raw_shape:
        raise ShapeError(f"index {key!r} selects an empty tensor from {x.dims}")

    def backward(g):
        full = np.zeros(x.dims)
        np.add.at(full, key, g.reshape(raw_shape))
        return (full,)

    return _result(np.array(picked), (x,), backward, "index")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _axes(x, axis)
    keep_shape = tuple(1 if i in axes else d for i, d in enumerate(x.dims))
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        return (np.broadcast_to(g.reshape(keep_shape), x.dims).copy(),)

    return _result(out, (x,), backward, "sum")


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _axes(x, axis)
    count = int(np.prod([x.dims[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list:
    """Non-leaf nodes reachable from root, every node after its parents."""
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or node.is_leaf:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((parent, False) for parent in node._parents)
    return order


def backward(loss: Tensor) -> None:
    """
    Populate grad on every requires_grad leaf reachable from loss, then clear the tape.

    Only the subgraph behind loss is visited. Leaf gradients accumulate across
    calls until zero_grad().
    """
    if loss.dims != (1,):
        raise ContractError(f"backward needs a scalar loss (dims [1]), got {loss.dims}")
    tape = _state.tape
    if not len(tape) or not loss.requires_grad:
        tape.clear()
        raise ContractError("backward called with an empty tape")

    order = _topological(loss)
    try:
        for node in order:
            node.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeError(
                        f"gradient of '{node.op}' has dims {pg.shape}, expected {parent.dims}"
                    )
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            node.grad = None
    finally:
        tape.clear()


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-6,
    coords: Optional[Iterable[int]] = None,
) -> float:
    """
    Compare the analytic gradient of f at x with central differences.

    Args:
        f: Pure scalar function of one tensor
        x: Point of evaluation
        h: Step in [1e-7, 1e-4]
        coords: Flat coordinates to perturb (all when None)

    Returns:
        max |analytic - numeric| / max(1, |analytic|) over the perturbed coordinates
    """
    if not 1e-7 <= h <= 1e-4:
        raise ContractError(f"step h must lie in [1e-7, 1e-4], got {h}")

    point = Tensor(x.data, requires_grad=True)
    value = f(point)
    if value.dims != (1,):
        raise ContractError(f"f must return a scalar tensor, got dims {value.dims}")
    if value.requires_grad:
        backward(value)
    analytic = point.grad if point.grad is not None else np.zeros(x.dims)

    base = np.array(x.data, dtype=np.float64)
    worst = 0.0
    with no_grad():
        for flat in (range(base.size) if coords is None else coords):
            idx = np.unravel_index(int(flat), base.shape)
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            f_plus, f_minus = f(Tensor(plus)).item(), f(Tensor(minus)).item()
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("f produced a non-finite value during the gradient check")
            numeric = (f_plus - f_minus) / (plus[idx] - minus[idx])
            a = float(analytic[idx])
            worst = max(worst, builtins.abs(a - numeric) / max(1.0, builtins.abs(a)))
    return worst
