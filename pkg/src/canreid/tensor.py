"""Dense tensors with define-by-run reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded on it when at
least one input requires a gradient. ``tape.backward(loss)`` walks the record
in reverse and accumulates gradients into leaf tensors (``Parameter.grad`` for
model weights). Outside a tape every op is a plain numpy computation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "TapeError",
    "backward",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "relu",
    "maximum",
    "clip_min",
    "matmul",
    "sum",
    "mean",
    "reduce",
    "concat",
    "stack",
    "slice",
    "reshape",
    "transpose",
    "take",
    "take_along_axis",
    "softmax",
    "log_softmax",
    "l2_normalize",
]

_FLOAT_TYPES = (np.float32, np.float64)


class TapeError(RuntimeError):
    """Raised on misuse of a tape (backward twice, recording after consumption)."""


class Tensor:
    """Immutable-by-convention n-d array that may participate in autodiff."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """A named trainable leaf tensor with a zero-initialised gradient buffer."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ValueError(f"{self.name}: shape {value.shape} != {self.data.shape}")
        self.data = value
        if self.grad is None or self.grad.shape != value.shape:
            self.grad = np.zeros_like(value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Use as a context manager; each forward pass gets a fresh tape and
    ``backward`` may run exactly once on it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, op, inputs, out, backward_fn) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.nodes.append(_Node(op, tuple(inputs), out, backward_fn))
        self._produced.add(id(out))

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf that requires grad."""
        if self.consumed:
            raise TapeError("backward already ran on this tape; run a new forward pass")
        if loss.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True
        if id(loss) not in self._produced:
            # constant loss: nothing on the tape depends on a parameter
            self.nodes.clear()
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in self._produced:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                elif isinstance(inp, Parameter):
                    inp.grad += gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        self.nodes.clear()
        self._produced.clear()


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(op, inputs, out, backward_fn)
    return out


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result and its adjoint as a recorded tape op.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    return _emit(op, data, inputs, backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def clip_min(a, low: float) -> Tensor:
    """max(a, low) elementwise; gradient passes where a > low."""
    a = _as_tensor(a)
    mask = a.data > low
    return _emit("clip_min", np.where(mask, a.data, low).astype(a.dtype), (a,),
                 lambda g: (g * mask,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.data >= b.data
    return _emit("maximum", np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs tensors with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", a.data @ b.data, (a, b), back)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    orig = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


# reductions ------------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reduce(x, axis: int, mode: str = "max") -> Tensor:
    """Remove ``axis`` by max or mean.

    Max routes the whole gradient to the lowest-index maximal element.
    """
    x = _as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    if x.shape[ax] < 1:
        raise ValueError("cannot reduce an empty axis")
    if mode == "max":
        idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
        out = np.take_along_axis(x.data, idx, axis=ax).squeeze(ax)

        def back(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx, np.expand_dims(g, ax), axis=ax)
            return (gx,)

        return _emit("reduce_max", out, (x,), back)
    if mode == "mean":
        n = x.shape[ax]
        return _emit("reduce_mean", x.data.mean(axis=ax), (x,),
                     lambda g: (np.broadcast_to(np.expand_dims(g, ax) / n, x.shape).copy(),))
    raise ValueError(f"unknown reduce mode {mode!r}")


# structural ------------------------------------------------------------------


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = _norm_axis(axis, ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise ValueError(f"concat shape mismatch off axis {ax}: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _emit("concat", out, tensors, back)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    return concat([reshape(t, _insert(t.shape, axis, t.ndim)) for t in tensors], axis=axis)


def _insert(shape, axis, ndim):
    ax = axis % (ndim + 1)
    return shape[:ax] + (1,) + shape[ax:]


def slice(x, axis: int, start: int, length: int) -> Tensor:  # noqa: A001
    """Contiguous block ``[start, start+length)`` along ``axis``."""
    x = _as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    if start < 0 or length < 1 or start + length > x.shape[ax]:
        raise ValueError(f"slice [{start}, {start + length}) out of range for size {x.shape[ax]}")
    index = [np.s_[:]] * x.ndim
    index[ax] = np.s_[start:start + length]
    index = tuple(index)

    def back(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _emit("slice", x.data[index], (x,), back)


def take(x, index) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate in backward."""
    x = _as_tensor(x)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _emit("take", np.asarray(x.data[index]), (x,), back)


def take_along_axis(x, indices: np.ndarray, axis: int) -> Tensor:
    x = _as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    indices = np.asarray(indices)
    out = np.take_along_axis(x.data, indices, axis=ax)

    def back(g):
        grids = list(np.indices(indices.shape, sparse=True))
        grids[ax] = indices
        gx = np.zeros_like(x.data)
        np.add.at(gx, tuple(grids), g)
        return (gx,)

    return _emit("take_along_axis", out, (x,), back)


# normalisation ---------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _emit("log_softmax", out, (x,),
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||, eps) along ``axis``."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    live = norm > eps
    denom = np.where(live, norm, eps)
    out = x.data / denom

    def back(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(live, (g - out * proj) / denom, g / eps),)

    return _emit("l2_normalize", out, (x,), back)
