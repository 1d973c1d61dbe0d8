"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op computes its forward value with numpy and, when a
``GradTape`` is active on the current thread and one of its inputs requires
a gradient, appends a node holding the inputs and a backward closure to that
tape. ``GradTape.backward`` replays the nodes in reverse execution order.

Convolution is cross-correlation (no kernel flip). The ReLU subgradient at 0
is 0 and max pooling routes its gradient to the first maximal element of each
window in row-major order.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from validation import ShapeError

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-8

_local = threading.local()

Scalar = float | int
BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


class Tensor:
    """Immutable n-dimensional array of 64-bit floats.

    Args:
        data: Anything numpy can turn into a float64 array (copied)
        requires_grad: Whether gradients are tracked for this tensor
    """

    __slots__ = ("data", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        array.setflags(write=False)
        self.data = array
        self.requires_grad = requires_grad
        self._tape: GradTape | None = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        array.setflags(write=False)
        out.data = array
        out.requires_grad = False
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the data."""
        return self.data.copy()

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn
    name: str


class GradTape:
    """Ordered record of differentiable ops executed while the tape is active.

    Use as a context manager; ops record onto the innermost active tape of the
    current thread, so distinct threads can run distinct tapes concurrently.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        elif self in stack:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, name: str, output: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        output.requires_grad = True
        output._tape = self
        self._nodes.append(_Node(output, inputs, backward, name))

    def backward(self, loss: Tensor, sources: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
        """Replay the tape in reverse and return d(loss)/d(source).

        Args:
            loss: Scalar tensor produced by ops on this tape
            sources: Tensors to return gradients for; defaults to every leaf
                tensor with ``requires_grad`` that fed the tape

        Returns:
            Mapping source tensor -> gradient tensor of the same shape;
            sources the loss does not depend on get zeros

        Raises:
            ShapeError: If loss is not a scalar
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        produced = {id(node.output) for node in self._nodes}
        leaves: dict[int, Tensor] = {}

        for node in reversed(self._nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            input_grads = node.backward(upstream)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key not in produced:
                    leaves[key] = tensor
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = np.asarray(grad, dtype=np.float64)

        if sources is None:
            sources = [leaves[key] for key in leaves]
        result: dict[Tensor, Tensor] = {}
        for source in sources:
            grad = grads.get(id(source))
            result[source] = Tensor._wrap(np.zeros(source.shape) if grad is None else grad.reshape(source.shape))
        return result


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Compute gradients of a scalar loss through the tape that produced it.

    Args:
        loss: Scalar tensor
        params: Tensors to differentiate with respect to (default: all leaves)

    Returns:
        Mapping parameter -> gradient; unreachable parameters get zeros

    Raises:
        ShapeError: If loss is not a scalar
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        return {p: Tensor._wrap(np.zeros(p.shape)) for p in (params or [])}
    return loss._tape.backward(loss, params)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(name: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    result = Tensor._wrap(out)
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        stack[-1].record(name, result, inputs, backward_fn)
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise arithmetic -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def clip_min(x: Tensor, minimum: float) -> Tensor:
    """max(x, minimum); the gradient is zero where the clamp is active."""
    keep = x.data > minimum
    return _emit("clip_min", np.where(keep, x.data, minimum), (x,), lambda g: (g * keep,))


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x) with subgradient 0 at x == 0."""
    positive = x.data > 0
    return _emit("relu", np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,))


# Reductions and reshaping ----------------------------------------------------

def sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", out, (x,), backward_fn)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis), 1.0 / count)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    return _emit("stack", out, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def index(x: Tensor, i: int) -> Tensor:
    """x[i] along the first axis."""
    def backward_fn(g):
        full = np.zeros(x.shape)
        full[i] = g
        return (full,)

    return _emit("index", x.data[i], (x,), backward_fn)


def gather_channel(x: Tensor, labels: np.ndarray) -> Tensor:
    """Pick x[labels[h, w], h, w] at every location of a [J, H, W] tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 3 or labels.shape != x.shape[1:]:
        raise ShapeError(f"gather_channel: input {x.shape} does not match labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= x.shape[0]):
        raise ShapeError(f"gather_channel: labels outside [0, {x.shape[0]})")
    out = np.take_along_axis(x.data, labels[None], axis=0)[0]

    def backward_fn(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, labels[None], g[None], axis=0)
        return (full,)

    return _emit("gather_channel", out, (x,), backward_fn)


# Image ops ---------------------------------------------------------------------

def conv2d(input: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of a [C_in, H, W] input with a [C_out, C_in, kH, kW] kernel.

    Raises:
        ShapeError: If shapes are incompatible or the padded input is smaller
            than the dilated kernel
        ValueError: If stride or dilation is not positive, or padding is negative
    """
    if stride <= 0 or dilation <= 0:
        raise ValueError(f"conv2d: stride and dilation must be positive, got stride={stride}, dilation={dilation}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    x, w, b = input.data, kernel.data, bias.data
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} incompatible with kernel {w.shape}")

    c_out, _, kh, kw = w.shape
    height, width = x.shape[1:]
    span_h, span_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if height + 2 * padding < span_h or width + 2 * padding < span_w:
        raise ShapeError(f"conv2d: padded input {x.shape} smaller than dilated kernel {w.shape} (dilation {dilation})")
    out_h = (height + 2 * padding - span_h) // stride + 1
    out_w = (width + 2 * padding - span_w) // stride + 1

    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))

    def window(i: int, j: int) -> tuple[slice, slice, slice]:
        top, left = i * dilation, j * dilation
        return (slice(None),
                slice(top, top + stride * (out_h - 1) + 1, stride),
                slice(left, left + stride * (out_w - 1) + 1, stride))

    out = np.zeros((c_out, out_h, out_w)) + b[:, None, None]
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(w[:, :, i, j], padded[window(i, j)], axes=(1, 0))

    def backward_fn(g):
        grad_padded = np.zeros_like(padded)
        grad_w = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                sl = window(i, j)
                grad_w[:, :, i, j] = np.tensordot(g, padded[sl], axes=([1, 2], [1, 2]))
                grad_padded[sl] += np.tensordot(w[:, :, i, j], g, axes=(0, 0))
        grad_x = grad_padded[:, padding:padding + height, padding:padding + width]
        return (grad_x, grad_w, g.sum(axis=(1, 2)))

    return _emit("conv2d", out, (input, kernel, bias), backward_fn)


def maxpool2d(input: Tensor, window: int, stride: int, padding: int = 0) -> Tensor:
    """Per-window maximum of a [C, H, W] tensor; padding uses -inf.

    Raises:
        ShapeError: If the window is larger than the padded input
        ValueError: If window or stride is not positive
    """
    if window <= 0 or stride <= 0:
        raise ValueError(f"maxpool2d: window and stride must be positive, got window={window}, stride={stride}")
    if padding < 0 or padding >= window:
        raise ValueError(f"maxpool2d: padding must be in [0, window), got {padding}")
    x = input.data
    if x.ndim != 3:
        raise ShapeError(f"maxpool2d: expected a [C, H, W] input, got {x.shape}")
    channels, height, width = x.shape
    if height + 2 * padding < window or width + 2 * padding < window:
        raise ShapeError(f"maxpool2d: window {window} larger than input {height}x{width} (padding {padding})")

    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    views = np.lib.stride_tricks.sliding_window_view(padded, (window, window), axis=(1, 2))
    views = views[:, ::stride, ::stride]
    out_h, out_w = views.shape[1:3]
    flat = views.reshape(channels, out_h, out_w, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        rows = np.arange(out_h)[None, :, None] * stride + arg // window
        cols = np.arange(out_w)[None, None, :] * stride + arg % window
        chans = np.broadcast_to(np.arange(channels)[:, None, None], arg.shape)
        grad_padded = np.zeros(padded.shape)
        np.add.at(grad_padded, (chans, rows, cols), g)
        return (grad_padded[:, padding:padding + height, padding:padding + width],)

    return _emit("maxpool2d", out, (input,), backward_fn)


def resize_nearest(input: Tensor, target: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resampling of a [C, H, W] tensor to [C, H2, W2].

    Output row i reads input row floor(i * H / H2) (same for columns), so
    integer downsampling picks the top-left sample of every cell.
    """
    height2, width2 = target
    if height2 < 1 or width2 < 1:
        raise ShapeError(f"resize_nearest: target size must be positive, got {target}")
    x = input.data
    if x.ndim != 3:
        raise ShapeError(f"resize_nearest: expected a [C, H, W] input, got {x.shape}")
    rows = nearest_indices(x.shape[1], height2)
    cols = nearest_indices(x.shape[2], width2)
    out = x[:, rows[:, None], cols[None, :]]

    def backward_fn(g):
        full = np.zeros(x.shape)
        np.add.at(full, (slice(None), rows[:, None], cols[None, :]), g)
        return (full,)

    return _emit("resize_nearest", out, (input,), backward_fn)


def nearest_indices(size: int, target: int) -> np.ndarray:
    """Source indices used by nearest-neighbour resampling of one axis."""
    return (np.arange(target) * size) // target


# Metric ops ---------------------------------------------------------------------

def cosine_similarity_map(features: Tensor, prototype: Tensor) -> Tensor:
    """Cosine similarity between every [D] feature vector of a [D, H, W] map and a prototype.

    cos = <F, p> / (|F| |p| + 1e-8); a zero prototype gives 0 everywhere.
    """
    f, p = features.data, prototype.data
    if f.ndim != 3 or p.ndim != 1 or f.shape[0] != p.shape[0] or p.shape[0] < 1:
        raise ShapeError(f"cosine_similarity_map: features {f.shape} incompatible with prototype {p.shape}")
    dot = np.tensordot(p, f, axes=(0, 0))
    f_norm = np.sqrt((f * f).sum(axis=0))
    p_norm = float(np.sqrt(p @ p))
    denom = f_norm * p_norm + COSINE_EPS
    out = dot / denom

    def backward_fn(g):
        f_unit = np.divide(f, f_norm, out=np.zeros_like(f), where=f_norm > 0)
        p_unit = p / p_norm if p_norm > 0 else np.zeros_like(p)
        scale = g / denom
        correction = g * dot / denom ** 2
        grad_f = scale * p[:, None, None] - (correction * p_norm) * f_unit
        grad_p = np.tensordot(f, scale, axes=([1, 2], [0, 1])) - (correction * f_norm).sum() * p_unit
        return (grad_f, grad_p)

    return _emit("cosine_similarity_map", out, (features, prototype), backward_fn)


def squared_distance_map(features: Tensor, prototype: Tensor) -> Tensor:
    """|F(x, y) - p|^2 at every location of a [D, H, W] map."""
    f, p = features.data, prototype.data
    if f.ndim != 3 or p.ndim != 1 or f.shape[0] != p.shape[0]:
        raise ShapeError(f"squared_distance_map: features {f.shape} incompatible with prototype {p.shape}")
    diff = f - p[:, None, None]
    out = (diff * diff).sum(axis=0)

    def backward_fn(g):
        grad_f = 2.0 * diff * g
        return (grad_f, -grad_f.sum(axis=(1, 2)))

    return _emit("squared_distance_map", out, (features, prototype), backward_fn)


def softmax(input: Tensor, axis: int = 0) -> Tensor:
    """Max-subtracted exponential normalisation along one axis."""
    x = input.data
    shifted = np.exp(x - x.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (input,), backward_fn)


# Gradient verification ----------------------------------------------------------

@dataclass(frozen=True)
class GradcheckResult:
    max_relative_error: float
    checked: int
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_relative_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a| + |n|, floor), elementwise."""
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              tolerance: float = 1e-4, max_entries: int | None = None,
              seed: int = 0) -> GradcheckResult:
    """Compare taped gradients of ``fn(*inputs)`` against central differences.

    Args:
        fn: Function of the input tensors returning a scalar tensor
        inputs: Points to check at; only those with requires_grad are perturbed
        h: Finite-difference step
        tolerance: Relative error bound used by ``GradcheckResult.ok``
        max_entries: If set, check at most this many randomly chosen entries
            per input
        seed: Seed for choosing entries

    Returns:
        GradcheckResult with the largest relative error seen
    """
    with GradTape() as tape:
        loss = fn(*inputs)
    targets = [t for t in inputs if t.requires_grad]
    analytic = tape.backward(loss, targets)
    rng = np.random.default_rng(seed)

    worst, checked = 0.0, 0
    for position, tensor in enumerate(inputs):
        if not tensor.requires_grad:
            continue
        entries = np.arange(tensor.size)
        if max_entries is not None and tensor.size > max_entries:
            entries = np.sort(rng.choice(tensor.size, size=max_entries, replace=False))
        grad = analytic[tensor].data.reshape(-1)
        for flat_index in entries:
            values = []
            for step in (h, -h):
                moved = tensor.numpy().reshape(-1)
                moved[flat_index] += step
                args = list(inputs)
                args[position] = Tensor(moved.reshape(tensor.shape), requires_grad=True)
                values.append(fn(*args).item())
            numeric = (values[0] - values[1]) / (2 * h)
            worst = max(worst, float(relative_error(grad[flat_index], numeric)))
            checked += 1
    logger.debug(f"gradcheck: {checked} entries, max relative error {worst:.3e}")
    return GradcheckResult(worst, checked, tolerance)
