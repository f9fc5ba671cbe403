"""
Dense float64 tensors with reverse-mode differentiation.

Just enough arithmetic to train the toy segmentation network and to compute
every loss exactly: element-wise ops, reductions, softmax, a floored log,
NHWC convolution, linear layers, bilinear upsampling, cross-entropy and KL.
Also contains the seeded random streams and the finite-difference checker.
"""
import hashlib
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils import ArgumentError, TrainingError

DTYPE = np.float64
LOG_FLOOR = 1e-12

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


class RngState:
    """
    Seeded source of independent, named random streams.

    Every stream is a Philox (counter-based) generator keyed by a hash of the
    seed and the stream name, so results do not depend on the order in which
    streams are created.
    """

    algorithm = "philox4x64-10"

    def __init__(self, seed: int):
        seed = int(seed)
        if seed < 0 or seed >= 2 ** 64:
            raise ArgumentError(f"Seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed

    def _digest(self, name: str) -> bytes:
        return hashlib.sha256(f"{self.seed}/{name}".encode("utf-8")).digest()

    def stream(self, name: str) -> np.random.Generator:
        """Return a fresh generator for the named stream."""
        key = int.from_bytes(self._digest(name)[:16], "little")
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, name: str) -> "RngState":
        """Derive an independent RngState, e.g. one per round or stage."""
        return RngState(int.from_bytes(self._digest(name)[:8], "little"))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, algorithm={self.algorithm!r})"


_GRAD_ENABLED = True
_RELU_TRACES: List[List[bytes]] = []


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


@contextmanager
def trace_relu_patterns():
    """Collect the on/off pattern of every relu evaluated inside the block."""
    trace: List[bytes] = []
    _RELU_TRACES.append(trace)
    try:
        yield trace
    finally:
        _RELU_TRACES.remove(trace)


class Tensor:
    """
    A float64 array that records how it was computed.

    Attributes:
        data: The values, row-major numpy array
        requires_grad: Whether gradients flow into this tensor
        grad: Accumulated gradient for leaf tensors, same shape as data
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor holding a private copy of ``data``."""
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise TrainingError("Operation produced non-finite values")
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_axis(axis: int, ndim: int) -> int:
    if not isinstance(axis, (int, np.integer)) or not -ndim <= axis < ndim:
        raise ArgumentError(f"Axis {axis} is invalid for a tensor with {ndim} dimensions")
    return int(axis) % ndim


# ---------------------------------------------------------------------------
# Element-wise ops and reductions
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ArgumentError(f"Cannot add shapes {a.shape} and {b.shape}") from e

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ArgumentError(f"Cannot multiply shapes {a.shape} and {b.shape}") from e

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError as e:
        raise ArgumentError(f"Cannot divide shapes {a.shape} and {b.shape}") from e

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(out, (a, b), backward)


def neg(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _result(-x.data, (x,), lambda g: (-g,))


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log_floor(x: ArrayLike, floor: float = LOG_FLOOR) -> Tensor:
    """log(max(x, floor)); the gradient is zero where the floor is active."""
    x = as_tensor(x)
    active = x.data > floor
    out = np.log(np.where(active, x.data, floor))

    def backward(g):
        return (np.where(active, g / np.where(active, x.data, 1.0), 0.0),)

    return _result(out, (x,), backward)


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    for trace in _RELU_TRACES:
        trace.append(np.packbits(on).tobytes())
    return _result(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def tensor_sum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(_check_axis(a, x.ndim) for a in axes)
    else:
        axes = None
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=DTYPE), (x,), backward)


def tensor_mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[_check_axis(a, x.ndim)] for a in axes]))
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ArgumentError(f"Cannot reshape {x.shape} to {shape}") from e
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def softmax(logits: ArrayLike, axis: int = -1) -> Tensor:
    """
    Numerically stable softmax along ``axis``.

    Args:
        logits: Input tensor
        axis: Dimension to normalize over

    Returns:
        Tensor of the same shape whose slices along ``axis`` sum to 1
    """
    logits = as_tensor(logits)
    axis = _check_axis(axis, logits.ndim)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (logits,), backward)


def argmax_labels(logits: ArrayLike) -> np.ndarray:
    """Per-pixel argmax over the last axis; ties go to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)


def argmax_onehot(logits: ArrayLike) -> Tensor:
    """One-hot encoding of the per-pixel argmax (lowest index wins ties)."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=DTYPE)
    k = data.shape[-1]
    return Tensor(np.eye(k, dtype=DTYPE)[np.argmax(data, axis=-1)])


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """x (..., D_in) @ weight (D_in, D_out) + bias (D_out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ArgumentError(f"linear: input {x.shape} does not match weight {weight.shape}")
    parents = [x, weight]
    out = x.data @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ArgumentError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        x2 = x.data.reshape(-1, weight.shape[0])
        grads = [g @ weight.data.T, x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _result(out, tuple(parents), backward)


def conv2d(
    x: ArrayLike,
    weight: ArrayLike,
    bias: Optional[ArrayLike] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """
    2-D convolution on NHWC input (cross-correlation, zero padding).

    Args:
        x: Input of shape (B, H, W, C_in)
        weight: Kernel of shape (kh, kw, C_in, C_out)
        bias: Optional bias of shape (C_out,)
        stride: Step between output positions
        padding: Zero rows/columns added on every side

    Returns:
        Output of shape (B, H_out, W_out, C_out)
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ArgumentError(f"conv2d: input {x.shape} does not match kernel {weight.shape}")
    if stride < 1 or padding < 0:
        raise ArgumentError(f"conv2d: invalid stride {stride} / padding {padding}")
    b, h, w, c = x.shape
    kh, kw, _, c_out = weight.shape
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ArgumentError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    x_pad = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    # (B, H_out, W_out, C, kh, kw) view of every receptive field
    cols = np.lib.stride_tricks.sliding_window_view(x_pad, (kh, kw), axis=(1, 2))
    cols = cols[:, : (h_out - 1) * stride + 1 : stride, : (w_out - 1) * stride + 1 : stride]
    out = np.tensordot(cols, weight.data, axes=([3, 4, 5], [2, 0, 1]))
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ArgumentError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grad_w = np.tensordot(cols, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        dcols = np.tensordot(g, weight.data, axes=([3], [3]))  # (B, H_out, W_out, kh, kw, C)
        dx_pad = np.zeros_like(x_pad)
        for i in range(kh):
            for j in range(kw):
                dx_pad[:, i : i + (h_out - 1) * stride + 1 : stride,
                       j : j + (w_out - 1) * stride + 1 : stride, :] += dcols[:, :, :, i, j, :]
        grads = [dx_pad[:, padding : padding + h, padding : padding + w, :], grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _result(out, tuple(parents), backward)


def interpolation_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Bilinear (align-corners off) resampling weights, shape (out_size, in_size)."""
    scale = in_size / out_size
    src = np.maximum((np.arange(out_size) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    matrix = np.zeros((out_size, in_size), dtype=DTYPE)
    rows = np.arange(out_size)
    np.add.at(matrix, (rows, i0), 1.0 - frac)
    np.add.at(matrix, (rows, i1), frac)
    return matrix


def bilinear_upsample(x: ArrayLike, out_h: int, out_w: int) -> Tensor:
    """Resize NHWC input to (out_h, out_w) with bilinear interpolation."""
    x = as_tensor(x)
    if x.ndim != 4 or out_h < 1 or out_w < 1:
        raise ArgumentError(f"bilinear_upsample: bad input {x.shape} or size {out_h}x{out_w}")
    a_h = interpolation_matrix(out_h, x.shape[1])
    a_w = interpolation_matrix(out_w, x.shape[2])
    out = np.einsum("Hh,bhwc,Ww->bHWc", a_h, x.data, a_w, optimize=True)

    def backward(g):
        return (np.einsum("Hh,bHWc,Ww->bhwc", a_h, g, a_w, optimize=True),)

    return _result(out, (x,), backward)


def nearest_resize(x: np.ndarray, out_h: int, out_w: int, axes: Tuple[int, int] = (0, 1)) -> np.ndarray:
    """Nearest-neighbour resize of a plain array along two spatial axes."""
    x = np.asarray(x)
    rows = np.floor(np.arange(out_h) * x.shape[axes[0]] / out_h).astype(np.int64)
    cols = np.floor(np.arange(out_w) * x.shape[axes[1]] / out_w).astype(np.int64)
    return np.take(np.take(x, rows, axis=axes[0]), cols, axis=axes[1])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _reduce(total: float, pixels: int, reduction: str) -> Tuple[float, float]:
    if reduction == "sum":
        return total, 1.0
    if reduction == "mean":
        scale = 1.0 / max(pixels, 1)
        return total * scale, scale
    raise ArgumentError(f"Unknown reduction '{reduction}' (use 'sum' or 'mean')")


def weighted_cross_entropy(
    probs: ArrayLike,
    onehot: ArrayLike,
    weights: Optional[ArrayLike] = None,
    reduction: str = "sum",
) -> Tensor:
    """
    -sum_i sum_j weights(i) * onehot(i, j) * log(max(probs(i, j), LOG_FLOOR)).

    Rows of ``onehot`` may be soft (rows summing to 1) or all-zero for ignored
    pixels. ``weights`` defaults to ones; ``reduction='mean'`` divides by the
    pixel count.
    """
    probs = as_tensor(probs)
    target = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot, dtype=DTYPE)
    if target.shape != probs.shape:
        raise ArgumentError(f"cross entropy: probs {probs.shape} vs labels {target.shape}")
    if weights is None:
        w = np.ones(probs.shape[:-1], dtype=DTYPE)
    else:
        w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=DTYPE)
    if w.shape != probs.shape[:-1]:
        raise ArgumentError(f"cross entropy: weights {w.shape} vs pixels {probs.shape[:-1]}")

    active = probs.data > LOG_FLOOR
    safe = np.where(active, probs.data, LOG_FLOOR)
    coeff = w[..., None] * target
    total = -float(np.sum(coeff * np.log(safe)))
    pixels = int(np.prod(probs.shape[:-1]))
    value, scale = _reduce(total, pixels, reduction)

    def backward(g):
        return (np.where(active, -g * scale * coeff / safe, 0.0),)

    return _result(np.asarray(value, dtype=DTYPE), (probs,), backward)


def kl_divergence(student_probs: ArrayLike, teacher_probs: ArrayLike, reduction: str = "sum") -> Tensor:
    """sum_i sum_j t(i,j) * (log t(i,j) - log s(i,j)), both logs floored."""
    s, t = as_tensor(student_probs), as_tensor(teacher_probs)
    if s.shape != t.shape:
        raise ArgumentError(f"kl divergence: student {s.shape} vs teacher {t.shape}")
    s_active = s.data > LOG_FLOOR
    t_active = t.data > LOG_FLOOR
    log_s = np.log(np.where(s_active, s.data, LOG_FLOOR))
    log_t = np.log(np.where(t_active, t.data, LOG_FLOOR))
    total = float(np.sum(t.data * (log_t - log_s)))
    pixels = int(np.prod(s.shape[:-1]))
    value, scale = _reduce(total, pixels, reduction)

    def backward(g):
        gs = np.where(s_active, -g * scale * t.data / np.where(s_active, s.data, 1.0), 0.0)
        gt = g * scale * (np.where(t_active, log_t + 1.0, log_t) - log_s)
        return gs, gt

    return _result(np.asarray(value, dtype=DTYPE), (s, t), backward)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> None:
    """
    Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Args:
        loss: Scalar tensor
        inputs: Optional leaves that must end up with a gradient; those the
            loss does not depend on receive zeros
    """
    if not isinstance(loss, Tensor) or loss.shape != ():
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ArgumentError(f"backward expects a scalar tensor, got {shape}")

    if loss.requires_grad:
        grads: Dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    for leaf in inputs or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare backward() against central finite differences.

    Coordinates whose +eps/-eps evaluations switch any relu on or off are
    skipped, since the function is not differentiable across that kink.

    Args:
        fn: Function of ``inputs`` returning a scalar tensor
        inputs: Leaf tensors with requires_grad set
        eps: Finite-difference step
        max_coords: Check at most this many coordinates per input
        rng: Generator used to pick coordinates when ``max_coords`` is set

    Returns:
        Largest relative error ||analytic - numeric|| / (||analytic|| + ||numeric||)
        over the inputs
    """
    for t in inputs:
        t.grad = None
    backward(fn(*inputs), inputs)
    analytic = [t.grad.copy() for t in inputs]

    worst = 0.0
    for t, grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_vals, n_vals = [], []
        for idx in coords:
            original = flat[idx]
            with no_grad():
                flat[idx] = original + eps
                with trace_relu_patterns() as plus_pattern:
                    f_plus = fn(*inputs).item()
                flat[idx] = original - eps
                with trace_relu_patterns() as minus_pattern:
                    f_minus = fn(*inputs).item()
                flat[idx] = original
            if plus_pattern != minus_pattern:
                continue
            a_vals.append(grad.reshape(-1)[idx])
            n_vals.append((f_plus - f_minus) / (2.0 * eps))
        a_arr, n_arr = np.asarray(a_vals), np.asarray(n_vals)
        denom = np.linalg.norm(a_arr) + np.linalg.norm(n_arr)
        if denom > 0:
            worst = max(worst, float(np.linalg.norm(a_arr - n_arr) / denom))
    return worst


def _projected(out: Tensor, weights: np.ndarray) -> Tensor:
    return tensor_sum(mul(out, weights))


def gradient_suite(trials: int = 20, seed: int = 0, eps: float = 1e-5) -> Dict[str, float]:
    """
    Finite-difference check of every differentiable op on random small shapes.

    Returns:
        Mapping op name -> worst relative error over ``trials`` instances
    """
    rng = RngState(seed).stream("gradient-suite")

    def away_from_zero(shape):
        return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)

    def distribution(shape):
        return softmax(rng.normal(size=shape), axis=-1).data

    cases: Dict[str, Callable[[], Tuple[Callable[..., Tensor], List[Tensor]]]] = {}

    def case(name):
        def register(builder):
            cases[name] = builder
            return builder
        return register

    @case("add_broadcast")
    def _():
        a = tensor(rng.normal(size=(3, 4)), True)
        b = tensor(rng.normal(size=(4,)), True)
        r = rng.normal(size=(3, 4))
        return (lambda a, b: _projected(add(a, b), r)), [a, b]

    @case("mul_div")
    def _():
        a = tensor(rng.normal(size=(2, 3)), True)
        b = tensor(rng.uniform(0.5, 2.0, size=(2, 3)), True)
        r = rng.normal(size=(2, 3))
        return (lambda a, b: _projected(div(mul(a, b), b + 1.0), r)), [a, b]

    @case("sum_mean")
    def _():
        a = tensor(rng.normal(size=(2, 3, 4)), True)
        r = rng.normal(size=(2, 4))
        return (lambda a: _projected(tensor_sum(a, axis=1), r) + tensor_mean(a)), [a]

    @case("exp")
    def _():
        a = tensor(rng.normal(size=(5,)), True)
        r = rng.normal(size=(5,))
        return (lambda a: _projected(exp(a), r)), [a]

    @case("log_floor")
    def _():
        a = tensor(rng.uniform(0.1, 2.0, size=(5,)), True)
        r = rng.normal(size=(5,))
        return (lambda a: _projected(log_floor(a), r)), [a]

    @case("relu")
    def _():
        a = tensor(away_from_zero((4, 3)), True)
        r = rng.normal(size=(4, 3))
        return (lambda a: _projected(relu(a), r)), [a]

    @case("softmax")
    def _():
        a = tensor(rng.normal(size=(3, 4)), True)
        r = rng.normal(size=(3, 4))
        axis = int(rng.integers(0, 2))
        return (lambda a: _projected(softmax(a, axis=axis), r)), [a]

    @case("linear")
    def _():
        x = tensor(rng.normal(size=(2, 3, 4)), True)
        w = tensor(rng.normal(size=(4, 5)), True)
        b = tensor(rng.normal(size=(5,)), True)
        r = rng.normal(size=(2, 3, 5))
        return (lambda x, w, b: _projected(linear(x, w, b), r)), [x, w, b]

    @case("conv2d")
    def _():
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        x = tensor(rng.normal(size=(2, 5, 6, 2)), True)
        w = tensor(rng.normal(size=(3, 3, 2, 3)), True)
        b = tensor(rng.normal(size=(3,)), True)
        out_shape = conv2d(x, w, b, stride=stride, padding=padding).shape
        r = rng.normal(size=out_shape)
        return (lambda x, w, b: _projected(conv2d(x, w, b, stride=stride, padding=padding), r)), [x, w, b]

    @case("bilinear_upsample")
    def _():
        x = tensor(rng.normal(size=(1, 3, 2, 2)), True)
        r = rng.normal(size=(1, 12, 8, 2))
        return (lambda x: _projected(bilinear_upsample(x, 12, 8), r)), [x]

    @case("weighted_cross_entropy")
    def _():
        logits = tensor(rng.normal(size=(3, 2, 4)), True)
        labels = np.eye(4)[rng.integers(0, 4, size=(3, 2))]
        weights = rng.uniform(0.0, 1.0, size=(3, 2))
        return (lambda z: weighted_cross_entropy(softmax(z), labels, weights)), [logits]

    @case("kl_divergence")
    def _():
        s = tensor(distribution((3, 4)), True)
        t = tensor(distribution((3, 4)), True)
        return (lambda s, t: kl_divergence(s, t)), [s, t]

    results: Dict[str, float] = {}
    for name, builder in cases.items():
        worst = 0.0
        for _ in range(trials):
            fn, inputs = builder()
            worst = max(worst, gradcheck(fn, inputs, eps=eps))
        results[name] = worst
    return results
