"""Dense float64 tensors with taped reverse-mode differentiation.

Storage is a row-major (C-order) numpy array with channels innermost for
image-like data (h, w, c).  Operations executed while a :class:`Graph` is
active are recorded on a tape in execution order; :func:`backward` walks the
tape in reverse exactly once and accumulates gradients additively, so
parameters shared across several forward branches receive the sum of all
contributions.

Only the broadcasting the network actually needs is supported: equal shapes,
scalars, and per-channel vectors over (h, w, c) maps.  Everything is float64;
reductions use numpy's fixed, shape-determined summation order, so repeated
forward passes on identical inputs are bit-identical.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

LOG_CLAMP = 1e-12

_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)

_tls = threading.local()


def _graph_stack() -> list["Graph"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.dims}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detached(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.dims}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


@dataclass
class Node:
    """One executed op: inputs, output, and how to push gradients back."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    recompute: Callable[[], np.ndarray]


class Graph:
    """Tape of executed ops, recorded in execution order.

    Use as a context manager around a forward pass; a graph is confined to
    one training step on one thread.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _graph_stack().pop()
        assert popped is self
        return False

    def replay_mismatches(self) -> int:
        """Re-execute every recorded op on its current inputs.

        Returns the number of nodes whose recomputed output is not
        bit-identical to the stored one.  Zero as long as no input data was
        mutated since recording.
        """
        bad = 0
        for node in self.nodes:
            fresh = node.recompute()
            if not np.array_equal(fresh, node.output.data):
                bad += 1
        return bad


def backward(graph: Graph, loss: Tensor) -> None:
    """Populate ``grad`` of every recorded tensor with d(loss)/d(tensor).

    Walks the tape in reverse execution order exactly once; gradients
    accumulate additively across fan-out.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward needs a scalar loss, got shape {loss.dims}"
        )
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        grads = node.grad_fn(out_grad)
        for tensor, grad in zip(node.inputs, grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            tensor.grad += grad


def _make(op: str, inputs: tuple[Tensor, ...], data: np.ndarray,
          grad_fn, recompute) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    graph = active_graph()
    if graph is not None and out.requires_grad:
        graph.nodes.append(Node(op, inputs, out, grad_fn, recompute))
    return out


# ---------------------------------------------------------------------------
# elementwise ops


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _channel_vector(a: Tensor, b: Tensor) -> bool:
    return a.data.ndim == 3 and b.data.ndim == 1 and a.dims[2] == b.data.size


def _binary_mode(a: Tensor, b: Tensor, op: str) -> str:
    if a.dims == b.dims:
        return "same"
    if _is_scalar(b):
        return "scalar_b"
    if _is_scalar(a):
        return "scalar_a"
    if _channel_vector(a, b):
        return "channel_b"
    if _channel_vector(b, a):
        return "channel_a"
    raise ShapeError(f"{op}: incompatible shapes {a.dims} and {b.dims}")


def add(a: Tensor, b: Tensor) -> Tensor:
    mode = _binary_mode(a, b, "add")
    ad, bd = a.data, b.data
    if mode in ("channel_b", "scalar_b", "same"):
        data = ad + bd
    else:
        data = bd + ad

    def grad_fn(og):
        ga = og if mode in ("same", "channel_b", "scalar_b") else _reduce_to(og, a.dims)
        gb = og if mode == "same" else _reduce_to(og, b.dims)
        return ga, gb

    return _make("add", (a, b), data, grad_fn, lambda: a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    mode = _binary_mode(a, b, "sub")
    data = a.data - b.data

    def grad_fn(og):
        ga = og if mode in ("same", "channel_b", "scalar_b") else _reduce_to(og, a.dims)
        gb = -og if mode == "same" else -_reduce_to(og, b.dims)
        return ga, gb

    return _make("sub", (a, b), data, grad_fn, lambda: a.data - b.data)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a full-shape gradient down to a scalar or per-channel operand."""
    if grad.shape == shape:
        return grad
    n = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if n == 1:
        return grad.sum().reshape(shape)
    # per-channel vector over (h, w, c)
    return grad.sum(axis=(0, 1)).reshape(shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    mode = _binary_mode(a, b, "mul")
    data = a.data * b.data

    def grad_fn(og):
        ga_full = og * b.data
        gb_full = og * a.data
        ga = ga_full if mode in ("same", "channel_b", "scalar_b") else _reduce_to(ga_full, a.dims)
        gb = gb_full if mode == "same" else _reduce_to(gb_full, b.dims)
        return ga, gb

    return _make("mul", (a, b), data, grad_fn, lambda: a.data * b.data)


def neg(x: Tensor) -> Tensor:
    return _make("neg", (x,), -x.data, lambda og: (-og,), lambda: -x.data)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def grad_fn(og):
        return (og * (x.data > 0.0),)

    return _make("relu", (x,), data, grad_fn, lambda: np.maximum(x.data, 0.0))


def _sigmoid_kernel(x: np.ndarray) -> np.ndarray:
    # stable two-branch form; clamp keeps the open-interval (0, 1) contract
    # even where float64 would round to an endpoint.
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    return np.clip(out, _SIG_LO, _SIG_HI)


def sigmoid(x: Tensor) -> Tensor:
    data = _sigmoid_kernel(x.data)

    def grad_fn(og):
        return (og * data * (1.0 - data),)

    return _make("sigmoid", (x,), data, grad_fn, lambda: _sigmoid_kernel(x.data))


def log(x: Tensor) -> Tensor:
    """Natural log with the argument clamped below at 1e-12."""
    clamped = np.maximum(x.data, LOG_CLAMP)
    data = np.log(clamped)

    def grad_fn(og):
        return (og / clamped,)

    return _make("log", (x,), data, grad_fn,
                 lambda: np.log(np.maximum(x.data, LOG_CLAMP)))


def sum_all(x: Tensor) -> Tensor:
    data = x.data.sum().reshape(())

    def grad_fn(og):
        return (np.full_like(x.data, float(og)),)

    return _make("sum", (x,), data, grad_fn, lambda: x.data.sum().reshape(()))


def scale_shift(x: Tensor, gamma: Tensor, shift: Tensor) -> Tensor:
    """Per-channel scale plus spatial shift: out[..., c] = gamma[c]*x[..., c] + shift.

    ``x`` is (h, w, c), ``gamma`` is (c,), ``shift`` is (h, w).
    """
    if x.data.ndim != 3:
        raise ShapeError(f"scale_shift: input must be (h,w,c), got {x.dims}")
    if gamma.data.ndim != 1 or gamma.data.size != x.dims[2]:
        raise ShapeError(
            f"scale_shift: gamma shape {gamma.dims} does not match channels of {x.dims}"
        )
    if shift.dims != x.dims[:2]:
        raise ShapeError(
            f"scale_shift: shift shape {shift.dims} does not match spatial {x.dims[:2]}"
        )
    data = x.data * gamma.data + shift.data[:, :, None]

    def grad_fn(og):
        gx = og * gamma.data
        ggamma = (og * x.data).sum(axis=(0, 1))
        gshift = og.sum(axis=2)
        return gx, ggamma, gshift

    return _make("scale_shift", (x, gamma, shift), data, grad_fn,
                 lambda: x.data * gamma.data + shift.data[:, :, None])


_ELEMENTWISE = {"add": add, "mul": mul, "scale_shift": scale_shift,
                "relu": relu, "sigmoid": sigmoid}


def elementwise(kind: str, *operands: Tensor) -> Tensor:
    """Dispatch by name; kinds: add, mul, scale_shift, relu, sigmoid."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: need 2-D operands, got {a.dims} and {b.dims}")
    if a.dims[1] != b.dims[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.dims} x {b.dims}")
    data = a.data @ b.data

    def grad_fn(og):
        return og @ b.data.T, a.data.T @ og

    return _make("matmul", (a, b), data, grad_fn, lambda: a.data @ b.data)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: need a 2-D tensor, got {x.dims}")
    data = np.ascontiguousarray(x.data.T)

    def grad_fn(og):
        return (np.ascontiguousarray(og.T),)

    return _make("transpose", (x,), data, grad_fn,
                 lambda: np.ascontiguousarray(x.data.T))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = x.data.reshape(shape).copy()

    def grad_fn(og):
        return (og.reshape(x.dims),)

    return _make("reshape", (x,), data, grad_fn,
                 lambda: x.data.reshape(shape).copy())


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.dims[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(og):
        return tuple(np.ascontiguousarray(g) for g in np.split(og, offsets, axis=axis))

    return _make("concat", tensors, data, grad_fn,
                 lambda: np.concatenate([t.data for t in tensors], axis=axis))


def l2_normalize_positions(x: Tensor, epsilon: float = 1e-12) -> Tensor:
    """Divide each spatial position's channel vector by sqrt(|v|^2 + epsilon)."""
    if epsilon <= 0:
        raise ContractError("l2_normalize_positions: epsilon must be > 0")
    if x.data.ndim != 3:
        raise ShapeError(f"l2_normalize_positions: need (h,w,c), got {x.dims}")

    def kernel(arr):
        n2 = (arr * arr).sum(axis=2, keepdims=True)
        return arr / np.sqrt(n2 + epsilon)

    n2 = (x.data * x.data).sum(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(n2 + epsilon)
    data = x.data * inv

    def grad_fn(og):
        dot = (og * x.data).sum(axis=2, keepdims=True)
        return (og * inv - x.data * (dot * inv ** 3),)

    return _make("l2norm", (x,), data, grad_fn, lambda: kernel(x.data))


# ---------------------------------------------------------------------------
# convolution and resampling


def _conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _conv2d_kernel(x: np.ndarray, k: np.ndarray, b: np.ndarray | None,
                   stride: int, padding: int) -> np.ndarray:
    kk, _, cin, cout = k.shape
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0))) if padding else x
    ho = (xp.shape[0] - kk) // stride + 1
    wo = (xp.shape[1] - kk) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kk, kk), axis=(0, 1))
    win = win[::stride, ::stride]  # (ho, wo, cin, kk, kk)
    pat = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, kk * kk * cin)
    out = pat @ k.reshape(kk * kk * cin, cout)
    if b is not None:
        out += b
    return np.ascontiguousarray(out.reshape(ho, wo, cout))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding over an (h, w, c_in) map.

    Kernel is (k, k, c_in, c_out) with k odd; optional bias is (c_out,).
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d: need input (h,w,c) and kernel (k,k,cin,cout), got "
            f"{x.dims} and {kernel.dims}"
        )
    kk = kernel.dims[0]
    if kernel.dims[1] != kk or kk % 2 != 1:
        raise ShapeError(f"conv2d: kernel must be square with odd extent, got {kernel.dims}")
    if kernel.dims[2] != x.dims[2]:
        raise ShapeError(
            f"conv2d: input channels {x.dims} do not match kernel {kernel.dims}"
        )
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: bad stride {stride} or padding {padding}")
    cout = kernel.dims[3]
    if bias is not None and bias.dims != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.dims} does not match {cout} channels")
    h, w, _ = x.dims
    ho = _conv_out_extent(h, kk, stride, padding)
    wo = _conv_out_extent(w, kk, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: output extent ({ho}, {wo}) < 1 for input {x.dims}, "
            f"kernel {kernel.dims}, stride {stride}, padding {padding}"
        )
    bd = bias.data if bias is not None else None
    data = _conv2d_kernel(x.data, kernel.data, bd, stride, padding)

    need_x = x.requires_grad
    need_k = kernel.requires_grad
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def grad_fn(og):
        xp = (np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
              if padding else x.data)
        gx_p = np.zeros_like(xp) if need_x else None
        gk = np.zeros_like(kernel.data) if need_k else None
        kd = kernel.data
        for ki in range(kk):
            for kj in range(kk):
                view = xp[ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :]
                if need_k:
                    gk[ki, kj] = np.tensordot(view, og, axes=([0, 1], [0, 1]))
                if need_x:
                    gx_p[ki:ki + stride * ho:stride,
                         kj:kj + stride * wo:stride, :] += og @ kd[ki, kj].T
        gx = None
        if need_x:
            gx = gx_p[padding:padding + h, padding:padding + w, :] if padding else gx_p
        if bias is None:
            return gx, gk
        return gx, gk, og.sum(axis=(0, 1))

    return _make("conv2d", inputs, data, grad_fn,
                 lambda: _conv2d_kernel(x.data, kernel.data, bd, stride, padding))


def _nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out, dtype=np.int64) * n_in) // n_out


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, float(n_in - 1))
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _resample_kernel(x: np.ndarray, th: int, tw: int, mode: str) -> np.ndarray:
    h, w, _ = x.shape
    if mode == "nearest":
        si = _nearest_indices(h, th)
        sj = _nearest_indices(w, tw)
        return np.ascontiguousarray(x[si][:, sj])
    i0, i1, fh = _bilinear_axis(h, th)
    j0, j1, fw = _bilinear_axis(w, tw)
    a = x[i0][:, j0]
    b = x[i0][:, j1]
    c = x[i1][:, j0]
    d = x[i1][:, j1]
    fh = fh[:, None, None]
    fw = fw[None, :, None]
    out = ((1.0 - fh) * (1.0 - fw) * a + (1.0 - fh) * fw * b
           + fh * (1.0 - fw) * c + fh * fw * d)
    return np.ascontiguousarray(out)


def resample(x: Tensor, target_h: int, target_w: int, mode: str = "bilinear") -> Tensor:
    """Resize an (h, w, c) map; bilinear uses the align-corners-false convention."""
    if x.data.ndim != 3:
        raise ShapeError(f"resample: need (h,w,c), got {x.dims}")
    if mode not in ("nearest", "bilinear"):
        raise ContractError(f"resample: unknown mode {mode!r}")
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"resample: bad target ({target_h}, {target_w})")
    h, w, _ = x.dims
    data = _resample_kernel(x.data, target_h, target_w, mode)

    if mode == "nearest":
        si = _nearest_indices(h, target_h)
        sj = _nearest_indices(w, target_w)

        def grad_fn(og):
            gx = np.zeros_like(x.data)
            ii = np.broadcast_to(si[:, None], (target_h, target_w))
            jj = np.broadcast_to(sj[None, :], (target_h, target_w))
            np.add.at(gx, (ii, jj), og)
            return (gx,)
    else:
        i0, i1, fh = _bilinear_axis(h, target_h)
        j0, j1, fw = _bilinear_axis(w, target_w)

        def grad_fn(og):
            gx = np.zeros_like(x.data)
            wh0, wh1 = (1.0 - fh)[:, None], fh[:, None]
            ww0, ww1 = (1.0 - fw)[None, :], fw[None, :]
            for ii, wi in ((i0, wh0), (i1, wh1)):
                for jj, wj in ((j0, ww0), (j1, ww1)):
                    iidx = np.broadcast_to(ii[:, None], (target_h, target_w))
                    jidx = np.broadcast_to(jj[None, :], (target_h, target_w))
                    np.add.at(gx, (iidx, jidx), (wi * wj)[:, :, None] * og)
            return (gx,)

    return _make("resample", (x,), data, grad_fn,
                 lambda: _resample_kernel(x.data, target_h, target_w, mode))
