"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation eagerly computes its numpy result and
records parents plus a backward closure on the output tensor, so the
graph is rebuilt on each forward pass.  ``Tensor.backward()`` traces the
graph from a scalar output and pushes gradients through each recorded
node exactly once, in reverse topological order.

All data is float64; gradients are exact analytic derivatives verified
against central finite differences (see :mod:`fewshot_biattn.gradcheck`).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """Backward was requested on an unusable output (non-scalar or no graph)."""


# Test hook: when -1.0, the sigmoid backward rule deliberately flips sign so
# the gradient-check suite can demonstrate that it catches a broken vjp.
_SIGMOID_BACKWARD_SIGN = 1.0


def set_injected_backward_bug(enabled: bool) -> None:
    global _SIGMOID_BACKWARD_SIGN
    _SIGMOID_BACKWARD_SIGN = -1.0 if enabled else 1.0


# When a list is installed here, relu records its activation mask and
# maxpool2d its argmax choices on every forward.  Finite-difference checks
# compare these signatures across perturbations: a changed signature means
# the step crossed a kink, where central differences do not estimate the
# derivative.
_PIECE_SIGNATURE_SINK: list[bytes] | None = None


class capture_piece_signature:
    """Context manager collecting the piecewise-linearity signature of all
    relu/maxpool forwards executed inside the block."""

    def __enter__(self) -> list[bytes]:
        global _PIECE_SIGNATURE_SINK
        self._prev = _PIECE_SIGNATURE_SINK
        _PIECE_SIGNATURE_SINK = []
        return _PIECE_SIGNATURE_SINK

    def __exit__(self, *exc) -> None:
        global _PIECE_SIGNATURE_SINK
        _PIECE_SIGNATURE_SINK = self._prev
        return None


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer.

    ``grad`` exists iff ``requires_grad`` and always matches ``data`` in
    shape.  Non-leaf tensors keep references to their parents, a backward
    closure, and a recompute closure used by :class:`Graph.replay`.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "_recompute")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple["Tensor", ...] = ()):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.op = op
        self.parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._recompute: Callable[[], np.ndarray] | None = None

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
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> "Graph":
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; python scalars become constant tensors
    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, op="const")


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True, op="param")


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None],
          recompute_fn: Callable[[], np.ndarray]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                 op=op, parents=tuple(parents))
    if out.requires_grad:
        out._backward = backward_fn
    out._recompute = recompute_fn
    return out


class Graph:
    """Topologically ordered record of the ops that produced an output.

    ``nodes`` lists every reachable tensor with parents before children;
    replaying the recorded forward with unchanged leaf data reproduces
    each node's value bit-for-bit.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def replay(self) -> bool:
        """Re-run every recorded forward; True iff all outputs match bit-for-bit."""
        for node in self.nodes:
            if node._recompute is None:
                continue
            fresh = node._recompute()
            if fresh.tobytes() != node.data.tobytes():
                return False
        return True


def backward(output: Tensor) -> Graph:
    """Reverse-mode sweep from a scalar output.

    Accumulates d(output)/d(leaf) into ``grad`` of every tensor on the
    path that requires gradients; repeated uses of a tensor sum.  Returns
    the traced graph (mostly for tests and diagnostics).
    """
    if output.size != 1:
        raise GraphError(f"backward requires a scalar output, got shape {output.shape}")
    if not output.parents:
        raise GraphError("backward on a leaf: no operations were recorded")
    if not output.requires_grad:
        raise GraphError("output does not depend on any tensor with requires_grad")
    graph = Graph.trace(output)
    output.grad[...] = 1.0
    for node in reversed(graph.nodes):
        if node._backward is not None:
            node._backward(node.grad)
    return graph


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")

    def fwd():
        return a.data + b.data

    def bwd(g: np.ndarray):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _node(fwd(), "add", (a, b), bwd, fwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")

    def fwd():
        return a.data - b.data

    def bwd(g: np.ndarray):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.shape)

    return _node(fwd(), "sub", (a, b), bwd, fwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")

    def fwd():
        return a.data * b.data

    def bwd(g: np.ndarray):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.shape)

    return _node(fwd(), "mul", (a, b), bwd, fwd)


def neg(a: Tensor) -> Tensor:
    def fwd():
        return -a.data

    def bwd(g: np.ndarray):
        if a.requires_grad:
            a.grad -= g

    return _node(fwd(), "neg", (a,), bwd, fwd)


def relu(a: Tensor) -> Tensor:
    def fwd():
        if _PIECE_SIGNATURE_SINK is not None:
            _PIECE_SIGNATURE_SINK.append((a.data > 0.0).tobytes())
        return np.maximum(a.data, 0.0)

    def bwd(g: np.ndarray):
        if a.requires_grad:
            a.grad += g * (a.data > 0.0)

    return _node(fwd(), "relu", (a,), bwd, fwd)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)

    def fwd():
        return _stable_sigmoid(a.data)

    def bwd(g: np.ndarray):
        if a.requires_grad:
            a.grad += _SIGMOID_BACKWARD_SIGN * g * y * (1.0 - y)

    return _node(y, "sigmoid", (a,), bwd, fwd)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def fwd():
        return np.exp(a.data)

    def bwd(g: np.ndarray):
        if a.requires_grad:
            a.grad += g * y

    return _node(y, "exp", (a,), bwd, fwd)


def log(a: Tensor) -> Tensor:
    """Natural log; inputs must be strictly positive."""

    def fwd():
        return np.log(a.data)

    def bwd(g: np.ndarray):
        if a.requires_grad:
            a.grad += g / a.data

    return _node(fwd(), "log", (a,), bwd, fwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product.

    Both operands must have rank >= 2 with matching inner dimensions.
    Leading batch dimensions must be equal, or one operand may be a plain
    matrix shared across the other's batches.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} @ {b.shape}") from None

    def fwd():
        return np.matmul(a.data, b.data)

    def bwd(g: np.ndarray):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.grad += _unbroadcast(ga, a.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.grad += _unbroadcast(gb, b.shape)

    return _node(fwd(), "matmul", (a, b), bwd, fwd)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Softmax along ``axis``, computed with max subtraction for stability."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    ax = axis % a.ndim

    def fwd():
        shifted = a.data - a.data.max(axis=ax, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=ax, keepdims=True)

    y = fwd()

    def bwd(g: np.ndarray):
        if a.requires_grad:
            a.grad += y * (g - (g * y).sum(axis=ax, keepdims=True))

    return _node(y, "softmax", (a,), bwd, fwd)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a: Tensor, axis: int | tuple[int, ...] | None = None,
               keepdims: bool = False) -> Tensor:
    def fwd():
        return np.sum(a.data, axis=axis, keepdims=keepdims)

    def bwd(g: np.ndarray):
        if not a.requires_grad:
            return
        if axis is None:
            a.grad += g  # g is scalar, broadcasts
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        a.grad += np.broadcast_to(gg, a.shape)

    return _node(fwd(), "sum", (a,), bwd, fwd)


def sorted_axis_sum(a: Tensor, axis: int) -> Tensor:
    """Sum along ``axis``, accumulating each output element in ascending
    value order.

    The result equals an ordinary sum up to rounding, but is bit-identical
    under any permutation of the slices along ``axis`` (the gradient, a
    broadcast of ones, is order-free anyway).
    """
    ax = axis % a.ndim

    def fwd():
        return np.sort(a.data, axis=ax).sum(axis=ax)

    def bwd(g: np.ndarray):
        if a.requires_grad:
            a.grad += np.broadcast_to(np.expand_dims(g, ax), a.shape)

    return _node(fwd(), "sorted_sum", (a,), bwd, fwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} ({a.size} elements) as {shape}")

    def fwd():
        return a.data.reshape(shape)

    def bwd(g: np.ndarray):
        if a.requires_grad:
            a.grad += g.reshape(a.shape)

    return _node(fwd(), "reshape", (a,), bwd, fwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {a.ndim}")
    inv = np.argsort(axes)

    def fwd():
        return np.ascontiguousarray(np.transpose(a.data, axes))

    def bwd(g: np.ndarray):
        if a.requires_grad:
            a.grad += np.transpose(g, inv)

    return _node(fwd(), "transpose", (a,), bwd, fwd)


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    ax = axis % ts[0].ndim
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base) or other[:ax] + other[ax + 1:] != base[:ax] + base[ax + 1:]:
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ts[0].shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def fwd():
        return np.concatenate([t.data for t in ts], axis=ax)

    def bwd(g: np.ndarray):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                t.grad += g[tuple(idx)]

    return _node(fwd(), "concat", tuple(ts), bwd, fwd)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """3x3 cross-correlation with stride 1 and padding 1 (spatial size kept).

    ``x`` is (batch, c_in, h, w) and ``kernel`` is (c_out, c_in, 3, 3); no
    kernel flip is applied.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernel spatial size must be 3x3, got {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d: channel mismatch, input has {x.shape[1]} channels "
            f"but kernel expects {kernel.shape[1]}")
    b, ci, h, w = x.shape
    co = kernel.shape[0]

    def im2col(data: np.ndarray) -> np.ndarray:
        padded = np.pad(data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
        # (b, ci, h, w, 3, 3) -> (b*h*w, ci*9)
        return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, ci * 9)

    patches = im2col(x.data)

    def fwd():
        cols = im2col(x.data)
        out = cols @ kernel.data.reshape(co, ci * 9).T
        return out.reshape(b, h, w, co).transpose(0, 3, 1, 2)

    out_data = (patches @ kernel.data.reshape(co, ci * 9).T) \
        .reshape(b, h, w, co).transpose(0, 3, 1, 2)

    def bwd(g: np.ndarray):
        g_cols = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * h * w, co)
        if kernel.requires_grad:
            kernel.grad += (g_cols.T @ patches).reshape(co, ci, 3, 3)
        if x.requires_grad:
            gp = (g_cols @ kernel.data.reshape(co, ci * 9)).reshape(b, h, w, ci, 3, 3)
            gx = np.zeros((b, ci, h + 2, w + 2))
            for di in range(3):
                for dj in range(3):
                    gx[:, :, di:di + h, dj:dj + w] += gp[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            x.grad += gx[:, :, 1:h + 1, 1:w + 1]

    return _node(out_data, "conv2d", (x, kernel), bwd, fwd)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; spatial dims must be even.

    Backward routes the gradient to the first maximal cell of each window
    in row-major order, making tie-breaking deterministic.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial size must be even, got {h}x{w}")

    def pool(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # strided views of the four window cells in row-major order
        v00 = data[:, :, 0::2, 0::2]
        v01 = data[:, :, 0::2, 1::2]
        v10 = data[:, :, 1::2, 0::2]
        v11 = data[:, :, 1::2, 1::2]
        out = np.maximum(np.maximum(v00, v01), np.maximum(v10, v11))
        idx = np.where(v00 == out, 0,
                       np.where(v01 == out, 1,
                                np.where(v10 == out, 2, 3))).astype(np.int8)
        return out, idx

    out, argmax = pool(x.data)
    if _PIECE_SIGNATURE_SINK is not None:
        _PIECE_SIGNATURE_SINK.append(argmax.tobytes())

    def fwd():
        out_now, idx_now = pool(x.data)
        if _PIECE_SIGNATURE_SINK is not None:
            _PIECE_SIGNATURE_SINK.append(idx_now.tobytes())
        return out_now

    def bwd(g: np.ndarray):
        if not x.requires_grad:
            return
        gx = np.zeros((b, c, h, w))
        gx[:, :, 0::2, 0::2] = g * (argmax == 0)
        gx[:, :, 0::2, 1::2] = g * (argmax == 1)
        gx[:, :, 1::2, 0::2] = g * (argmax == 2)
        gx[:, :, 1::2, 1::2] = g * (argmax == 3)
        x.grad += gx

    return _node(out, "maxpool2d", (x,), bwd, fwd)
