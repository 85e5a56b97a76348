"""Minimal reverse-mode automatic differentiation on 64-bit numpy storage.

Everything downstream (networks, forward models, losses) is built from the
primitives in this module.  A ``Tensor`` wraps a ``float64`` ndarray together
with a gradient buffer; each primitive records its inputs and a backward rule
on the output tensor, so the computation graph is rebuilt from scratch on
every forward pass.  ``backward`` walks that graph once in reverse
topological order and accumulates ``dLoss/dLeaf`` into every tensor that
requires a gradient.  Repeated backward calls keep accumulating until
``zero_grad`` resets the buffers.

Shapes are strict: elementwise primitives require identical operand shapes,
matmul is 2-D only, and convolution uses odd square kernels at stride 1 with
zero padding that preserves spatial size.  There is no implicit broadcasting;
anything shape-dependent is spelled out at the call site.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "permute",
    "reshape",
    "sum_axis",
    "conv2d",
    "sigmoid",
    "leaky_relu",
    "reduce_sum",
    "reduce_mean",
    "square",
    "sq_l2_norm",
    "backward",
    "custom_op",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy a primitive's contract."""


_SEQ = itertools.count()


class Tensor:
    """An ndarray with an optional gradient buffer and graph bookkeeping.

    Attributes:
        data: the float64 payload.  Mutated in place by optimizers only.
        requires_grad: True when this tensor participates in backward, either
            because the caller asked for a gradient or because an ancestor did.
        grad: accumulated gradient, allocated lazily on the first backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_SEQ)

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_only()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same data with no graph history."""
        return Tensor(self.data)

    # Small amount of operator sugar; everything delegates to the module
    # functions so there is exactly one implementation per primitive.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _scalar_only():
    raise ShapeError("item() is defined for single-element tensors only")


def custom_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Build a graph node for an operation defined outside this module.

    ``backward_fn`` receives the gradient w.r.t. the output and returns one
    gradient array (or None) per parent, in order.  The node is recorded only
    when some parent requires a gradient; otherwise the result is a plain
    constant and the graph stays pruned.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dTensor into every reachable requires-grad tensor.

    The graph recorded during the forward pass is swept exactly once: nodes
    are visited in reverse creation order, which is a valid topological order
    because an operation's inputs always exist before its output.  Gradients
    flow through a per-sweep table and are added into ``.grad`` once per
    tensor per sweep, so calling backward twice doubles leaf gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append(parent)
    order.sort(key=lambda n: n._seq, reverse=True)

    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in order:
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flows:
                flows[key] = flows[key] + pg
            else:
                flows[key] = pg


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and scalar primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return custom_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return custom_op(a.data * s, (a,), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return custom_op(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic function, elementwise."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x); the kink at zero takes the positive branch."""
    x = a.data
    mask = x >= 0
    out = np.where(mask, x, slope * x)
    return custom_op(out, (a,), lambda g: (np.where(mask, g, slope * g),))


# ---------------------------------------------------------------------------
# shape and linear-algebra primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul is 2-D only, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.data.shape} @ {b.data.shape} do not match")
    ad, bd = a.data, b.data
    return custom_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: axes {axes} is not a permutation for shape {a.data.shape}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    src = a.data.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    """Sum over one axis (the axis is removed)."""
    axis = int(axis)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"sum_axis: axis {axis} out of range for shape {a.data.shape}")
    axis = axis % a.data.ndim
    src = a.data.shape

    def bwd(g: np.ndarray):
        return (np.broadcast_to(np.expand_dims(g, axis), src),)

    return custom_op(a.data.sum(axis=axis), (a,), bwd)


def reduce_sum(a: Tensor) -> Tensor:
    src = a.data.shape
    return custom_op(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src),))


def reduce_mean(a: Tensor) -> Tensor:
    src = a.data.shape
    n = a.data.size
    return custom_op(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, src),))


def sq_l2_norm(a: Tensor) -> Tensor:
    """Sum of squared entries, as a scalar tensor."""
    ad = a.data
    return custom_op(np.asarray((ad * ad).sum()), (a,), lambda g: (2.0 * g * ad,))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Unfold (C, H, W) into a (C*k*k, H*W) patch matrix, zero padded."""
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    # (C, H, W, k, k) -> (C, k, k, H, W) -> (C*k*k, H*W), one contiguous copy
    return np.ascontiguousarray(windows.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, h * w)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """2-D cross-correlation at stride 1 with size-preserving zero padding.

    Args:
        x: input of shape (C_in, H, W).
        kernels: odd square kernels of shape (C_out, C_in, k, k).
        bias: per-output-channel offsets of shape (C_out,).

    Returns:
        Tensor of shape (C_out, H, W).
    """
    xd, kd, bd = x.data, kernels.data, bias.data
    if xd.ndim != 3 or kd.ndim != 4:
        raise ShapeError(f"conv2d: expected (C,H,W) and (O,C,k,k), got {xd.shape} and {kd.shape}")
    c_out, c_in, kh, kw = kd.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernels must be odd and square, got {kh}x{kw}")
    if c_in != xd.shape[0]:
        raise ShapeError(f"conv2d: input has {xd.shape[0]} channels, kernels expect {c_in}")
    if bd.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bd.shape} does not match {c_out} outputs")

    _, h, w = xd.shape
    k = kh
    pad = (k - 1) // 2
    cols = _im2col(xd, k, pad)
    k2 = kd.reshape(c_out, c_in * k * k)
    out = (k2 @ cols).reshape(c_out, h, w) + bd[:, None, None]

    def bwd(g: np.ndarray):
        g2 = g.reshape(c_out, h * w)
        d_bias = g.sum(axis=(1, 2))
        d_kern = (g2 @ cols.T).reshape(kd.shape)
        # gradient w.r.t. the input: correlate the output gradient with the
        # spatially flipped kernels, swapping the channel roles
        gcols = _im2col(g, k, pad)
        kflip = kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, c_out * k * k)
        d_x = (kflip @ gcols).reshape(c_in, h, w)
        return (d_x, d_kern, d_bias)

    return custom_op(out, (x, kernels, bias), bwd)
