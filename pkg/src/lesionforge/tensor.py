"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array plus an optional backpropagation record
(operation tag and parent references). Calling :meth:`Tensor.backward` on a
scalar walks the graph once in reverse topological order and accumulates
gradients into the graph's leaves; intermediate gradients live only for the
duration of the call, so repeated backward calls add one full gradient per
call, and a tensor feeding several consumers receives the sum over paths.

Binary operations broadcast with trailing-dimension alignment (numpy rules);
anything that numpy cannot broadcast raises :class:`~.errors.ShapeError`.
GELU is fixed to the tanh approximation so gradient-check tolerances are
stable.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, EvaluationError, ParameterError, ShapeError

Array = np.ndarray

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph construction inside the block (values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value) -> Array:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data: Array = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], tuple[Array | None, ...]] | None = None

    # -- basic introspection ------------------------------------------------
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
        return self.data.item()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    # -- autograd core ------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every tracked leaf's ``grad``."""
        if self.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, Array] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return _unary(self, -self.data, lambda g, x, y: -g, "neg")

    def __pow__(self, exponent) -> "Tensor":
        n = float(exponent)
        return _unary(
            self,
            self.data**n,
            lambda g, x, y: g * n * x ** (n - 1.0),
            "pow",
        )

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        data = self.data[key]

        def backward(g: Array):
            full = np.zeros_like(self.data)
            full[key] = g
            return (full,)

        return _node(data, (self,), backward, "getitem")

    # -- elementwise / reductions, method forms ------------------------------
    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def gelu(self) -> "Tensor":
        return gelu(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def softmax(self, temperature: float = 1.0, axis: int = -1) -> "Tensor":
        return softmax(self, temperature=temperature, axis=axis)

    def broadcast_to(self, shape) -> "Tensor":
        return broadcast_to(self, shape)


TensorLike = Tensor | Array | float | int


def _node(
    data: Array,
    parents: tuple[Tensor, ...],
    backward: Callable[[Array], tuple[Array | None, ...]],
    op: str,
) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, op=op)
    if track:
        out._parents = parents
        out._backward = backward
    return out


def _ensure_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient back down to ``shape`` after trailing-dim broadcast."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} are not "
            "broadcast-compatible (trailing-dimension alignment)"
        ) from None


def _binary(a: TensorLike, b: TensorLike, fwd, bwd, op: str) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    _check_broadcast(a, b, op)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        data = fwd(a.data, b.data)

    def backward(g: Array):
        ga, gb = bwd(g, a.data, b.data)
        return (
            _unbroadcast(ga, a.shape) if ga is not None else None,
            _unbroadcast(gb, b.shape) if gb is not None else None,
        )

    return _node(data, (a, b), backward, op)


def _unary(a: Tensor, data: Array, bwd, op: str) -> Tensor:
    def backward(g: Array):
        return (bwd(g, a.data, data),)

    return _node(data, (a,), backward, op)


# -- public ops ---------------------------------------------------------------


def add(a: TensorLike, b: TensorLike) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: (g, g), "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: (g, -g), "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: (g * y, g * x), "mul")


def div(a: TensorLike, b: TensorLike) -> Tensor:
    return _binary(
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: (g / y, -g * x / (y * y)),
        "div",
    )


def exp(a: TensorLike) -> Tensor:
    a = _ensure_tensor(a)
    return _unary(a, np.exp(a.data), lambda g, x, y: g * y, "exp")


def log(a: TensorLike) -> Tensor:
    a = _ensure_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _unary(a, data, lambda g, x, y: g / x, "log")


def sqrt(a: TensorLike) -> Tensor:
    a = _ensure_tensor(a)
    data = np.sqrt(a.data)
    return _unary(a, data, lambda g, x, y: g * 0.5 / y, "sqrt")


def tanh(a: TensorLike) -> Tensor:
    a = _ensure_tensor(a)
    data = np.tanh(a.data)
    return _unary(a, data, lambda g, x, y: g * (1.0 - y * y), "tanh")


def gelu(a: TensorLike) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = _ensure_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g: Array):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(data, (a,), backward, "gelu")


def sum_(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array):
        return (_spread(g, a.shape, axis, keepdims),)

    return _node(_as_array(data), (a,), backward, "sum")


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(data.size, 1) if a.data.size else 1.0

    def backward(g: Array):
        return (_spread(g, a.shape, axis, keepdims) / count,)

    return _node(_as_array(data), (a,), backward, "mean")


def _spread(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    g = np.asarray(g)
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = _ensure_tensor(a)
    data = a.data.reshape(tuple(shape))

    def backward(g: Array):
        return (g.reshape(a.shape),)

    return _node(data, (a,), backward, "reshape")


def transpose(a: TensorLike, axes: Sequence[int]) -> Tensor:
    a = _ensure_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward(g: Array):
        return (g.transpose(inverse),)

    return _node(data, (a,), backward, "transpose")


def broadcast_to(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = _ensure_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(
            f"broadcast_to: cannot broadcast {a.shape} to {shape}"
        ) from None

    def backward(g: Array):
        return (_unbroadcast(g, a.shape),)

    return _node(data, (a,), backward, "broadcast_to")


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(
            f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast"
        ) from None

    def backward(g: Array):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _node(data, (a, b), backward, "matmul")


def softmax(a: TensorLike, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature-softened softmax along ``axis``, max-shifted for stability."""
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    a = _ensure_tensor(a)
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y / temperature,)

    return _node(y, (a,), backward, "softmax")


def elementwise(op_tag: str, a: TensorLike, b: TensorLike | None = None) -> Tensor:
    """Dispatch an elementwise op by tag; binary tags require ``b``."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"exp": exp, "log": log, "gelu": gelu}
    if op_tag in binary:
        if b is None:
            raise ContractError(f"elementwise {op_tag!r} needs two operands")
        return binary[op_tag](a, b)
    if op_tag in unary:
        return unary[op_tag](a)
    if op_tag == "scale-by-constant":
        if b is None:
            raise ContractError("scale-by-constant needs a scalar factor")
        return mul(a, float(b if not isinstance(b, Tensor) else b.item()))
    raise ParameterError(f"unknown elementwise op tag {op_tag!r}")


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [_ensure_tensor(t) for t in tensors]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _node(data, tuple(parts), backward, "concat")


def gather_rows(table: TensorLike, indices) -> Tensor:
    """Select ``table[indices]`` along axis 0 (embedding lookup)."""
    table = _ensure_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    data = table.data[idx]

    def backward(g: Array):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _node(data, (table,), backward, "gather_rows")


def take_tokens(x: TensorLike, indices: Array) -> Tensor:
    """Gather per-batch token rows: x[B,N,D], indices[B,V] -> [B,V,D]."""
    x = _ensure_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(
            f"take_tokens: expected x[B,N,D] with indices[B,V], "
            f"got {x.shape} and {idx.shape}"
        )
    data = np.take_along_axis(x.data, idx[:, :, None], axis=1)
    batch = np.arange(x.shape[0])[:, None]

    def backward(g: Array):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (batch, idx), g)
        return (gx,)

    return _node(data, (x,), backward, "take_tokens")


def place_tokens(
    visible: TensorLike, fill: TensorLike, indices: Array, total: int
) -> Tensor:
    """Scatter visible tokens into ``total`` slots, filling the rest.

    visible[B,V,D] goes to positions indices[B,V]; every other slot gets the
    learned ``fill`` vector of shape [D]. Indices must be unique per row.
    """
    visible, fill = _ensure_tensor(visible), _ensure_tensor(fill)
    idx = np.asarray(indices, dtype=np.int64)
    b, v, d = visible.shape
    data = np.broadcast_to(fill.data, (b, total, d)).copy()
    batch = np.arange(b)[:, None]
    data[batch, idx] = visible.data

    def backward(g: Array):
        gv = g[batch, idx]
        gf = g.sum(axis=(0, 1)) - gv.sum(axis=(0, 1))
        return (gv, _unbroadcast(gf, fill.shape))

    return _node(data, (visible, fill), backward, "place_tokens")


def upsample_nearest2(x: TensorLike) -> Tensor:
    """Nearest-neighbour 2x upsampling of x[B,C,H,W]."""
    x = _ensure_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2 expects [B,C,H,W], got {x.shape}")
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    b, c, h, w = x.shape

    def backward(g: Array):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _node(data, (x,), backward, "upsample")


def conv2d(
    x: TensorLike,
    weight: TensorLike,
    bias: TensorLike | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D convolution of x[B,C,H,W] with weight[O,C,kh,kw] via im2col."""
    x, weight = _ensure_tensor(x), _ensure_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv2d expects x[B,C,H,W] and weight[O,C,kh,kw], "
            f"got {x.shape} and {weight.shape}"
        )
    b, c, h, w = x.shape
    o, c2, kh, kw = weight.shape
    if c != c2:
        raise ShapeError(f"conv2d: channel mismatch {x.shape} vs {weight.shape}")
    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if padding
        else x.data
    )
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [B,C,ho,wo,kh,kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = cols @ wmat.T  # [B, ho*wo, O]
    if bias is not None:
        bias = _ensure_tensor(bias)
        out = out + bias.data
    out = out.transpose(0, 2, 1).reshape(b, o, ho, wo)

    parents: tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: Array):
        gmat = g.reshape(b, o, ho * wo).transpose(0, 2, 1)  # [B, ho*wo, O]
        gw = np.tensordot(gmat, cols, axes=([0, 1], [0, 1])).reshape(o, c, kh, kw)
        gcols = (gmat @ wmat).reshape(b, ho, wo, c, kh, kw)
        gxp = np.zeros((b, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding : hp - padding, padding : wp - padding] if padding else gxp
        if bias is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    return _node(out, parents, backward, "conv2d")


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    parts = [_ensure_tensor(t) for t in tensors]
    data = np.stack([p.data for p in parts], axis=0)

    def backward(g: Array):
        return tuple(g[i] for i in range(len(parts)))

    return _node(data, tuple(parts), backward, "stack")


# -- gradient checking --------------------------------------------------------


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map ``x`` (possibly via closure state) to a scalar Tensor. The
    error per coordinate is |analytic - numeric| / max(1, |analytic|); the
    max over the checked coordinates is returned. ``coords`` restricts the
    check to a subset of flat indices (default: all).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ParameterError(f"gradcheck eps must lie in [1e-7, 1e-3], got {eps}")
    if not x.requires_grad:
        raise ContractError("gradcheck target must have requires_grad=True")
    out = f(x)
    if out.size != 1:
        raise ContractError(f"gradcheck function must return a scalar, got {out.shape}")
    if not np.isfinite(out.data).all():
        raise EvaluationError("gradcheck: function value is not finite")
    x.zero_grad()
    out.backward()
    analytic = (
        x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    ).reshape(-1)

    flat = x.data.reshape(-1)
    index_list = range(flat.size) if coords is None else list(coords)
    worst = 0.0
    with no_grad():
        for i in index_list:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).data.item()
            flat[i] = orig - eps
            lo = f(x).data.item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise EvaluationError(
                    f"gradcheck: non-finite value at perturbed coordinate {i}"
                )
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst
