"""Layers and parameter management on top of the autograd engine.

Parameters are created centrally: model builders walk a generator of
``(name, shape, init_tag)`` triples, allocate each array with
:func:`init_array`, and register it in a :class:`ParameterStore`. Layer
objects then bind the stored tensors by name, so a profiler can walk the
same generator and count parameters without allocating anything.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError
from .rng import RngState
from .tensor import Tensor

INIT_TAGS = ("tn02", "zeros", "ones", "fan_in", "embed")


def init_array(tag: str, shape: tuple[int, ...], rng: RngState) -> np.ndarray:
    """Materialize one parameter array for an init tag.

    tn02 is a truncated normal: draw N(0, 0.02) and clip to two standard
    deviations. fan_in scales a unit normal by 1/sqrt(prod(shape[1:])),
    which for conv weights [O,C,kh,kw] is 1/sqrt(C*kh*kw) and for linear
    weights [in,out] is handled by the tn02 path instead. embed is a unit
    normal for lookup tables whose rows act as codes: rows must be
    mutually distinguishable from the first step, so they start at the
    same scale as the activations they are added to.
    """
    if tag == "zeros":
        return np.zeros(shape)
    if tag == "ones":
        return np.ones(shape)
    if tag == "tn02":
        draw = rng.normal(shape, std=0.02)
        return np.clip(draw, -0.04, 0.04)
    if tag == "fan_in":
        fan = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        return rng.normal(shape, std=1.0 / np.sqrt(fan))
    if tag == "embed":
        return rng.normal(shape, std=1.0)
    raise ParameterError(f"unknown init tag {tag!r}")


class ParameterStore:
    """Ordered name -> Tensor registry for one model's trainable state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ParameterError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ParameterError(f"parameter {name!r} must require gradients")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ParameterError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place; names and shapes must match."""
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ParameterError(
                f"parameter set mismatch: missing={sorted(missing)[:4]} "
                f"extra={sorted(extra)[:4]}"
            )
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(
                    f"parameter {name!r}: stored shape {arr.shape} "
                    f"!= expected {t.shape}"
                )
            t.data = arr.copy()


def build_params(store: ParameterStore, shapes, rng: RngState, prefix: str = ""):
    """Allocate every (name, shape, tag) triple into the store."""
    for name, shape, tag in shapes:
        full = prefix + name
        arr = init_array(tag, tuple(shape), rng.child(full))
        store.add(full, Tensor(arr, requires_grad=True))


# -- layers --------------------------------------------------------------------


class Linear:
    def __init__(self, weight: Tensor, bias: Tensor | None = None):
        self.weight = weight
        self.bias = bias

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str) -> "Linear":
        bias = store[f"{prefix}.bias"] if f"{prefix}.bias" in store else None
        return cls(store[f"{prefix}.weight"], bias)

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm:
    """Normalize the last axis, then scale and shift."""

    def __init__(self, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
        self.gamma = gamma
        self.beta = beta
        self.eps = eps

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str) -> "LayerNorm":
        return cls(store[f"{prefix}.gamma"], store[f"{prefix}.beta"])

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / T.sqrt(var + self.eps) * self.gamma + self.beta


class GroupNorm:
    """Normalize channel groups of a [B,C,H,W] map, built from primitives."""

    def __init__(self, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5):
        channels = gamma.shape[0]
        if channels % groups != 0:
            raise ParameterError(
                f"group count {groups} must divide channel count {channels}"
            )
        self.gamma = gamma
        self.beta = beta
        self.groups = groups
        self.eps = eps

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str, groups: int) -> "GroupNorm":
        return cls(store[f"{prefix}.gamma"], store[f"{prefix}.beta"], groups)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"GroupNorm expects [B,C,H,W], got {x.shape}")
        b, c, h, w = x.shape
        g = self.groups
        xg = x.reshape(b, g, (c // g) * h * w)
        mu = xg.mean(axis=2, keepdims=True)
        centered = xg - mu
        var = (centered * centered).mean(axis=2, keepdims=True)
        xn = (centered / T.sqrt(var + self.eps)).reshape(b, c, h, w)
        return xn * self.gamma.reshape(1, c, 1, 1) + self.beta.reshape(1, c, 1, 1)


class SelfAttention:
    """Multi-head self-attention with a fused qkv projection."""

    def __init__(self, qkv: Linear, proj: Linear, heads: int):
        self.qkv = qkv
        self.proj = proj
        self.heads = heads

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str, heads: int) -> "SelfAttention":
        return cls(
            Linear.from_store(store, f"{prefix}.qkv"),
            Linear.from_store(store, f"{prefix}.proj"),
            heads,
        )

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.heads
        if d % h != 0:
            raise ShapeError(f"model dim {d} not divisible by {h} heads")
        hd = d // h
        qkv = self.qkv(x).reshape(b, n, 3, h, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # each [B,H,N,hd]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
        attn = T.softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(out)


class TransformerBlock:
    """Pre-norm block: attention then a 4x-wide GELU MLP, both residual."""

    def __init__(self, store: ParameterStore, prefix: str, heads: int):
        self.ln1 = LayerNorm.from_store(store, f"{prefix}.ln1")
        self.attn = SelfAttention.from_store(store, f"{prefix}.attn", heads)
        self.ln2 = LayerNorm.from_store(store, f"{prefix}.ln2")
        self.fc1 = Linear.from_store(store, f"{prefix}.mlp.fc1")
        self.fc2 = Linear.from_store(store, f"{prefix}.mlp.fc2")

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(T.gelu(self.fc1(self.ln2(x))))


def transformer_block_shapes(prefix: str, dim: int, mlp_ratio: int = 4):
    hidden = dim * mlp_ratio
    yield f"{prefix}.ln1.gamma", (dim,), "ones"
    yield f"{prefix}.ln1.beta", (dim,), "zeros"
    yield f"{prefix}.attn.qkv.weight", (dim, 3 * dim), "tn02"
    yield f"{prefix}.attn.qkv.bias", (3 * dim,), "zeros"
    yield f"{prefix}.attn.proj.weight", (dim, dim), "tn02"
    yield f"{prefix}.attn.proj.bias", (dim,), "zeros"
    yield f"{prefix}.ln2.gamma", (dim,), "ones"
    yield f"{prefix}.ln2.beta", (dim,), "zeros"
    yield f"{prefix}.mlp.fc1.weight", (dim, hidden), "tn02"
    yield f"{prefix}.mlp.fc1.bias", (hidden,), "zeros"
    yield f"{prefix}.mlp.fc2.weight", (hidden, dim), "tn02"
    yield f"{prefix}.mlp.fc2.bias", (dim,), "zeros"


# -- patch grid ----------------------------------------------------------------


def patchify(x, patch: int) -> Tensor:
    """Split [B,C,H,W] (or [C,H,W]) into rows of flattened patches.

    Output is [B,N,patch*patch*C] with patches in row-major grid order and
    (row, col, channel) layout inside each token.
    """
    t = x if isinstance(x, Tensor) else Tensor(x)
    single = t.ndim == 3
    if single:
        t = t.reshape(1, *t.shape)
    if t.ndim != 4:
        raise ShapeError(f"patchify expects [B,C,H,W], got {t.shape}")
    b, c, hh, ww = t.shape
    if hh % patch or ww % patch:
        raise ShapeError(f"image size {(hh, ww)} not divisible by patch {patch}")
    gh, gw = hh // patch, ww // patch
    tokens = (
        t.reshape(b, c, gh, patch, gw, patch)
        .transpose(0, 2, 4, 3, 5, 1)
        .reshape(b, gh * gw, patch * patch * c)
    )
    return tokens.reshape(gh * gw, patch * patch * c) if single else tokens


def unpatchify(tokens, patch: int, channels: int = 3) -> Tensor:
    """Invert :func:`patchify` for a square patch grid."""
    t = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    single = t.ndim == 2
    if single:
        t = t.reshape(1, *t.shape)
    b, n, d = t.shape
    grid = int(round(np.sqrt(n)))
    if grid * grid != n:
        raise ShapeError(f"token count {n} is not a square grid")
    if d != patch * patch * channels:
        raise ShapeError(
            f"token width {d} != patch*patch*channels = {patch * patch * channels}"
        )
    img = (
        t.reshape(b, grid, grid, patch, patch, channels)
        .transpose(0, 5, 1, 3, 2, 4)
        .reshape(b, channels, grid * patch, grid * patch)
    )
    return img.reshape(*img.shape[1:]) if single else img
