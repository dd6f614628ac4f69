"""Model definitions: a ViT classifier and a class-conditioned denoiser.

Both models are described twice from one source of truth: a shape generator
yields every parameter as (name, shape, init tag), the builder allocates from
it, and :func:`model_profile` walks the same generator plus the forward-pass
structure to report parameter and compute footprints without allocating.
Reported flops count multiply-accumulates in matmuls, convolutions, and
attention score/value products at 2 flops per MAC; normalizations and
activations are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ParameterError, ShapeError
from .nn import (
    GroupNorm,
    LayerNorm,
    Linear,
    ParameterStore,
    TransformerBlock,
    build_params,
    patchify,
    transformer_block_shapes,
)
from .rng import RngState
from .tensor import Tensor


# -- ViT classifier -------------------------------------------------------------


@dataclass(frozen=True)
class ViTConfig:
    image_size: int
    patch_size: int
    dim: int
    depth: int
    heads: int
    num_classes: int
    channels: int = 3
    mlp_ratio: int = 4
    class_token: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ParameterError(
                f"image size {self.image_size} not divisible by "
                f"patch size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ParameterError(
                f"dim {self.dim} not divisible by heads {self.heads}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + (1 if self.class_token else 0)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def vit_trunk_shapes(cfg: ViTConfig):
    """Every parameter of the ViT except the classification head."""
    yield "patch_embed.weight", (cfg.patch_dim, cfg.dim), "tn02"
    yield "patch_embed.bias", (cfg.dim,), "zeros"
    if cfg.class_token:
        yield "cls_token", (1, 1, cfg.dim), "tn02"
    yield "pos_embed", (1, cfg.num_tokens, cfg.dim), "tn02"
    for i in range(cfg.depth):
        yield from transformer_block_shapes(f"blocks.{i}", cfg.dim, cfg.mlp_ratio)
    yield "norm.gamma", (cfg.dim,), "ones"
    yield "norm.beta", (cfg.dim,), "zeros"


def vit_param_shapes(cfg: ViTConfig):
    yield from vit_trunk_shapes(cfg)
    yield "head.weight", (cfg.dim, cfg.num_classes), "zeros"
    yield "head.bias", (cfg.num_classes,), "zeros"


class ViT:
    """Patch transformer classifier.

    Logits come from the class token, or from mean-pooled tokens when the
    config has no class token.
    """

    def __init__(self, cfg: ViTConfig, store: ParameterStore):
        self.cfg = cfg
        self.store = store
        self.patch_embed = Linear.from_store(store, "patch_embed")
        self.cls_token = store["cls_token"] if cfg.class_token else None
        self.pos_embed = store["pos_embed"]
        self.blocks = [
            TransformerBlock(store, f"blocks.{i}", cfg.heads)
            for i in range(cfg.depth)
        ]
        self.norm = LayerNorm.from_store(store, "norm")
        self.head = Linear.from_store(store, "head")

    def features(self, images) -> Tensor:
        """Normalized pooled features, shape [B, dim]."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        expected = (self.cfg.channels, self.cfg.image_size, self.cfg.image_size)
        if x.shape[1:] != expected:
            raise ShapeError(f"expected images [B,{expected}], got {x.shape}")
        b = x.shape[0]
        tokens = self.patch_embed(patchify(x, self.cfg.patch_size))
        if self.cls_token is not None:
            cls = self.cls_token.broadcast_to((b, 1, self.cfg.dim))
            tokens = T.concat([cls, tokens], axis=1)
        x = tokens + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x[:, 0, :] if self.cls_token is not None else x.mean(axis=1)

    def __call__(self, images) -> Tensor:
        return self.head(self.features(images))


def build_vit(cfg: ViTConfig, rng: RngState) -> ViT:
    store = ParameterStore()
    build_params(store, vit_param_shapes(cfg), rng)
    return ViT(cfg, store)


# -- conditioned denoiser --------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int
    num_classes: int  # 0 builds an unconditional model
    base_channels: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 2)
    channels: int = 3
    groups: int = 8
    time_embed_dim: int = 0  # 0 selects 4 * base_channels
    class_embed_dim: int = 0  # 0 matches time_embed_dim

    def __post_init__(self):
        depth = len(self.channel_mults)
        if self.image_size % (2 ** (depth - 1)) != 0:
            raise ParameterError(
                f"image size {self.image_size} not divisible by "
                f"2**{depth - 1} for {depth} resolution levels"
            )
        widths = [self.base_channels] + [
            self.base_channels * m for m in self.channel_mults
        ]
        for w in widths:
            if w % min(self.groups, w) != 0:
                raise ParameterError(
                    f"group count {self.groups} must divide every level "
                    f"width, got {w}"
                )
        if self.class_dim != self.time_dim:
            raise ParameterError(
                f"class embedding width {self.class_dim} must equal the "
                f"time embedding width {self.time_dim}; the two are added"
            )
        if self.num_classes < 0:
            raise ParameterError(
                f"num_classes must be >= 0, got {self.num_classes}"
            )
        if self.base_channels % 2 != 0:
            raise ParameterError(
                "base_channels must be even (sinusoidal embedding width), "
                f"got {self.base_channels}"
            )

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)

    @property
    def time_dim(self) -> int:
        return self.time_embed_dim or 4 * self.base_channels

    @property
    def class_dim(self) -> int:
        return self.class_embed_dim or self.time_dim


def _resblock_shapes(prefix: str, c_in: int, c_out: int, time_dim: int):
    yield f"{prefix}.gn1.gamma", (c_in,), "ones"
    yield f"{prefix}.gn1.beta", (c_in,), "zeros"
    yield f"{prefix}.conv1.weight", (c_out, c_in, 3, 3), "fan_in"
    yield f"{prefix}.conv1.bias", (c_out,), "zeros"
    yield f"{prefix}.temb.weight", (time_dim, c_out), "tn02"
    yield f"{prefix}.temb.bias", (c_out,), "zeros"
    yield f"{prefix}.gn2.gamma", (c_out,), "ones"
    yield f"{prefix}.gn2.beta", (c_out,), "zeros"
    yield f"{prefix}.conv2.weight", (c_out, c_out, 3, 3), "fan_in"
    yield f"{prefix}.conv2.bias", (c_out,), "zeros"
    if c_in != c_out:
        yield f"{prefix}.skip.weight", (c_out, c_in, 1, 1), "fan_in"


def denoiser_param_shapes(cfg: DenoiserConfig):
    td = cfg.time_dim
    yield "time.fc1.weight", (cfg.base_channels, td), "tn02"
    yield "time.fc1.bias", (td,), "zeros"
    yield "time.fc2.weight", (td, td), "tn02"
    yield "time.fc2.bias", (td,), "zeros"
    # One reserved row embeds the unconditional (null) class. Unit-normal
    # init: at tn02 scale the class rows start nearly identical and small
    # runs can settle into ignoring the condition entirely.
    yield "class_embed", (cfg.num_classes + 1, td), "embed"
    chans = cfg.level_channels
    yield "conv_in.weight", (cfg.base_channels, cfg.channels, 3, 3), "fan_in"
    yield "conv_in.bias", (cfg.base_channels,), "zeros"
    prev = cfg.base_channels
    for i, c in enumerate(chans):
        yield from _resblock_shapes(f"down.{i}", prev, c, td)
        if i < len(chans) - 1:
            yield f"downsample.{i}.weight", (c, c, 3, 3), "fan_in"
            yield f"downsample.{i}.bias", (c,), "zeros"
        prev = c
    yield from _resblock_shapes("mid", chans[-1], chans[-1], td)
    for i in reversed(range(len(chans))):
        yield from _resblock_shapes(f"up.{i}", 2 * chans[i], chans[i], td)
        if i > 0:
            yield f"upsample.{i}.weight", (chans[i - 1], chans[i], 3, 3), "fan_in"
            yield f"upsample.{i}.bias", (chans[i - 1],), "zeros"
    yield "out_norm.gamma", (chans[0],), "ones"
    yield "out_norm.beta", (chans[0],), "zeros"
    # zero init keeps the initial noise prediction at zero
    yield "conv_out.weight", (cfg.channels, chans[0], 3, 3), "zeros"
    yield "conv_out.bias", (cfg.channels,), "zeros"


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Transformer-style timestep features: [sin(t*f_i), cos(t*f_i)].

    Frequencies fall geometrically from 1 to 1/10000 over dim/2 bands.
    """
    if dim % 2 != 0:
        raise ParameterError(f"sinusoidal embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class _ResBlock:
    def __init__(self, store: ParameterStore, prefix: str, c_in: int, c_out: int, groups: int):
        self.gn1 = GroupNorm.from_store(store, f"{prefix}.gn1", min(groups, c_in))
        self.conv1 = (store[f"{prefix}.conv1.weight"], store[f"{prefix}.conv1.bias"])
        self.temb = Linear.from_store(store, f"{prefix}.temb")
        self.gn2 = GroupNorm.from_store(store, f"{prefix}.gn2", min(groups, c_out))
        self.conv2 = (store[f"{prefix}.conv2.weight"], store[f"{prefix}.conv2.bias"])
        self.skip = store[f"{prefix}.skip.weight"] if f"{prefix}.skip.weight" in store else None
        self.c_out = c_out

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        h = T.conv2d(T.gelu(self.gn1(x)), *self.conv1, padding=1)
        h = h + self.temb(cond).reshape(cond.shape[0], self.c_out, 1, 1)
        h = T.conv2d(T.gelu(self.gn2(h)), *self.conv2, padding=1)
        if self.skip is not None:
            x = T.conv2d(x, self.skip)
        return x + h


class Denoiser:
    """Small class-conditioned U-Net predicting the noise in an image."""

    def __init__(self, cfg: DenoiserConfig, store: ParameterStore):
        self.cfg = cfg
        self.store = store
        self.time_fc1 = Linear.from_store(store, "time.fc1")
        self.time_fc2 = Linear.from_store(store, "time.fc2")
        self.class_embed = store["class_embed"]
        self.conv_in = (store["conv_in.weight"], store["conv_in.bias"])
        chans = cfg.level_channels
        g = cfg.groups
        prev = cfg.base_channels
        self.down, self.downsample = [], []
        for i, c in enumerate(chans):
            self.down.append(_ResBlock(store, f"down.{i}", prev, c, g))
            if i < len(chans) - 1:
                self.downsample.append(
                    (store[f"downsample.{i}.weight"], store[f"downsample.{i}.bias"])
                )
            prev = c
        self.mid = _ResBlock(store, "mid", chans[-1], chans[-1], g)
        self.up, self.upsample = {}, {}
        for i in reversed(range(len(chans))):
            self.up[i] = _ResBlock(store, f"up.{i}", 2 * chans[i], chans[i], g)
            if i > 0:
                self.upsample[i] = (
                    store[f"upsample.{i}.weight"],
                    store[f"upsample.{i}.bias"],
                )
        self.out_norm = GroupNorm.from_store(store, "out_norm", min(g, chans[0]))
        self.conv_out = (store["conv_out.weight"], store["conv_out.bias"])

    @property
    def null_class(self) -> int:
        return self.cfg.num_classes

    def condition(self, t: np.ndarray, labels: np.ndarray | None) -> Tensor:
        """Combine timestep features with the class embedding row.

        labels None means unconditional: every element uses the reserved
        null-class row.
        """
        t = np.asarray(t).reshape(-1)
        if labels is None:
            labels = np.full(t.shape[0], self.null_class, dtype=np.int64)
        else:
            labels = np.asarray(labels, dtype=np.int64)
            if self.cfg.num_classes == 0 and not (labels == self.null_class).all():
                raise ConfigError(
                    "class ids passed to an unconditional denoiser "
                    "(num_classes = 0)"
                )
        if labels.min() < 0 or labels.max() > self.cfg.num_classes:
            raise ParameterError(
                f"labels must lie in [0, {self.cfg.num_classes}] "
                f"(the top index is the null class), got "
                f"[{labels.min()}, {labels.max()}]"
            )
        sin = Tensor(sinusoidal_embedding(t, self.cfg.base_channels))
        temb = self.time_fc2(T.gelu(self.time_fc1(sin)))
        return temb + T.gather_rows(self.class_embed, labels)

    def __call__(self, x, t, labels=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        expected = (self.cfg.channels, self.cfg.image_size, self.cfg.image_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"expected images [B,{expected}], got {x.shape}")
        cond = self.condition(t, labels)
        h = T.conv2d(x, *self.conv_in, padding=1)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, cond)
            skips.append(h)
            if i < len(self.downsample):
                h = T.conv2d(h, *self.downsample[i], stride=2, padding=1)
        h = self.mid(h, cond)
        for i in reversed(range(len(self.down))):
            if i < len(self.down) - 1:
                h = T.upsample_nearest2(h)
                h = T.conv2d(h, *self.upsample[i + 1], padding=1)
            h = self.up[i](T.concat([h, skips[i]], axis=1), cond)
        return T.conv2d(T.gelu(self.out_norm(h)), *self.conv_out, padding=1)


def build_denoiser(cfg: DenoiserConfig, rng: RngState) -> Denoiser:
    store = ParameterStore()
    build_params(store, denoiser_param_shapes(cfg), rng)
    return Denoiser(cfg, store)


# -- profiling -------------------------------------------------------------------


VIT_PRESETS: dict[str, dict] = {
    "vit_b16": dict(patch_size=16, dim=768, depth=12, heads=12),
    "vit_l16": dict(patch_size=16, dim=1024, depth=24, heads=16),
    "vit_h16": dict(patch_size=16, dim=1280, depth=32, heads=16),
}


def vit_preset(name: str, image_size: int = 256, num_classes: int = 1000) -> ViTConfig:
    if name not in VIT_PRESETS:
        raise ParameterError(
            f"unknown preset {name!r}; choose from {sorted(VIT_PRESETS)}"
        )
    return ViTConfig(image_size=image_size, num_classes=num_classes, **VIT_PRESETS[name])


def _vit_flops(cfg: ViTConfig) -> int:
    n = cfg.num_tokens
    d = cfg.dim
    hidden = d * cfg.mlp_ratio
    macs = cfg.num_patches * cfg.patch_dim * d  # patch embedding
    per_block = (
        n * d * 3 * d  # qkv projection
        + n * n * d  # attention scores
        + n * n * d  # attention-weighted values
        + n * d * d  # output projection
        + 2 * n * d * hidden  # mlp
    )
    macs += cfg.depth * per_block
    macs += d * cfg.num_classes  # head on the class token
    return 2 * macs


def _conv_macs(c_in: int, c_out: int, k: int, out_hw: int) -> int:
    return c_in * c_out * k * k * out_hw * out_hw


def _denoiser_flops(cfg: DenoiserConfig) -> int:
    chans = cfg.level_channels
    sizes = [cfg.image_size // (2**i) for i in range(len(chans))]
    td = cfg.time_dim

    def res_macs(c_in, c_out, hw):
        macs = _conv_macs(c_in, c_out, 3, hw) + _conv_macs(c_out, c_out, 3, hw)
        macs += td * c_out  # conditioning projection
        if c_in != c_out:
            macs += _conv_macs(c_in, c_out, 1, hw)
        return macs

    macs = cfg.base_channels * td + td * td  # time mlp
    macs += _conv_macs(cfg.channels, cfg.base_channels, 3, sizes[0])
    prev = cfg.base_channels
    for i, c in enumerate(chans):
        macs += res_macs(prev, c, sizes[i])
        if i < len(chans) - 1:
            macs += _conv_macs(c, c, 3, sizes[i + 1])
        prev = c
    macs += res_macs(chans[-1], chans[-1], sizes[-1])
    for i in reversed(range(len(chans))):
        if i < len(chans) - 1:
            macs += _conv_macs(chans[i + 1], chans[i], 3, sizes[i])
        macs += res_macs(2 * chans[i], chans[i], sizes[i])
    macs += _conv_macs(chans[0], cfg.channels, 3, sizes[0])
    return 2 * macs


def model_profile(config, image_size: int | None = None) -> dict:
    """Parameter and compute footprint without allocating the model.

    Accepts a ViTConfig, a DenoiserConfig, or a preset name like
    "vit_b16"; image_size overrides the config's resolution. Returns
    param_count, flops for one forward pass at batch size 1, and
    bytes_fp32 (4-byte elements).
    """
    if isinstance(config, str):
        config = vit_preset(config)
    if image_size is not None:
        config = replace(config, image_size=image_size)
    if isinstance(config, ViTConfig):
        shapes = vit_param_shapes(config)
        flops = _vit_flops(config)
        kind = "vit"
    elif isinstance(config, DenoiserConfig):
        shapes = denoiser_param_shapes(config)
        flops = _denoiser_flops(config)
        kind = "denoiser"
    else:
        raise ParameterError(f"cannot profile {type(config).__name__}")
    count = sum(int(np.prod(shape)) for _, shape, _ in shapes)
    return {
        "kind": kind,
        "param_count": count,
        "flops": flops,
        "bytes_fp32": 4 * count,
    }
