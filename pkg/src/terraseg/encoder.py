"""Five-channel patch tokenizer and the shifted-window transformer backbone.

Token grids are carried in NHWC layout between blocks; the pyramid handed
to the decoder converts each stage output to NCHW. Window attention inside
a block clamps the window to the grid when the grid is smaller, pads the
grid to a window multiple when needed, and disables the cyclic shift when
a single window tiles the grid (where shifting is a no-op).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .config import NUM_STAGES, ModelConfig
from .errors import ConfigurationError, ShapeError
from .nn import Conv2d, LayerNorm, Linear, Module, ModuleList, Parameter, trunc_normal
from .tensor import Tensor

MASK_PENALTY = -100.0


def window_partition(x: Tensor, window: int) -> Tensor:
    """(N, H, W, C) -> (N*nH*nW, window, window, C), row-major window order."""
    n, h, w, c = x.shape
    if h % window or w % window:
        raise ConfigurationError(f"grid {h}x{w} not divisible by window {window}")
    nh, nw = h // window, w // window
    x = T.reshape(x, (n, nh, window, nw, window, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n * nh * nw, window, window, c))


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Exact inverse of window_partition."""
    if h % window or w % window:
        raise ConfigurationError(f"grid {h}x{w} not divisible by window {window}")
    nh, nw = h // window, w // window
    total, wh, ww, c = windows.shape
    if wh != window or ww != window or total % (nh * nw):
        raise ShapeError(f"window count {windows.shape} inconsistent with grid {h}x{w}, window {window}")
    n = total // (nh * nw)
    x = T.reshape(windows, (n, nh, nw, window, window, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n, h, w, c))


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal roll of the token grid over the two spatial axes."""
    return T.roll(x, (dy, dx), (1, 2))


_mask_cache: dict = {}


def attention_mask(h: int, w: int, window: int, shift: int, dtype=np.float32) -> np.ndarray:
    """Additive mask (nW, n, n) that hides cross-region pairs in shifted windows.

    The grid is partitioned into the standard nine regions induced by the
    shift; pairs from different regions receive a large negative penalty so
    softmax routes essentially all probability within regions, while every
    row keeps at least itself and therefore still sums to one.
    """
    key = (h, w, window, shift, np.dtype(dtype).name)
    cached = _mask_cache.get(key)
    if cached is not None:
        return cached
    region = np.zeros((h, w), dtype=np.int32)
    bands = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    count = 0
    for hs in bands:
        for ws in bands:
            region[hs, ws] = count
            count += 1
    nh, nw = h // window, w // window
    wins = region.reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(nh * nw, window * window)
    diff = wins[:, None, :] - wins[:, :, None]
    mask = np.where(diff != 0, MASK_PENALTY, 0.0).astype(dtype)
    _mask_cache[key] = mask
    return mask


_rel_index_cache: dict = {}


def relative_position_index(window: int, table_window: int) -> np.ndarray:
    """(n, n) lookup into a bias table built for ``table_window`` >= window."""
    key = (window, table_window)
    cached = _rel_index_cache.get(key)
    if cached is not None:
        return cached
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"), axis=-1).reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :]
    idx = (rel[..., 0] + table_window - 1) * (2 * table_window - 1) + (rel[..., 1] + table_window - 1)
    _rel_index_cache[key] = idx
    return idx


class WindowAttention(Module):
    """Multi-head self-attention within windows, with relative-position bias.

    The bias table is sized for the configured window; smaller effective
    windows index a centered sub-range of the same table.
    """

    def __init__(self, dim: int, num_heads: int, window: int, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        if dim % num_heads:
            raise ConfigurationError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.window = window
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        table_size = (2 * window - 1) ** 2
        self.rel_bias = Parameter(trunc_normal(rng, (table_size, num_heads), dtype=dtype))

    def __call__(self, windows: Tensor, window: Optional[int] = None, mask: Optional[np.ndarray] = None) -> Tensor:
        window = window or self.window
        b, n, c = windows.shape
        if n != window * window:
            raise ShapeError(f"expected {window * window} tokens per window, got {n}")
        if window > self.window:
            raise ConfigurationError(f"effective window {window} exceeds bias table window {self.window}")
        heads = self.num_heads
        head_dim = c // heads

        qkv = self.qkv(windows)
        qkv = T.reshape(qkv, (b, n, 3, heads, head_dim))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]

        attn = T.matmul(T.mul(q, self.scale), T.transpose(k, (0, 1, 3, 2)))

        idx = relative_position_index(window, self.window)
        bias = T.take(self.rel_bias, idx.reshape(-1))
        bias = T.transpose(T.reshape(bias, (n, n, heads)), (2, 0, 1))
        attn = T.add(attn, bias)

        if mask is not None:
            n_windows = mask.shape[0]
            groups = b // n_windows
            attn = T.reshape(attn, (groups, n_windows, heads, n, n))
            attn = T.add(attn, Tensor(mask[None, :, None, :, :].astype(attn.dtype)))
            attn = T.reshape(attn, (b, heads, n, n))

        attn = T.softmax(attn, axis=-1)
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, c))
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class SwinBlock(Module):
    """Pre-norm transformer block; odd-indexed blocks use shifted windows."""

    def __init__(self, dim: int, num_heads: int, window: int, shifted: bool, mlp_ratio: float,
                 rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, num_heads, window, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng, dtype=dtype)
        self.window = window
        self.shifted = shifted

    def __call__(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        window = min(self.window, h, w)
        shift = window // 2 if self.shifted else 0
        if h <= window and w <= window:
            shift = 0  # one window tiles the grid: shifting is a no-op

        shortcut = x
        y = self.norm1(x)

        pad_b = (-h) % window
        pad_r = (-w) % window
        if pad_b or pad_r:
            y = T.pad(y, ((0, 0), (0, pad_b), (0, pad_r), (0, 0)))
        hp, wp = h + pad_b, w + pad_r

        mask = None
        if shift:
            y = cyclic_shift(y, -shift, -shift)
            mask = attention_mask(hp, wp, window, shift, dtype=y.dtype)

        wins = T.reshape(window_partition(y, window), (-1, window * window, c))
        wins = self.attn(wins, window, mask)
        y = window_reverse(T.reshape(wins, (-1, window, window, c)), window, hp, wp)

        if shift:
            y = cyclic_shift(y, shift, shift)
        if pad_b or pad_r:
            y = y[:, :h, :w, :]

        x = T.add(shortcut, y)
        return T.add(x, self.mlp(self.norm2(x)))


class PatchEmbed(Module):
    """Linear projection of non-overlapping patches, then layer norm."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        p = cfg.patch_size
        self.proj = Conv2d(cfg.in_channels, cfg.embed_dim, p, rng, stride=p, dtype=dtype)
        self.norm = LayerNorm(cfg.embed_dim, dtype=dtype)
        self.patch_size = p

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if h % self.patch_size or w % self.patch_size:
            raise ConfigurationError(f"input {h}x{w} not divisible by patch size {self.patch_size}")
        tokens = self.proj(x)
        tokens = T.transpose(tokens, (0, 2, 3, 1))
        return self.norm(tokens)


class PatchMerging(Module):
    """Concatenate 2x2 token neighborhoods, normalize, project 4C -> 2C."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ConfigurationError(f"patch merging needs even extents, got {h}x{w}")
        x0 = x[:, 0::2, 0::2, :]
        x1 = x[:, 1::2, 0::2, :]
        x2 = x[:, 0::2, 1::2, :]
        x3 = x[:, 1::2, 1::2, :]
        merged = T.concat([x0, x1, x2, x3], axis=-1)
        return self.reduction(self.norm(merged))


class EncoderStage(Module):
    def __init__(self, dim: int, depth: int, num_heads: int, window: int, mlp_ratio: float,
                 rng: np.random.Generator, downsample: bool, dtype=T.DEFAULT_DTYPE):
        self.blocks = ModuleList(
            SwinBlock(dim, num_heads, window, shifted=(i % 2 == 1), mlp_ratio=mlp_ratio, rng=rng, dtype=dtype)
            for i in range(depth)
        )
        self.downsample = PatchMerging(dim, rng, dtype=dtype) if downsample else None


@dataclass
class FeaturePyramid:
    """Stage outputs in NCHW at 1/4, 1/8, 1/16, 1/32 of the input extents."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def levels(self) -> tuple:
        return (self.f1, self.f2, self.f3, self.f4)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        self.patch_embed = PatchEmbed(cfg, rng, dtype=dtype)
        self.stages = ModuleList(
            EncoderStage(
                dim=cfg.embed_dim * (2**s),
                depth=cfg.depths[s],
                num_heads=cfg.num_heads[s],
                window=cfg.window_size,
                mlp_ratio=cfg.mlp_ratio,
                rng=rng,
                downsample=(s < NUM_STAGES - 1),
                dtype=dtype,
            )
            for s in range(NUM_STAGES)
        )
        self.total_stride = cfg.total_stride

    def __call__(self, x: Tensor) -> FeaturePyramid:
        n, c, h, w = x.shape
        if h % self.total_stride or w % self.total_stride:
            raise ConfigurationError(f"input {h}x{w} not divisible by {self.total_stride}; pad first")
        tokens = self.patch_embed(x)
        features = []
        for stage in self.stages:
            for block in stage.blocks:
                tokens = block(tokens)
            features.append(T.transpose(tokens, (0, 3, 1, 2)))
            if stage.downsample is not None:
                tokens = stage.downsample(tokens)
        return FeaturePyramid(*features)
