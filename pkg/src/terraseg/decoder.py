"""U-Net-style decoding of the feature pyramid into per-pixel class logits."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoder import FeaturePyramid
from .errors import ShapeError
from .nn import Conv2d, Module
from .tensor import Tensor


class FuseStage(Module):
    """Upsample the deeper map, concatenate the skip, run two 3x3 conv + GELU."""

    def __init__(self, skip_channels: int, above_channels: int, out_channels: int,
                 rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        self.conv1 = Conv2d(skip_channels + above_channels, out_channels, 3, rng, padding=1, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, padding=1, dtype=dtype)

    def __call__(self, skip: Tensor, above: Tensor) -> Tensor:
        if skip.shape[2] != 2 * above.shape[2] or skip.shape[3] != 2 * above.shape[3]:
            raise ShapeError(f"skip extents {skip.shape} are not 2x the deeper map {above.shape}")
        up = T.upsample2x(above, mode="bilinear")
        x = T.concat([up, skip], axis=1)
        x = T.gelu(self.conv1(x))
        return T.gelu(self.conv2(x))


class Decoder(Module):
    """Fuses f4 -> f3 -> f2 -> f1 and restores full resolution.

    The bottleneck is a 1x1 projection of the deepest map; the stage-1
    fused map is upsampled x4 (two bilinear doublings) and projected to
    class logits by a 1x1 convolution.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        c1, c2, c3, c4 = cfg.stage_dims
        d1, d2, d3, d4 = cfg.decoder_channels
        self.bottleneck = Conv2d(c4, d4, 1, rng, dtype=dtype)
        self.fuse3 = FuseStage(c3, d4, d3, rng, dtype=dtype)
        self.fuse2 = FuseStage(c2, d3, d2, rng, dtype=dtype)
        self.fuse1 = FuseStage(c1, d2, d1, rng, dtype=dtype)
        self.head = Conv2d(d1, cfg.num_classes, 1, rng, dtype=dtype)

    def __call__(self, pyramid: FeaturePyramid) -> Tensor:
        x = self.bottleneck(pyramid.f4)
        x = self.fuse3(pyramid.f3, x)
        x = self.fuse2(pyramid.f2, x)
        x = self.fuse1(pyramid.f1, x)
        x = T.upsample2x(x, mode="bilinear")
        x = T.upsample2x(x, mode="bilinear")
        return self.head(x)


def predict_mask(logits) -> np.ndarray:
    """Per-pixel class decision: softmax over classes, then argmax.

    Ties break toward the lowest class index, so predictions are
    deterministic functions of the logits.
    """
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    shifted = data - data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs.argmax(axis=1).astype(np.int32)
