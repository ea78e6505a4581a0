"""End-to-end segmentation network: pad, encode, decode, crop."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .decoder import Decoder, predict_mask
from .encoder import Encoder
from .nn import Module
from .tensor import Tensor


class SegmentationModel(Module):
    """Five-channel input to per-pixel class logits at the input resolution.

    Inputs whose extents are not multiples of the model stride are zero
    padded on the right/bottom before encoding; logits are cropped back to
    the original extents, so the shape contract holds for any input size.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=T.DEFAULT_DTYPE):
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng, dtype=dtype)
        self.decoder = Decoder(cfg, rng, dtype=dtype)
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        for name, p in self.named_parameters():
            p.name = name

    def __call__(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        n, c, h, w = x.shape
        stride = self.cfg.total_stride
        pad_b = (-h) % stride
        pad_r = (-w) % stride
        if pad_b or pad_r:
            x = T.pad(x, ((0, 0), (0, 0), (0, pad_b), (0, pad_r)))
        logits = self.decoder(self.encoder(x))
        if pad_b or pad_r:
            logits = logits[:, :, :h, :w]
        return logits

    def predict(self, x) -> np.ndarray:
        """Segmentation mask (N, H, W) of class indices, no graph recorded."""
        with T.no_grad():
            logits = self(x)
        return predict_mask(logits)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())
