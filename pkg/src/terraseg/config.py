"""Architecture hyperparameters."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

from .errors import ConfigurationError

NUM_STAGES = 4


@dataclass
class ModelConfig:
    """Everything the backbone and decoder need to be built.

    The default shape follows the standard tiny shifted-window backbone
    (patch 4, width 96, depths 2/2/6/2, heads 3/6/12/24, window 7); the
    ``tiny()`` preset is the desk-scale configuration used throughout the
    tests. ``decoder_channels`` are the fusion output widths at pyramid
    levels 1..3 plus the bottleneck projection width; when omitted they
    default to (C, C, 2C, 4C).
    """

    in_channels: int = 5
    patch_size: int = 4
    embed_dim: int = 96
    depths: tuple = (2, 2, 6, 2)
    num_heads: tuple = (3, 6, 12, 24)
    window_size: int = 7
    num_classes: int = 8
    mlp_ratio: float = 4.0
    decoder_channels: tuple = field(default=None)

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.num_heads = tuple(int(h) for h in self.num_heads)
        if self.decoder_channels is None:
            c = self.embed_dim
            self.decoder_channels = (c, c, 2 * c, 4 * c)
        else:
            self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.validate()

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be >= 1")
        if self.patch_size < 1:
            raise ConfigurationError("patch_size must be >= 1")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if len(self.depths) != NUM_STAGES or len(self.num_heads) != NUM_STAGES:
            raise ConfigurationError(f"depths and num_heads must have {NUM_STAGES} entries")
        if any(d < 1 for d in self.depths):
            raise ConfigurationError("every stage needs at least one block")
        for stage, heads in enumerate(self.num_heads):
            dim = self.embed_dim * (2**stage)
            if heads < 1 or dim % heads:
                raise ConfigurationError(f"stage {stage} width {dim} not divisible by {heads} heads")
        if self.window_size < 2:
            raise ConfigurationError("window_size must be >= 2")
        if self.mlp_ratio <= 0:
            raise ConfigurationError("mlp_ratio must be positive")
        if len(self.decoder_channels) != NUM_STAGES:
            raise ConfigurationError("decoder_channels must have 4 entries")

    @property
    def stage_dims(self) -> tuple:
        return tuple(self.embed_dim * (2**s) for s in range(NUM_STAGES))

    @property
    def total_stride(self) -> int:
        """Input extents must be divisible by this after padding."""
        return self.patch_size * (2 ** (NUM_STAGES - 1))

    @classmethod
    def tiny(cls, num_classes: int = 8, in_channels: int = 5) -> "ModelConfig":
        return cls(
            in_channels=in_channels,
            patch_size=4,
            embed_dim=32,
            depths=(1, 1, 1, 1),
            num_heads=(1, 2, 4, 8),
            window_size=4,
            num_classes=num_classes,
            mlp_ratio=4.0,
            decoder_channels=(32, 32, 64, 128),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["num_heads"] = list(self.num_heads)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)
