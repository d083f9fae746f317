from __future__ import annotations

import dataclasses
from dataclasses import dataclass

ABLATION_MODES = ("fusion", "rgb_resize", "rgb_resize_conv", "rgbd_resize_conv", "local_only")


class ShapeContractError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    """Hyperparameters of the fusion network.

    Defaults carry the published dimensions (768-d class token, 512-d local
    feature, 447 -> 224 ViT adaptor). :meth:`reduced` shrinks every channel
    count for CPU-scale experiments and gradient checks.
    """

    height: int = 640
    width: int = 832
    vit_resize: int = 447
    vit_input: int = 224
    vit_embed_dim: int = 768
    vit_depth: int = 2
    vit_heads: int = 4
    vit_patch: int = 16
    vit_mlp_ratio: float = 4.0
    conv_channels: tuple[int, ...] = (16, 32, 64, 64)
    local_channels: int = 512
    fe_hidden: int = 256
    corr_max_disp: int = 4
    mlp_hidden: tuple[int, ...] = (512, 256)
    ablation_mode: str = "fusion"
    far_clip: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "mlp_hidden", tuple(int(c) for c in self.mlp_hidden))
        if self.height % 16 or self.width % 16 or self.height <= 0 or self.width <= 0:
            raise ShapeContractError(
                f"input size {self.height}x{self.width} must be positive multiples of 16 (h' = h/16, w' = w/16)"
            )
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigurationError(f"unknown ablation mode {self.ablation_mode!r}; expected one of {ABLATION_MODES}")
        if len(self.conv_channels) != 4:
            raise ConfigurationError("the local encoders need exactly four stride-2 stages to reach 1/16 scale")
        if self.vit_input % self.vit_patch:
            raise ConfigurationError(f"ViT input {self.vit_input} not divisible by patch {self.vit_patch}")
        if self.vit_embed_dim % self.vit_heads:
            raise ConfigurationError(f"embed dim {self.vit_embed_dim} not divisible by {self.vit_heads} heads")
        if (self.vit_resize - 1) // 2 + 1 != self.vit_input:
            raise ConfigurationError(
                f"stride-2 adaptor maps {self.vit_resize} to {(self.vit_resize - 1) // 2 + 1}, not {self.vit_input}"
            )
        if self.corr_max_disp < 0:
            raise ConfigurationError("corr_max_disp must be nonnegative")

    @property
    def corr_channels(self) -> int:
        return (2 * self.corr_max_disp + 1) ** 2

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.height // 16, self.width // 16

    @property
    def fused_dim(self) -> int:
        return self.local_channels + self.vit_embed_dim

    def replace(self, **kw) -> NetworkConfig:
        return dataclasses.replace(self, **kw)

    def reduced(self, factor: int = 8, vit_depth: int = 1, **kw) -> NetworkConfig:
        """Every channel count divided by ``factor`` (spatial sizes untouched)."""
        d = lambda c: max(1, c // factor)  # noqa: E731
        return self.replace(
            vit_embed_dim=d(self.vit_embed_dim),
            vit_depth=vit_depth,
            conv_channels=tuple(d(c) for c in self.conv_channels),
            local_channels=d(self.local_channels),
            fe_hidden=d(self.fe_hidden),
            mlp_hidden=tuple(d(c) for c in self.mlp_hidden),
            **kw,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)
