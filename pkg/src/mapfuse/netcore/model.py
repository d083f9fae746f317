"""Fusion network: CNN cost-volume branch + ViT class-token branch -> pose correction."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from mapfuse.geometry import Pose, pose_compose
from mapfuse.netcore.config import NetworkConfig, ShapeContractError
from mapfuse.netcore.vit import VisionTransformer


class NumericFailure(FloatingPointError):
    def __init__(self, head: str, layer_index: int):
        super().__init__(f"non-finite activations in {head} after fully connected layer {layer_index}")
        self.head = head
        self.layer_index = layer_index


@dataclass
class FeatureBundle:
    """Intermediate tensors of one forward pass (``None`` where a mode skips them)."""

    f_rgb_prime: torch.Tensor | None = None
    f_depth_prime: torch.Tensor | None = None
    f_rgbd_prime: torch.Tensor | None = None
    vit_input: torch.Tensor | None = None
    f_global: torch.Tensor | None = None
    f_rgb: torch.Tensor | None = None
    f_depth1: torch.Tensor | None = None
    cost_volume: torch.Tensor | None = None
    f_c: torch.Tensor | None = None
    f_depth2: torch.Tensor | None = None
    weights: torch.Tensor | None = None
    f_l: torch.Tensor | None = None
    f_local: torch.Tensor | None = None
    fused: torch.Tensor | None = None

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {f.name: tuple(getattr(self, f.name).shape) for f in fields(self) if getattr(self, f.name) is not None}


@dataclass
class ForwardOutput:
    t: torch.Tensor
    q_raw: torch.Tensor
    q: torch.Tensor
    absolute: list[Pose] | None
    features: FeatureBundle


def corr(f1: torch.Tensor, f2: torch.Tensor, max_disp: int) -> torch.Tensor:
    """Local cost volume, channel ``(dy + d) * (2d + 1) + (dx + d)``.

    ``out[:, k, i, j] = <f1[:, :, i, j], f2[:, :, i + dy, j + dx]> / C``, zero outside the map.
    Accepts ``C x h x w`` or batched ``B x C x h x w`` inputs.
    """
    if f1.shape != f2.shape:
        raise ShapeContractError(f"correlation inputs differ in shape: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    squeeze = f1.dim() == 3
    if squeeze:
        f1, f2 = f1.unsqueeze(0), f2.unsqueeze(0)
    _, c, h, w = f1.shape
    d = max_disp
    f2p = F.pad(f2, (d, d, d, d))
    out = []
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            shifted = f2p[:, :, d + dy : d + dy + h, d + dx : d + dx + w]
            out.append((f1 * shifted).sum(dim=1))
    vol = torch.stack(out, dim=1) / c
    return vol[0] if squeeze else vol


def spatial_softmax(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the h' * w' positions, independently per channel."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).softmax(dim=-1).reshape(b, c, h, w)


def _encoder(in_ch: int, channels) -> nn.Sequential:
    layers = []
    for out_ch in channels:
        layers += [nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1), nn.LeakyReLU(0.1)]
        in_ch = out_ch
    return nn.Sequential(*layers)


def _feature_extractor(in_ch: int, hidden: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, hidden, 3, padding=1),
        nn.LeakyReLU(0.1),
        nn.Conv2d(hidden, out_ch, 3, padding=1),
    )


class RegressionHead(nn.Module):
    """Three fully connected layers with LeakyReLU between them."""

    def __init__(self, in_dim: int, hidden, out_dim: int, name: str):
        super().__init__()
        dims = [in_dim, *hidden, out_dim]
        self.fc = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.name = name

    def forward(self, x):
        for i, layer in enumerate(self.fc):
            x = layer(x)
            if not torch.isfinite(x).all():
                raise NumericFailure(self.name, i)
            if i < len(self.fc) - 1:
                x = F.leaky_relu(x, 0.1)
        return x


class LocalizationNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = cfg = config
        mode = cfg.ablation_mode
        if mode == "fusion":
            self.conv_rgb_prime = nn.Conv2d(3, 2, 3, stride=2, padding=1)
            self.conv_depth_prime = nn.Conv2d(1, 1, 3, stride=2, padding=1)
        elif mode == "rgb_resize_conv":
            self.conv_rgb_prime = nn.Conv2d(3, 3, 3, stride=2, padding=1)
        elif mode == "rgbd_resize_conv":
            self.conv_rgbd_prime = nn.Conv2d(4, 3, 3, stride=2, padding=1)
        if mode != "local_only":
            self.vit = VisionTransformer(
                img_size=cfg.vit_input,
                patch=cfg.vit_patch,
                in_chans=3,
                embed_dim=cfg.vit_embed_dim,
                depth=cfg.vit_depth,
                heads=cfg.vit_heads,
                mlp_ratio=cfg.vit_mlp_ratio,
            )
        self.conv_rgb = _encoder(3, cfg.conv_channels)
        self.conv_depth = _encoder(1, cfg.conv_channels)
        self.fe1 = _feature_extractor(cfg.corr_channels, cfg.fe_hidden, cfg.local_channels)
        self.fe2 = _feature_extractor(cfg.conv_channels[-1], cfg.fe_hidden, cfg.local_channels)
        self.mlp_position = RegressionHead(cfg.fused_dim, cfg.mlp_hidden, 3, "mlp_position")
        self.mlp_posture = RegressionHead(cfg.fused_dim, cfg.mlp_hidden, 4, "mlp_posture")
        # variance-preserving init for the LeakyReLU stacks; PyTorch's default
        # shrinks activations every layer and the cost volume ends up flat
        for branch in (self.conv_rgb, self.conv_depth, self.fe1, self.fe2, self.mlp_position, self.mlp_posture):
            for mod in branch.modules():
                if isinstance(mod, (nn.Conv2d, nn.Linear)):
                    nn.init.kaiming_normal_(mod.weight, a=0.1, nonlinearity="leaky_relu")
                    nn.init.zeros_(mod.bias)
        # start as an identity correction: t ~ 0, q ~ (1, 0, 0, 0)
        with torch.no_grad():
            for head in (self.mlp_position, self.mlp_posture):
                head.fc[-1].weight.mul_(0.01)
                head.fc[-1].bias.zero_()
            self.mlp_posture.fc[-1].bias[0] = 1.0

    def _check_inputs(self, color, depth):
        cfg = self.config
        if color.dim() != 4 or color.shape[1] != 3:
            raise ShapeContractError(f"color must be B x 3 x h x w (I_RGB), got {tuple(color.shape)}")
        if depth.dim() != 4 or depth.shape[1] != 1:
            raise ShapeContractError(f"depth must be B x 1 x h x w (I_Depth), got {tuple(depth.shape)}")
        if color.shape[-2:] != depth.shape[-2:]:
            raise ShapeContractError("color and depth sizes differ")
        h, w = color.shape[-2:]
        if h % 16 or w % 16:
            raise ShapeContractError(f"input {h}x{w} not divisible by 16, so h' = h/16 is undefined")
        if (h, w) != (cfg.height, cfg.width):
            raise ShapeContractError(f"input {h}x{w} does not match configured {cfg.height}x{cfg.width}")

    def _resize(self, x, size):
        return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)

    def global_features(self, color, depth, bundle: FeatureBundle | None = None):
        """Class-token feature of the ViT branch, ``B x vit_embed_dim``."""
        cfg = self.config
        bundle = bundle if bundle is not None else FeatureBundle()
        mode = cfg.ablation_mode
        b = color.shape[0]
        if mode == "local_only":
            f_global = color.new_zeros(b, cfg.vit_embed_dim)
            bundle.f_global = f_global
            return f_global
        if mode == "fusion":
            bundle.f_rgb_prime = self.conv_rgb_prime(self._resize(color, cfg.vit_resize))
            bundle.f_depth_prime = self.conv_depth_prime(self._resize(depth, cfg.vit_resize))
            x = torch.cat([bundle.f_rgb_prime, bundle.f_depth_prime], dim=1)
            if x.shape[1:] != (3, cfg.vit_input, cfg.vit_input):
                raise ShapeContractError(f"F'_RGBD must be 3 x {cfg.vit_input} x {cfg.vit_input}, got {tuple(x.shape[1:])}")
            bundle.f_rgbd_prime = x
        elif mode == "rgb_resize":
            x = self._resize(color, cfg.vit_input)
        elif mode == "rgb_resize_conv":
            x = self.conv_rgb_prime(self._resize(color, cfg.vit_resize))
        else:  # rgbd_resize_conv
            x = self.conv_rgbd_prime(self._resize(torch.cat([color, depth], dim=1), cfg.vit_resize))
        bundle.vit_input = x
        bundle.f_global = self.vit(x)
        return bundle.f_global

    def local_features(self, color, depth, bundle: FeatureBundle | None = None):
        """Softmax-pooled correlation feature, ``B x local_channels``."""
        cfg = self.config
        bundle = bundle if bundle is not None else FeatureBundle()
        bundle.f_rgb = self.conv_rgb(color)
        bundle.f_depth1 = self.conv_depth(depth)
        bundle.cost_volume = corr(bundle.f_rgb, bundle.f_depth1, cfg.corr_max_disp)
        bundle.f_c = self.fe1(bundle.cost_volume)
        bundle.f_depth2 = self.fe2(bundle.f_depth1)
        bundle.weights = spatial_softmax(bundle.f_depth2)
        bundle.f_l = bundle.f_c * bundle.weights
        bundle.f_local = bundle.f_l.sum(dim=(2, 3))
        if bundle.f_c.shape[-2:] != cfg.feature_hw:
            raise ShapeContractError(f"F_C spatial size {tuple(bundle.f_c.shape[-2:])} != (h/16, w/16) = {cfg.feature_hw}")
        return bundle.f_local

    def regress(self, f_local, f_global, bundle: FeatureBundle | None = None):
        """Raw translation and quaternion from the fused feature."""
        cfg = self.config
        if f_local.shape[-1] != cfg.local_channels or f_global.shape[-1] != cfg.vit_embed_dim:
            raise ShapeContractError(
                f"fused feature needs {cfg.local_channels} local + {cfg.vit_embed_dim} global dims, "
                f"got {f_local.shape[-1]} + {f_global.shape[-1]}"
            )
        fused = torch.cat([f_local, f_global], dim=-1)
        if bundle is not None:
            bundle.fused = fused
        return self.mlp_position(fused), self.mlp_posture(fused)

    def forward(self, color, depth, rough: list[Pose] | None = None) -> ForwardOutput:
        self._check_inputs(color, depth)
        bundle = FeatureBundle()
        f_global = self.global_features(color, depth, bundle)
        f_local = self.local_features(color, depth, bundle)
        t, q_raw = self.regress(f_local, f_global, bundle)
        q = F.normalize(q_raw, dim=-1)
        absolute = None
        if rough is not None:
            absolute = [compose_correction(r, tt, qq) for r, tt, qq in zip(rough, t, q)]
        return ForwardOutput(t, q_raw, q, absolute, bundle)


def compose_correction(rough: Pose, t, q) -> Pose:
    """Absolute pose from a correction ``(t, q)`` expressed in the rough camera frame.

    An exact identity correction returns ``rough`` itself (no renormalization drift).
    """
    t = np.asarray(t.detach().cpu().double() if isinstance(t, torch.Tensor) else t, dtype=np.float64)
    q = np.asarray(q.detach().cpu().double() if isinstance(q, torch.Tensor) else q, dtype=np.float64)
    if not t.any() and q[0] > 0 and not q[1:].any():
        return rough
    return pose_compose(rough, Pose(t, q))


def regress_pose(model: LocalizationNet, f_local, f_global, rough: Pose):
    """Single-sample convenience: ``(t, unit q, absolute pose)``."""
    t, q_raw = model.regress(f_local.reshape(1, -1), f_global.reshape(1, -1))
    q = F.normalize(q_raw, dim=-1)
    return t[0], q[0], compose_correction(rough, t[0], q[0])


def build_model(config: NetworkConfig, seed: int = 0, dtype=torch.float32) -> LocalizationNet:
    """Deterministically initialised network."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = LocalizationNet(config).to(dtype)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


# depth enters the network as clipped inverse depth, ref / d (1 at or closer than
# ref, 0 where there is no return or beyond the far clip). Linear depth / far_clip
# keeps nearby structure -- where a 0.6 m shift is visible -- in a narrow band near 0,
# and the cost volume needed several times more steps to pick it up.
INVERSE_DEPTH_REF = 2.0


def prepare_inputs(color: np.ndarray, depth: np.ndarray, far_clip: float, dtype=torch.float32):
    """uint8 ``h x w x 3`` color and metric depth -> normalized ``1 x C x h x w`` tensors."""
    c = torch.from_numpy(np.array(color, dtype=np.uint8)).permute(2, 0, 1).to(dtype) / 255.0
    d = torch.from_numpy(np.array(depth, dtype=np.float32)).to(dtype)
    valid = (d > 0) & (d <= far_clip)
    inv = (INVERSE_DEPTH_REF / torch.where(valid, d, torch.ones_like(d))).clamp(max=1.0)
    d = torch.where(valid, inv, torch.zeros_like(d))
    return c.unsqueeze(0), d.reshape(1, 1, *depth.shape)
