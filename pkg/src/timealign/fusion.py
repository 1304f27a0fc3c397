"""Camera-guided realignment and fusion of LiDAR BEV features.

Both the predicted and the observed LiDAR feature run through structurally
identical (separately parameterized) alignment branches: concatenate with
the camera feature, run an offset convolution stack that produces per-tap
offsets plus modulation logits, grid-sample the logits at the offset tap
locations, squash them to [0, 1], and apply a modulated deformable
convolution with a residual connection. The two realigned branches are then
fused by a small conv stack into the final LiDAR feature, which is fused
once more with the camera feature ahead of the detection head.

The offset stack's final layer is zero-initialized, so a fresh branch is an
exact residual identity plus 0.5x a plain convolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .bev_encoder import FeatureMap
from .errors import ConfigError, ShapeError
from .nn_core.kernels import (base_tap_grid, conv2d, deformable_conv, gelu,
                              grid_sample_bilinear)

__all__ = [
    "FusionConfig",
    "BranchOutput",
    "AlignBranch",
    "CombineFusion",
    "GlobalFusion",
    "concat_with_camera",
]


@dataclass(frozen=True)
class FusionConfig:
    lidar_channels: int = 16    # 256 at paper scale
    camera_channels: int = 8    # 80 at paper scale
    deform_kernel: int = 3
    offset_hidden: int = 32
    fuse_hidden: int = 32
    out_channels: int | None = None  # global-fuse output; defaults to lidar_channels

    def __post_init__(self) -> None:
        if min(self.lidar_channels, self.camera_channels,
               self.offset_hidden, self.fuse_hidden) < 1:
            raise ConfigError("fusion channel counts must be >= 1")
        if self.deform_kernel < 1 or self.deform_kernel % 2 == 0:
            raise ConfigError(
                f"deform_kernel must be odd >= 1, got {self.deform_kernel}")

    @property
    def concat_channels(self) -> int:
        return self.lidar_channels + self.camera_channels

    @property
    def head_channels(self) -> int:
        return self.out_channels if self.out_channels is not None else self.lidar_channels


@dataclass(eq=False)
class BranchOutput:
    feature: FeatureMap          # realigned LiDAR feature, (B, C_lidar, H, W)
    offsets: torch.Tensor        # (B, 2*K*K, H, W)
    modulation: torch.Tensor     # (B, K*K, H, W), in [0, 1]


def _check_pair(f_lidar: FeatureMap, f_cam: FeatureMap, cfg: FusionConfig) -> None:
    if f_lidar.data.ndim != 4 or f_cam.data.ndim != 4:
        raise ShapeError("fusion inputs must be batched (B, C, H, W)")
    if f_lidar.channels != cfg.lidar_channels:
        raise ShapeError(
            f"lidar feature has {f_lidar.channels} channels, config says "
            f"{cfg.lidar_channels}")
    if f_cam.channels != cfg.camera_channels:
        raise ShapeError(
            f"camera feature has {f_cam.channels} channels, config says "
            f"{cfg.camera_channels}")
    if f_lidar.hw != f_cam.hw or f_lidar.data.shape[0] != f_cam.data.shape[0]:
        raise ShapeError(
            f"spatial/batch mismatch: lidar {tuple(f_lidar.data.shape)} vs "
            f"camera {tuple(f_cam.data.shape)}")


def concat_with_camera(f_lidar: FeatureMap, f_cam: FeatureMap,
                       cfg: FusionConfig) -> FeatureMap:
    """Channel-concat a LiDAR-role feature with the camera feature."""
    _check_pair(f_lidar, f_cam, cfg)
    return FeatureMap(data=torch.cat([f_lidar.data, f_cam.data], dim=1),
                      role="concat")


class AlignBranch(nn.Module):
    """One realignment branch (used twice: predicted and observed)."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.deform_kernel
        self.offset_conv1 = nn.Conv2d(cfg.concat_channels, cfg.offset_hidden,
                                      3, padding=1)
        # 2*K*K offset channels followed by K*K modulation-logit channels
        self.offset_conv2 = nn.Conv2d(cfg.offset_hidden, 3 * k * k, 3, padding=1)
        nn.init.zeros_(self.offset_conv2.weight)
        nn.init.zeros_(self.offset_conv2.bias)
        self.deform_weight = nn.Parameter(
            torch.empty(cfg.lidar_channels, cfg.lidar_channels, k, k))
        nn.init.kaiming_uniform_(self.deform_weight, a=5 ** 0.5)
        self.deform_bias = nn.Parameter(torch.zeros(cfg.lidar_channels))

    def forward(self, f_lidar: FeatureMap, f_cam: FeatureMap) -> BranchOutput:
        cfg = self.cfg
        _check_pair(f_lidar, f_cam, cfg)
        k = cfg.deform_kernel
        x = f_lidar.data
        B, _, H, W = x.shape

        z = torch.cat([x, f_cam.data], dim=1)
        z = gelu(conv2d(z, self.offset_conv1.weight, self.offset_conv1.bias,
                        padding=1))
        raw = conv2d(z, self.offset_conv2.weight, self.offset_conv2.bias,
                     padding=1)
        offsets = raw[:, : 2 * k * k]
        logits = raw[:, 2 * k * k:]

        # the deform weights: modulation logits are sampled at each tap's
        # displaced location, then squashed
        taps = base_tap_grid(k, device=x.device, dtype=x.dtype)
        cols = torch.arange(W, device=x.device, dtype=x.dtype).view(1, 1, W)
        rows = torch.arange(H, device=x.device, dtype=x.dtype).view(1, H, 1)
        sampled = []
        for t in range(k * k):
            loc = torch.stack([
                cols + taps[t, 0] + offsets[:, 2 * t],
                rows + taps[t, 1] + offsets[:, 2 * t + 1],
            ], dim=-1)
            sampled.append(grid_sample_bilinear(logits[:, t:t + 1], loc))
        modulation = torch.sigmoid(torch.cat(sampled, dim=1))

        aligned = deformable_conv(x, self.deform_weight, self.deform_bias,
                                  offsets, modulation)
        out = FeatureMap(data=x + aligned, role=f_lidar.role)
        return BranchOutput(feature=out, offsets=offsets, modulation=modulation)


class CombineFusion(nn.Module):
    """Fuse the two realigned branches into the final LiDAR feature."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.lidar_channels
        self.conv1 = nn.Conv2d(2 * c, cfg.fuse_hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(cfg.fuse_hidden, c, 3, padding=1)

    def forward(self, pred_branch: BranchOutput,
                obs_branch: BranchOutput) -> FeatureMap:
        p = pred_branch.feature.data
        o = obs_branch.feature.data
        if p.shape != o.shape:
            raise ShapeError(
                f"branch shapes disagree: {tuple(p.shape)} vs {tuple(o.shape)}")
        z = torch.cat([p, o], dim=1)
        z = gelu(conv2d(z, self.conv1.weight, self.conv1.bias, padding=1))
        z = conv2d(z, self.conv2.weight, self.conv2.bias, padding=1)
        return FeatureMap(data=z, role="fused")

    def set_observed_passthrough(self) -> None:
        """Configure the weights so the output equals the observed branch
        exactly (uses gelu(v) - gelu(-v) = v). Needs fuse_hidden = 2 * C."""
        c = self.cfg.lidar_channels
        if self.cfg.fuse_hidden != 2 * c:
            raise ConfigError(
                f"passthrough needs fuse_hidden = {2 * c}, got {self.cfg.fuse_hidden}")
        with torch.no_grad():
            self.conv1.weight.zero_()
            self.conv1.bias.zero_()
            self.conv2.weight.zero_()
            self.conv2.bias.zero_()
            for i in range(c):
                # observed branch occupies input channels c..2c-1
                self.conv1.weight[i, c + i, 1, 1] = 1.0
                self.conv1.weight[c + i, c + i, 1, 1] = -1.0
                self.conv2.weight[i, i, 1, 1] = 1.0
                self.conv2.weight[i, c + i, 1, 1] = -1.0


class GlobalFusion(nn.Module):
    """Final LiDAR-camera fusion producing the detector input feature."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.conv1 = nn.Conv2d(cfg.concat_channels, cfg.fuse_hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(cfg.fuse_hidden, cfg.head_channels, 3, padding=1)

    def forward(self, f_f: FeatureMap, f_cam: FeatureMap) -> FeatureMap:
        if f_f.channels != self.cfg.lidar_channels:
            raise ShapeError(
                f"fused feature has {f_f.channels} channels, config says "
                f"{self.cfg.lidar_channels}")
        if f_cam.channels != self.cfg.camera_channels:
            raise ShapeError(
                f"camera feature has {f_cam.channels} channels, config says "
                f"{self.cfg.camera_channels}")
        if f_f.hw != f_cam.hw:
            raise ShapeError(f"spatial mismatch: {f_f.hw} vs {f_cam.hw}")
        z = torch.cat([f_f.data, f_cam.data], dim=1)
        z = gelu(conv2d(z, self.conv1.weight, self.conv1.bias, padding=1))
        z = conv2d(z, self.conv2.weight, self.conv2.bias, padding=1)
        return FeatureMap(data=z, role="fused")
