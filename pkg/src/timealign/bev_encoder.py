"""Point cloud -> dense BEV feature maps.

Two stages: ``pillarize`` bins points into per-cell statistics (pure numpy,
exactly permutation-invariant), and ``PillarEncoder`` maps those statistics
to C_lidar channels with a three-layer convolutional stack. One encoder
instance is shared across the history frames and the observed frame so all
of them live in the same feature space.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .temporal_data import PointCloud

__all__ = [
    "BEVSpec",
    "FeatureMap",
    "PillarGrid",
    "PILLAR_CHANNELS",
    "PILLAR_CHANNEL_NAMES",
    "pillarize",
    "EncoderConfig",
    "PillarEncoder",
    "encode",
    "encode_batch",
]

# role tags a FeatureMap may carry: observed/predicted/fused LiDAR, camera,
# channel-concat intermediate, and encoded history frames
ROLES = ("observed", "predicted", "camera", "fused", "concat", "history")

PILLAR_CHANNEL_NAMES = ("count", "mean_z", "max_z", "mean_intensity", "mean_dx", "mean_dy")
PILLAR_CHANNELS = len(PILLAR_CHANNEL_NAMES)


@dataclass(frozen=True)
class BEVSpec:
    """Rasterization geometry: metric ranges plus cell resolution.

    W cells cover x_range, H cells cover y_range; both spans must be exact
    multiples of the resolution. Row index = y, column index = x.
    """

    x_range: tuple[float, float] = (-16.0, 16.0)
    y_range: tuple[float, float] = (-16.0, 16.0)
    resolution: float = 1.0

    def __post_init__(self) -> None:
        if self.resolution <= 0:
            raise ConfigError(f"resolution must be > 0, got {self.resolution}")
        for name, (lo, hi) in (("x_range", self.x_range), ("y_range", self.y_range)):
            if hi <= lo:
                raise ConfigError(f"{name} must have hi > lo, got ({lo}, {hi})")
            cells = (hi - lo) / self.resolution
            if abs(cells - round(cells)) > 1e-9:
                raise ConfigError(
                    f"{name} span {hi - lo} is not a multiple of resolution {self.resolution}"
                )

    @property
    def W(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.resolution))

    @property
    def H(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.resolution))

    @classmethod
    def square(cls, extent: float, resolution: float) -> "BEVSpec":
        """Square grid covering [-extent, extent] in both axes."""
        return cls(x_range=(-extent, extent), y_range=(-extent, extent),
                   resolution=resolution)

    @classmethod
    def desk_default(cls) -> "BEVSpec":
        return cls.square(16.0, 1.0)  # 32 x 32

    @classmethod
    def paper_scale(cls) -> "BEVSpec":
        return cls.square(54.0, 0.6)  # 180 x 180

    def cell_coords(self, x, y):
        """Continuous cell coordinates (col, row); integers at cell centers."""
        cx = (np.asarray(x) - self.x_range[0]) / self.resolution - 0.5
        cy = (np.asarray(y) - self.y_range[0]) / self.resolution - 0.5
        return cx, cy

    def cell_center(self, ix, iy):
        """Metric (x, y) of the center of cell column ix, row iy."""
        x = self.x_range[0] + (np.asarray(ix) + 0.5) * self.resolution
        y = self.y_range[0] + (np.asarray(iy) + 0.5) * self.resolution
        return x, y

    def contains(self, x, y):
        return ((x >= self.x_range[0]) & (x < self.x_range[1])
                & (y >= self.y_range[0]) & (y < self.y_range[1]))


@dataclass(eq=False)
class FeatureMap:
    """Dense BEV tensor (C,H,W) or (B,C,H,W) tagged with its pipeline role."""

    data: object  # numpy array or torch tensor
    role: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ConfigError(f"unknown feature role {self.role!r}; expected one of {ROLES}")
        if self.data.ndim not in (3, 4):
            raise ShapeError(f"feature map must be rank 3 or 4, got rank {self.data.ndim}")

    @property
    def channels(self) -> int:
        return int(self.data.shape[-3])

    @property
    def hw(self) -> tuple[int, int]:
        return int(self.data.shape[-2]), int(self.data.shape[-1])


@dataclass(eq=False)
class PillarGrid:
    """Per-cell point statistics, channels ordered as PILLAR_CHANNEL_NAMES."""

    data: np.ndarray  # (PILLAR_CHANNELS, H, W) float64
    spec: BEVSpec

    def __post_init__(self) -> None:
        expected = (PILLAR_CHANNELS, self.spec.H, self.spec.W)
        if tuple(self.data.shape) != expected:
            raise ShapeError(f"pillar grid shape {self.data.shape}, expected {expected}")


def pillarize(cloud: PointCloud, spec: BEVSpec) -> PillarGrid:
    """Bin points into BEV cells and aggregate per-cell statistics.

    Points outside the spec ranges are dropped. The result is exactly
    permutation-invariant: points are brought into a canonical order before
    any accumulation, so reordering the input cannot change even the last
    bit of the sums.
    """
    H, W = spec.H, spec.W
    grid = np.zeros((PILLAR_CHANNELS, H, W), dtype=np.float64)
    if len(cloud) == 0:
        return PillarGrid(grid, spec)

    x, y, z = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    inten = cloud.intensity
    keep = spec.contains(x, y)
    if not np.any(keep):
        return PillarGrid(grid, spec)
    x, y, z, inten = x[keep], y[keep], z[keep], inten[keep]

    ix = np.floor((x - spec.x_range[0]) / spec.resolution).astype(np.int64)
    iy = np.floor((y - spec.y_range[0]) / spec.resolution).astype(np.int64)
    # boundary cells: floating-point division may land exactly on W/H
    ix = np.clip(ix, 0, W - 1)
    iy = np.clip(iy, 0, H - 1)
    cell = iy * W + ix

    # canonical order: cell id first, then full point value, so duplicate
    # clouds in any order produce bit-identical accumulations
    order = np.lexsort((inten, z, y, x, cell))
    cell, x, y, z, inten = cell[order], x[order], y[order], z[order], inten[order]
    ix, iy = ix[order], iy[order]

    uniq, starts = np.unique(cell, return_index=True)
    counts = np.diff(np.append(starts, cell.size))
    cx, cy = spec.cell_center(ix, iy)
    dx, dy = x - cx, y - cy

    uy = (uniq // W).astype(np.int64)
    ux = (uniq % W).astype(np.int64)
    grid[0, uy, ux] = counts
    grid[1, uy, ux] = np.add.reduceat(z, starts) / counts
    grid[2, uy, ux] = np.maximum.reduceat(z, starts)
    grid[3, uy, ux] = np.add.reduceat(inten, starts) / counts
    grid[4, uy, ux] = np.add.reduceat(dx, starts) / counts
    grid[5, uy, ux] = np.add.reduceat(dy, starts) / counts
    return PillarGrid(grid, spec)


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = PILLAR_CHANNELS
    hidden_channels: int = 32
    out_channels: int = 16

    def __post_init__(self) -> None:
        if min(self.in_channels, self.hidden_channels, self.out_channels) < 1:
            raise ConfigError("encoder channel counts must be >= 1")


# fixed per-channel input scaling; a diagonal reparameterization of the first
# convolution that keeps raw pillar counts from dominating the activations
_INPUT_SCALE = (0.125, 0.5, 0.5, 1.0, 2.0, 2.0)


class PillarEncoder(nn.Module):
    """Three stride-1 3x3 convolutions with GELU between, C0 -> C_lidar."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.conv1 = nn.Conv2d(cfg.in_channels, cfg.hidden_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(cfg.hidden_channels, cfg.hidden_channels, 3, padding=1)
        self.conv3 = nn.Conv2d(cfg.hidden_channels, cfg.out_channels, 3, padding=1)
        self.act = nn.GELU()
        scale = torch.ones(cfg.in_channels)
        scale[: min(cfg.in_channels, len(_INPUT_SCALE))] = torch.tensor(
            _INPUT_SCALE[: min(cfg.in_channels, len(_INPUT_SCALE))])
        self.register_buffer("input_scale", scale.view(1, -1, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"expected (B, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}"
            )
        x = x * self.input_scale
        x = self.act(self.conv1(x))
        x = self.act(self.conv2(x))
        return self.conv3(x)


def _grid_tensor(grid: PillarGrid, encoder: PillarEncoder) -> torch.Tensor:
    dtype = next(encoder.parameters()).dtype
    return torch.from_numpy(grid.data).to(dtype)


def encode(grid: PillarGrid, encoder: PillarEncoder, role: str = "observed") -> FeatureMap:
    """Encode one pillar grid to a (C, H, W) feature map."""
    out = encoder(_grid_tensor(grid, encoder).unsqueeze(0)).squeeze(0)
    return FeatureMap(data=out, role=role)


def encode_batch(grids: list[PillarGrid], encoder: PillarEncoder,
                 role: str = "observed") -> FeatureMap:
    """Encode several grids in one batched forward pass, (B, C, H, W)."""
    if not grids:
        raise ShapeError("encode_batch needs at least one grid")
    x = torch.stack([_grid_tensor(g, encoder) for g in grids])
    return FeatureMap(data=encoder(x), role=role)
