"""Center-heatmap BEV detection head.

Per-class center heatmaps with sub-cell offset, footprint-size and yaw
regression. Targets are Gaussian splats (max-combined when they overlap);
the loss is a penalty-reduced focal term on the heatmap plus masked L1 on
the regression channels, both normalized by the object count. Decoding is
3x3 local-maximum selection, thresholding and top-k.

Detections carry no learned height/z: synthetic objects stand on the ground
plane, so class-prior heights are substituted at decode time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .bev_encoder import BEVSpec, FeatureMap
from .boxes import Box3D, wrap_angle
from .errors import ConfigError, ShapeError
from .nn_core.kernels import conv2d, gelu
from .scene_sim import CLASS_SIZE_PRIORS

__all__ = [
    "REG_CHANNELS",
    "HeadConfig",
    "HeadOutput",
    "DetectionHead",
    "TargetMaps",
    "gaussian_radius",
    "draw_gaussian",
    "encode_targets",
    "detection_loss",
    "decode",
]

# regression channel order: dx, dy (cells), log length, log width (meters), sin yaw, cos yaw
REG_CHANNELS = 6

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
HEAT_CLAMP = 1e-4


@dataclass(frozen=True)
class HeadConfig:
    in_channels: int = 16
    num_classes: int = 4
    hidden: int = 32

    def __post_init__(self) -> None:
        if min(self.in_channels, self.num_classes, self.hidden) < 1:
            raise ConfigError("head channel counts must be >= 1")


@dataclass(eq=False)
class HeadOutput:
    heatmap: torch.Tensor     # (B, num_classes, H, W), post-sigmoid
    regression: torch.Tensor  # (B, REG_CHANNELS, H, W)


class DetectionHead(nn.Module):
    """Two small conv stacks (heatmap and regression) on the fused feature."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.heat_conv1 = nn.Conv2d(cfg.in_channels, cfg.hidden, 3, padding=1)
        self.heat_conv2 = nn.Conv2d(cfg.hidden, cfg.num_classes, 3, padding=1)
        self.reg_conv1 = nn.Conv2d(cfg.in_channels, cfg.hidden, 3, padding=1)
        self.reg_conv2 = nn.Conv2d(cfg.hidden, REG_CHANNELS, 3, padding=1)
        # start the heatmap near a low foreground prior
        nn.init.constant_(self.heat_conv2.bias, -2.19)

    def forward(self, f) -> HeadOutput:
        # accept a FeatureMap or a plain tensor; never touch Tensor.data
        # (that alias silently detaches the autograd graph)
        x = f.data if isinstance(f, FeatureMap) else f
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"expected (B, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}")
        h = gelu(conv2d(x, self.heat_conv1.weight, self.heat_conv1.bias, padding=1))
        h = conv2d(h, self.heat_conv2.weight, self.heat_conv2.bias, padding=1)
        r = gelu(conv2d(x, self.reg_conv1.weight, self.reg_conv1.bias, padding=1))
        r = conv2d(r, self.reg_conv2.weight, self.reg_conv2.bias, padding=1)
        return HeadOutput(heatmap=torch.sigmoid(h), regression=r)


def gaussian_radius(l_cells: float, w_cells: float, min_overlap: float = 0.7) -> float:
    """Splat radius from the footprint in cells, smallest of the three
    classic tangency cases, floored at one cell."""
    h, w = l_cells, w_cells
    a1 = 1.0
    b1 = h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(max(b1 ** 2 - 4 * a1 * c1, 0.0))) / 2

    a2 = 4.0
    b2 = 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 - math.sqrt(max(b2 ** 2 - 4 * a2 * c2, 0.0))) / 2

    a3 = 4.0 * min_overlap
    b3 = -2 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (-b3 + math.sqrt(max(b3 ** 2 - 4 * a3 * c3, 0.0))) / (2 * a3)
    return max(1.0, min(r1, r2, r3))


def draw_gaussian(heatmap: np.ndarray, cx: int, cy: int, radius: float) -> None:
    """Max-splat an isotropic Gaussian (sigma = radius/3) onto a 2D map."""
    H, W = heatmap.shape
    r = int(radius)
    sigma = radius / 3.0
    y0, y1 = max(0, cy - r), min(H - 1, cy + r)
    x0, x1 = max(0, cx - r), min(W - 1, cx + r)
    if y1 < y0 or x1 < x0:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma ** 2))
    np.maximum(heatmap[y0:y1 + 1, x0:x1 + 1], g,
               out=heatmap[y0:y1 + 1, x0:x1 + 1])


@dataclass(eq=False)
class TargetMaps:
    heatmap: np.ndarray     # (num_classes, H, W) float32
    regression: np.ndarray  # (REG_CHANNELS, H, W) float32
    mask: np.ndarray        # (H, W) bool, True at supervised cells
    num_objects: int


def encode_targets(boxes: list[Box3D], spec: BEVSpec,
                   class_names: tuple[str, ...]) -> TargetMaps:
    """Rasterize ground truth. Boxes whose center is outside the BEV extent
    (or whose class is not listed) are dropped."""
    H, W = spec.H, spec.W
    heat = np.zeros((len(class_names), H, W), dtype=np.float32)
    reg = np.zeros((REG_CHANNELS, H, W), dtype=np.float32)
    mask = np.zeros((H, W), dtype=bool)
    count = 0
    for b in boxes:
        if b.class_name not in class_names:
            continue
        if not spec.contains(b.x, b.y):
            continue
        cls = class_names.index(b.class_name)
        cx, cy = spec.cell_coords(b.x, b.y)
        cx, cy = float(cx), float(cy)
        ix = int(np.clip(round(cx), 0, W - 1))
        iy = int(np.clip(round(cy), 0, H - 1))
        radius = gaussian_radius(b.length / spec.resolution,
                                 b.width / spec.resolution)
        draw_gaussian(heat[cls], ix, iy, radius)
        heat[cls, iy, ix] = 1.0
        reg[0, iy, ix] = cx - ix
        reg[1, iy, ix] = cy - iy
        reg[2, iy, ix] = math.log(b.length)
        reg[3, iy, ix] = math.log(b.width)
        reg[4, iy, ix] = math.sin(b.yaw)
        reg[5, iy, ix] = math.cos(b.yaw)
        mask[iy, ix] = True
        count += 1
    return TargetMaps(heatmap=heat, regression=reg, mask=mask, num_objects=count)


def detection_loss(pred: HeadOutput, target_heat: torch.Tensor,
                   target_reg: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Penalty-reduced focal loss + masked L1, normalized by object count.

    target_heat: (B, C, H, W) with exact 1.0 at object centers;
    target_reg: (B, REG_CHANNELS, H, W); mask: (B, H, W) bool.
    """
    p = pred.heatmap
    if p.shape != target_heat.shape:
        raise ShapeError(
            f"heatmap shape {tuple(p.shape)} != target {tuple(target_heat.shape)}")
    if pred.regression.shape != target_reg.shape:
        raise ShapeError(
            f"regression shape {tuple(pred.regression.shape)} != target "
            f"{tuple(target_reg.shape)}")
    p = p.clamp(HEAT_CLAMP, 1.0 - HEAT_CLAMP)
    pos = (target_heat == 1.0).to(p.dtype)
    neg = 1.0 - pos
    pos_loss = -((1.0 - p) ** FOCAL_ALPHA) * torch.log(p) * pos
    neg_loss = -((1.0 - target_heat) ** FOCAL_BETA) * (p ** FOCAL_ALPHA) \
        * torch.log(1.0 - p) * neg
    n = torch.clamp(pos.sum(), min=1.0)
    focal = (pos_loss.sum() + neg_loss.sum()) / n

    m = mask.to(p.dtype).unsqueeze(1)
    l1 = (torch.abs(pred.regression - target_reg) * m).sum() / n
    return focal + l1


def _local_maxima(heat: np.ndarray) -> np.ndarray:
    """Boolean map of cells equal to their 3x3 neighborhood maximum."""
    H, W = heat.shape
    padded = np.full((H + 2, W + 2), -np.inf)
    padded[1:-1, 1:-1] = heat
    neigh = np.stack([padded[1 + dy:H + 1 + dy, 1 + dx:W + 1 + dx]
                      for dy in (-1, 0, 1) for dx in (-1, 0, 1)])
    return heat >= neigh.max(axis=0)


def decode(pred: HeadOutput, spec: BEVSpec, class_names: tuple[str, ...],
           score_threshold: float = 0.25, max_dets: int = 64,
           class_heights: dict | None = None):
    """Turn head outputs into boxes (3x3 local maxima, threshold, top-k).

    Accepts batched (B, ...) outputs and returns one list per batch element;
    a single (C, H, W) output returns a plain list.
    """
    heat = pred.heatmap
    reg = pred.regression
    batched = heat.ndim == 4
    if not batched:
        heat = heat.unsqueeze(0)
        reg = reg.unsqueeze(0)
    if heat.shape[1] != len(class_names):
        raise ShapeError(
            f"heatmap has {heat.shape[1]} classes, names give {len(class_names)}")
    heights = class_heights or {c: CLASS_SIZE_PRIORS[c][2]
                                for c in class_names if c in CLASS_SIZE_PRIORS}

    out = []
    hm = heat.detach().cpu().numpy()
    rg = reg.detach().cpu().numpy()
    for b in range(hm.shape[0]):
        cands = []
        for ci, cname in enumerate(class_names):
            h2 = hm[b, ci]
            keep = _local_maxima(h2) & (h2 >= score_threshold)
            for iy, ix in np.argwhere(keep):
                cands.append((float(h2[iy, ix]), cname, int(ix), int(iy)))
        cands.sort(key=lambda c: -c[0])
        boxes = []
        for score, cname, ix, iy in cands[:max_dets]:
            dx, dy = float(rg[b, 0, iy, ix]), float(rg[b, 1, iy, ix])
            x, y = spec.cell_center(ix + dx, iy + dy)
            length = float(np.exp(np.clip(rg[b, 2, iy, ix], -4.0, 4.0)))
            width = float(np.exp(np.clip(rg[b, 3, iy, ix], -4.0, 4.0)))
            yaw = math.atan2(float(rg[b, 4, iy, ix]), float(rg[b, 5, iy, ix]))
            hgt = float(heights.get(cname, 1.0))
            boxes.append(Box3D(x=float(x), y=float(y), z=hgt / 2.0,
                               length=length, width=width, height=hgt,
                               yaw=wrap_angle(yaw), class_name=cname,
                               score=score))
        out.append(boxes)
    return out if batched else out[0]
