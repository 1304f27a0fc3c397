"""Windowed multi-head self-attention (Swin-style) blocks.

Tokens live on an h x w grid. A block is pre-norm window attention with a
relative position bias plus a pre-norm MLP, both with residuals. The shifted
variant cyclically rolls the grid by half a window before partitioning and
masks any attention between tokens that were not contiguous neighbors before
the roll (or that are padding).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigError, ShapeError
from .kernels import gelu, layer_norm, linear, softmax

__all__ = ["WindowAttentionConfig", "SwinBlock", "attention_mask",
           "window_partition", "window_reverse", "relative_position_index"]


@dataclass(frozen=True)
class WindowAttentionConfig:
    embed_dim: int
    num_heads: int
    window_size: int
    shifted: bool = False
    mlp_ratio: float = 4.0
    qkv_bias: bool = True

    def __post_init__(self) -> None:
        if self.embed_dim < 1 or self.num_heads < 1 or self.window_size < 1:
            raise ConfigError("embed_dim, num_heads, window_size must be >= 1")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be > 0, got {self.mlp_ratio}")


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, ws*ws, C); H and W must be multiples of ws."""
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, C)


def window_reverse(wins: torch.Tensor, ws: int, H: int, W: int) -> torch.Tensor:
    """Inverse of window_partition back to (B, H, W, C)."""
    C = wins.shape[-1]
    B = wins.shape[0] // ((H // ws) * (W // ws))
    x = wins.view(B, H // ws, W // ws, ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, C)


def relative_position_index(ws: int) -> torch.Tensor:
    """(ws*ws, ws*ws) lookup into a (2ws-1)^2 relative bias table."""
    coords = torch.stack(torch.meshgrid(
        torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)  # (2, ws*ws)
    rel = coords[:, :, None] - coords[:, None, :]  # (2, N, N)
    rel = rel + (ws - 1)
    return rel[0] * (2 * ws - 1) + rel[1]


def _axis_ids(real: int, padded: int, shift: int, device) -> torch.Tensor:
    """Region id per post-roll coordinate along one axis.

    Two tokens may attend along this axis iff their ids match: -1 marks
    padding; otherwise the id says whether the pre-roll coordinate wrapped,
    so equal ids <=> pre-roll contiguous neighbors.
    """
    p = torch.arange(padded, device=device)
    old = (p + shift) % padded
    wrapped = ((p + shift) >= padded).long()
    ids = torch.where(old >= real, torch.full_like(wrapped, -1), wrapped)
    return ids


def attention_mask(h: int, w: int, ws: int, shift: int,
                   device=None) -> torch.Tensor | None:
    """Additive attention mask per window, (nW, ws*ws, ws*ws) of {0, -inf}.

    Built for a padded grid of ceil-multiples of ws after a cyclic roll by
    ``shift``; None when every pair is allowed (no shift, no padding).
    """
    hp = -(-h // ws) * ws
    wp = -(-w // ws) * ws
    if shift == 0 and hp == h and wp == w:
        return None
    row_ids = _axis_ids(h, hp, shift, device)
    col_ids = _axis_ids(w, wp, shift, device)
    # combine axes; padding on either axis poisons the cell
    grid = row_ids.view(-1, 1) * 4 + col_ids.view(1, -1)
    grid = torch.where((row_ids.view(-1, 1) < 0) | (col_ids.view(1, -1) < 0),
                       torch.full_like(grid, -1), grid)
    wins = window_partition(grid.view(1, hp, wp, 1).float(), ws).squeeze(-1)  # (nW, ws*ws)
    same = wins.unsqueeze(1) == wins.unsqueeze(2)
    mask = torch.zeros_like(same, dtype=torch.float32)
    mask.masked_fill_(~same, float("-inf"))
    return mask


class SwinBlock(nn.Module):
    """One pre-norm windowed attention + MLP block on an h x w token grid."""

    def __init__(self, cfg: WindowAttentionConfig):
        super().__init__()
        self.cfg = cfg
        d, ws = cfg.embed_dim, cfg.window_size
        self.norm1_weight = nn.Parameter(torch.ones(d))
        self.norm1_bias = nn.Parameter(torch.zeros(d))
        self.qkv = nn.Linear(d, 3 * d, bias=cfg.qkv_bias)
        self.proj = nn.Linear(d, d)
        self.norm2_weight = nn.Parameter(torch.ones(d))
        self.norm2_bias = nn.Parameter(torch.zeros(d))
        hidden = int(d * cfg.mlp_ratio)
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)
        self.rel_pos_table = nn.Parameter(torch.zeros((2 * ws - 1) ** 2, cfg.num_heads))
        self.register_buffer("rel_index", relative_position_index(ws), persistent=False)
        nn.init.trunc_normal_(self.rel_pos_table, std=0.02)
        for m in (self.qkv, self.proj, self.fc1, self.fc2):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    def _attend(self, x: torch.Tensor, grid_hw: tuple[int, int],
                collect_attn: bool):
        cfg = self.cfg
        B, N, D = x.shape
        h, w = grid_hw
        ws = cfg.window_size
        shift = ws // 2 if (cfg.shifted and min(h, w) > ws) else 0

        y = x.view(B, h, w, D)
        hp = -(-h // ws) * ws
        wp = -(-w // ws) * ws
        if hp != h or wp != w:
            y = F.pad(y, (0, 0, 0, wp - w, 0, hp - h))
        if shift:
            y = torch.roll(y, shifts=(-shift, -shift), dims=(1, 2))

        wins = window_partition(y, ws)  # (B*nW, ws*ws, D)
        n = ws * ws
        nw = wins.shape[0] // B
        hd = D // cfg.num_heads
        qkv = linear(wins, self.qkv.weight, self.qkv.bias)
        qkv = qkv.reshape(-1, n, 3, cfg.num_heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]

        attn = (q @ k.transpose(-2, -1)) * (hd ** -0.5)
        bias = self.rel_pos_table[self.rel_index.view(-1)]
        bias = bias.view(n, n, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0).to(attn.dtype)
        mask = attention_mask(h, w, ws, shift, device=x.device)
        if mask is not None:
            attn = attn.view(B, nw, cfg.num_heads, n, n) + \
                mask.to(attn.dtype).view(1, nw, 1, n, n)
            attn = attn.view(-1, cfg.num_heads, n, n)
        attn = softmax(attn, dim=-1)
        saved = attn.view(B, nw, cfg.num_heads, n, n) if collect_attn else None

        out = (attn @ v).transpose(1, 2).reshape(-1, n, D)
        out = linear(out, self.proj.weight, self.proj.bias)
        out = window_reverse(out, ws, hp, wp)
        if shift:
            out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
        out = out[:, :h, :w].reshape(B, N, D)
        return out, saved

    def forward(self, x: torch.Tensor, grid_hw: tuple[int, int],
                return_attn: bool = False):
        if x.ndim != 3:
            raise ShapeError(f"tokens must be (B, N, D), got rank {x.ndim}")
        h, w = grid_hw
        if x.shape[1] != h * w:
            raise ShapeError(f"N = {x.shape[1]} does not match grid {h}x{w}")
        if x.shape[2] != self.cfg.embed_dim:
            raise ShapeError(
                f"embedding dim {x.shape[2]} != config {self.cfg.embed_dim}")

        y = layer_norm(x, self.norm1_weight, self.norm1_bias)
        y, attn = self._attend(y, grid_hw, return_attn)
        x = x + y
        z = layer_norm(x, self.norm2_weight, self.norm2_bias)
        z = linear(gelu(linear(z, self.fc1.weight, self.fc1.bias)),
                   self.fc2.weight, self.fc2.bias)
        x = x + z
        if return_attn:
            return x, attn
        return x
