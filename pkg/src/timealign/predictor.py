"""Recurrent BEV-feature prediction.

A feature map is patch-embedded into tokens, pushed through stacked
recurrent cells (each cell: project concat(input, hidden) -> a stack of
window-attention blocks alternating plain/shifted -> four LSTM gates), and
inflated back to feature-map shape. The rollout starts from the encoded
feature three steps back with zero state and feeds each prediction back as
the next input, producing predictions for the two intermediate steps and
the current one; training minimizes the mean per-step MSE against the
encoded true features.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .bev_encoder import FeatureMap
from .errors import ConfigError, ShapeError
from .nn_core.attention import SwinBlock, WindowAttentionConfig
from .nn_core.kernels import linear

__all__ = [
    "SERIES_LEN",
    "PredictorConfig",
    "PatchEmbed",
    "PatchInflate",
    "SwinLSTMCell",
    "Predictor",
    "PredictionBundle",
    "prediction_loss",
    "mse_per_step",
    "copy_last_baseline",
]

SERIES_LEN = 3  # fixed input series length


@dataclass(frozen=True)
class PredictorConfig:
    in_channels: int = 16
    grid_hw: tuple[int, int] = (32, 32)
    patch_size: int = 2        # 4 at paper scale
    embed_dim: int = 96
    depths: int = 2            # attention blocks per cell
    num_heads: int = 4
    window_size: int = 4
    num_cells: int = 1
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        h, w = self.grid_hw
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"grid {h}x{w} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.depths < 1 or self.num_cells < 1:
            raise ConfigError("depths and num_cells must be >= 1")

    @property
    def token_grid(self) -> tuple[int, int]:
        return self.grid_hw[0] // self.patch_size, self.grid_hw[1] // self.patch_size

    @property
    def num_tokens(self) -> int:
        th, tw = self.token_grid
        return th * tw


class PatchEmbed(nn.Module):
    """Non-overlapping patches linearly projected to the embedding dim.

    Patch vectors are laid out channel-major then (py, px), so with
    patch_size 1 a token is exactly the cell's raw channel vector.
    """

    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.proj = nn.Linear(cfg.in_channels * p * p, cfg.embed_dim)
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        H, W = cfg.grid_hw
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, H, W):
            raise ShapeError(
                f"expected (B, {cfg.in_channels}, {H}, {W}), got {tuple(x.shape)}")
        p = cfg.patch_size
        B = x.shape[0]
        th, tw = cfg.token_grid
        x = x.view(B, cfg.in_channels, th, p, tw, p)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(B, th * tw, cfg.in_channels * p * p)
        return linear(x, self.proj.weight, self.proj.bias)


class PatchInflate(nn.Module):
    """Linear inverse of PatchEmbed's layout: tokens -> (B, C, H, W)."""

    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.proj = nn.Linear(cfg.embed_dim, cfg.in_channels * p * p)
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        th, tw = cfg.token_grid
        if tokens.ndim != 3 or tokens.shape[1] != th * tw:
            raise ShapeError(
                f"expected (B, {th * tw}, D) tokens, got {tuple(tokens.shape)}")
        p = cfg.patch_size
        B = tokens.shape[0]
        x = linear(tokens, self.proj.weight, self.proj.bias)
        x = x.view(B, th, tw, cfg.in_channels, p, p)
        x = x.permute(0, 3, 1, 4, 2, 5).reshape(B, cfg.in_channels, th * p, tw * p)
        return x


class SwinLSTMCell(nn.Module):
    """One recurrent cell: attention-transformed input+hidden drive four
    LSTM gates that update the (hidden, cell) token-grid state."""

    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.proj = nn.Linear(2 * d, d)
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)
        self.blocks = nn.ModuleList([
            SwinBlock(WindowAttentionConfig(
                embed_dim=d, num_heads=cfg.num_heads,
                window_size=cfg.window_size, shifted=bool(i % 2),
                mlp_ratio=cfg.mlp_ratio))
            for i in range(cfg.depths)
        ])
        self.gate_i = nn.Linear(d, d)
        self.gate_f = nn.Linear(d, d)
        self.gate_o = nn.Linear(d, d)
        self.gate_g = nn.Linear(d, d)
        for g in (self.gate_i, self.gate_f, self.gate_o, self.gate_g):
            nn.init.trunc_normal_(g.weight, std=0.02)
            nn.init.zeros_(g.bias)
        # forget gate starts open: standard recurrent-training stabilizer
        nn.init.ones_(self.gate_f.bias)

    def forward(self, x: torch.Tensor,
                state: tuple[torch.Tensor, torch.Tensor]):
        h_prev, c_prev = state
        if h_prev.shape != x.shape or c_prev.shape != x.shape:
            raise ShapeError(
                f"state shape {tuple(h_prev.shape)}/{tuple(c_prev.shape)} "
                f"does not match input {tuple(x.shape)}")
        z = linear(torch.cat([x, h_prev], dim=-1), self.proj.weight, self.proj.bias)
        for blk in self.blocks:
            z = blk(z, self.cfg.token_grid)
        c_new = (torch.sigmoid(linear(z, self.gate_f.weight, self.gate_f.bias)) * c_prev
                 + torch.sigmoid(linear(z, self.gate_i.weight, self.gate_i.bias))
                 * torch.tanh(linear(z, self.gate_g.weight, self.gate_g.bias)))
        h_new = torch.sigmoid(linear(z, self.gate_o.weight, self.gate_o.bias)) \
            * torch.tanh(c_new)
        return h_new, (h_new, c_new)


@dataclass(eq=False)
class PredictionBundle:
    """Predicted feature maps for the three rollout steps, earliest first;
    the last one is the prediction for the current step."""

    steps: tuple

    def __post_init__(self) -> None:
        if len(self.steps) != SERIES_LEN:
            raise ShapeError(f"bundle needs {SERIES_LEN} steps, got {len(self.steps)}")
        shapes = {tuple(s.data.shape) for s in self.steps}
        if len(shapes) != 1:
            raise ShapeError(f"step shapes disagree: {sorted(shapes)}")

    @property
    def final(self) -> FeatureMap:
        return self.steps[-1]


class Predictor(nn.Module):
    """patch embed -> stacked recurrent cells -> patch inflate, with the
    recursive three-step rollout."""

    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = PatchEmbed(cfg)
        self.cells = nn.ModuleList(SwinLSTMCell(cfg) for _ in range(cfg.num_cells))
        self.inflate = PatchInflate(cfg)

    def init_state(self, batch: int, like: torch.Tensor) -> list:
        shape = (batch, self.cfg.num_tokens, self.cfg.embed_dim)
        return [(like.new_zeros(shape), like.new_zeros(shape))
                for _ in self.cells]

    def step(self, x: torch.Tensor, state: list):
        tokens = self.embed(x)
        new_state = []
        for cell, st in zip(self.cells, state):
            tokens, st = cell(tokens, st)
            new_state.append(st)
        return self.inflate(tokens), new_state

    def forward(self, history, teacher_forcing: bool = False) -> PredictionBundle:
        return self.rollout(history, teacher_forcing=teacher_forcing)

    def rollout(self, history, teacher_forcing: bool = False) -> PredictionBundle:
        """Roll three steps from the earliest history feature.

        history: the three encoded history features, earliest first, each a
        FeatureMap or (B, C, H, W) tensor. Step 1 consumes history[0] with
        zero state; later steps consume the previous prediction (or, with
        teacher_forcing, the true history feature for that step).
        """
        if len(history) != SERIES_LEN:
            raise ShapeError(f"rollout needs {SERIES_LEN} history features, "
                             f"got {len(history)}")
        feats = [h.data if isinstance(h, FeatureMap) else h for h in history]
        for f in feats:
            if f.ndim != 4:
                raise ShapeError("history features must be (B, C, H, W)")
        x = feats[0]
        state = self.init_state(x.shape[0], x)
        preds = []
        for k in range(SERIES_LEN):
            y, state = self.step(x, state)
            preds.append(FeatureMap(data=y, role="predicted"))
            if k + 1 < SERIES_LEN:
                x = feats[k + 1] if teacher_forcing else y
        return PredictionBundle(steps=tuple(preds))


def _as_tensor_list(items) -> list:
    return [it.data if isinstance(it, FeatureMap) else it for it in items]


def prediction_loss(bundle: PredictionBundle, labels) -> torch.Tensor:
    """Mean over the three steps of per-element MSE against the label
    features (labels are detached: they are targets, not optimized)."""
    if len(labels) != SERIES_LEN:
        raise ShapeError(f"need {SERIES_LEN} label features, got {len(labels)}")
    lbl = _as_tensor_list(labels)
    total = None
    for step, lab in zip(bundle.steps, lbl):
        p = step.data
        if p.shape != lab.shape:
            raise ShapeError(
                f"prediction shape {tuple(p.shape)} != label {tuple(lab.shape)}")
        term = torch.mean((p - lab.detach()) ** 2)
        total = term if total is None else total + term
    return total / SERIES_LEN


def mse_per_step(bundle: PredictionBundle, labels) -> list[float]:
    lbl = _as_tensor_list(labels)
    return [float(torch.mean((s.data - l.detach()) ** 2))
            for s, l in zip(bundle.steps, lbl)]


def copy_last_baseline(history) -> torch.Tensor:
    """The no-motion reference prediction for the current step: repeat the
    latest history feature."""
    feats = _as_tensor_list(history)
    if len(feats) != SERIES_LEN:
        raise ShapeError(f"need {SERIES_LEN} history features, got {len(feats)}")
    return feats[-1]
