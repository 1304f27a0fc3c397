"""Full pipeline assembly: encoder -> predictor -> dual-branch alignment ->
combine -> camera fusion -> detection head.

Two operating modes share one class: the lag-robust model (predictor and
both alignment branches active) and the baseline ablation (final LiDAR
feature := observed feature, predictor and alignment bypassed), so trend
comparisons run on byte-identical plumbing everywhere else.

Parameter namespaces for checkpoints: encoder.*, predictor.*, align.pred.*,
align.obs.*, fuse.combine.*, fuse.global.*, head.*.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .bev_encoder import BEVSpec, EncoderConfig, FeatureMap, PillarEncoder
from .detection_head import DetectionHead, HeadConfig, HeadOutput
from .errors import ConfigError, ShapeError
from .fusion import AlignBranch, CombineFusion, FusionConfig, GlobalFusion
from .nn_core.params import ParamStore
from .predictor import (PredictionBundle, Predictor, PredictorConfig,
                        prediction_loss)

__all__ = ["PipelineConfig", "ModelOutputs", "TimeAlignDetector",
           "desk_config", "paper_scale_config", "to_store_name",
           "from_store_name"]

_NAMESPACE = {
    "align_pred": "align.pred",
    "align_obs": "align.obs",
    "combine": "fuse.combine",
    "global_fuse": "fuse.global",
}


def to_store_name(param_name: str) -> str:
    head, _, rest = param_name.partition(".")
    return f"{_NAMESPACE.get(head, head)}.{rest}"


def from_store_name(store_name: str) -> str:
    for attr, ns in _NAMESPACE.items():
        if store_name.startswith(ns + "."):
            return attr + store_name[len(ns):]
    return store_name


@dataclass(frozen=True)
class PipelineConfig:
    bev: BEVSpec = field(default_factory=BEVSpec.desk_default)
    classes: tuple[str, ...] = ("car", "truck", "bus", "pedestrian")
    camera_channels: int = 8
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    predictor: PredictorConfig | None = None   # derived from bev/encoder when None
    fusion: FusionConfig | None = None
    head: HeadConfig | None = None
    baseline: bool = False

    def resolved_predictor(self) -> PredictorConfig:
        if self.predictor is not None:
            return self.predictor
        return PredictorConfig(in_channels=self.encoder.out_channels,
                               grid_hw=(self.bev.H, self.bev.W))

    def resolved_fusion(self) -> FusionConfig:
        if self.fusion is not None:
            return self.fusion
        return FusionConfig(lidar_channels=self.encoder.out_channels,
                            camera_channels=self.camera_channels)

    def resolved_head(self) -> HeadConfig:
        if self.head is not None:
            return self.head
        return HeadConfig(in_channels=self.resolved_fusion().head_channels,
                          num_classes=len(self.classes))

    def validate(self) -> None:
        pred = self.resolved_predictor()
        fus = self.resolved_fusion()
        head = self.resolved_head()
        if pred.in_channels != self.encoder.out_channels:
            raise ConfigError(
                f"predictor expects {pred.in_channels} channels, encoder "
                f"produces {self.encoder.out_channels}")
        if pred.grid_hw != (self.bev.H, self.bev.W):
            raise ConfigError(
                f"predictor grid {pred.grid_hw} != BEV grid "
                f"{(self.bev.H, self.bev.W)}")
        if fus.lidar_channels != self.encoder.out_channels:
            raise ConfigError(
                f"fusion expects {fus.lidar_channels} LiDAR channels, encoder "
                f"produces {self.encoder.out_channels}")
        if head.in_channels != fus.head_channels:
            raise ConfigError(
                f"head expects {head.in_channels} channels, fusion produces "
                f"{fus.head_channels}")
        if head.num_classes != len(self.classes):
            raise ConfigError(
                f"head has {head.num_classes} classes, config lists "
                f"{len(self.classes)}")


def desk_config(baseline: bool = False) -> PipelineConfig:
    return PipelineConfig(baseline=baseline)


def paper_scale_config(baseline: bool = False) -> PipelineConfig:
    bev = BEVSpec.paper_scale()  # 180 x 180
    enc = EncoderConfig(out_channels=256, hidden_channels=64)
    return PipelineConfig(
        bev=bev,
        camera_channels=80,
        encoder=enc,
        predictor=PredictorConfig(in_channels=256, grid_hw=(bev.H, bev.W),
                                  patch_size=4, embed_dim=96, depths=2,
                                  num_heads=4, window_size=5),
        fusion=FusionConfig(lidar_channels=256, camera_channels=80,
                            offset_hidden=64, fuse_hidden=64),
        head=HeadConfig(in_channels=256, num_classes=4, hidden=64),
        baseline=baseline,
    )


@dataclass(eq=False)
class ModelOutputs:
    f_o: FeatureMap                    # observed LiDAR feature
    f_p: FeatureMap | None             # predicted LiDAR feature (None in baseline)
    f_f: FeatureMap                    # combined LiDAR feature
    fused: FeatureMap                  # detector input (after camera fusion)
    head: HeadOutput
    bundle: PredictionBundle | None
    l_pred: torch.Tensor | None        # prediction loss (None in baseline / no labels)


class TimeAlignDetector(nn.Module):
    """The composed detector; see the module docstring for the dataflow."""

    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = PillarEncoder(cfg.encoder)
        self.predictor = Predictor(cfg.resolved_predictor())
        fus = cfg.resolved_fusion()
        self.align_pred = AlignBranch(fus)
        self.align_obs = AlignBranch(fus)
        self.combine = CombineFusion(fus)
        self.global_fuse = GlobalFusion(fus)
        self.head = DetectionHead(cfg.resolved_head())
        # training detaches the predictor's encoder inputs and labels so the
        # heavily weighted prediction loss cannot collapse the encoder;
        # gradcheck turns the detaches off to keep the whole graph analytic
        self.stop_aux_grads = True

    def _check_batch(self, hist: torch.Tensor, obs: torch.Tensor,
                     cam: torch.Tensor) -> None:
        H, W = self.cfg.bev.H, self.cfg.bev.W
        c0 = self.cfg.encoder.in_channels
        if hist.ndim != 5 or hist.shape[1] != 3 or hist.shape[2] != c0 \
                or hist.shape[-2:] != (H, W):
            raise ShapeError(
                f"history must be (B, 3, {c0}, {H}, {W}), got {tuple(hist.shape)}")
        if obs.shape != (hist.shape[0], c0, H, W):
            raise ShapeError(
                f"observed must be (B, {c0}, {H}, {W}), got {tuple(obs.shape)}")
        if cam.shape != (hist.shape[0], self.cfg.camera_channels, H, W):
            raise ShapeError(
                f"camera must be (B, {self.cfg.camera_channels}, {H}, {W}), "
                f"got {tuple(cam.shape)}")

    def forward(self, hist: torch.Tensor, obs: torch.Tensor, cam: torch.Tensor,
                true_grid: torch.Tensor | None = None) -> ModelOutputs:
        """hist: (B, 3, C0, H, W) pillar grids, earliest first; obs/true_grid:
        (B, C0, H, W) pillar grids; cam: (B, Cc, H, W) camera feature."""
        self._check_batch(hist, obs, cam)
        B = hist.shape[0]
        f_cam = FeatureMap(data=cam, role="camera")
        f_o = FeatureMap(data=self.encoder(obs), role="observed")

        if self.cfg.baseline:
            f_f = FeatureMap(data=f_o.data, role="fused")
            fused = self.global_fuse(f_f, f_cam)
            out = self.head(fused)
            return ModelOutputs(f_o=f_o, f_p=None, f_f=f_f, fused=fused,
                                head=out, bundle=None, l_pred=None)

        flat = hist.reshape(B * 3, *hist.shape[2:])
        hist_feats = self.encoder(flat).reshape(B, 3, -1, *hist.shape[-2:])
        hist_list = [hist_feats[:, i] for i in range(3)]
        pred_in = [h.detach() if self.stop_aux_grads else h for h in hist_list]
        bundle = self.predictor.rollout(pred_in)
        f_p = bundle.final

        pred_branch = self.align_pred(f_p, f_cam)
        obs_branch = self.align_obs(f_o, f_cam)
        f_f = self.combine(pred_branch, obs_branch)
        fused = self.global_fuse(f_f, f_cam)
        out = self.head(fused)

        l_pred = None
        if true_grid is not None:
            true_feat = self.encoder(true_grid)
            labels = [hist_list[1], hist_list[2], true_feat]
            if self.stop_aux_grads:
                labels = [l.detach() for l in labels]
            l_pred = prediction_loss(bundle, labels)
        return ModelOutputs(f_o=f_o, f_p=f_p, f_f=f_f, fused=fused, head=out,
                            bundle=bundle, l_pred=l_pred)

    # --- checkpoint plumbing ---

    def param_store(self) -> ParamStore:
        return ParamStore.from_module(self, rename=to_store_name)

    def load_param_store(self, store: ParamStore) -> list[str]:
        return store.assign_to_module(self, rename=to_store_name)
