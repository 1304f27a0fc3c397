"""Shared fixtures.

The expensive piece is the lag-robustness study: per seed it trains a
lag-free baseline (observed feature only) and a full model with lag
injection on the same small synthetic world, then evaluates both at lag 0
and lag 1 on held-out scenes. Several tests consume these runs, so they are
trained once per session and memoized per seed.
"""
import tempfile
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from timealign import (BEVSpec, EncoderConfig, EvalProtocol, FusionConfig,
                       HeadConfig, LagConfig, LidarSensorModel, PipelineConfig,
                       PredictorConfig, SceneConfig, SceneDataset,
                       TimeAlignDetector, TrainConfig, copy_last_baseline,
                       evaluate, generate_scene, train)
from timealign.nn_core.params import load_partial_checkpoint

torch.set_num_threads(1)

# world and model used by every trend run; deliberately small and fast-moving
# so one frame of lag displaces objects well past the matching distance
TREND_BEV = BEVSpec.square(16.0, 1.0)  # 32 x 32
TREND_CLASSES = ("car",)
TREND_SPEEDS = {"car": (6.0, 7.0)}  # ~3.25 m per frame at 0.5 s
TREND_EVAL_SCENES = range(900, 906)


def trend_dataset(scene_seeds, ds_seed) -> SceneDataset:
    scenes = [
        generate_scene(SceneConfig(num_objects=4, classes=TREND_CLASSES,
                                   area_extent=12.0, duration=12,
                                   speed_range=TREND_SPEEDS, seed=s),
                       scene_token=f"s{s}")
        for s in scene_seeds
    ]
    sensor = LidarSensorModel(points_per_object=120, ground_points=256)
    return SceneDataset.from_scenes(scenes, sensor, TREND_BEV,
                                    camera_channels=8, classes=TREND_CLASSES,
                                    seed=ds_seed, camera_noise=0.2,
                                    camera_jitter=1.5)


def trend_pipeline(baseline: bool) -> PipelineConfig:
    return PipelineConfig(
        bev=TREND_BEV,
        classes=TREND_CLASSES,
        camera_channels=8,
        encoder=EncoderConfig(6, 24, 12),
        predictor=PredictorConfig(in_channels=12, grid_hw=(32, 32),
                                  patch_size=2, embed_dim=48, depths=2,
                                  num_heads=4, window_size=4),
        fusion=FusionConfig(12, 8, offset_hidden=16, fuse_hidden=24),
        head=HeadConfig(12, 1, 24),
        baseline=baseline,
    )


TREND_PROTOCOL = EvalProtocol(
    conditions=(("LiDAR(T)", LagConfig.fixed(0)),
                ("LiDAR Lagging(T-1)", LagConfig.fixed(1))),
    classes=TREND_CLASSES,
)


def _pred_vs_copy(model: TimeAlignDetector, ds: SceneDataset):
    """Mean MSE of the rollout's final prediction vs repeating the latest
    history feature, both against the encoded live frame."""
    model.eval()
    idxs = ds.eval_indices(3)
    tot_pred = tot_copy = 0.0
    with torch.no_grad():
        for i in idxs:
            batch = ds.make_batch([i], [0])
            hist = batch["hist"]
            feats = [model.encoder(hist[:, s]) for s in range(3)]
            true_feat = model.encoder(batch["true"])
            bundle = model.predictor.rollout(feats)
            tot_pred += float(F.mse_loss(bundle.final.data, true_feat))
            tot_copy += float(F.mse_loss(copy_last_baseline(feats), true_feat))
    n = len(idxs)
    return tot_pred / n, tot_copy / n


def run_trend_seed(seed: int, eval_ds: SceneDataset) -> dict:
    train_ds = trend_dataset(range(100, 110), ds_seed=seed)

    torch.manual_seed(seed)
    model_b = TimeAlignDetector(trend_pipeline(baseline=True))
    res_b = train(model_b, train_ds,
                  TrainConfig(stages=((12, 0.0),), lr=5e-3, batch_size=8,
                              lag=LagConfig.train(0.0), seed=seed))

    # warm start the full model from the baseline checkpoint, then train the
    # prediction stage hard and fine-tune with a small weight
    torch.manual_seed(seed)
    model_t = TimeAlignDetector(trend_pipeline(baseline=False))
    with tempfile.TemporaryDirectory() as td:
        ckpt = Path(td) / "baseline.ckpt"
        res_b.store.save(ckpt)
        store = model_t.param_store()
        load_partial_checkpoint(store, ckpt)
        model_t.load_param_store(store)
    res_t = train(model_t, train_ds,
                  TrainConfig(stages=((16, 10.0), (5, 0.001)), lr=5e-3,
                              batch_size=8, lag=LagConfig.train(0.5, 1),
                              seed=seed))

    rep_b = evaluate(model_b, eval_ds, TREND_PROTOCOL, model_label="baseline")
    rep_t = evaluate(model_t, eval_ds, TREND_PROTOCOL, model_label="timealign")
    pred_mse, copy_mse = _pred_vs_copy(model_t, eval_ds)
    return {
        "seed": seed,
        "base_map0": rep_b.mean_ap("LiDAR(T)"),
        "base_map1": rep_b.mean_ap("LiDAR Lagging(T-1)"),
        "ta_map0": rep_t.mean_ap("LiDAR(T)"),
        "ta_map1": rep_t.mean_ap("LiDAR Lagging(T-1)"),
        "pred_mse": pred_mse,
        "copy_mse": copy_mse,
        "history": res_t.history,
        "model_b": model_b,
        "model_t": model_t,
    }


@pytest.fixture(scope="session")
def trend():
    """Getter for memoized per-seed lag-robustness runs (~90 s per seed)."""
    cache: dict = {}
    eval_ds = trend_dataset(TREND_EVAL_SCENES, ds_seed=777)

    def get(seed: int) -> dict:
        if seed not in cache:
            cache[seed] = run_trend_seed(seed, eval_ds)
        return cache[seed]

    get.eval_ds = eval_ds
    return get
