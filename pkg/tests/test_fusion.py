import pytest
import torch
import torch.nn.functional as F

from timealign import (AlignBranch, BranchOutput, CombineFusion, ConfigError,
                       FeatureMap, FusionConfig, GlobalFusion, ShapeError,
                       concat_with_camera)
from timealign.nn_core.kernels import conv2d

torch.set_num_threads(1)

CFG = FusionConfig(lidar_channels=6, camera_channels=4, offset_hidden=8,
                   fuse_hidden=12)


def lidar_map(b=2, h=10, w=10, role="observed", seed=0):
    g = torch.Generator().manual_seed(seed)
    return FeatureMap(data=torch.randn(b, 6, h, w, generator=g), role=role)


def cam_map(b=2, h=10, w=10, seed=1):
    g = torch.Generator().manual_seed(seed)
    return FeatureMap(data=torch.randn(b, 4, h, w, generator=g), role="camera")


def test_config_validation():
    with pytest.raises(ConfigError):
        FusionConfig(lidar_channels=0)
    with pytest.raises(ConfigError):
        FusionConfig(deform_kernel=2)
    assert CFG.concat_channels == 10
    assert CFG.head_channels == 6
    assert FusionConfig(lidar_channels=6, camera_channels=4,
                        out_channels=9).head_channels == 9


def test_concat_with_camera():
    out = concat_with_camera(lidar_map(), cam_map(), CFG)
    assert out.role == "concat"
    assert out.data.shape == (2, 10, 10, 10)
    assert torch.equal(out.data[:, :6], lidar_map().data)
    with pytest.raises(ShapeError):
        concat_with_camera(lidar_map(), cam_map(h=8, w=8), CFG)
    with pytest.raises(ShapeError):
        concat_with_camera(cam_map(), cam_map(), CFG)


def test_fresh_branch_is_residual_identity():
    torch.manual_seed(0)
    branch = AlignBranch(CFG).double()
    x = torch.randn(2, 6, 10, 10, dtype=torch.float64)
    cam = torch.randn(2, 4, 10, 10, dtype=torch.float64)
    out = branch(FeatureMap(data=x, role="observed"),
                 FeatureMap(data=cam, role="camera"))
    # zero-initialized offset stack: no displacement, modulation sigmoid(0)
    assert torch.all(out.offsets == 0.0)
    assert torch.allclose(out.modulation,
                          torch.full_like(out.modulation, 0.5))
    want = x + 0.5 * conv2d(x, branch.deform_weight, None, padding=1)
    assert torch.allclose(out.feature.data, want, atol=1e-10)
    assert out.feature.role == "observed"


def test_branch_offsets_follow_camera():
    torch.manual_seed(1)
    branch = AlignBranch(CFG)
    with torch.no_grad():  # wake the zero-initialized offset head
        branch.offset_conv2.weight.normal_(0.0, 0.1)
        branch.offset_conv2.bias.normal_(0.0, 0.1)
    f = lidar_map(seed=2)
    out_a = branch(f, cam_map(seed=3))
    out_b = branch(f, cam_map(seed=4))
    assert out_a.offsets.abs().max() > 0.0
    assert torch.all((out_a.modulation > 0.0) & (out_a.modulation < 1.0))
    assert not torch.equal(out_a.offsets, out_b.offsets)
    assert not torch.equal(out_a.feature.data, out_b.feature.data)


def test_branch_shape_errors():
    branch = AlignBranch(CFG)
    with pytest.raises(ShapeError):
        branch(cam_map(), cam_map())  # wrong lidar channel count
    with pytest.raises(ShapeError):
        branch(lidar_map(), lidar_map())
    with pytest.raises(ShapeError):
        branch(FeatureMap(data=torch.randn(6, 10, 10), role="observed"),
               cam_map())


def branch_outputs(seed):
    g = torch.Generator().manual_seed(seed)
    def mk(role):
        return BranchOutput(
            feature=FeatureMap(data=torch.randn(2, 6, 10, 10, generator=g,
                                                dtype=torch.float64),
                               role=role),
            offsets=torch.zeros(2, 18, 10, 10, dtype=torch.float64),
            modulation=torch.full((2, 9, 10, 10), 0.5, dtype=torch.float64))
    return mk("predicted"), mk("observed")


def test_combine_observed_passthrough():
    combine = CombineFusion(CFG).double()
    combine.set_observed_passthrough()
    pred, obs = branch_outputs(5)
    out = combine(pred, obs)
    assert out.role == "fused"
    assert torch.allclose(out.data, obs.feature.data, atol=1e-12)
    # and it really is a function of both inputs otherwise
    torch.manual_seed(6)
    fresh = CombineFusion(CFG).double()
    mixed = fresh(pred, obs)
    assert not torch.allclose(mixed.data, obs.feature.data, atol=1e-3)


def test_combine_passthrough_needs_wide_hidden():
    cfg = FusionConfig(lidar_channels=6, camera_channels=4, fuse_hidden=8)
    with pytest.raises(ConfigError):
        CombineFusion(cfg).set_observed_passthrough()


def test_combine_shape_mismatch():
    combine = CombineFusion(CFG)
    pred, obs = branch_outputs(7)
    bad = BranchOutput(feature=FeatureMap(data=torch.randn(2, 6, 8, 8,
                                                           dtype=torch.float64),
                                          role="observed"),
                       offsets=obs.offsets, modulation=obs.modulation)
    with pytest.raises(ShapeError):
        combine(pred, bad)


def test_global_fusion_shapes():
    torch.manual_seed(8)
    gf = GlobalFusion(CFG)
    out = gf(FeatureMap(data=torch.randn(2, 6, 10, 10), role="fused"),
             cam_map())
    assert out.data.shape == (2, 6, 10, 10)
    assert out.role == "fused"
    wide = GlobalFusion(FusionConfig(lidar_channels=6, camera_channels=4,
                                     out_channels=9))
    out2 = wide(FeatureMap(data=torch.randn(2, 6, 10, 10), role="fused"),
                cam_map())
    assert out2.data.shape == (2, 9, 10, 10)
    with pytest.raises(ShapeError):
        gf(cam_map(), cam_map())
    with pytest.raises(ShapeError):
        gf(FeatureMap(data=torch.randn(2, 6, 8, 8), role="fused"), cam_map())


def test_fused_feature_recovers_stale_observation(trend):
    """After lag training, serving a one-frame-stale sweep should move the
    fused feature much less than it moves the raw observed feature."""
    run = trend(0)
    model = run["model_t"].eval()
    ds = trend.eval_ds
    drift_fused = drift_obs = 0.0
    with torch.no_grad():
        for i in ds.eval_indices(3):
            b0 = ds.make_batch([i], [0])
            b1 = ds.make_batch([i], [1])
            o0 = model(b0["hist"], b0["obs"], b0["cam"])
            o1 = model(b1["hist"], b1["obs"], b1["cam"])
            drift_fused += float(F.mse_loss(o1.f_f.data, o0.f_f.data))
            drift_obs += float(F.mse_loss(o1.f_o.data, o0.f_o.data))
    assert drift_fused < drift_obs
