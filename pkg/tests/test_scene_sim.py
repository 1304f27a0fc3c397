import math

import numpy as np
import pytest

from timealign import (CLASS_SIZE_PRIORS, ConfigError, LidarSensorModel,
                       SceneConfig, SceneState, ShapeError, build_frames,
                       generate_scene, load_nuscenes_style, render_camera_bev,
                       render_lidar, write_scene_dir)
from timealign.bev_encoder import BEVSpec
from timealign.scene_sim import SceneObject, advance_objects
from timealign.temporal_data import SE3Pose, compensate


def static_scene(num_frames=5, ego_moves=False, cls="car", yaw=0.3,
                 center=(3.0, -2.0)):
    """Hand-built scene with one motionless object."""
    l, w, h = CLASS_SIZE_PRIORS[cls]
    obj = SceneObject(center=np.array([center[0], center[1], h / 2.0]),
                      size=(l, w, h), yaw=yaw, velocity=np.zeros(2),
                      class_name=cls)
    poses = []
    for t in range(num_frames):
        if ego_moves:
            poses.append(SE3Pose.from_xy_yaw(0.8 * t, 0.2 * t, 0.05 * t))
        else:
            poses.append(SE3Pose.identity())
    return SceneState(
        scene_token="static",
        frame_period=0.5,
        area_extent=10.0,
        classes=(cls,),
        timestamps_us=[t * 500_000 for t in range(num_frames)],
        ego_poses=poses,
        objects_per_frame=[[obj.clone()] for _ in range(num_frames)],
    )


def test_scene_config_validation():
    with pytest.raises(ConfigError):
        SceneConfig(duration=3)
    with pytest.raises(ConfigError):
        SceneConfig(frame_period=0.0)
    with pytest.raises(ConfigError):
        SceneConfig(classes=("hovercraft",))
    with pytest.raises(ConfigError):
        SceneConfig(classes=())
    with pytest.raises(ConfigError):
        SceneConfig(speed_range={"car": (5.0, 2.0)})
    with pytest.raises(ConfigError):
        SceneConfig(num_objects=-1)


def test_generate_scene_deterministic():
    cfg = SceneConfig(num_objects=3, duration=6, seed=4)
    a = generate_scene(cfg, scene_token="tok")
    b = generate_scene(cfg, scene_token="tok")
    assert a.timestamps_us == b.timestamps_us
    for pa, pb in zip(a.ego_poses, b.ego_poses):
        assert np.array_equal(pa.matrix, pb.matrix)
    assert a.gt_boxes(3) == b.gt_boxes(3)
    c = generate_scene(SceneConfig(num_objects=3, duration=6, seed=5),
                       scene_token="tok")
    assert c.gt_boxes(3) != a.gt_boxes(3)


def test_generate_scene_layout():
    cfg = SceneConfig(num_objects=5, duration=8, frame_period=0.25, seed=1)
    scene = generate_scene(cfg)
    assert scene.num_frames == 8
    assert all(len(objs) == 5 for objs in scene.objects_per_frame)
    gaps = np.diff(scene.timestamps_us)
    assert np.all(gaps == 250_000)
    # ego starts at origin
    assert np.allclose(scene.ego_poses[0].translation, 0.0)


def test_constant_velocity_between_frames():
    # slow objects in a big arena: no boundary reflections
    cfg = SceneConfig(num_objects=4, area_extent=30.0, duration=6,
                      speed_range={c: (1.0, 2.0) for c in CLASS_SIZE_PRIORS},
                      seed=2)
    scene = generate_scene(cfg)
    dt = cfg.frame_period
    for k in range(scene.num_frames - 1):
        for a, b in zip(scene.objects_per_frame[k], scene.objects_per_frame[k + 1]):
            want = a.center[:2] + dt * a.velocity
            assert np.allclose(b.center[:2], want, atol=1e-12)
            assert np.array_equal(a.velocity, b.velocity)


def test_advance_objects_reflection():
    obj = SceneObject(center=np.array([9.5, 0.0, 0.8]), size=(4.0, 2.0, 1.6),
                      yaw=0.0, velocity=np.array([2.0, 0.5]), class_name="car")
    nxt = advance_objects([obj], dt=1.0, extent=10.0)[0]
    # unreflected x would be 11.5, mirrored about +10
    assert nxt.center[0] == pytest.approx(8.5)
    assert nxt.velocity[0] == -2.0
    assert nxt.center[1] == pytest.approx(0.5)
    assert nxt.yaw == pytest.approx(math.atan2(0.5, -2.0))


def test_gt_boxes_ego_frame():
    scene = static_scene(ego_moves=True)
    for t in range(scene.num_frames):
        boxes = scene.gt_boxes(t)
        assert len(boxes) == 1
        b = boxes[0]
        # mapping the ego-frame center back to world recovers the object
        world = scene.ego_poses[t].transform(
            np.array([[b.x, b.y, b.z]]))[0]
        assert np.allclose(world, [3.0, -2.0, 0.8], atol=1e-9)
        assert b.yaw == pytest.approx(0.3 - scene.ego_yaw(t))


def test_render_lidar_static_repeatable():
    scene = static_scene(ego_moves=False)
    sensor = LidarSensorModel(points_per_object=80, ground_points=0,
                              range_max=50.0)
    a = render_lidar(scene, 0, sensor, seed=3)
    b = render_lidar(scene, 3, sensor, seed=3)
    # static object + static ego: identical sweep, any frame
    assert np.array_equal(a.xyz, b.xyz)
    assert np.array_equal(a.intensity, b.intensity)


def test_render_lidar_in_ego_frame():
    scene = static_scene(ego_moves=True)
    sensor = LidarSensorModel(points_per_object=80, ground_points=0,
                              range_max=50.0)
    c0 = render_lidar(scene, 0, sensor, seed=3)
    c3 = render_lidar(scene, 3, sensor, seed=3)
    # same world surface, expressed in two ego frames
    w0 = scene.ego_poses[0].transform(c0.xyz)
    w3 = scene.ego_poses[3].transform(c3.xyz)
    assert np.allclose(w0, w3, atol=1e-9)
    # and motion compensation maps one to the other
    moved = compensate(c0, scene.ego_poses[0], scene.ego_poses[3])
    assert np.allclose(moved.xyz, c3.xyz, atol=1e-9)


def test_render_lidar_range_and_rings():
    scene = static_scene()
    sensor = LidarSensorModel(points_per_object=100, ground_points=200,
                              range_max=8.0)
    cloud = render_lidar(scene, 0, sensor, seed=0)
    assert len(cloud) > 0
    assert np.all(np.linalg.norm(cloud.xyz, axis=1) <= 8.0 + 1e-9)
    assert cloud.ring.dtype == np.int32
    assert cloud.ring.min() >= 0 and cloud.ring.max() <= 31


def test_render_lidar_empty():
    scene = static_scene()
    sensor = LidarSensorModel(points_per_object=0, ground_points=0)
    cloud = render_lidar(scene, 0, sensor, seed=0)
    assert len(cloud) == 0


def test_render_lidar_intensity_by_class():
    sensor = LidarSensorModel(points_per_object=200, ground_points=0)
    car = render_lidar(static_scene(cls="car"), 0, sensor, seed=0)
    ped = render_lidar(static_scene(cls="pedestrian"), 0, sensor, seed=0)
    assert car.intensity.mean() > ped.intensity.mean() + 0.1


def test_render_lidar_dropout():
    scene = static_scene()
    full = render_lidar(scene, 0, LidarSensorModel(points_per_object=300,
                                                   ground_points=300), seed=1)
    half = render_lidar(scene, 0, LidarSensorModel(points_per_object=300,
                                                   ground_points=300,
                                                   dropout_prob=0.5), seed=1)
    assert 0.35 * len(full) < len(half) < 0.65 * len(full)


def test_sensor_validation():
    with pytest.raises(ConfigError):
        LidarSensorModel(noise_sigma=-0.1)
    with pytest.raises(ConfigError):
        LidarSensorModel(dropout_prob=1.5)
    with pytest.raises(ConfigError):
        LidarSensorModel(range_max=0.0)


# ---------------------------------------------------------------------------
# camera reference maps


def test_camera_map_shape_and_peak():
    spec = BEVSpec.square(8.0, 0.5)  # 32 x 32
    scene = static_scene(center=(2.0, -3.0))
    fmap = render_camera_bev(scene, 0, spec, channels=6, seed=0,
                             noise_sigma=0.0, center_jitter=0.0)
    assert fmap.data.shape == (6, 32, 32)
    assert fmap.data.dtype == np.float32
    assert fmap.role == "camera"
    total = fmap.data.sum(axis=0)
    iy, ix = np.unravel_index(np.argmax(total), total.shape)
    cx, cy = spec.cell_coords(2.0, -3.0)
    assert abs(ix - cx) <= 1.0 and abs(iy - cy) <= 1.0


def test_camera_channels_share_footprint():
    # single object: each channel is a scalar multiple of the blob
    spec = BEVSpec.square(8.0, 0.5)
    scene = static_scene(center=(1.0, 1.0))
    fmap = render_camera_bev(scene, 0, spec, channels=4, seed=0,
                             noise_sigma=0.0).data.astype(np.float64)
    ref = fmap[0]
    mask = ref > 1e-5
    assert mask.sum() > 4
    for c in range(1, 4):
        ratio = fmap[c][mask] / ref[mask]
        assert np.allclose(ratio, ratio.mean(), atol=1e-4)


def test_camera_jitter_moves_blob():
    spec = BEVSpec.square(8.0, 0.5)
    scene = static_scene(center=(2.0, -3.0))
    a = render_camera_bev(scene, 0, spec, channels=2, seed=0, noise_sigma=0.0,
                          center_jitter=0.0)
    b = render_camera_bev(scene, 0, spec, channels=2, seed=0, noise_sigma=0.0,
                          center_jitter=2.0)
    assert not np.array_equal(a.data, b.data)


def test_camera_noise_and_errors():
    spec = BEVSpec.square(8.0, 0.5)
    scene = static_scene()
    noisy = render_camera_bev(scene, 0, spec, channels=2, seed=0,
                              noise_sigma=0.1)
    assert (noisy.data < 0).any()  # additive noise goes below zero
    with pytest.raises(ShapeError):
        render_camera_bev(scene, 0, spec, channels=0, seed=0)


# ---------------------------------------------------------------------------
# scene serialization


def test_scene_json_roundtrip():
    scene = generate_scene(SceneConfig(num_objects=3, duration=5, seed=8))
    doc = scene.to_json()
    back = SceneState.from_json(doc)
    assert back.scene_token == scene.scene_token
    assert back.timestamps_us == scene.timestamps_us
    for t in range(scene.num_frames):
        for a, b in zip(scene.gt_boxes(t), back.gt_boxes(t)):
            assert a.class_name == b.class_name
            assert np.allclose([a.x, a.y, a.z, a.length, a.width, a.height],
                               [b.x, b.y, b.z, b.length, b.width, b.height],
                               atol=1e-12)
            assert math.isclose(math.cos(a.yaw), math.cos(b.yaw), abs_tol=1e-12)
        for a, b in zip(scene.objects_per_frame[t], back.objects_per_frame[t]):
            assert np.allclose(a.velocity, b.velocity)


def test_scene_json_missing_key():
    doc = generate_scene(SceneConfig(duration=4, seed=0)).to_json()
    del doc["velocities"]
    from timealign import DataError
    with pytest.raises(DataError):
        SceneState.from_json(doc)


def test_write_scene_dir_roundtrip(tmp_path):
    scene = generate_scene(SceneConfig(num_objects=2, duration=5, seed=3),
                           scene_token="sa")
    sensor = LidarSensorModel(points_per_object=50, ground_points=30)
    write_scene_dir(scene, sensor, tmp_path, seed=3)
    frames = load_nuscenes_style(tmp_path)
    assert len(frames) == 5
    rendered = build_frames(scene, sensor, seed=3)
    for got, want in zip(frames, rendered):
        f32 = want.cloud.xyz.astype(np.float32).astype(np.float64)
        assert np.array_equal(got.cloud.xyz, f32)
        assert np.array_equal(got.ego_pose.matrix, want.ego_pose.matrix)


def test_write_scene_dir_appends(tmp_path):
    sensor = LidarSensorModel(points_per_object=20, ground_points=10)
    for tok, seed in (("sa", 1), ("sb", 2)):
        scene = generate_scene(SceneConfig(num_objects=1, duration=4, seed=seed),
                               scene_token=tok)
        write_scene_dir(scene, sensor, tmp_path, seed=seed)
    frames = load_nuscenes_style(tmp_path)
    assert len(frames) == 8
    assert {f.scene_token for f in frames} == {"sa", "sb"}
    import json
    docs = json.loads((tmp_path / "scenes.json").read_text())
    assert [d["scene_token"] for d in docs] == ["sa", "sb"]
