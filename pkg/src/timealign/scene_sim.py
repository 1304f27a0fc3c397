"""Deterministic synthetic driving-world generator.

Produces moving boxes on a flat ground plane, an ego trajectory, simulated
LiDAR sweeps (surface + ground samples with noise/dropout/range limits) and
a camera-derived BEV feature proxy (ground-truth footprint rasterization
with noise). Everything is a pure function of (inputs, seed): per-concern
RNG streams are derived by hashing (purpose, seed, scene, frame), so
parallel generation order can never change results.

Conventions: world frame is fixed, ego pose maps ego -> world, object
surface patterns are object-intrinsic (identical across frames for a static
object), and object intensity carries a front-to-back gradient so heading is
observable from a single sweep.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bev_encoder import BEVSpec, FeatureMap
from .boxes import Box3D, wrap_angle
from .errors import ConfigError, DataError, ShapeError
from .temporal_data import (FrameRecord, PointCloud, SE3Pose, save_point_file,
                            stable_seed)

__all__ = [
    "CLASS_SIZE_PRIORS",
    "DEFAULT_SPEED_RANGES",
    "SceneConfig",
    "SceneObject",
    "SceneState",
    "LidarSensorModel",
    "generate_scene",
    "advance_objects",
    "render_lidar",
    "render_camera_bev",
    "build_frames",
    "write_scene_dir",
]

# nominal metric footprints (length, width, height)
CLASS_SIZE_PRIORS = {
    "car": (4.5, 1.9, 1.6),
    "truck": (7.0, 2.5, 2.8),
    "bus": (11.0, 2.9, 3.2),
    "pedestrian": (0.7, 0.7, 1.7),
}

# narrow per-class speed bands: class identity then carries most of the
# speed information, heading carries the rest
DEFAULT_SPEED_RANGES = {
    "car": (4.5, 6.5),
    "truck": (3.5, 5.5),
    "bus": (4.0, 6.0),
    "pedestrian": (0.8, 1.6),
}

_CLASS_BASE_INTENSITY = {
    "car": 0.55,
    "truck": 0.72,
    "bus": 0.42,
    "pedestrian": 0.28,
}


@dataclass(frozen=True)
class SceneConfig:
    num_objects: int = 4
    classes: tuple[str, ...] = ("car", "truck", "bus", "pedestrian")
    area_extent: float = 20.0       # objects live in the square [-E, E]^2
    duration: int = 12              # frames
    frame_period: float = 0.5      # seconds between frames
    speed_range: dict | None = None  # per-class (lo, hi) m/s overrides
    seed: int = 0

    def __post_init__(self) -> None:
        if self.duration < 4:
            raise ConfigError(f"duration must be >= 4, got {self.duration}")
        if self.frame_period <= 0:
            raise ConfigError(f"frame_period must be > 0, got {self.frame_period}")
        if self.num_objects < 0:
            raise ConfigError(f"num_objects must be >= 0, got {self.num_objects}")
        if self.area_extent <= 0:
            raise ConfigError(f"area_extent must be > 0, got {self.area_extent}")
        if not self.classes:
            raise ConfigError("classes must be non-empty")
        for c in self.classes:
            if c not in CLASS_SIZE_PRIORS:
                raise ConfigError(f"unknown class {c!r}; known: {sorted(CLASS_SIZE_PRIORS)}")
        for c, rng in self.speeds().items():
            lo, hi = rng
            if lo < 0 or hi < lo:
                raise ConfigError(f"bad speed range for {c}: {rng}")

    def speeds(self) -> dict:
        merged = dict(DEFAULT_SPEED_RANGES)
        if self.speed_range:
            merged.update({k: tuple(v) for k, v in self.speed_range.items()})
        return merged


@dataclass(eq=False)
class SceneObject:
    center: np.ndarray        # (3,) world, z = height/2
    size: tuple[float, float, float]  # l, w, h
    yaw: float                 # world heading
    velocity: np.ndarray      # (2,) world m/s
    class_name: str

    def clone(self) -> "SceneObject":
        return SceneObject(center=self.center.copy(), size=self.size, yaw=self.yaw,
                           velocity=self.velocity.copy(), class_name=self.class_name)

    def box(self) -> Box3D:
        l, w, h = self.size
        return Box3D(x=float(self.center[0]), y=float(self.center[1]),
                     z=float(self.center[2]), length=l, width=w, height=h,
                     yaw=wrap_angle(self.yaw), class_name=self.class_name)


@dataclass(eq=False)
class LidarSensorModel:
    points_per_object: int = 120
    ground_points: int = 256
    range_max: float = 60.0
    noise_sigma: float = 0.0
    dropout_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not (0.0 <= self.dropout_prob <= 1.0):
            raise ConfigError(f"dropout_prob must be in [0,1], got {self.dropout_prob}")
        if self.points_per_object < 0 or self.ground_points < 0:
            raise ConfigError("point counts must be >= 0")
        if self.range_max <= 0:
            raise ConfigError(f"range_max must be > 0, got {self.range_max}")


@dataclass(eq=False)
class SceneState:
    scene_token: str
    frame_period: float
    area_extent: float
    classes: tuple[str, ...]
    timestamps_us: list[int]
    ego_poses: list[SE3Pose]
    objects_per_frame: list[list[SceneObject]]

    @property
    def num_frames(self) -> int:
        return len(self.timestamps_us)

    def _check_frame(self, frame: int) -> None:
        if not (0 <= frame < self.num_frames):
            raise IndexError(f"frame {frame} outside 0..{self.num_frames - 1}")

    def ego_yaw(self, frame: int) -> float:
        m = self.ego_poses[frame].matrix
        return math.atan2(m[1, 0], m[0, 0])

    def gt_boxes(self, frame: int) -> list[Box3D]:
        """Ground-truth boxes in the ego frame of ``frame``."""
        self._check_frame(frame)
        inv = self.ego_poses[frame].inverse()
        yaw0 = self.ego_yaw(frame)
        boxes = []
        for obj in self.objects_per_frame[frame]:
            c = inv.transform(obj.center.reshape(1, 3))[0]
            l, w, h = obj.size
            boxes.append(Box3D(x=float(c[0]), y=float(c[1]), z=float(c[2]),
                               length=l, width=w, height=h,
                               yaw=wrap_angle(obj.yaw - yaw0),
                               class_name=obj.class_name))
        return boxes

    def to_json(self) -> dict:
        return {
            "scene_token": self.scene_token,
            "frame_period": self.frame_period,
            "area_extent": self.area_extent,
            "classes": list(self.classes),
            "timestamps_us": list(self.timestamps_us),
            "ego_poses": [[[float(v) for v in row] for row in p.matrix]
                          for p in self.ego_poses],
            "frames": [[obj.box().as_record() for obj in objs]
                       for objs in self.objects_per_frame],
            "velocities": [[[float(obj.velocity[0]), float(obj.velocity[1])]
                            for obj in objs]
                           for objs in self.objects_per_frame],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SceneState":
        try:
            frames = []
            for recs, vels in zip(doc["frames"], doc["velocities"]):
                objs = []
                for rec, vel in zip(recs, vels):
                    b = Box3D.from_record(rec)
                    objs.append(SceneObject(
                        center=np.array([b.x, b.y, b.z]),
                        size=(b.length, b.width, b.height),
                        yaw=b.yaw,
                        velocity=np.asarray(vel, dtype=np.float64),
                        class_name=b.class_name,
                    ))
                frames.append(objs)
            return cls(
                scene_token=str(doc["scene_token"]),
                frame_period=float(doc["frame_period"]),
                area_extent=float(doc["area_extent"]),
                classes=tuple(doc["classes"]),
                timestamps_us=[int(t) for t in doc["timestamps_us"]],
                ego_poses=[SE3Pose(np.asarray(m, dtype=np.float64))
                           for m in doc["ego_poses"]],
                objects_per_frame=frames,
            )
        except KeyError as exc:
            raise DataError(f"scene document missing key {exc}") from exc


def advance_objects(objects: list[SceneObject], dt: float,
                    extent: float) -> list[SceneObject]:
    """One constant-velocity step; at |x| or |y| > extent the object reflects
    (position mirrored about the boundary, velocity component flipped, yaw
    re-aligned to the new heading)."""
    out = []
    for obj in objects:
        nxt = obj.clone()
        nxt.center[0] += obj.velocity[0] * dt
        nxt.center[1] += obj.velocity[1] * dt
        for axis in (0, 1):
            c = nxt.center[axis]
            if c > extent:
                nxt.center[axis] = 2.0 * extent - c
                nxt.velocity[axis] = -nxt.velocity[axis]
            elif c < -extent:
                nxt.center[axis] = -2.0 * extent - c
                nxt.velocity[axis] = -nxt.velocity[axis]
        speed = float(np.hypot(nxt.velocity[0], nxt.velocity[1]))
        if speed > 1e-9:
            nxt.yaw = math.atan2(nxt.velocity[1], nxt.velocity[0])
        out.append(nxt)
    return out


def generate_scene(config: SceneConfig, scene_token: str | None = None,
                   start_time_us: int = 0) -> SceneState:
    """Roll a scene forward for ``config.duration`` frames.

    Deterministic given (config.seed, scene_token). Objects spawn in the
    central half of the area with class-dependent speeds and yaw aligned to
    velocity; the ego drives a gentle arc from the origin.
    """
    token = scene_token if scene_token is not None else f"scene-{config.seed:04d}"
    rng = np.random.default_rng(stable_seed("scene", config.seed, token))
    speeds = config.speeds()

    ego_speed = rng.uniform(2.0, 4.0)
    ego_yaw_rate = rng.uniform(-0.05, 0.05)  # rad/s

    objects = []
    for _ in range(config.num_objects):
        cls = config.classes[int(rng.integers(len(config.classes)))]
        l0, w0, h0 = CLASS_SIZE_PRIORS[cls]
        l = l0 * rng.uniform(0.95, 1.05)
        w = w0 * rng.uniform(0.95, 1.05)
        # keep a clear bubble around the ego start
        for _ in range(100):
            pos = rng.uniform(-0.5 * config.area_extent, 0.5 * config.area_extent, size=2)
            if np.hypot(pos[0], pos[1]) > 6.0:
                break
        lo, hi = speeds[cls]
        speed = rng.uniform(lo, hi)
        heading = rng.uniform(0.0, 2.0 * math.pi)
        vel = np.array([speed * math.cos(heading), speed * math.sin(heading)])
        objects.append(SceneObject(
            center=np.array([pos[0], pos[1], h0 / 2.0]),
            size=(float(l), float(w), float(h0)),
            yaw=heading if speed > 1e-9 else 0.0,
            velocity=vel,
            class_name=cls,
        ))

    dt = config.frame_period
    timestamps = []
    poses = []
    frames = []
    ego_xy = np.zeros(2)
    for k in range(config.duration):
        yaw = ego_yaw_rate * dt * k
        poses.append(SE3Pose.from_xy_yaw(float(ego_xy[0]), float(ego_xy[1]), yaw))
        timestamps.append(start_time_us + int(round(k * dt * 1e6)))
        frames.append([obj.clone() for obj in objects])
        ego_xy = ego_xy + ego_speed * dt * np.array([math.cos(yaw), math.sin(yaw)])
        objects = advance_objects(objects, dt, config.area_extent)

    return SceneState(
        scene_token=token,
        frame_period=config.frame_period,
        area_extent=config.area_extent,
        classes=config.classes,
        timestamps_us=timestamps,
        ego_poses=poses,
        objects_per_frame=frames,
    )


def _surface_samples(obj: SceneObject, n: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample n points on the box surface (4 sides + top, area-weighted), in
    the object's local frame, plus intensities with a front-to-back gradient."""
    l, w, h = obj.size
    areas = np.array([w * h, w * h, l * h, l * h, l * w])  # +x, -x, +y, -y, top
    probs = areas / areas.sum()
    faces = rng.choice(5, size=n, p=probs)
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.empty((n, 3))
    # +x / -x faces: fixed x, free (y, z)
    for fid, sign in ((0, 1.0), (1, -1.0)):
        m = faces == fid
        pts[m, 0] = sign * l / 2.0
        pts[m, 1] = u[m] * w
        pts[m, 2] = (v[m] + 0.5) * h - h / 2.0
    for fid, sign in ((2, 1.0), (3, -1.0)):
        m = faces == fid
        pts[m, 0] = u[m] * l
        pts[m, 1] = sign * w / 2.0
        pts[m, 2] = (v[m] + 0.5) * h - h / 2.0
    m = faces == 4
    pts[m, 0] = u[m] * l
    pts[m, 1] = v[m] * w
    pts[m, 2] = h / 2.0

    base = _CLASS_BASE_INTENSITY[obj.class_name]
    gradient = 0.22 * (pts[:, 0] / (l / 2.0))  # brighter toward the front (+x)
    jitter = rng.uniform(-0.03, 0.03, size=n)
    inten = np.clip(base + gradient + jitter, 0.02, 0.98)
    return pts, inten


def render_lidar(scene: SceneState, frame: int, sensor: LidarSensorModel,
                 seed: int = 0) -> PointCloud:
    """Simulate one sweep, expressed in the ego frame of ``frame``.

    Object surface patterns (and their intensity jitter) are derived from
    (scene_token, object index) only, so a static object returns identical
    points in every frame; sensor effects (ground resampling, Gaussian
    noise, dropout) come from a per-(seed, frame) stream.
    """
    scene._check_frame(frame)
    pose = scene.ego_poses[frame]
    inv = pose.inverse()
    frame_rng = np.random.default_rng(
        stable_seed("lidar", seed, scene.scene_token, frame))

    world_pts = []
    intens = []
    for oi, obj in enumerate(scene.objects_per_frame[frame]):
        if sensor.points_per_object == 0:
            break
        srng = np.random.default_rng(stable_seed("surface", scene.scene_token, oi))
        local, inten = _surface_samples(obj, sensor.points_per_object, srng)
        c, s = math.cos(obj.yaw), math.sin(obj.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        world_pts.append(local @ rot.T + obj.center)
        intens.append(inten)

    if sensor.ground_points > 0:
        # ground disk around the ego, on the z=0 plane
        r = np.sqrt(frame_rng.uniform(0.0, 1.0, sensor.ground_points)) * sensor.range_max * 0.95
        th = frame_rng.uniform(0.0, 2.0 * math.pi, sensor.ground_points)
        gx = pose.translation[0] + r * np.cos(th)
        gy = pose.translation[1] + r * np.sin(th)
        ground = np.stack([gx, gy, np.zeros_like(gx)], axis=1)
        world_pts.append(ground)
        intens.append(frame_rng.uniform(0.05, 0.3, sensor.ground_points))

    if not world_pts:
        return PointCloud.empty()

    world = np.concatenate(world_pts)
    inten = np.concatenate(intens)
    ego = inv.transform(world)
    if sensor.noise_sigma > 0:
        ego = ego + frame_rng.normal(0.0, sensor.noise_sigma, ego.shape)
    if sensor.dropout_prob > 0:
        keep = frame_rng.uniform(size=len(ego)) >= sensor.dropout_prob
        ego, inten = ego[keep], inten[keep]
    rng_mask = np.linalg.norm(ego, axis=1) <= sensor.range_max
    ego, inten = ego[rng_mask], inten[rng_mask]
    ring = np.clip((np.linalg.norm(ego[:, :2], axis=1) / sensor.range_max) * 32,
                   0, 31).astype(np.int32)
    return PointCloud(xyz=ego, intensity=np.clip(inten, 0.0, 1.0), ring=ring)


def _class_signature(class_name: str, channels: int) -> np.ndarray:
    rng = np.random.default_rng(stable_seed("camera-signature", class_name, channels))
    v = 0.25 + 0.75 * rng.uniform(size=channels)
    return v / v.max()


def render_camera_bev(scene: SceneState, frame: int, spec: BEVSpec,
                      channels: int, seed: int = 0,
                      noise_sigma: float = 0.05,
                      center_jitter: float = 0.0) -> FeatureMap:
    """Rasterize the true object configuration at ``frame`` into a
    channels x H x W map: one Gaussian blob per object with a class-dependent
    channel mixture, plus additive noise. Stands in for a temporally correct
    camera-derived BEV reference.

    ``center_jitter`` (cells) displaces each blob center by a per-object,
    per-frame Gaussian draw: camera-derived BEV features localize objects far
    more coarsely than LiDAR does, and without this the synthetic camera map
    would be an implausibly precise position oracle."""
    scene._check_frame(frame)
    if channels < 1:
        raise ShapeError(f"channels must be >= 1, got {channels}")
    H, W = spec.H, spec.W
    fmap = np.zeros((channels, H, W), dtype=np.float64)
    rng = np.random.default_rng(stable_seed("camera", seed, scene.scene_token, frame))
    inv = scene.ego_poses[frame].inverse()

    for obj in scene.objects_per_frame[frame]:
        amp = rng.uniform(0.75, 1.25)
        c = inv.transform(obj.center.reshape(1, 3))[0]
        cx, cy = spec.cell_coords(c[0], c[1])
        cx, cy = float(cx), float(cy)
        if center_jitter > 0:
            cx += center_jitter * rng.standard_normal()
            cy += center_jitter * rng.standard_normal()
        l, w, _ = obj.size
        sigma = max(0.8, 0.25 * math.sqrt(l * w) / spec.resolution)
        rad = int(math.ceil(3.0 * sigma))
        x0, x1 = max(0, int(math.floor(cx)) - rad), min(W - 1, int(math.ceil(cx)) + rad)
        y0, y1 = max(0, int(math.floor(cy)) - rad), min(H - 1, int(math.ceil(cy)) + rad)
        if x1 < 0 or y1 < 0 or x0 > W - 1 or y0 > H - 1 or x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma ** 2))
        sig = _class_signature(obj.class_name, channels)
        fmap[:, y0:y1 + 1, x0:x1 + 1] += amp * sig[:, None, None] * blob[None]

    if noise_sigma > 0:
        fmap += rng.normal(0.0, noise_sigma, fmap.shape)
    return FeatureMap(data=fmap.astype(np.float32), role="camera")


def build_frames(scene: SceneState, sensor: LidarSensorModel,
                 seed: int = 0) -> list[FrameRecord]:
    """Render every frame of a scene into FrameRecords (ego-frame clouds)."""
    return [
        FrameRecord(
            index=k,
            timestamp_us=scene.timestamps_us[k],
            ego_pose=scene.ego_poses[k],
            cloud=render_lidar(scene, k, sensor, seed),
            scene_token=scene.scene_token,
        )
        for k in range(scene.num_frames)
    ]


def write_scene_dir(scene: SceneState, sensor: LidarSensorModel, out_dir,
                    seed: int = 0) -> Path:
    """Write a scene as point files + poses.json manifest + scene.json labels."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for rec in build_frames(scene, sensor, seed):
        fname = f"{scene.scene_token}_{rec.index:04d}.bin"
        save_point_file(out / fname, rec.cloud)
        manifest.append({
            "file": fname,
            "timestamp_us": rec.timestamp_us,
            "scene_token": scene.scene_token,
            "ego_pose": rec.ego_pose.to_list(),
        })
    mpath = out / "poses.json"
    existing = json.loads(mpath.read_text()) if mpath.exists() else []
    mpath.write_text(json.dumps(existing + manifest, indent=1))

    spath = out / "scenes.json"
    docs = json.loads(spath.read_text()) if spath.exists() else []
    docs.append(scene.to_json())
    spath.write_text(json.dumps(docs, indent=1))
    return out
