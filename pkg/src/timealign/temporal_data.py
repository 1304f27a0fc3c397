"""Temporal sensor-frame plumbing.

Responsibilities gathered here:

* rigid SE(3) poses and motion compensation between ego frames,
* point cloud container + the flat binary point-file format
  (little-endian float32 records of x, y, z, intensity, ring),
* a ``poses.json`` manifest loader for directories of such files,
* lag injection (serving a stale frame with probability alpha) and
  assembly of fixed-length, motion-compensated history windows.

History windows are always exactly ``HISTORY_LEN`` frames ordered
earliest -> latest; frames earlier than the scene start are padded by
repeating the current frame.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

__all__ = [
    "HISTORY_LEN",
    "POINT_RECORD_BYTES",
    "SE3Pose",
    "PointCloud",
    "FrameRecord",
    "LagConfig",
    "TemporalSample",
    "stable_seed",
    "compensate",
    "inject_lag",
    "assemble_history",
    "save_point_file",
    "load_point_file",
    "load_pose_manifest",
    "load_nuscenes_style",
    "group_by_scene",
    "build_sample",
]

HISTORY_LEN = 3
POINT_RECORD_BYTES = 20  # five little-endian float32 per point


def stable_seed(*parts) -> int:
    """Derive a 64-bit seed from string-able parts, stable across runs.

    Python's builtin hash is salted per process; this one is not, so any
    (seed, scene, frame) tuple maps to the same RNG stream everywhere.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# poses


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transform taking sensor-frame coordinates to world coordinates."""

    matrix: np.ndarray  # 4x4 float64, row-major

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise DataError(f"pose matrix must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise DataError("pose matrix has non-finite entries")
        r = m[:3, :3]
        if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-9:
            raise DataError("pose rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise DataError("pose rotation is a reflection")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise DataError("pose bottom row must be (0, 0, 0, 1)")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(4))

    @classmethod
    def from_xy_yaw(cls, x: float, y: float, yaw: float, z: float = 0.0) -> "SE3Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        m = np.eye(4)
        m[0, 0], m[0, 1] = c, -s
        m[1, 0], m[1, 1] = s, c
        m[:3, 3] = (x, y, z)
        return cls(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "SE3Pose":
        r, t = self.rotation, self.translation
        m = np.eye(4)
        m[:3, :3] = r.T
        m[:3, 3] = -r.T @ t
        return SE3Pose(m)

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        return SE3Pose(self.matrix @ other.matrix)

    def transform(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise DataError(f"expected (N, 3) points, got {xyz.shape}")
        return xyz @ self.rotation.T + self.translation

    def to_list(self) -> list:
        """Flatten to 16 row-major floats (the manifest representation)."""
        return [float(v) for v in self.matrix.reshape(-1)]

    @classmethod
    def from_list(cls, values) -> "SE3Pose":
        """Accept 16 row-major floats or a nested 4x4 list."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape == (16,):
            arr = arr.reshape(4, 4)
        return cls(arr)


# ---------------------------------------------------------------------------
# point clouds


@dataclass(eq=False)
class PointCloud:
    """Points in the capturing sensor's frame, intensity normalized to [0, 1]."""

    xyz: np.ndarray                 # (N, 3) float64
    intensity: np.ndarray           # (N,) float64
    ring: np.ndarray | None = None  # (N,) int32, optional beam index

    def __post_init__(self) -> None:
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if self.intensity.shape[0] != self.xyz.shape[0]:
            raise DataError(
                f"intensity length {self.intensity.shape[0]} != point count {self.xyz.shape[0]}"
            )
        if not np.all(np.isfinite(self.xyz)) or not np.all(np.isfinite(self.intensity)):
            raise DataError("point cloud has non-finite values")
        if self.xyz.shape[0] and (self.intensity.min() < 0.0 or self.intensity.max() > 1.0):
            raise DataError("intensity must lie in [0, 1] after ingestion")
        if self.ring is not None:
            self.ring = np.asarray(self.ring, dtype=np.int32).reshape(-1)
            if self.ring.shape[0] != self.xyz.shape[0]:
                raise DataError("ring length does not match point count")

    def __len__(self) -> int:
        return int(self.xyz.shape[0])

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        return PointCloud(xyz=xyz, intensity=self.intensity.copy(),
                          ring=None if self.ring is None else self.ring.copy())

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(xyz=np.zeros((0, 3)), intensity=np.zeros((0,)))


def normalize_intensity(raw: np.ndarray) -> np.ndarray:
    """Map raw intensity to [0, 1]; 8-bit style files (values > 1) divide by 255."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size and raw.max() > 1.0:
        raw = raw / 255.0
    return np.clip(raw, 0.0, 1.0)


def save_point_file(path, cloud: PointCloud) -> None:
    """Write a flat binary point file: per point five little-endian float32
    (x, y, z, intensity, ring). Missing ring writes zeros."""
    n = len(cloud)
    ring = cloud.ring if cloud.ring is not None else np.zeros(n, dtype=np.int32)
    rec = np.empty((n, 5), dtype="<f4")
    rec[:, :3] = cloud.xyz
    rec[:, 3] = cloud.intensity
    rec[:, 4] = ring
    Path(path).write_bytes(rec.tobytes())


def load_point_file(path) -> PointCloud:
    """Read the flat binary format written by :func:`save_point_file`."""
    raw = Path(path).read_bytes()
    if len(raw) % POINT_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of {POINT_RECORD_BYTES}"
        )
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 5).astype(np.float64)
    if not np.all(np.isfinite(rec)):
        raise FormatError(f"{path}: non-finite values in point records")
    return PointCloud(
        xyz=rec[:, :3],
        intensity=normalize_intensity(rec[:, 3]),
        ring=rec[:, 4].astype(np.int32),
    )


# ---------------------------------------------------------------------------
# frames and manifests


@dataclass(eq=False)
class FrameRecord:
    """One sensor sweep: points in the ego frame at capture time, plus that pose."""

    index: int
    timestamp_us: int
    ego_pose: SE3Pose  # ego -> world at capture time
    cloud: PointCloud
    scene_token: str = ""

    def __post_init__(self) -> None:
        if self.index < 0:
            raise DataError(f"frame index must be >= 0, got {self.index}")


def load_pose_manifest(path) -> list[dict]:
    """Parse a poses.json manifest: a list of
    {"file", "timestamp_us", "scene_token", "ego_pose": 16 row-major floats}."""
    try:
        entries = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(entries, list) or not entries:
        raise FormatError(f"{path}: manifest must be a non-empty list")
    for i, e in enumerate(entries):
        for key in ("file", "timestamp_us", "scene_token", "ego_pose"):
            if key not in e:
                raise FormatError(f"{path}: entry {i} missing key {key!r}")
    return entries


def load_nuscenes_style(root) -> list[FrameRecord]:
    """Load a directory of .bin point files described by its poses.json manifest.

    Records come back grouped by scene token and sorted by timestamp within
    each scene, with frame indices renumbered 0..N-1 per scene. Clouds are
    parsed bit-exactly from the float32 records (only intensity is
    normalized to [0, 1]).
    """
    root = Path(root)
    manifest = load_pose_manifest(root / "poses.json")
    entries = sorted(manifest, key=lambda e: (str(e["scene_token"]), int(e["timestamp_us"])))
    frames = []
    idx = 0
    prev_scene = None
    for e in entries:
        scene = str(e["scene_token"])
        if scene != prev_scene:
            idx = 0
            prev_scene = scene
        pf = root / e["file"]
        if not pf.exists():
            raise DataError(f"manifest references missing point file {pf}")
        frames.append(FrameRecord(
            index=idx,
            timestamp_us=int(e["timestamp_us"]),
            ego_pose=SE3Pose.from_list(e["ego_pose"]),
            cloud=load_point_file(pf),
            scene_token=scene,
        ))
        idx += 1
    keys = [(f.scene_token, f.timestamp_us) for f in frames]
    if len(set(keys)) != len(keys):
        raise DataError("duplicate (scene, timestamp) in manifest")
    return frames


def group_by_scene(frames: list[FrameRecord]) -> dict[str, list[FrameRecord]]:
    scenes: dict[str, list[FrameRecord]] = {}
    for f in frames:
        scenes.setdefault(f.scene_token, []).append(f)
    for seq in scenes.values():
        seq.sort(key=lambda f: f.timestamp_us)
    return scenes


# ---------------------------------------------------------------------------
# motion compensation, lag, history


def compensate(cloud: PointCloud, src_pose: SE3Pose, dst_pose: SE3Pose) -> PointCloud:
    """Re-express points captured at ``src_pose`` in the ego frame of ``dst_pose``."""
    rel = dst_pose.inverse().compose(src_pose)
    return cloud.with_xyz(rel.transform(cloud.xyz))


@dataclass(frozen=True)
class LagConfig:
    """How stale observations are produced.

    In ``train-random`` mode each sample lags with probability ``alpha``;
    the lag length is drawn from ``lag_weights`` over 1..max_lag (uniform by
    default) and then clamped to min(k, t) so the scene start is never
    crossed. ``eval-fixed`` always applies ``fixed_lag`` (same clamp).
    """

    alpha: float = 0.0
    max_lag: int = 1
    lag_weights: tuple[float, ...] | None = None
    mode: str = "train-random"
    fixed_lag: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("train-random", "eval-fixed"):
            raise ConfigError(f"unknown lag mode {self.mode!r}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.max_lag not in (1, 2, 3):
            raise ConfigError(f"max_lag must be 1, 2 or 3, got {self.max_lag}")
        if self.fixed_lag < 0:
            raise ConfigError(f"fixed_lag must be >= 0, got {self.fixed_lag}")
        if self.lag_weights is not None:
            w = tuple(float(v) for v in self.lag_weights)
            if len(w) != self.max_lag:
                raise ConfigError(
                    f"need {self.max_lag} lag weights, got {len(w)}"
                )
            if any(v < 0 for v in w) or abs(sum(w) - 1.0) > 1e-9:
                raise ConfigError("lag weights must be nonnegative and sum to 1")
            object.__setattr__(self, "lag_weights", w)

    @classmethod
    def train(cls, alpha: float, max_lag: int = 1,
              lag_weights: tuple[float, ...] | None = None) -> "LagConfig":
        return cls(alpha=alpha, max_lag=max_lag, lag_weights=lag_weights,
                   mode="train-random")

    @classmethod
    def fixed(cls, lag: int) -> "LagConfig":
        return cls(mode="eval-fixed", fixed_lag=lag)

    def sample_lag(self, rng: np.random.Generator, t: int) -> int:
        if self.mode == "eval-fixed":
            return min(self.fixed_lag, t)
        if rng.uniform() >= self.alpha:
            return 0
        if self.lag_weights is None:
            k = int(rng.integers(1, self.max_lag + 1))
        else:
            k = int(rng.choice(np.arange(1, self.max_lag + 1), p=self.lag_weights))
        return min(k, t)


def inject_lag(frames: list[FrameRecord], t: int, cfg: LagConfig,
               rng: np.random.Generator) -> tuple[PointCloud, int]:
    """Serve the observation for frame ``t``: either frame t itself (lag 0)
    or a stale frame t-k motion-compensated into frame t's ego frame.

    Returns (observed cloud, applied lag). Lag 0 returns frame t's cloud
    object itself, so ``lag == 0`` iff the observation is the live frame.
    """
    if not frames:
        raise DataError("empty frame list")
    if not (0 <= t < len(frames)):
        raise IndexError(f"frame {t} outside 0..{len(frames) - 1}")
    k = cfg.sample_lag(rng, t)
    if k == 0:
        return frames[t].cloud, 0
    src = frames[t - k]
    obs = compensate(src.cloud, src.ego_pose, frames[t].ego_pose)
    return obs, k


def assemble_history(frames: list[FrameRecord], t: int) -> list[PointCloud]:
    """Build the 3-frame history window preceding frame ``t``.

    Result covers frames t-3, t-2, t-1 (earliest first), each
    motion-compensated into frame t's ego frame. Slots with index < 0 are
    filled with a copy of the current frame t, which is already expressed in
    its own ego frame; real frames keep their temporal position. So t=0
    yields [f0, f0, f0] and t=1 yields [f1, f1, f0-compensated].
    """
    if not frames:
        raise DataError("empty frame list")
    if not (0 <= t < len(frames)):
        raise IndexError(f"frame {t} outside 0..{len(frames) - 1}")
    dst = frames[t].ego_pose
    out = []
    for back in range(HISTORY_LEN, 0, -1):
        j = t - back
        if j < 0:
            cur = frames[t].cloud
            out.append(cur.with_xyz(cur.xyz.copy()))
        else:
            out.append(compensate(frames[j].cloud, frames[j].ego_pose, dst))
    return out


@dataclass(eq=False)
class TemporalSample:
    """One training/eval sample for a scene position t.

    ``history`` holds the three preceding frames (t-3, t-2, t-1, earliest
    first) compensated into frame t's ego frame; ``observed`` is the cloud
    the detector sees as "current" at time t (possibly stale);
    ``true_current`` is frame t's live cloud, used only on the label side
    (prediction targets, ground truth).
    """

    scene_token: str
    t: int
    history: list[PointCloud]
    observed: PointCloud
    true_current: PointCloud
    lag_applied: int
    timestamp_us: int = 0

    def __post_init__(self) -> None:
        if len(self.history) != HISTORY_LEN:
            raise DataError(
                f"history must hold exactly {HISTORY_LEN} frames, got {len(self.history)}"
            )
        if self.lag_applied < 0:
            raise DataError("lag_applied must be >= 0")
        if self.t < 0:
            raise DataError("t must be >= 0")


def build_sample(frames: list[FrameRecord], scene_token: str, t: int,
                 cfg: LagConfig, seed: int) -> TemporalSample:
    """Assemble a ``TemporalSample`` with a deterministic per-(seed, scene, t) lag draw."""
    rng = np.random.default_rng(stable_seed("lag", seed, scene_token, t))
    observed, k = inject_lag(frames, t, cfg, rng)
    return TemporalSample(
        scene_token=scene_token,
        t=t,
        history=assemble_history(frames, t),
        observed=observed,
        true_current=frames[t].cloud,
        lag_applied=k,
        timestamp_us=frames[t].timestamp_us,
    )
