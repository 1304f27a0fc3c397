"""Axis-yawed 3D boxes on the ground plane.

A box is (x, y, z) center, (l, w, h) size and a yaw angle about +z, plus a
class name and an optional detection score. Geometry helpers here are the
single source of truth for corners and BEV containment; the detection head,
the simulator and the evaluator all import from this module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError

__all__ = ["Box3D", "wrap_angle"]


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass
class Box3D:
    x: float
    y: float
    z: float
    length: float
    width: float
    height: float
    yaw: float
    class_name: str
    score: float = field(default=1.0)

    def __post_init__(self) -> None:
        vals = (self.x, self.y, self.z, self.length, self.width, self.height, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"non-finite box field: {vals}")
        if self.length <= 0 or self.width <= 0 or self.height <= 0:
            raise DataError(
                f"box sizes must be positive, got l={self.length} w={self.width} h={self.height}"
            )

    @property
    def center_xy(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)

    def bev_corners(self) -> np.ndarray:
        """4x2 array of the footprint corners, counter-clockwise from front-left."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]], dtype=np.float64)
        rot = np.array([[c, -s], [s, c]], dtype=np.float64)
        return local @ rot.T + self.center_xy

    def center_distance(self, other: "Box3D") -> float:
        """Euclidean distance between BEV centers (the AP matching metric)."""
        return float(math.hypot(self.x - other.x, self.y - other.y))

    def as_record(self) -> list:
        """Flat 9-value record (x y z l w h yaw class score) for JSON files."""
        return [
            self.x, self.y, self.z,
            self.length, self.width, self.height,
            self.yaw, self.class_name, self.score,
        ]

    @classmethod
    def from_record(cls, rec) -> "Box3D":
        if len(rec) != 9:
            raise DataError(f"box record needs 9 values, got {len(rec)}")
        return cls(
            x=float(rec[0]), y=float(rec[1]), z=float(rec[2]),
            length=float(rec[3]), width=float(rec[4]), height=float(rec[5]),
            yaw=float(rec[6]), class_name=str(rec[7]), score=float(rec[8]),
        )

    def moved(self, dx: float, dy: float) -> "Box3D":
        return replace(self, x=self.x + dx, y=self.y + dy)
