"""3D boxes, birds-eye-view geometry, and rotated-rectangle IoU.

Boxes live in a right-handed world frame with the sensor at the BEV
origin (0, 0). The BEV footprint of a box is the rectangle spanned by
(length, width) rotated by `heading` about the box center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

SMALL_REGULAR_EDGE_M = 3.0
REGULAR_LARGE_EDGE_M = 7.0


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center, extents in meters, heading in radians."""

    center_x: float
    center_y: float
    center_z: float
    length: float
    width: float
    height: float
    heading: float

    def validate(self) -> "Box3D":
        if not (self.length > 0 and self.width > 0 and self.height > 0):
            raise ValidationError(f"box extents must be positive, got {self}")
        if not -math.pi <= self.heading < math.pi:
            raise ValidationError(f"heading must lie in [-pi, pi), got {self.heading}")
        return self

    def bev_center(self) -> np.ndarray:
        return np.array([self.center_x, self.center_y], dtype=np.float64)

    def bev_range(self) -> float:
        """BEV distance of the box center from the sensor origin."""
        return math.hypot(self.center_x, self.center_y)

    def bev_corners(self) -> np.ndarray:
        """Footprint corners, shape (4, 2), counter-clockwise."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.bev_center()

    def to_json(self) -> dict:
        return {
            "center_x": self.center_x,
            "center_y": self.center_y,
            "center_z": self.center_z,
            "length": self.length,
            "width": self.width,
            "height": self.height,
            "heading": self.heading,
        }

    @staticmethod
    def from_json(obj: dict) -> "Box3D":
        return Box3D(**{k: float(obj[k]) for k in (
            "center_x", "center_y", "center_z",
            "length", "width", "height", "heading")})


def vehicle_size(box: Box3D) -> float:
    """Largest box extent: max(length, width, height)."""
    return max(box.length, box.width, box.height)


def size_category(box: Box3D) -> str:
    """Partition by size: 'small' < 3 m, 'regular' in [3, 7), 'large' >= 7 m."""
    size = vehicle_size(box)
    if size < SMALL_REGULAR_EDGE_M:
        return "small"
    if size < REGULAR_LARGE_EDGE_M:
        return "regular"
    return "large"


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a 2D polygon given as (n, 2) vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` against convex CCW `clip`."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        input_pts = output
        output = []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        prev = input_pts[-1]
        prev_side = side(prev)
        for cur in input_pts:
            cur_side = side(cur)
            if cur_side >= 0:
                if prev_side < 0:
                    t = prev_side / (prev_side - cur_side)
                    output.append((prev[0] + t * (cur[0] - prev[0]),
                                   prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif prev_side >= 0:
                t = prev_side / (prev_side - cur_side)
                output.append((prev[0] + t * (cur[0] - prev[0]),
                               prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, cur_side
    return np.array(output) if output else np.empty((0, 2))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    """Overlap area of two box footprints in BEV."""
    ca, cb = a.bev_corners(), b.bev_corners()
    # cheap reject: centers further apart than the half-diagonal sum
    max_reach = 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))
    if np.linalg.norm(ca.mean(axis=0) - cb.mean(axis=0)) > max_reach:
        return 0.0
    return _polygon_area(_clip_polygon(ca, cb))


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Rotated-rectangle IoU of two box footprints in BEV."""
    inter = bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    area_a = a.length * a.width
    area_b = b.length * b.width
    union = area_a + area_b - inter
    return min(inter / union, 1.0) if union > 0 else 0.0


def wrap_heading(theta: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    out = math.fmod(theta + math.pi, 2.0 * math.pi)
    if out < 0:
        out += 2.0 * math.pi
    return out - math.pi
