import math

import numpy as np
import pytest
import shapely.affinity
import shapely.geometry

from rem.errors import ValidationError
from rem.geometry import Box3D, bev_iou, size_category, vehicle_size


def box(cx=0.0, cy=0.0, L=4.0, W=2.0, H=1.5, heading=0.0, cz=None):
    return Box3D(cx, cy, H / 2 if cz is None else cz, L, W, H, heading)


def shapely_iou(a: Box3D, b: Box3D) -> float:
    """Independent rotated-rectangle IoU oracle via shapely."""
    def poly(bx):
        base = shapely.geometry.box(-bx.length / 2, -bx.width / 2,
                                    bx.length / 2, bx.width / 2)
        rot = shapely.affinity.rotate(base, bx.heading, use_radians=True)
        return shapely.affinity.translate(rot, bx.center_x, bx.center_y)
    pa, pb = poly(a), poly(b)
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return inter / union if union > 0 else 0.0


class TestVehicleSize:
    def test_length_dominates(self):
        assert vehicle_size(box(L=7.5, W=2.5, H=3.0)) == 7.5

    def test_typical_sedan(self):
        assert vehicle_size(box(L=4.5, W=1.8, H=1.5)) == 4.5

    def test_tie(self):
        assert vehicle_size(box(L=2.0, W=2.0, H=2.0)) == 2.0


class TestSizeCategory:
    def test_large(self):
        assert size_category(box(L=7.5, W=2.5, H=3.0)) == "large"

    def test_regular(self):
        assert size_category(box(L=4.5, W=1.8, H=1.5)) == "regular"

    def test_boundary_is_large(self):
        # the large partition is [7, inf)
        assert size_category(box(L=7.0, W=2.0, H=2.0)) == "large"

    def test_small(self):
        assert size_category(box(L=2.0, W=1.0, H=1.0)) == "small"

    def test_partition_exhaustive_exclusive(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            b = box(L=float(rng.uniform(0.5, 12)),
                    W=float(rng.uniform(0.5, 4)),
                    H=float(rng.uniform(0.5, 5)))
            cats = [vehicle_size(b) < 3.0,
                    3.0 <= vehicle_size(b) < 7.0,
                    vehicle_size(b) >= 7.0]
            assert sum(cats) == 1
            assert size_category(b) == ("small", "regular", "large")[cats.index(True)]


class TestBevIou:
    def test_identical_boxes(self):
        b = box(cx=1.0, cy=-2.0, heading=0.4)
        assert bev_iou(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint(self):
        a = box(cx=0.0)
        b = box(cx=100.0)
        assert bev_iou(a, b) == 0.0

    def test_axis_aligned_offset(self):
        # two 2x2 squares offset by 1 in x: intersection 2, union 6
        a = box(L=2.0, W=2.0)
        b = box(cx=1.0, L=2.0, W=2.0)
        assert bev_iou(a, b) == pytest.approx(2.0 / 6.0, abs=1e-12)

    def test_symmetry_random(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            a = box(cx=rng.uniform(-3, 3), cy=rng.uniform(-3, 3),
                    L=rng.uniform(1, 6), W=rng.uniform(1, 3),
                    heading=rng.uniform(-math.pi, math.pi - 1e-9))
            b = box(cx=rng.uniform(-3, 3), cy=rng.uniform(-3, 3),
                    L=rng.uniform(1, 6), W=rng.uniform(1, 3),
                    heading=rng.uniform(-math.pi, math.pi - 1e-9))
            assert bev_iou(a, b) == pytest.approx(bev_iou(b, a), abs=1e-12)

    def test_against_shapely_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            a = box(cx=rng.uniform(-4, 4), cy=rng.uniform(-4, 4),
                    L=rng.uniform(0.5, 8), W=rng.uniform(0.5, 4),
                    heading=rng.uniform(-math.pi, math.pi - 1e-9))
            b = box(cx=rng.uniform(-4, 4), cy=rng.uniform(-4, 4),
                    L=rng.uniform(0.5, 8), W=rng.uniform(0.5, 4),
                    heading=rng.uniform(-math.pi, math.pi - 1e-9))
            assert bev_iou(a, b) == pytest.approx(shapely_iou(a, b), abs=1e-9)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            a = box(cx=rng.uniform(-3, 3), cy=rng.uniform(-3, 3),
                    L=rng.uniform(1, 6), W=rng.uniform(1, 3),
                    heading=rng.uniform(-1.5, 1.5))
            b = box(cx=rng.uniform(-3, 3), cy=rng.uniform(-3, 3),
                    L=rng.uniform(1, 6), W=rng.uniform(1, 3),
                    heading=rng.uniform(-1.5, 1.5))
            base = bev_iou(a, b)
            phi = rng.uniform(-1.0, 1.0)
            c, s = math.cos(phi), math.sin(phi)

            def rotated(bx):
                x = c * bx.center_x - s * bx.center_y
                y = s * bx.center_x + c * bx.center_y
                return Box3D(x, y, bx.center_z, bx.length, bx.width,
                             bx.height, bx.heading + phi)

            assert bev_iou(rotated(a), rotated(b)) == pytest.approx(base, abs=1e-9)

    def test_separated_beyond_diagonals(self):
        a = box(L=3, W=2)
        diag = math.hypot(3, 2)
        b = box(cx=2 * diag + 0.1, L=3, W=2, heading=0.7)
        assert bev_iou(a, b) == 0.0


class TestBoxValidation:
    def test_rejects_nonpositive_extent(self):
        with pytest.raises(ValidationError):
            Box3D(0, 0, 0, 0.0, 1.0, 1.0, 0.0).validate()

    def test_rejects_heading_out_of_range(self):
        with pytest.raises(ValidationError):
            Box3D(0, 0, 0, 1, 1, 1, math.pi).validate()

    def test_range_is_bev_distance(self):
        b = box(cx=3.0, cy=4.0)
        assert b.bev_range() == pytest.approx(5.0, abs=1e-6)
