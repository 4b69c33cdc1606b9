"""Per-object embeddings: ROI max-pooling from BEV feature maps followed
by PCA reduction and per-dimension standardization.

The flow model trains on the standardized vectors; the fitted transform
must be reused verbatim when embedding held-out or out-of-distribution
boxes so their densities are comparable.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyFootprintError, ValidationError
from .geometry import Box3D


@dataclass(frozen=True)
class GridGeometry:
    """Placement of a feature map in world coordinates.

    Cell (row i, col j) has its center at
    (origin_x + (j + 0.5) * cell_size, origin_y + (i + 0.5) * cell_size).
    """

    origin_x: float
    origin_y: float
    cell_size: float

    def cell_centers(self, rows_slice, cols_slice):
        ys = self.origin_y + (np.arange(rows_slice.start, rows_slice.stop) + 0.5) * self.cell_size
        xs = self.origin_x + (np.arange(cols_slice.start, cols_slice.stop) + 0.5) * self.cell_size
        return xs, ys


def footprint_cell_mask(box: Box3D, geometry: GridGeometry,
                        shape) -> tuple[slice, slice, np.ndarray]:
    """Window slices plus a boolean mask of cells whose centers fall
    inside the box footprint. Containment is closed (boundary included)."""
    n_rows, n_cols = shape[0], shape[1]
    reach = 0.5 * math.hypot(box.length, box.width) + geometry.cell_size
    col_lo = max(0, int((box.center_x - reach - geometry.origin_x) / geometry.cell_size))
    col_hi = min(n_cols, int((box.center_x + reach - geometry.origin_x) / geometry.cell_size) + 1)
    row_lo = max(0, int((box.center_y - reach - geometry.origin_y) / geometry.cell_size))
    row_hi = min(n_rows, int((box.center_y + reach - geometry.origin_y) / geometry.cell_size) + 1)
    rows, cols = slice(row_lo, row_hi), slice(col_lo, col_hi)
    if row_lo >= row_hi or col_lo >= col_hi:
        return rows, cols, np.zeros((0, 0), dtype=bool)
    xs, ys = geometry.cell_centers(rows, cols)
    dx = xs[None, :] - box.center_x
    dy = ys[:, None] - box.center_y
    c, s = math.cos(box.heading), math.sin(box.heading)
    u = c * dx + s * dy   # along length
    v = -s * dx + c * dy  # along width
    eps = 1e-9
    mask = (np.abs(u) <= 0.5 * box.length + eps) & (np.abs(v) <= 0.5 * box.width + eps)
    return rows, cols, mask


def roi_max_pool(feature_map: np.ndarray, box: Box3D,
                 geometry: GridGeometry) -> np.ndarray:
    """Channelwise max over cells whose centers lie inside the footprint.

    Raises EmptyFootprintError when no cell center is covered (degenerate
    or off-map box).
    """
    if feature_map.ndim != 3:
        raise ValidationError("feature map must have shape (rows, cols, channels)")
    rows, cols, mask = footprint_cell_mask(box, geometry, feature_map.shape)
    if not mask.any():
        raise EmptyFootprintError(
            f"box footprint covers no cell centers (center "
            f"({box.center_x:.2f}, {box.center_y:.2f}), "
            f"{box.length:.2f}x{box.width:.2f} m)")
    window = feature_map[rows, cols]
    return np.asarray(window[mask].max(axis=0), dtype=np.float64)


@dataclass
class PcaTransform:
    """Top-k principal directions plus post-projection standardization."""

    mean: np.ndarray       # (d,)
    components: np.ndarray  # (k, d), rows orthonormal
    post_std: np.ndarray   # (k,), strictly positive
    d: int
    k: int

    def validate(self) -> "PcaTransform":
        gram = self.components @ self.components.T
        if not np.allclose(gram, np.eye(self.k), atol=1e-6):
            raise ValidationError("PCA components are not orthonormal")
        if np.any(self.post_std <= 0):
            raise ValidationError("post_std must be strictly positive")
        return self

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(),
                "components": self.components.tolist(),
                "post_std": self.post_std.tolist(),
                "d": self.d, "k": self.k}

    @staticmethod
    def from_json(obj: dict) -> "PcaTransform":
        return PcaTransform(
            mean=np.asarray(obj["mean"], dtype=np.float64),
            components=np.asarray(obj["components"], dtype=np.float64),
            post_std=np.asarray(obj["post_std"], dtype=np.float64),
            d=int(obj["d"]), k=int(obj["k"]))


@dataclass
class EmbeddingRecord:
    """Raw pooled feature vector and its PCA-normalized embedding."""

    detection_id: str
    x_roi: np.ndarray
    x_norm: np.ndarray


def fit_pca(x_roi: np.ndarray, k: int) -> PcaTransform:
    """Fit the top-k PCA directions of the raw pooled features.

    Eigendecomposition of the (n-1)-divisor sample covariance; component
    signs fixed so each row's largest-magnitude entry is positive.
    post_std is the population (divisor n) std of the projected data.
    """
    x_roi = np.asarray(x_roi, dtype=np.float64)
    if x_roi.ndim != 2:
        raise ValidationError("x_roi must be an (n, d) matrix")
    n, d = x_roi.shape
    if n < 2:
        raise ValidationError("PCA needs at least 2 rows")
    if not 1 <= k <= min(n - 1, d):
        raise ValidationError(f"k must lie in [1, min(n-1, d)] = "
                              f"[1, {min(n - 1, d)}], got {k}")
    mean = x_roi.mean(axis=0)
    centered = x_roi - mean
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    components = eigvecs[:, order].T
    flip = np.sign(components[np.arange(k), np.argmax(np.abs(components), axis=1)])
    components = components * flip[:, None]
    projected = centered @ components.T
    post_std = projected.std(axis=0)  # population std, divisor n
    if np.any(post_std < 1e-12):
        raise ValidationError(
            "zero-variance dataset: a projected dimension has std < 1e-12")
    return PcaTransform(mean=mean, components=components, post_std=post_std,
                        d=d, k=k).validate()


def apply_embedding(transform: PcaTransform, x_roi: np.ndarray) -> np.ndarray:
    """Project and standardize: ((x - mean) @ components.T) / post_std."""
    x_roi = np.asarray(x_roi, dtype=np.float64)
    if x_roi.shape[-1] != transform.d:
        raise ValidationError(
            f"input dimension {x_roi.shape[-1]} != transform d {transform.d}")
    return (x_roi - transform.mean) @ transform.components.T / transform.post_std


def build_flow_dataset(detections, feature_map_for, transform: PcaTransform,
                       geometry_for=None) -> list[EmbeddingRecord]:
    """Pool and embed every detection, order-preserving.

    feature_map_for: either a mapping/callable from segment_id to the
    segment's feature map array, or a single array shared by all
    detections. geometry_for mirrors it for GridGeometry lookups (or a
    single GridGeometry).
    """
    def resolve(source, segment_id):
        if callable(source):
            return source(segment_id)
        if hasattr(source, "get"):
            return source[segment_id]
        return source

    records = []
    for det in detections:
        fmap = resolve(feature_map_for, det.segment_id)
        geom = resolve(geometry_for, det.segment_id)
        try:
            x_roi = roi_max_pool(fmap, det.box, geom)
        except EmptyFootprintError as err:
            raise EmptyFootprintError(
                f"detection {det.detection_id}: {err}") from err
        x_norm = apply_embedding(transform, x_roi)
        if not np.all(np.isfinite(x_norm)):
            raise ValidationError(
                f"detection {det.detection_id}: non-finite embedding")
        records.append(EmbeddingRecord(det.detection_id, x_roi, x_norm))
    return records


# -- file formats ------------------------------------------------------


def save_pca(transform: PcaTransform, path) -> None:
    with open(path, "w") as fh:
        json.dump(transform.to_json(), fh, indent=2)
        fh.write("\n")


def load_pca(path) -> PcaTransform:
    with open(path) as fh:
        return PcaTransform.from_json(json.load(fh)).validate()


def save_embeddings_csv(records, path) -> None:
    """Write `detection_id,e0..e{k-1}` rows."""
    records = list(records)
    if not records:
        raise ValidationError("refusing to write an empty embeddings file")
    k = len(records[0].x_norm)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["detection_id"] + [f"e{i}" for i in range(k)])
        for rec in records:
            writer.writerow([rec.detection_id]
                            + [repr(float(v)) for v in rec.x_norm])


def load_embeddings_csv(path) -> tuple[list[str], np.ndarray]:
    """Read ids and the (n, k) embedding matrix."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "detection_id":
            raise ValidationError(f"{path}: not an embeddings csv")
        ids, rows = [], []
        for line in reader:
            ids.append(line[0])
            rows.append([float(v) for v in line[1:]])
    if not rows:
        raise ValidationError(f"{path}: no embedding rows")
    return ids, np.asarray(rows, dtype=np.float64)
