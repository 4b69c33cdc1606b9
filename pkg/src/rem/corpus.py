"""Synthetic detection corpus with known per-object generative density.

Each object draws a latent attribute vector from a bounded-support
mixture (one truncated-normal component per object type). The attribute
vector is painted additively onto the segment's BEV feature map over the
object's footprint cells, so ROI pooling recovers it up to map noise;
the mixture density of the draw is recorded exactly and serves as the
brute-force rareness oracle.

A simulated detector ensemble produces per-model jittered detections
whose miss rates and scores degrade with type rarity and with hardness
(far away / few points), mimicking the epistemic/aleatoric split the
mining criteria are meant to separate. Objects are static within a
segment, so one feature map serves all of its frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .embed import GridGeometry, footprint_cell_mask
from .errors import ValidationError
from .geometry import Box3D, bev_iou, wrap_heading

SQRT2 = math.sqrt(2.0)


@dataclass
class DetectionRecord:
    """One predicted 3D box from one ensemble member."""

    detection_id: str
    segment_id: str
    frame_index: int
    track_hypothesis_id: str
    box: Box3D
    score: float
    point_count: int
    range_m: float
    model_id: int

    def validate(self) -> "DetectionRecord":
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score must lie in [0,1], got {self.score}")
        if self.frame_index < 0 or self.point_count < 0 or self.range_m < 0:
            raise ValidationError("frame_index, point_count, range_m must be >= 0")
        return self

    def to_json(self) -> dict:
        return {
            "detection_id": self.detection_id,
            "segment_id": self.segment_id,
            "frame_index": self.frame_index,
            "track_hypothesis_id": self.track_hypothesis_id,
            "box": self.box.to_json(),
            "score": self.score,
            "point_count": self.point_count,
            "range_m": self.range_m,
            "model_id": self.model_id,
        }

    @staticmethod
    def from_json(obj: dict) -> "DetectionRecord":
        return DetectionRecord(
            detection_id=obj["detection_id"],
            segment_id=obj["segment_id"],
            frame_index=int(obj["frame_index"]),
            track_hypothesis_id=obj["track_hypothesis_id"],
            box=Box3D.from_json(obj["box"]),
            score=float(obj["score"]),
            point_count=int(obj["point_count"]),
            range_m=float(obj["range_m"]),
            model_id=int(obj["model_id"]),
        )


@dataclass
class GroundTruthTrack:
    """Human-quality track: one box per frame, frames strictly increasing."""

    track_id: str
    segment_id: str
    boxes: dict  # frame_index -> Box3D
    attribute_tag: str = ""

    def validate(self) -> "GroundTruthTrack":
        frames = list(self.boxes)
        if not frames:
            raise ValidationError(f"track {self.track_id} has no boxes")
        if frames != sorted(frames):
            raise ValidationError(f"track {self.track_id} frames not increasing")
        return self

    def to_json(self, extra: dict | None = None) -> dict:
        out = {
            "track_id": self.track_id,
            "segment_id": self.segment_id,
            "attribute_tag": self.attribute_tag,
            "boxes": {str(f): b.to_json() for f, b in self.boxes.items()},
        }
        if extra:
            out.update(extra)
        return out

    @staticmethod
    def from_json(obj: dict) -> "GroundTruthTrack":
        boxes = {int(f): Box3D.from_json(b) for f, b in obj["boxes"].items()}
        return GroundTruthTrack(
            track_id=obj["track_id"], segment_id=obj["segment_id"],
            boxes=dict(sorted(boxes.items())),
            attribute_tag=obj.get("attribute_tag", "")).validate()


@dataclass
class ObjectTypeSpec:
    """One mixture component: attribute distribution plus box-size model."""

    name: str
    signature: list          # attribute-space mean, one value per channel
    prevalence: float
    attr_sigma: float | list = 0.4
    attr_radius: float = 3.0  # truncation, in sigmas
    length: tuple = (4.5, 0.3)   # (mean, std); sizes truncated at +-2 std
    width: tuple = (1.8, 0.12)
    height: tuple = (1.5, 0.1)

    def sigma_vector(self) -> np.ndarray:
        sig = np.asarray(self.signature, dtype=np.float64)
        if np.isscalar(self.attr_sigma) or isinstance(self.attr_sigma, (int, float)):
            return np.full(sig.shape, float(self.attr_sigma))
        arr = np.asarray(self.attr_sigma, dtype=np.float64)
        if arr.shape != sig.shape:
            raise ValidationError(
                f"type {self.name}: attr_sigma length != signature length")
        return arr

    @staticmethod
    def from_json(obj: dict) -> "ObjectTypeSpec":
        return ObjectTypeSpec(
            name=obj["name"],
            signature=[float(v) for v in obj["signature"]],
            prevalence=float(obj["prevalence"]),
            attr_sigma=obj.get("attr_sigma", 0.4),
            attr_radius=float(obj.get("attr_radius", 3.0)),
            length=tuple(obj.get("length", (4.5, 0.3))),
            width=tuple(obj.get("width", (1.8, 0.12))),
            height=tuple(obj.get("height", (1.5, 0.1))),
        )

    def to_json(self) -> dict:
        return {
            "name": self.name, "signature": list(self.signature),
            "prevalence": self.prevalence,
            "attr_sigma": (list(self.attr_sigma)
                           if hasattr(self.attr_sigma, "__len__")
                           else self.attr_sigma),
            "attr_radius": self.attr_radius,
            "length": list(self.length), "width": list(self.width),
            "height": list(self.height),
        }


@dataclass
class DetectorSimConfig:
    """Simulated ensemble behavior; misses and score decay tie total
    uncertainty to rarity (epistemic) and hardness (aleatoric)."""

    ensemble_size: int = 5
    miss_base: float = 0.02
    miss_rare: float = 0.0        # scaled by (1 - type prevalence)
    miss_hard: float = 0.0        # scaled by hardness in [0, 1]
    score_base: float = 0.92
    score_hard_penalty: float = 0.25
    score_jitter: float = 0.04
    center_jitter_m: float = 0.15
    size_jitter_frac: float = 0.03
    heading_jitter_rad: float = 0.02
    points_coeff: float = 60.0
    points_range_scale_m: float = 20.0
    hard_range_soft_m: float = 48.0
    hard_points_soft: float = 170.0
    corrupt_hard_feature_scale: float = 0.0

    @staticmethod
    def from_json(obj: dict) -> "DetectorSimConfig":
        known = set(DetectorSimConfig.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown detector config keys: {sorted(unknown)}")
        return DetectorSimConfig(**obj)


@dataclass
class CorpusSpec:
    """Full description of a synthetic corpus; generation is a pure
    function of this spec (including the seed)."""

    segment_count: int
    frames_per_segment: int
    object_type_mixture: list  # of ObjectTypeSpec
    feature_map_resolution: float = 2.0  # cells per meter
    noise_scale: float = 0.05
    seed: int = 0
    objects_per_segment: int = 40
    map_extent_m: float = 120.0
    detector: DetectorSimConfig = field(default_factory=DetectorSimConfig)
    autolabel: dict = field(default_factory=dict)

    def validate(self) -> "CorpusSpec":
        if self.segment_count < 1:
            raise ValidationError("segment_count must be >= 1")
        if self.frames_per_segment < 1:
            raise ValidationError("frames_per_segment must be >= 1")
        if self.objects_per_segment < 1:
            raise ValidationError("objects_per_segment must be >= 1")
        if not self.object_type_mixture:
            raise ValidationError("object_type_mixture must be nonempty")
        total = sum(t.prevalence for t in self.object_type_mixture)
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(
                f"mixture prevalences must sum to 1 (got {total!r})")
        widths = {len(t.signature) for t in self.object_type_mixture}
        if len(widths) != 1:
            raise ValidationError("all type signatures must share one length")
        if self.noise_scale < 0:
            raise ValidationError("noise_scale must be >= 0")
        if self.feature_map_resolution <= 0:
            raise ValidationError("feature_map_resolution must be positive")
        return self

    @property
    def channels(self) -> int:
        return len(self.object_type_mixture[0].signature)

    @staticmethod
    def from_json(obj: dict) -> "CorpusSpec":
        spec = CorpusSpec(
            segment_count=int(obj["segment_count"]),
            frames_per_segment=int(obj["frames_per_segment"]),
            object_type_mixture=[ObjectTypeSpec.from_json(t)
                                 for t in obj["object_type_mixture"]],
            feature_map_resolution=float(obj.get("feature_map_resolution", 2.0)),
            noise_scale=float(obj.get("noise_scale", 0.05)),
            seed=int(obj.get("seed", 0)),
            objects_per_segment=int(obj.get("objects_per_segment", 40)),
            map_extent_m=float(obj.get("map_extent_m", 120.0)),
            detector=DetectorSimConfig.from_json(obj.get("detector", {})),
            autolabel=dict(obj.get("autolabel", {})),
        )
        return spec.validate()

    def to_json(self) -> dict:
        return {
            "segment_count": self.segment_count,
            "frames_per_segment": self.frames_per_segment,
            "object_type_mixture": [t.to_json() for t in self.object_type_mixture],
            "feature_map_resolution": self.feature_map_resolution,
            "noise_scale": self.noise_scale,
            "seed": self.seed,
            "objects_per_segment": self.objects_per_segment,
            "map_extent_m": self.map_extent_m,
            "detector": {k: getattr(self.detector, k)
                         for k in DetectorSimConfig.__dataclass_fields__},
            "autolabel": self.autolabel,
        }


@dataclass
class Segment:
    segment_id: str
    geometry: GridGeometry
    feature_map: np.ndarray  # (rows, cols, channels) float32


@dataclass
class Corpus:
    """In-memory corpus: maps, tracks, detections, and truth densities."""

    spec: CorpusSpec
    segments: list
    gt_tracks: list
    detections: list
    track_density: dict      # track_id -> exact mixture density of its draw
    detection_density: dict  # detection_id -> density of the underlying object

    def segment_map(self) -> dict:
        return {s.segment_id: s.feature_map for s in self.segments}

    def segment_geometry(self) -> dict:
        return {s.segment_id: s.geometry for s in self.segments}


# -- attribute mixture --------------------------------------------------


def _truncnorm_pdf(x, mu, sigma, radius):
    """Density of N(mu, sigma^2) truncated to |x - mu| <= radius * sigma."""
    if sigma == 0.0:
        return 1.0 if abs(x - mu) <= 1e-12 else 0.0
    u = (x - mu) / sigma
    if abs(u) > radius:
        return 0.0
    mass = math.erf(radius / SQRT2)
    return math.exp(-0.5 * u * u) / (sigma * math.sqrt(2.0 * math.pi) * mass)


def attribute_density(attrs: np.ndarray, types) -> float:
    """Exact mixture density of one attribute vector."""
    total = 0.0
    for t in types:
        sig = np.asarray(t.signature, dtype=np.float64)
        sigma = t.sigma_vector()
        part = t.prevalence
        for x, mu, sd in zip(attrs, sig, sigma):
            part *= _truncnorm_pdf(float(x), float(mu), float(sd), t.attr_radius)
            if part == 0.0:
                break
        total += part
    return total


def _sample_truncated_standard(rng: np.random.Generator, n: int,
                               radius: float) -> np.ndarray:
    """Standard normal draws conditioned on |z| <= radius."""
    out = rng.standard_normal(n)
    bad = np.abs(out) > radius
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > radius
    return out


def sample_attributes(types, n: int, rng: np.random.Generator):
    """Draw n attribute vectors from the mixture.

    Returns (attrs (n, c), type_index (n,), density (n,)).
    """
    prevalences = np.array([t.prevalence for t in types])
    type_idx = rng.choice(len(types), size=n, p=prevalences)
    c = len(types[0].signature)
    attrs = np.empty((n, c))
    for i, ti in enumerate(type_idx):
        t = types[ti]
        sigma = t.sigma_vector()
        eps = _sample_truncated_standard(rng, c, t.attr_radius)
        attrs[i] = np.asarray(t.signature) + sigma * eps
    density = np.array([attribute_density(a, types) for a in attrs])
    return attrs, type_idx, density


def mixture_support_volume(types) -> float:
    """Total volume of the mixture support, assuming disjoint components."""
    total = 0.0
    for t in types:
        sigma = t.sigma_vector()
        vol = 1.0
        for sd in sigma:
            vol *= 2.0 * t.attr_radius * sd
        total += vol
    return total


# -- generation ----------------------------------------------------------


def _draw_truncated(rng, mean, std, radius=2.0, floor=0.5):
    if std == 0.0:
        return max(mean, floor)
    return max(mean + std * float(_sample_truncated_standard(rng, 1, radius)[0]),
               floor)


def _hardness(point_count: float, range_m: float,
              det: DetectorSimConfig) -> float:
    far = 1.0 / (1.0 + math.exp(-(range_m - det.hard_range_soft_m) / 4.0))
    sparse = 1.0 / (1.0 + math.exp(-(det.hard_points_soft - point_count) / 40.0))
    return max(far, sparse)


def _place_objects(rng, boxes_so_far, box: Box3D, extent: float,
                   max_attempts: int = 500) -> Box3D:
    """Rejection-sample a center keeping inflated footprints disjoint."""
    reach = 0.5 * math.hypot(box.length, box.width) + 1.0
    lo, hi = -extent / 2.0 + reach, extent / 2.0 - reach
    if lo >= hi:
        raise ValidationError("map extent too small for object size")
    inflate = 1.0
    for _ in range(max_attempts):
        cx = rng.uniform(lo, hi)
        cy = rng.uniform(lo, hi)
        candidate = Box3D(cx, cy, box.center_z, box.length + inflate,
                          box.width + inflate, box.height, box.heading)
        if all(bev_iou(candidate,
                       Box3D(b.center_x, b.center_y, b.center_z,
                             b.length + inflate, b.width + inflate,
                             b.height, b.heading)) == 0.0
               for b in boxes_so_far):
            return Box3D(cx, cy, box.center_z, box.length, box.width,
                         box.height, box.heading)
    raise ValidationError(
        "could not place object without overlap; reduce objects_per_segment "
        "or enlarge map_extent_m")


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministically build the synthetic corpus described by `spec`."""
    spec.validate()
    types = spec.object_type_mixture
    det_cfg = spec.detector
    cells = int(round(spec.map_extent_m * spec.feature_map_resolution))
    cell_size = 1.0 / spec.feature_map_resolution
    geometry = GridGeometry(origin_x=-spec.map_extent_m / 2.0,
                            origin_y=-spec.map_extent_m / 2.0,
                            cell_size=cell_size)
    seg_seeds = np.random.SeedSequence(spec.seed).spawn(spec.segment_count)

    segments, gt_tracks, detections = [], [], []
    track_density, detection_density = {}, {}

    for si in range(spec.segment_count):
        rng = np.random.default_rng(seg_seeds[si])
        segment_id = f"seg{si:04d}"
        n_obj = spec.objects_per_segment

        attrs, type_idx, densities = sample_attributes(types, n_obj, rng)
        boxes, objects = [], []
        for oi in range(n_obj):
            t = types[type_idx[oi]]
            length = _draw_truncated(rng, t.length[0], t.length[1], floor=1.2)
            width = _draw_truncated(rng, t.width[0], t.width[1], floor=1.0)
            height = _draw_truncated(rng, t.height[0], t.height[1], floor=0.8)
            heading = wrap_heading(rng.uniform(-math.pi, math.pi))
            template = Box3D(0.0, 0.0, height / 2.0, length, width, height,
                             heading)
            box = _place_objects(rng, boxes, template, spec.map_extent_m)
            boxes.append(box)
            objects.append({"type": t, "attrs": attrs[oi],
                            "density": float(densities[oi]), "box": box})

        # feature map: background noise, then additive signatures
        fmap = (rng.standard_normal((cells, cells, spec.channels))
                .astype(np.float32) * np.float32(spec.noise_scale))
        per_obj_points = np.empty((n_obj, spec.frames_per_segment))
        for oi, obj in enumerate(objects):
            box = obj["box"]
            d = box.bev_range()
            base_pts = (det_cfg.points_coeff * box.length * box.width
                        / (1.0 + (d / det_cfg.points_range_scale_m) ** 2))
            for f in range(spec.frames_per_segment):
                per_obj_points[oi, f] = max(
                    0.0, round(base_pts * math.exp(rng.normal(0.0, 0.2))))
            hardness = _hardness(per_obj_points[oi, 0], d, det_cfg)
            obj["hardness"] = hardness
            painted = obj["attrs"].copy()
            if det_cfg.corrupt_hard_feature_scale > 0.0:
                painted = painted + (det_cfg.corrupt_hard_feature_scale
                                     * hardness
                                     * rng.standard_normal(spec.channels))
            rows_s, cols_s, mask = footprint_cell_mask(box, geometry,
                                                       fmap.shape)
            if not mask.any():
                raise ValidationError(
                    f"object footprint covers no cells ({segment_id} #{oi})")
            fmap[rows_s, cols_s][mask] += painted.astype(np.float32)
        segments.append(Segment(segment_id, geometry, fmap))

        # ground truth tracks (static world: same box every frame)
        for oi, obj in enumerate(objects):
            track_id = f"{segment_id}/t{oi:03d}"
            track = GroundTruthTrack(
                track_id=track_id, segment_id=segment_id,
                boxes={f: obj["box"] for f in range(spec.frames_per_segment)},
                attribute_tag=obj["type"].name).validate()
            gt_tracks.append(track)
            track_density[track_id] = obj["density"]

        # simulated ensemble detections
        for oi, obj in enumerate(objects):
            box = obj["box"]
            t = obj["type"]
            miss_p = min(0.9, det_cfg.miss_base
                         + det_cfg.miss_rare * (1.0 - t.prevalence)
                         + det_cfg.miss_hard * obj["hardness"])
            quality = max(0.05, det_cfg.score_base
                          - det_cfg.score_hard_penalty * obj["hardness"])
            for f in range(spec.frames_per_segment):
                pts = int(per_obj_points[oi, f])
                for j in range(det_cfg.ensemble_size):
                    if rng.random() < miss_p:
                        continue
                    cx = box.center_x + rng.normal(0.0, det_cfg.center_jitter_m)
                    cy = box.center_y + rng.normal(0.0, det_cfg.center_jitter_m)
                    scale = float(np.clip(
                        1.0 + rng.normal(0.0, det_cfg.size_jitter_frac),
                        0.8, 1.2))
                    heading = wrap_heading(
                        box.heading + rng.normal(0.0, det_cfg.heading_jitter_rad))
                    dbox = Box3D(cx, cy, box.center_z, box.length * scale,
                                 box.width * scale, box.height * scale, heading)
                    score = float(np.clip(
                        rng.normal(quality, det_cfg.score_jitter), 0.0, 1.0))
                    det_id = f"{segment_id}/f{f}/o{oi:03d}/m{j}"
                    rec = DetectionRecord(
                        detection_id=det_id,
                        segment_id=segment_id,
                        frame_index=f,
                        track_hypothesis_id=f"m{j}/{segment_id}/o{oi:03d}",
                        box=dbox,
                        score=score,
                        point_count=pts,
                        range_m=dbox.bev_range(),
                        model_id=j,
                    ).validate()
                    detections.append(rec)
                    detection_density[det_id] = obj["density"]

    return Corpus(spec=spec, segments=segments, gt_tracks=gt_tracks,
                  detections=detections, track_density=track_density,
                  detection_density=detection_density)
