"""Rareness scoring: ensemble variance with hard-example filtering,
flow-based data scores, baselines, and track-level aggregation.

Conventions: missed detections enter the ensemble score vector as 0; the
hard filter keeps an object only when it has strictly more points than
the point threshold AND lies strictly closer than the range threshold.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import bev_iou, vehicle_size


@dataclass
class HardFilterConfig:
    """Thresholds of the hard-example filter (defaults per the vehicle
    experiments: 200 points, 50 m)."""

    point_threshold: int = 200
    range_threshold_m: float = 50.0

    def validate(self) -> "HardFilterConfig":
        if self.point_threshold < 0:
            raise ValidationError("point_threshold must be >= 0")
        if self.range_threshold_m <= 0:
            raise ValidationError("range_threshold_m must be positive")
        return self


@dataclass
class EnsembleGroup:
    """Score vector for one object across N ensemble members (0 = miss)."""

    object_id: str
    scores: list

    def validate(self) -> "EnsembleGroup":
        if len(self.scores) < 2:
            raise ValidationError("ensemble groups need N >= 2 members")
        if any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise ValidationError("ensemble scores must lie in [0, 1]")
        return self


def ensemble_variance(group: EnsembleGroup) -> float:
    """Population variance of the N member scores (misses as 0)."""
    group.validate()
    scores = np.asarray(group.scores, dtype=np.float64)
    mean = scores.mean()
    return float(np.mean((scores - mean) ** 2))


def hard_filter(point_count: float, range_m: float,
                cfg: HardFilterConfig) -> int:
    """1 iff point_count > threshold and range < threshold, else 0."""
    if point_count < 0 or range_m < 0:
        raise ValidationError("point_count and range_m must be >= 0")
    cfg.validate()
    return int(point_count > cfg.point_threshold
               and range_m < cfg.range_threshold_m)


def rareness_model(hard_bit: int, variance: float) -> float:
    """Model-centric score: hard bit times ensemble variance."""
    if hard_bit not in (0, 1):
        raise ValidationError("hard_bit must be 0 or 1")
    if variance < 0:
        raise ValidationError("variance must be >= 0")
    return hard_bit * variance


def rareness_combined(hard_bit: int, rareness_data_score: float) -> float:
    """Hard-filtered data score; hard_bit 0 removes the candidate from
    the ranking entirely (the caller records it as filtered)."""
    if hard_bit not in (0, 1):
        raise ValidationError("hard_bit must be 0 or 1")
    return hard_bit * rareness_data_score


def track_score(per_frame_scores) -> float:
    """Track-level aggregation: arithmetic mean of per-frame scores."""
    scores = list(per_frame_scores)
    if not scores:
        raise ValidationError("track_score needs a nonempty score list")
    return float(np.mean(scores))


def associate_ensemble(detections, iou_threshold: float = 0.3,
                       ensemble_size: int | None = None) -> list:
    """Build per-object ensemble score vectors from raw detections.

    Detections of model 0 act as reference objects. Within each
    (segment, frame), every other model's detections are matched to the
    references greedily by descending BEV IoU (one-to-one, IoU >=
    iou_threshold); unmatched references read score 0 for that model.
    """
    detections = list(detections)
    if ensemble_size is None:
        ensemble_size = max((d.model_id for d in detections), default=-1) + 1
    if ensemble_size < 2:
        raise ValidationError("ensemble association needs >= 2 models")

    frames = defaultdict(lambda: defaultdict(list))
    for det in detections:
        frames[(det.segment_id, det.frame_index)][det.model_id].append(det)

    groups = []
    for key in sorted(frames):
        by_model = frames[key]
        refs = sorted(by_model.get(0, []), key=lambda d: d.detection_id)
        if not refs:
            continue
        score_vectors = {r.detection_id: [0.0] * ensemble_size for r in refs}
        for r in refs:
            score_vectors[r.detection_id][0] = r.score
        for j in range(1, ensemble_size):
            candidates = []
            for det in by_model.get(j, []):
                for r in refs:
                    iou = bev_iou(det.box, r.box)
                    if iou >= iou_threshold:
                        candidates.append((iou, r.detection_id, det))
            candidates.sort(key=lambda c: (-c[0], c[1], c[2].detection_id))
            used_refs, used_dets = set(), set()
            for iou, ref_id, det in candidates:
                if ref_id in used_refs or det.detection_id in used_dets:
                    continue
                used_refs.add(ref_id)
                used_dets.add(det.detection_id)
                score_vectors[ref_id][j] = det.score
        for r in refs:
            groups.append(EnsembleGroup(r.detection_id,
                                        score_vectors[r.detection_id]))
    return groups


@dataclass
class ScoreRecord:
    """One scored candidate, as persisted to scores.jsonl."""

    detection_id: str
    track_hypothesis_id: str | None
    method: str
    score: float
    hard_bit: int | None

    def to_json(self) -> dict:
        return {"detection_id": self.detection_id,
                "track_hypothesis_id": self.track_hypothesis_id,
                "method": self.method, "score": self.score,
                "hard_bit": self.hard_bit}

    @staticmethod
    def from_json(obj: dict) -> "ScoreRecord":
        return ScoreRecord(
            detection_id=obj["detection_id"],
            track_hypothesis_id=obj.get("track_hypothesis_id"),
            method=obj["method"], score=float(obj["score"]),
            hard_bit=obj.get("hard_bit"))


METHODS = ("d-rem", "m-rem", "md-rem", "ensemble", "random", "predict-size")


def score_detections(method: str, detections, hard_cfg: HardFilterConfig,
                     rareness_by_id: dict | None = None,
                     iou_threshold: float = 0.3,
                     ensemble_size: int | None = None,
                     seed: int = 0) -> list:
    """Produce ScoreRecords for the reference (model 0) detections.

    rareness_by_id maps detection_id to the data-centric rareness score
    and is required by the d-rem and md-rem methods.
    """
    if method not in METHODS:
        raise ValidationError(f"unknown scoring method {method!r}")
    refs = sorted((d for d in detections if d.model_id == 0),
                  key=lambda d: d.detection_id)
    if not refs:
        raise ValidationError("no model-0 detections to score")
    hard_bits = {d.detection_id: hard_filter(d.point_count, d.range_m, hard_cfg)
                 for d in refs}

    if method in ("m-rem", "ensemble"):
        groups = associate_ensemble(detections, iou_threshold=iou_threshold,
                                    ensemble_size=ensemble_size)
        variances = {g.object_id: ensemble_variance(g) for g in groups}

    if method in ("d-rem", "md-rem"):
        if rareness_by_id is None:
            raise ValidationError(f"method {method} needs data-centric "
                                  "rareness scores")
        missing = [d.detection_id for d in refs
                   if d.detection_id not in rareness_by_id]
        if missing:
            raise ValidationError(
                f"missing rareness for {len(missing)} detections "
                f"(first: {missing[0]})")

    rng = np.random.default_rng(seed)
    records = []
    for det in refs:
        h = hard_bits[det.detection_id]
        if method == "d-rem":
            score = float(rareness_by_id[det.detection_id])
        elif method == "md-rem":
            score = rareness_combined(h, float(rareness_by_id[det.detection_id]))
        elif method == "m-rem":
            score = rareness_model(h, variances.get(det.detection_id, 0.0))
        elif method == "ensemble":
            score = variances.get(det.detection_id, 0.0)
        elif method == "random":
            score = float(rng.random())
        else:  # predict-size
            score = vehicle_size(det.box)
        records.append(ScoreRecord(det.detection_id, det.track_hypothesis_id,
                                   method, score, h))
    return records


def save_scores_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def load_scores_jsonl(path) -> list:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(ScoreRecord.from_json(json.loads(line)))
    return records
