"""Budgeted track-level mining against a simulated labeling oracle.

The greedy loop pops the highest-scored detection, asks the oracle
whether a real object is there, and if so labels its whole track and
discards every remaining detection that overlaps the track in its own
frame (BEV IoU > 0). Auto-labeled tracks that intersect a human-labeled
track are dropped before the two sets merge.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import GroundTruthTrack
from .errors import ValidationError
from .geometry import Box3D, bev_iou, wrap_heading


@dataclass
class LabeledTrack:
    track: GroundTruthTrack
    source: str  # "human" or "auto"


@dataclass
class TrackSet:
    """Tracks keyed by id with a labeling-source tag each."""

    members: dict = field(default_factory=dict)  # track_id -> LabeledTrack

    @staticmethod
    def from_tracks(tracks, source: str) -> "TrackSet":
        ts = TrackSet()
        for t in tracks:
            ts.add(t, source)
        return ts

    def add(self, track: GroundTruthTrack, source: str) -> None:
        if track.track_id in self.members:
            raise ValidationError(f"duplicate track id {track.track_id}")
        self.members[track.track_id] = LabeledTrack(track, source)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, track_id: str) -> bool:
        return track_id in self.members

    def track_ids(self) -> list:
        return sorted(self.members)

    def tracks(self):
        return [self.members[tid].track for tid in sorted(self.members)]


def tracks_intersect(a: GroundTruthTrack, b: GroundTruthTrack) -> bool:
    """True when the tracks share a frame with BEV IoU > 0 boxes."""
    if a.segment_id != b.segment_id:
        return False
    for frame, box in a.boxes.items():
        other = b.boxes.get(frame)
        if other is not None and bev_iou(box, other) > 0.0:
            return True
    return False


def detection_hits_track(det, track: GroundTruthTrack) -> float:
    """IoU of the detection against the track's same-frame box (0 when
    the track has no box in that frame or segments differ)."""
    if det.segment_id != track.segment_id:
        return 0.0
    box = track.boxes.get(det.frame_index)
    if box is None:
        return 0.0
    return bev_iou(det.box, box)


def simulate_oracle(det, gt_tracks) -> GroundTruthTrack | None:
    """Human-check stand-in: the ground-truth track whose same-frame box
    overlaps the detection the most, or None when nothing overlaps."""
    best, best_iou = None, 0.0
    for track in gt_tracks:
        iou = detection_hits_track(det, track)
        if iou > best_iou or (iou == best_iou and iou > 0.0 and best is not None
                              and track.track_id < best.track_id):
            best, best_iou = track, iou
    return best


@dataclass
class SelectionEntry:
    detection_id: str
    score: float
    outcome: str                 # "confirmed", "no_object", or "already_selected"
    track_id: str | None = None
    discarded: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"detection_id": self.detection_id, "score": self.score,
                "outcome": self.outcome, "track_id": self.track_id,
                "discarded": list(self.discarded)}


@dataclass
class MiningResult:
    """Output of the mining loop: human set, retained autos, merged set,
    and the full ordered selection log."""

    budget: int
    human_tracks: TrackSet
    auto_tracks_retained: TrackSet
    merged: TrackSet
    selection_log: list

    def validate(self) -> "MiningResult":
        if len(self.human_tracks) > self.budget:
            raise ValidationError("human track count exceeds budget")
        ids = self.merged.track_ids()
        if len(ids) != len(set(ids)):
            raise ValidationError("merged set repeats a track id")
        return self

    def to_json(self) -> dict:
        def dump(ts: TrackSet):
            return [ts.members[tid].track.to_json(
                extra={"source": ts.members[tid].source})
                for tid in ts.track_ids()]

        return {
            "budget": self.budget,
            "human_tracks": dump(self.human_tracks),
            "auto_tracks_retained": dump(self.auto_tracks_retained),
            "merged": dump(self.merged),
            "selection_log": [e.to_json() for e in self.selection_log],
        }

    @staticmethod
    def from_json(obj: dict) -> "MiningResult":
        def load(items, default_source):
            ts = TrackSet()
            for item in items:
                ts.add(GroundTruthTrack.from_json(item),
                       item.get("source", default_source))
            return ts

        log = [SelectionEntry(e["detection_id"], e["score"], e["outcome"],
                              e.get("track_id"), e.get("discarded", []))
               for e in obj.get("selection_log", [])]
        return MiningResult(
            budget=int(obj["budget"]),
            human_tracks=load(obj["human_tracks"], "human"),
            auto_tracks_retained=load(obj["auto_tracks_retained"], "auto"),
            merged=load(obj["merged"], "human"),
            selection_log=log).validate()


def rank_candidates(scored) -> list:
    """Sort (detection, score) pairs by descending score, ties broken by
    ascending detection id for determinism."""
    return sorted(scored, key=lambda pair: (-pair[1], pair[0].detection_id))


def mine_tracks(ranked, oracle, auto_tracks: TrackSet,
                budget: int) -> MiningResult:
    """Greedy budgeted track mining over a descending-rareness ranking.

    ranked: list of (DetectionRecord, score), highest score first.
    oracle: callable(detection) -> GroundTruthTrack | None.
    """
    if budget < 0:
        raise ValidationError("budget must be >= 0")
    scores = [s for _, s in ranked]
    if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
        raise ValidationError("ranking must be sorted by descending score")

    human = TrackSet()
    log = []
    pool = list(ranked)
    idx = 0
    while len(human) < budget and idx < len(pool):
        det, score = pool[idx]
        idx += 1
        track = oracle(det)
        if track is None:
            log.append(SelectionEntry(det.detection_id, score, "no_object"))
            continue
        if track.track_id in human:
            # unreachable with a consistent oracle (any detection whose
            # best overlap is a selected track was already discarded)
            log.append(SelectionEntry(det.detection_id, score,
                                      "already_selected", track.track_id))
            continue
        human.add(track, "human")
        discarded = []
        kept = pool[:idx]
        for cand, cscore in pool[idx:]:
            if detection_hits_track(cand, track) > 0.0:
                discarded.append(cand.detection_id)
            else:
                kept.append((cand, cscore))
        pool = kept
        log.append(SelectionEntry(det.detection_id, score, "confirmed",
                                  track.track_id, discarded))

    retained = TrackSet()
    human_list = human.tracks()
    for tid in auto_tracks.track_ids():
        auto = auto_tracks.members[tid].track
        if tid in human:
            continue
        if any(tracks_intersect(auto, h) for h in human_list):
            continue
        retained.add(auto, "auto")

    merged = TrackSet()
    for tid in human.track_ids():
        merged.add(human.members[tid].track, "human")
    for tid in retained.track_ids():
        merged.add(retained.members[tid].track, "auto")

    return MiningResult(budget=budget, human_tracks=human,
                        auto_tracks_retained=retained, merged=merged,
                        selection_log=log).validate()


@dataclass
class AutoLabelNoise:
    """Noise model of the simulated offboard auto-labeler."""

    center_sigma_m: float = 0.1
    size_sigma_frac: float = 0.03
    heading_sigma_rad: float = 0.01
    drop_prob: float = 0.05

    def validate(self) -> "AutoLabelNoise":
        if self.center_sigma_m < 0 or self.size_sigma_frac < 0:
            raise ValidationError("autolabel sigmas must be >= 0")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValidationError("drop_prob must lie in [0, 1]")
        return self

    @staticmethod
    def from_json(obj: dict) -> "AutoLabelNoise":
        known = set(AutoLabelNoise.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown autolabel keys: {sorted(unknown)}")
        return AutoLabelNoise(**obj).validate()


def simulate_autolabels(gt_tracks, noise: AutoLabelNoise,
                        seed: int) -> TrackSet:
    """Jittered copies of the ground-truth tracks with random drops;
    deterministic given the seed."""
    noise.validate()
    rng = np.random.default_rng(seed)
    out = TrackSet()
    for track in sorted(gt_tracks, key=lambda t: t.track_id):
        if rng.random() < noise.drop_prob:
            continue
        boxes = {}
        for frame, box in track.boxes.items():
            scale = float(np.clip(
                1.0 + rng.normal(0.0, noise.size_sigma_frac), 0.5, 1.5))
            boxes[frame] = Box3D(
                box.center_x + rng.normal(0.0, noise.center_sigma_m),
                box.center_y + rng.normal(0.0, noise.center_sigma_m),
                box.center_z,
                box.length * scale, box.width * scale, box.height * scale,
                wrap_heading(box.heading
                             + rng.normal(0.0, noise.heading_sigma_rad)))
        out.add(GroundTruthTrack(track.track_id, track.segment_id, boxes,
                                 track.attribute_tag).validate(), "auto")
    return out


def save_mined_json(result: MiningResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(result.to_json(), fh, indent=2)
        fh.write("\n")


def load_mined_json(path) -> MiningResult:
    with open(path) as fh:
        return MiningResult.from_json(json.load(fh))


def save_tracks_jsonl(tracks, path, extras: dict | None = None) -> None:
    """One track per line; extras maps track_id to additional fields."""
    with open(path, "w") as fh:
        for track in tracks:
            extra = (extras or {}).get(track.track_id)
            fh.write(json.dumps(track.to_json(extra=extra)) + "\n")


def load_tracks_jsonl(path) -> list:
    tracks = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                tracks.append(GroundTruthTrack.from_json(json.loads(line)))
    return tracks
