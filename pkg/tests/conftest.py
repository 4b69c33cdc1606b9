"""Shared test helpers: box/track factories and an independent
transcription of the greedy track-mining loop used as the equivalence
oracle for mine_tracks."""

import numpy as np

from rem.corpus import DetectionRecord, GroundTruthTrack
from rem.geometry import Box3D
from rem.mining import TrackSet, detection_hits_track, tracks_intersect


def make_box(cx, cy, L=4.0, W=2.0, heading=0.0):
    return Box3D(cx, cy, 0.75, L, W, 1.5, heading)


def make_track(track_id, cx, cy, frames=(0, 1), seg="s0", **box_kw):
    boxes = {f: make_box(cx, cy, **box_kw) for f in frames}
    return GroundTruthTrack(track_id, seg, boxes, "t")


def make_det(det_id, cx, cy, frame=0, seg="s0", score=0.5, **box_kw):
    box = make_box(cx, cy, **box_kw)
    return DetectionRecord(det_id, seg, frame, f"h/{det_id}", box, score,
                           100, box.bev_range(), 0)


def reference_track_mining(ranked, tracks, auto: TrackSet, budget: int):
    """Straight-line reference of the budgeted mining loop: pop the top
    candidate, confirm against ground truth by best same-frame overlap,
    label the whole track, discard overlapping candidates, then drop
    intersecting auto tracks and merge."""
    pool = list(ranked)
    human_ids = []
    while len(human_ids) < budget and pool:
        det, _ = pool.pop(0)
        overlaps = [(detection_hits_track(det, t), t.track_id, t)
                    for t in tracks]
        overlaps = [o for o in overlaps if o[0] > 0.0]
        if not overlaps:
            continue
        overlaps.sort(key=lambda o: (-o[0], o[1]))
        track = overlaps[0][2]
        if track.track_id in human_ids:
            continue
        human_ids.append(track.track_id)
        pool = [(d, s) for d, s in pool
                if detection_hits_track(d, track) == 0.0]
    by_id = {t.track_id: t for t in tracks}
    human = [by_id[tid] for tid in sorted(human_ids)]
    retained = []
    for tid in auto.track_ids():
        a = auto.members[tid].track
        if tid in human_ids:
            continue
        if any(tracks_intersect(a, h) for h in human):
            continue
        retained.append(tid)
    merged = sorted(set(human_ids) | set(retained))
    return sorted(human_ids), retained, merged


def random_mining_instance(rng, max_tracks=13, max_dets=41):
    """Randomized small mining instance: tracks, jittered/false-positive
    detections, a partial auto-label set, and a budget."""
    n_tracks = int(rng.integers(1, max_tracks))
    tracks = []
    positions = []
    for i in range(n_tracks):
        while True:
            cx, cy = rng.uniform(-30, 30, 2)
            if all(abs(cx - px) > 6 or abs(cy - py) > 4
                   for px, py in positions):
                break
        positions.append((cx, cy))
        frames = tuple(range(int(rng.integers(1, 4))))
        tracks.append(make_track(f"t{i}", cx, cy, frames=frames,
                                 L=float(rng.uniform(3, 6)),
                                 W=float(rng.uniform(1.5, 2.5))))
    n_dets = int(rng.integers(5, max_dets))
    dets = []
    for j in range(n_dets):
        if rng.random() < 0.8 and tracks:
            base = tracks[int(rng.integers(len(tracks)))]
            frame = int(rng.choice(list(base.boxes)))
            box = base.boxes[frame]
            cx = box.center_x + rng.normal(0, 0.5)
            cy = box.center_y + rng.normal(0, 0.5)
        else:
            cx, cy = rng.uniform(-40, 40, 2)
            frame = int(rng.integers(0, 3))
        dets.append(make_det(f"d{j:03d}", cx, cy, frame=frame))
    scores = rng.random(n_dets)
    auto = TrackSet()
    for t in tracks:
        if rng.random() < 0.7:
            auto.add(t, "auto")
    budget = int(rng.integers(0, n_tracks + 2))
    return list(zip(dets, scores)), tracks, auto, budget
