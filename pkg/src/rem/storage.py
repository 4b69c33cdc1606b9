"""Corpus directory layout and binary feature-map format.

Layout:
    <dir>/meta.json                     corpus-level metadata + spec echo
    <dir>/segments/<id>/features.bin    one BEV map per segment
    <dir>/detections.jsonl              DetectionRecord per line
    <dir>/gt_tracks.jsonl               GroundTruthTrack per line
    <dir>/truth_density.jsonl           {detection_id, density} per line
    <dir>/auto_tracks.jsonl             simulated auto-labeled tracks

features.bin: magic "REMF", then u32 rows, cols, channels (little
endian), then float32 values in row-major (row, col, channel) order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .corpus import Corpus, CorpusSpec, DetectionRecord, GroundTruthTrack, Segment
from .embed import GridGeometry
from .errors import ValidationError
from .mining import TrackSet, save_tracks_jsonl

FEATURES_MAGIC = b"REMF"


def write_features_bin(path, feature_map: np.ndarray) -> None:
    arr = np.ascontiguousarray(feature_map, dtype="<f4")
    if arr.ndim != 3:
        raise ValidationError("feature map must be (rows, cols, channels)")
    with open(path, "wb") as fh:
        fh.write(FEATURES_MAGIC)
        fh.write(struct.pack("<III", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_features_bin(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURES_MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        rows, cols, channels = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4")
    expected = rows * cols * channels
    if data.size != expected:
        raise ValidationError(
            f"{path}: expected {expected} floats, found {data.size}")
    return data.reshape(rows, cols, channels)


def write_jsonl(path, items) -> None:
    with open(path, "w") as fh:
        for item in items:
            fh.write(json.dumps(item) + "\n")


def read_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def write_corpus(corpus: Corpus, out_dir, auto_tracks: TrackSet | None = None) -> None:
    out = Path(out_dir)
    (out / "segments").mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": 1,
        "spec": corpus.spec.to_json(),
        "segment_ids": [s.segment_id for s in corpus.segments],
        "geometry": {
            "origin_x": corpus.segments[0].geometry.origin_x,
            "origin_y": corpus.segments[0].geometry.origin_y,
            "cell_size": corpus.segments[0].geometry.cell_size,
        },
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    for seg in corpus.segments:
        seg_dir = out / "segments" / seg.segment_id
        seg_dir.mkdir(parents=True, exist_ok=True)
        write_features_bin(seg_dir / "features.bin", seg.feature_map)
    write_jsonl(out / "detections.jsonl",
                (d.to_json() for d in corpus.detections))
    save_tracks_jsonl(
        corpus.gt_tracks, out / "gt_tracks.jsonl",
        extras={tid: {"true_density": corpus.track_density[tid]}
                for tid in corpus.track_density})
    write_jsonl(out / "truth_density.jsonl",
                ({"detection_id": did, "density": dens}
                 for did, dens in corpus.detection_density.items()))
    if auto_tracks is not None:
        save_tracks_jsonl(auto_tracks.tracks(), out / "auto_tracks.jsonl")


class CorpusReader:
    """Lazy access to an on-disk corpus; feature maps load per segment."""

    def __init__(self, corpus_dir):
        self.root = Path(corpus_dir)
        meta_path = self.root / "meta.json"
        if not meta_path.exists():
            raise ValidationError(f"{corpus_dir}: missing meta.json")
        with open(meta_path) as fh:
            self.meta = json.load(fh)
        g = self.meta["geometry"]
        self.geometry = GridGeometry(g["origin_x"], g["origin_y"],
                                     g["cell_size"])
        self.segment_ids = list(self.meta["segment_ids"])
        self._cache: dict = {}

    def spec(self) -> CorpusSpec:
        return CorpusSpec.from_json(self.meta["spec"])

    def feature_map(self, segment_id: str) -> np.ndarray:
        if segment_id not in self._cache:
            if segment_id not in self.segment_ids:
                raise ValidationError(f"unknown segment {segment_id}")
            # keep at most one segment resident
            self._cache.clear()
            self._cache[segment_id] = read_features_bin(
                self.root / "segments" / segment_id / "features.bin")
        return self._cache[segment_id]

    def geometry_for(self, segment_id: str) -> GridGeometry:
        return self.geometry

    def detections(self) -> list:
        return [DetectionRecord.from_json(obj)
                for obj in read_jsonl(self.root / "detections.jsonl")]

    def gt_tracks(self) -> list:
        return [GroundTruthTrack.from_json(obj)
                for obj in read_jsonl(self.root / "gt_tracks.jsonl")]

    def track_densities(self) -> dict:
        out = {}
        for obj in read_jsonl(self.root / "gt_tracks.jsonl"):
            if "true_density" in obj:
                out[obj["track_id"]] = float(obj["true_density"])
        return out

    def detection_densities(self) -> dict:
        return {obj["detection_id"]: float(obj["density"])
                for obj in read_jsonl(self.root / "truth_density.jsonl")}

    def auto_tracks(self) -> TrackSet:
        path = self.root / "auto_tracks.jsonl"
        if not path.exists():
            raise ValidationError(f"{path} does not exist")
        ts = TrackSet()
        for obj in read_jsonl(path):
            ts.add(GroundTruthTrack.from_json(obj), "auto")
        return ts
