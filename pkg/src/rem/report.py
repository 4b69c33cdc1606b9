"""Analysis reports: rareness-percentile recall bins, mined-set
composition ratios, log-probability distribution comparisons, and
rarest-track rankings.

Every report is emitted as plot-ready JSON plus a companion CSV, and a
rendered PNG figure next to them. See schemas/report.schema.json for the
JSON layout.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError
from .geometry import (REGULAR_LARGE_EDGE_M, SMALL_REGULAR_EDGE_M,
                       vehicle_size)
from .mining import MiningResult

N_PERCENTILE_BINS = 50

# keeps PNG output byte-stable across reruns
_PNG_METADATA = {"Software": "rem"}


@dataclass
class PercentileBinReport:
    """Recall per 2%-rareness bin; bin 0 holds the rarest objects."""

    bin_edges: list   # length n_bins + 1, rareness, descending
    recall: list      # length n_bins
    counts: list      # length n_bins

    def to_json(self) -> dict:
        return {"kind": "recall", "n_bins": len(self.recall),
                "bin_edges": self.bin_edges, "recall": self.recall,
                "counts": self.counts}


def percentile_recall(gt_scores, matched) -> PercentileBinReport:
    """Bin ground-truth objects into 50 equal-count bins by descending
    rareness and report the matched fraction per bin.

    gt_scores are rareness values (negated log-probabilities); the last
    bin absorbs the remainder when the count is not divisible by 50.
    """
    scores = np.asarray(gt_scores, dtype=np.float64)
    flags = np.asarray(matched, dtype=bool)
    if scores.size == 0:
        raise ValidationError("percentile_recall needs nonempty input")
    if scores.shape != flags.shape:
        raise ValidationError("gt_scores and matched lengths differ")
    n = scores.size
    if n < N_PERCENTILE_BINS:
        raise ValidationError(
            f"need at least {N_PERCENTILE_BINS} objects, got {n}")
    order = np.argsort(-scores, kind="stable")
    base = n // N_PERCENTILE_BINS
    sizes = [base] * (N_PERCENTILE_BINS - 1)
    sizes.append(n - base * (N_PERCENTILE_BINS - 1))
    recall, counts, edges = [], [], []
    start = 0
    for size in sizes:
        chunk = order[start:start + size]
        edges.append(float(scores[chunk[0]]))
        recall.append(float(flags[chunk].mean()))
        counts.append(int(size))
        start += size
    edges.append(float(scores[order[-1]]))
    return PercentileBinReport(bin_edges=edges, recall=recall, counts=counts)


@dataclass
class CompositionRow:
    """Size-category composition of one mined set."""

    method: str
    counts: dict            # size category -> mined-track count
    total: int
    ratio_large: float
    baseline_prevalence_large: float
    upsampling_factor: float | None

    def to_json(self) -> dict:
        return {"method": self.method, "counts": self.counts,
                "total": self.total, "ratio_large": self.ratio_large,
                "baseline_prevalence_large": self.baseline_prevalence_large,
                "upsampling_factor": self.upsampling_factor}


def track_size_category(track) -> str:
    """Size category of a track: judged on its largest per-frame size."""
    size = max(vehicle_size(b) for b in track.boxes.values())
    if size < SMALL_REGULAR_EDGE_M:
        return "small"
    return "regular" if size < REGULAR_LARGE_EDGE_M else "large"


def composition(mined: MiningResult, gt_tracks,
                method: str = "") -> CompositionRow:
    """Size-category composition of the human-mined tracks versus the
    corpus-wide prevalence of large tracks."""
    by_id = {t.track_id: t for t in gt_tracks}
    counts = {"small": 0, "regular": 0, "large": 0}
    for tid in mined.human_tracks.track_ids():
        if tid not in by_id:
            raise ValidationError(f"mined track {tid} not found in ground truth")
        counts[track_size_category(by_id[tid])] += 1
    total = sum(counts.values())
    if total == 0:
        raise ValidationError("mined set is empty; nothing to compose")
    ratio_large = counts["large"] / total
    n_large = sum(1 for t in gt_tracks if track_size_category(t) == "large")
    baseline = n_large / len(gt_tracks) if gt_tracks else 0.0
    upsampling = ratio_large / baseline if baseline > 0 else None
    return CompositionRow(method=method, counts=counts, total=total,
                          ratio_large=ratio_large,
                          baseline_prevalence_large=baseline,
                          upsampling_factor=upsampling)


def _rank_average_ties(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(a, b) -> float:
    """Rank-based AUROC: probability a draw from b exceeds one from a
    (ties count half)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValidationError("auroc needs nonempty inputs")
    pooled = np.concatenate([a, b])
    ranks = _rank_average_ties(pooled)
    rank_sum_b = ranks[a.size:].sum()
    u = rank_sum_b - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


def freedman_diaconis_edges(pooled: np.ndarray, max_bins: int = 512):
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi <= lo:
        return np.array([lo - 0.5, hi + 0.5])
    q75, q25 = np.quantile(pooled, [0.75, 0.25])
    width = 2.0 * (q75 - q25) / pooled.size ** (1.0 / 3.0)
    if width <= 0:
        n_bins = 10
    else:
        n_bins = int(np.clip(np.ceil((hi - lo) / width), 1, max_bins))
    return np.linspace(lo, hi, n_bins + 1)


def distribution_report(logp_sets: dict) -> dict:
    """Summaries, shared-bin histograms (Freedman-Diaconis width on the
    pooled data), and pairwise AUROC for named log-probability sets."""
    if not logp_sets:
        raise ValidationError("distribution_report needs at least one set")
    arrays = {}
    for name, values in logp_sets.items():
        arr = np.asarray(values, dtype=np.float64)
        if arr.size == 0:
            raise ValidationError(f"set {name!r} is empty")
        arrays[name] = arr
    pooled = np.concatenate(list(arrays.values()))
    edges = freedman_diaconis_edges(pooled)
    sets_out = {}
    for name, arr in arrays.items():
        qs = np.quantile(arr, [0.05, 0.25, 0.5, 0.75, 0.95])
        hist, _ = np.histogram(arr, bins=edges)
        sets_out[name] = {
            "n": int(arr.size),
            "mean": float(arr.mean()),
            "std": float(arr.std()),
            "quantiles": {"q05": float(qs[0]), "q25": float(qs[1]),
                          "q50": float(qs[2]), "q75": float(qs[3]),
                          "q95": float(qs[4])},
            "histogram_counts": hist.tolist(),
        }
    names = list(arrays)
    auroc_out = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            auroc_out[f"{a}|{b}"] = auroc(arrays[a], arrays[b])
    return {"kind": "distribution", "histogram_edges": edges.tolist(),
            "sets": sets_out, "auroc": auroc_out}


def rarest_tracks(track_rareness: dict, top_n: int = 20) -> list:
    """Tracks ranked by descending mean rareness (ascending mean log
    probability)."""
    if top_n < 1:
        raise ValidationError("top_n must be >= 1")
    ranked = sorted(track_rareness.items(), key=lambda kv: (-kv[1], kv[0]))
    return [{"track_id": tid, "rareness": float(score), "rank": i + 1}
            for i, (tid, score) in enumerate(ranked[:top_n])]


# -- persistence and figures ---------------------------------------------


def write_json(payload: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def write_recall_outputs(report: PercentileBinReport, prefix: str) -> list:
    payload = report.to_json()
    write_json(payload, f"{prefix}.json")
    with open(f"{prefix}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "percentile_lo", "percentile_hi", "count",
                         "recall", "rareness_edge"])
        for i, (r, c) in enumerate(zip(report.recall, report.counts)):
            writer.writerow([i, 2 * i, 2 * (i + 1), c, repr(r),
                             repr(report.bin_edges[i])])
    fig, ax = plt.subplots(figsize=(7, 3.2))
    centers = np.arange(len(report.recall)) * 2 + 1
    ax.bar(centers, report.recall, width=1.8, color="#3b6ea5")
    ax.set_xlabel("inferred rareness percentile (lower is more rare)")
    ax.set_ylabel("recall")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(f"{prefix}.png", metadata=_PNG_METADATA)
    plt.close(fig)
    return [f"{prefix}.json", f"{prefix}.csv", f"{prefix}.png"]


def write_composition_outputs(rows, prefix: str) -> list:
    payload = {"kind": "composition", "rows": [r.to_json() for r in rows]}
    write_json(payload, f"{prefix}.json")
    with open(f"{prefix}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "small", "regular", "large", "total",
                         "ratio_large", "baseline_prevalence_large",
                         "upsampling_factor"])
        for r in rows:
            writer.writerow([r.method, r.counts["small"], r.counts["regular"],
                             r.counts["large"], r.total, repr(r.ratio_large),
                             repr(r.baseline_prevalence_large),
                             "" if r.upsampling_factor is None
                             else repr(r.upsampling_factor)])
    fig, ax = plt.subplots(figsize=(6, 3.2))
    methods = [r.method or f"set{i}" for i, r in enumerate(rows)]
    ratios = [r.ratio_large for r in rows]
    ax.bar(methods, ratios, color="#a54e3b")
    if rows:
        ax.axhline(rows[0].baseline_prevalence_large, color="k", ls="--",
                   lw=1, label="corpus prevalence")
        ax.legend(frameon=False)
    ax.set_ylabel("ratio of large tracks")
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(f"{prefix}.png", metadata=_PNG_METADATA)
    plt.close(fig)
    return [f"{prefix}.json", f"{prefix}.csv", f"{prefix}.png"]


def write_distribution_outputs(report: dict, prefix: str) -> list:
    write_json(report, f"{prefix}.json")
    with open(f"{prefix}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["set", "n", "mean", "std", "q05", "q25", "q50",
                         "q75", "q95"])
        for name, s in report["sets"].items():
            q = s["quantiles"]
            writer.writerow([name, s["n"], repr(s["mean"]), repr(s["std"]),
                             repr(q["q05"]), repr(q["q25"]), repr(q["q50"]),
                             repr(q["q75"]), repr(q["q95"])])
    fig, ax = plt.subplots(figsize=(7, 3.2))
    edges = np.asarray(report["histogram_edges"])
    centers = 0.5 * (edges[:-1] + edges[1:])
    for name, s in report["sets"].items():
        counts = np.asarray(s["histogram_counts"], dtype=np.float64)
        density = counts / max(counts.sum(), 1)
        ax.step(centers, density, where="mid", label=name)
    ax.set_xlabel("log probability")
    ax.set_ylabel("fraction")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(f"{prefix}.png", metadata=_PNG_METADATA)
    plt.close(fig)
    return [f"{prefix}.json", f"{prefix}.csv", f"{prefix}.png"]


def write_rarest_outputs(entries, prefix: str) -> list:
    payload = {"kind": "rarest-tracks", "tracks": entries}
    write_json(payload, f"{prefix}.json")
    with open(f"{prefix}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "track_id", "rareness"])
        for e in entries:
            writer.writerow([e["rank"], e["track_id"], repr(e["rareness"])])
    fig, ax = plt.subplots(figsize=(6, 0.3 * max(len(entries), 4) + 1.2))
    names = [e["track_id"] for e in entries][::-1]
    vals = [e["rareness"] for e in entries][::-1]
    ax.barh(names, vals, color="#3b6ea5")
    ax.set_xlabel("mean track rareness (-log prob)")
    fig.tight_layout()
    fig.savefig(f"{prefix}.png", metadata=_PNG_METADATA)
    plt.close(fig)
    return [f"{prefix}.json", f"{prefix}.csv", f"{prefix}.png"]
