import json

import numpy as np
import pytest

from rem.corpus import GroundTruthTrack
from rem.errors import ValidationError
from rem.geometry import Box3D
from rem.mining import MiningResult, TrackSet
from rem.report import (auroc, composition, distribution_report,
                        freedman_diaconis_edges, percentile_recall,
                        rarest_tracks, track_size_category,
                        write_composition_outputs, write_distribution_outputs,
                        write_recall_outputs)


def make_track(track_id, size, seg="s0"):
    box = Box3D(0.0, 0.0, 0.75, size, 2.0, 1.5, 0.0)
    return GroundTruthTrack(track_id, seg, {0: box}, "t")


def mining_result(human_ids, gt_by_id, budget=None):
    human = TrackSet.from_tracks([gt_by_id[t] for t in human_ids], "human")
    merged = TrackSet.from_tracks([gt_by_id[t] for t in human_ids], "human")
    return MiningResult(budget=budget or len(human_ids), human_tracks=human,
                        auto_tracks_retained=TrackSet(), merged=merged,
                        selection_log=[])


class TestPercentileRecall:
    def test_all_matched(self):
        rep = percentile_recall(np.arange(100.0), [True] * 100)
        assert rep.recall == [1.0] * 50
        assert sum(rep.counts) == 100

    def test_none_matched(self):
        rep = percentile_recall(np.arange(100.0), [False] * 100)
        assert rep.recall == [0.0] * 50

    def test_ten_rarest_unmatched(self):
        # rareness descending: indices with the 10 highest scores unmatched
        scores = np.arange(100.0)
        matched = scores < 90  # the 10 rarest (highest rareness) miss
        rep = percentile_recall(scores, matched)
        assert rep.recall[:5] == [0.0] * 5
        assert rep.recall[5:] == [1.0] * 45

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        scores = rng.standard_normal(257)
        matched = rng.random(257) < 0.5
        rep1 = percentile_recall(scores, matched)
        perm = rng.permutation(257)
        rep2 = percentile_recall(scores[perm], matched[perm])
        assert rep1.recall == rep2.recall
        assert rep1.counts == rep2.counts

    def test_counts_sum_and_weighted_recall(self):
        rng = np.random.default_rng(1)
        n = 503
        scores = rng.standard_normal(n)
        matched = rng.random(n) < 0.3
        rep = percentile_recall(scores, matched)
        assert sum(rep.counts) == n
        weighted = sum(r * c for r, c in zip(rep.recall, rep.counts)) / n
        assert abs(weighted - np.mean(matched)) < 1e-12
        # remainder lands in the final bin
        assert rep.counts[-1] == n - 49 * (n // 50)

    def test_empty_input_rejected(self):
        with pytest.raises(ValidationError):
            percentile_recall([], [])

    def test_too_few_objects_rejected(self):
        with pytest.raises(ValidationError):
            percentile_recall(np.arange(10.0), [True] * 10)


class TestComposition:
    def test_all_regular(self):
        gt = {f"t{i}": make_track(f"t{i}", 4.5) for i in range(5)}
        row = composition(mining_result(list(gt), gt), list(gt.values()))
        assert row.ratio_large == 0.0

    def test_paper_ratio(self):
        # 1268 mined with 404 large -> 31.86%
        gt = {}
        for i in range(404):
            gt[f"L{i:04d}"] = make_track(f"L{i:04d}", 9.0)
        for i in range(1268 - 404):
            gt[f"r{i:04d}"] = make_track(f"r{i:04d}", 4.5)
        row = composition(mining_result(list(gt), gt), list(gt.values()))
        assert row.ratio_large == pytest.approx(0.3186, abs=5e-5)

    def test_unresolvable_track_rejected(self):
        gt = {"t0": make_track("t0", 4.5)}
        result = mining_result(["t0"], gt)
        with pytest.raises(ValidationError):
            composition(result, [])

    def test_upsampling_factor(self):
        gt = {f"t{i}": make_track(f"t{i}", 9.0 if i < 5 else 4.0)
              for i in range(100)}
        row = composition(mining_result(["t0", "t1", "t5", "t6"], gt),
                          list(gt.values()))
        assert row.ratio_large == 0.5
        assert row.baseline_prevalence_large == 0.05
        assert row.upsampling_factor == pytest.approx(10.0)

    def test_track_size_uses_largest_frame(self):
        boxes = {0: Box3D(0, 0, 0.75, 4.0, 2.0, 1.5, 0.0),
                 1: Box3D(0, 0, 0.75, 7.5, 2.0, 1.5, 0.0)}
        track = GroundTruthTrack("t", "s0", boxes, "")
        assert track_size_category(track) == "large"


class TestAuroc:
    def test_identical_sets(self):
        a = np.arange(50.0)
        assert auroc(a, a.copy()) == pytest.approx(0.5, abs=1e-12)

    def test_total_separation(self):
        a = np.arange(0.0, 10.0)
        b = np.arange(100.0, 110.0)
        assert auroc(a, b) == 1.0
        assert auroc(b, a) == 0.0

    def test_complementarity(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = rng.standard_normal(int(rng.integers(5, 40)))
            b = rng.standard_normal(int(rng.integers(5, 40)))
            assert auroc(a, b) + auroc(b, a) == pytest.approx(1.0, abs=1e-12)

    def test_matches_sklearn(self):
        from sklearn.metrics import roc_auc_score
        rng = np.random.default_rng(3)
        a = rng.standard_normal(200)
        b = rng.standard_normal(150) + 0.4
        labels = np.concatenate([np.zeros(200), np.ones(150)])
        expected = roc_auc_score(labels, np.concatenate([a, b]))
        assert auroc(a, b) == pytest.approx(expected, abs=1e-12)


class TestDistributionReport:
    def test_same_distribution_small_gap(self):
        rng = np.random.default_rng(4)
        rep = distribution_report({
            "train": rng.standard_normal(4000) - 3.0,
            "val": rng.standard_normal(4000) - 3.0,
        })
        gap = abs(rep["sets"]["train"]["mean"] - rep["sets"]["val"]["mean"])
        assert gap < 0.1
        assert abs(rep["auroc"]["train|val"] - 0.5) < 0.05

    def test_histogram_covers_all_and_fd_bins(self):
        rng = np.random.default_rng(5)
        sets = {"a": rng.standard_normal(500),
                "b": rng.standard_normal(700) + 2.0}
        rep = distribution_report(sets)
        edges = np.asarray(rep["histogram_edges"])
        pooled = np.concatenate(list(sets.values()))
        expected = freedman_diaconis_edges(pooled)
        np.testing.assert_allclose(edges, expected)
        for name, arr in sets.items():
            counts = rep["sets"][name]["histogram_counts"]
            assert sum(counts) == len(arr)

    def test_empty_set_rejected(self):
        with pytest.raises(ValidationError):
            distribution_report({"a": []})


class TestRarestTracks:
    def test_ranking_order(self):
        entries = rarest_tracks({"a": 1.0, "b": 5.0, "c": 3.0}, top_n=2)
        assert [e["track_id"] for e in entries] == ["b", "c"]
        assert [e["rank"] for e in entries] == [1, 2]

    def test_tie_breaks_by_id(self):
        entries = rarest_tracks({"z": 2.0, "a": 2.0}, top_n=2)
        assert [e["track_id"] for e in entries] == ["a", "z"]


class TestOutputs:
    def test_recall_outputs(self, tmp_path):
        rep = percentile_recall(np.arange(100.0), [True] * 100)
        paths = write_recall_outputs(rep, str(tmp_path / "recall"))
        assert all((tmp_path / p.split("/")[-1]).exists() for p in paths)
        payload = json.loads((tmp_path / "recall.json").read_text())
        assert payload["kind"] == "recall"
        assert len(payload["recall"]) == 50

    def test_composition_outputs(self, tmp_path):
        gt = {f"t{i}": make_track(f"t{i}", 9.0 if i < 2 else 4.0)
              for i in range(10)}
        row = composition(mining_result(["t0", "t5"], gt),
                          list(gt.values()), method="d-rem")
        paths = write_composition_outputs([row], str(tmp_path / "comp"))
        csv_text = (tmp_path / "comp.csv").read_text()
        assert "d-rem" in csv_text
        assert (tmp_path / "comp.png").exists()

    def test_distribution_outputs_stable_bytes(self, tmp_path):
        rng = np.random.default_rng(6)
        sets = {"a": rng.standard_normal(200).tolist()}
        rep = distribution_report(sets)
        write_distribution_outputs(rep, str(tmp_path / "one"))
        write_distribution_outputs(rep, str(tmp_path / "two"))
        assert (tmp_path / "one.png").read_bytes() == \
            (tmp_path / "two.png").read_bytes()
        assert (tmp_path / "one.json").read_text() == \
            (tmp_path / "two.json").read_text()
