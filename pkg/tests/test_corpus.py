import math

import numpy as np
import pytest
from scipy.stats import binom, truncnorm

from rem.corpus import (CorpusSpec, DetectorSimConfig, ObjectTypeSpec,
                        attribute_density, generate_corpus,
                        mixture_support_volume, sample_attributes)
from rem.errors import ValidationError
from rem.geometry import bev_iou


def one_type(prevalence=1.0, name="only", signature=(1.5, 1.0, 2.0),
             sigma=0.3, radius=3.0, **size_kw):
    return ObjectTypeSpec(name=name, signature=list(signature),
                          prevalence=prevalence, attr_sigma=sigma,
                          attr_radius=radius, **size_kw)


def small_spec(**overrides):
    defaults = dict(
        segment_count=2, frames_per_segment=2, objects_per_segment=12,
        map_extent_m=80.0, feature_map_resolution=2.0, noise_scale=0.03,
        seed=11, object_type_mixture=[one_type()],
        detector=DetectorSimConfig(ensemble_size=2, miss_base=0.0))
    defaults.update(overrides)
    return CorpusSpec(**defaults)


class TestSpecValidation:
    def test_prevalence_must_sum_to_one(self):
        bad = small_spec(object_type_mixture=[one_type(prevalence=0.9)])
        with pytest.raises(ValidationError):
            generate_corpus(bad)

    def test_zero_segments(self):
        with pytest.raises(ValidationError):
            small_spec(segment_count=0).validate()

    def test_signature_lengths_must_match(self):
        bad = small_spec(object_type_mixture=[
            one_type(prevalence=0.5),
            one_type(prevalence=0.5, name="b", signature=(1.0, 2.0))])
        with pytest.raises(ValidationError):
            bad.validate()

    def test_json_round_trip(self):
        spec = small_spec()
        back = CorpusSpec.from_json(spec.to_json())
        assert back.segment_count == spec.segment_count
        assert back.object_type_mixture[0].name == "only"
        assert back.detector.ensemble_size == 2


class TestDeterminism:
    def test_same_seed_identical_corpora(self):
        a = generate_corpus(small_spec())
        b = generate_corpus(small_spec())
        assert len(a.detections) == len(b.detections)
        for da, db in zip(a.detections, b.detections):
            assert da.to_json() == db.to_json()
        for sa, sb in zip(a.segments, b.segments):
            np.testing.assert_array_equal(sa.feature_map, sb.feature_map)
        assert a.track_density == b.track_density

    def test_different_seed_differs(self):
        a = generate_corpus(small_spec(seed=1))
        b = generate_corpus(small_spec(seed=2))
        assert not np.array_equal(a.segments[0].feature_map,
                                  b.segments[0].feature_map)


class TestDegenerateMixture:
    def test_single_type_zero_sigma_equal_densities(self):
        spec = small_spec(
            noise_scale=0.0,
            object_type_mixture=[one_type(sigma=0.0)])
        corpus = generate_corpus(spec)
        densities = set(corpus.track_density.values())
        assert densities == {1.0}
        # footprint cells hold the exact signature
        seg = corpus.segments[0]
        painted = seg.feature_map[np.abs(seg.feature_map).sum(axis=2) > 0]
        for row in painted:
            np.testing.assert_allclose(row, [1.5, 1.0, 2.0], atol=1e-6)


class TestRareCounts:
    def test_rare_count_within_binomial_interval(self):
        spec = small_spec(
            segment_count=25, objects_per_segment=40, frames_per_segment=1,
            object_type_mixture=[
                one_type(prevalence=0.97, name="common"),
                one_type(prevalence=0.03, name="rare",
                         signature=(4.0, 3.5, 0.5),
                         length=(9.0, 0.5), width=(2.5, 0.1),
                         height=(3.2, 0.2)),
            ])
        corpus = generate_corpus(spec)
        n_rare = sum(1 for t in corpus.gt_tracks if t.attribute_tag == "rare")
        lo, hi = binom.ppf([0.005, 0.995], 1000, 0.03)
        assert lo <= n_rare <= hi


class TestAttributeMixture:
    def two_types(self):
        return [
            one_type(prevalence=0.9, name="a", sigma=0.3, radius=2.0),
            one_type(prevalence=0.1, name="b", signature=(4.0, 3.5, 0.5),
                     sigma=0.25, radius=2.0),
        ]

    def test_density_matches_scipy_truncnorm(self):
        types = self.two_types()
        rng = np.random.default_rng(0)
        attrs, _, dens = sample_attributes(types, 50, rng)
        for a, d in zip(attrs, dens):
            expected = 0.0
            for t in types:
                part = t.prevalence
                for x, mu, sd in zip(a, t.signature, t.sigma_vector()):
                    part *= truncnorm.pdf(x, -t.attr_radius, t.attr_radius,
                                          loc=mu, scale=sd)
                expected += part
            assert d == pytest.approx(expected, rel=1e-10)

    def test_draws_stay_in_support(self):
        types = self.two_types()
        attrs, tix, dens = sample_attributes(types, 2000,
                                             np.random.default_rng(1))
        assert np.all(dens > 0)
        for a, ti in zip(attrs, tix):
            t = types[ti]
            dev = np.abs(a - np.asarray(t.signature)) / t.sigma_vector()
            assert np.all(dev <= t.attr_radius + 1e-9)

    def test_importance_sampling_volume(self):
        # E[1/density] over mixture draws equals the support volume
        types = self.two_types()
        _, _, dens = sample_attributes(types, 60000,
                                       np.random.default_rng(2))
        est = float(np.mean(1.0 / dens))
        vol = mixture_support_volume(types)
        assert abs(est - vol) / vol < 0.05

    def test_zero_sigma_density_convention(self):
        t = one_type(sigma=0.0)
        assert attribute_density(np.array([1.5, 1.0, 2.0]), [t]) == 1.0
        assert attribute_density(np.array([1.5, 1.0, 2.5]), [t]) == 0.0


class TestGeneratedGeometry:
    def test_footprints_disjoint_and_in_bounds(self):
        corpus = generate_corpus(small_spec(objects_per_segment=20))
        by_segment = {}
        for t in corpus.gt_tracks:
            by_segment.setdefault(t.segment_id, []).append(t.boxes[0])
        for boxes in by_segment.values():
            for i, a in enumerate(boxes):
                assert abs(a.center_x) <= 40.0 and abs(a.center_y) <= 40.0
                for b in boxes[i + 1:]:
                    assert bev_iou(a, b) == 0.0

    def test_static_tracks_share_box_across_frames(self):
        corpus = generate_corpus(small_spec())
        for t in corpus.gt_tracks:
            assert list(t.boxes) == [0, 1]
            assert t.boxes[0] == t.boxes[1]

    def test_detection_range_matches_box_center(self):
        corpus = generate_corpus(small_spec())
        for det in corpus.detections:
            expected = math.hypot(det.box.center_x, det.box.center_y)
            assert det.range_m == pytest.approx(expected, abs=1e-6)

    def test_detection_density_inherits_object_density(self):
        corpus = generate_corpus(small_spec())
        for det in corpus.detections:
            seg, _, obj, _ = det.detection_id.split("/")
            track_id = f"{seg}/t{obj[1:]}"
            assert corpus.detection_density[det.detection_id] == \
                corpus.track_density[track_id]


class TestDetectorSim:
    def test_ensemble_members_present(self):
        corpus = generate_corpus(small_spec(
            detector=DetectorSimConfig(ensemble_size=3, miss_base=0.0)))
        models = {d.model_id for d in corpus.detections}
        assert models == {0, 1, 2}
        # no misses: every object appears once per model per frame
        assert len(corpus.detections) == 2 * 2 * 12 * 3

    def test_miss_rate_thins_detections(self):
        full = generate_corpus(small_spec())
        thinned = generate_corpus(small_spec(
            detector=DetectorSimConfig(ensemble_size=2, miss_base=0.5)))
        assert len(thinned.detections) < len(full.detections)
