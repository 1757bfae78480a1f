import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mammnet.errors import ShapeError
from mammnet.metrics import (DetectionRecord, MetricError, froc_curve, froc_recall_at, gland_scores,
                             link_accuracy, malignancy_metrics, mask_iou, match_detections,
                             operating_threshold, recall_at_fpi)

from oracles import pairwise_auc, pixel_iou, sweep_recall


def box(y0, y1, x0, x1, shape=(8, 8)):
    m = np.zeros(shape, bool)
    m[y0:y1, x0:x1] = True
    return m


def random_problem(rng, n_images=4, shape=(8, 8)):
    """Random ground truth plus detections that partly overlap it."""
    gts, records = {}, []
    for i in range(n_images):
        iid = f"img{i}"
        gts[iid] = []
        for _ in range(int(rng.integers(0, 3))):
            y, x = rng.integers(0, 6, 2)
            gts[iid].append(box(y, y + 2, x, x + 2, shape))
        for _ in range(int(rng.integers(0, 5))):
            if gts[iid] and rng.random() < 0.5:
                g = gts[iid][int(rng.integers(len(gts[iid])))]
                mask = np.roll(g, int(rng.integers(-1, 2)), axis=int(rng.integers(2)))
            else:
                y, x = rng.integers(0, 6, 2)
                mask = box(y, y + 2, x, x + 2, shape)
            # coarse scores so ties occur
            records.append(DetectionRecord(iid, float(rng.integers(0, 6)) / 5, mask, float(rng.random())))
    if not any(gts.values()):
        gts["img0"].append(box(0, 2, 0, 2, shape))
    return records, gts


class TestMaskIou:
    def test_identical(self):
        assert mask_iou(box(0, 2, 0, 2), box(0, 2, 0, 2)) == 1.0

    def test_disjoint(self):
        assert mask_iou(box(0, 2, 0, 2), box(4, 6, 4, 6)) == 0.0

    def test_hand_example(self):
        a = np.zeros((4, 4), bool)
        a[0:2, 0] = True
        b = np.zeros((4, 4), bool)
        b[0:4, 0] = True
        assert mask_iou(a, b) == 0.5

    def test_both_empty(self):
        assert mask_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mask_iou(np.zeros((3, 3)), np.zeros((3, 4)))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.booleans(), min_size=16, max_size=16), st.lists(st.booleans(), min_size=16, max_size=16))
    def test_properties_and_oracle(self, a, b):
        a = np.array(a).reshape(4, 4)
        b = np.array(b).reshape(4, 4)
        iou = mask_iou(a, b)
        assert iou == pixel_iou(a, b)
        assert iou == mask_iou(b, a)
        assert 0.0 <= iou <= 1.0
        assert (iou == 1.0) == (np.array_equal(a, b) and a.any())


class TestMatching:
    def test_exact_cover_is_tp(self):
        m = match_detections([DetectionRecord("a", 0.9, box(0, 2, 0, 2))], {"a": [box(0, 2, 0, 2)]})
        assert m[0].matched_gt == 0

    def test_two_dets_one_gt(self):
        recs = [DetectionRecord("a", 0.4, box(0, 2, 0, 2)), DetectionRecord("a", 0.8, box(0, 2, 0, 2))]
        m = match_detections(recs, {"a": [box(0, 2, 0, 2)]})
        assert [r.matched_gt for r in m] == [None, 0]

    def test_low_overlap_counts_at_point_one(self):
        # IoU 0.15: 3 shared pixels over a 20-pixel union
        gt = np.zeros((10, 10), bool)
        gt[0, :10] = True
        gt[1, :3] = True
        det = np.zeros((10, 10), bool)
        det[1, :10] = True
        assert mask_iou(det, gt) == pytest.approx(0.15)
        assert match_detections([DetectionRecord("a", 0.5, det)], {"a": [gt]})[0].matched_gt == 0

    def test_prefers_highest_iou(self):
        gts = {"a": [box(0, 4, 0, 2), box(0, 4, 0, 4)]}
        m = match_detections([DetectionRecord("a", 0.5, box(0, 4, 0, 4))], gts)
        assert m[0].matched_gt == 1

    def test_wrong_image_never_matches(self):
        m = match_detections([DetectionRecord("b", 0.5, box(0, 2, 0, 2))], {"a": [box(0, 2, 0, 2)], "b": []})
        assert m[0].matched_gt is None


class TestRecallAtFpi:
    def test_perfect_detector(self):
        gts = {"a": [box(0, 2, 0, 2)], "b": [box(4, 6, 4, 6)]}
        recs = [DetectionRecord("a", 1.0, gts["a"][0]), DetectionRecord("b", 1.0, gts["b"][0])]
        for t in (0.0, 0.25, 1.0):
            assert recall_at_fpi(recs, gts, t) == 1.0

    def test_silent_detector(self):
        assert recall_at_fpi([], {"a": [box(0, 2, 0, 2)]}, 1.0) == 0.0

    def test_no_ground_truth(self):
        with pytest.raises(MetricError):
            recall_at_fpi([], {"a": []}, 1.0)

    def test_hand_built_four_images(self):
        gts = {"i0": [box(0, 2, 0, 2)], "i1": [box(0, 2, 0, 2), box(5, 7, 5, 7)], "i2": [], "i3": [box(3, 5, 3, 5)]}
        recs = [
            DetectionRecord("i0", 0.9, box(0, 2, 0, 2)),   # TP
            DetectionRecord("i2", 0.8, box(0, 2, 0, 2)),   # FP
            DetectionRecord("i1", 0.7, box(5, 7, 5, 7)),   # TP
            DetectionRecord("i3", 0.6, box(0, 1, 6, 8)),   # FP
            DetectionRecord("i3", 0.5, box(3, 5, 3, 5)),   # TP
        ]
        # 4 images: FPI 0 -> 1/4, 0.25 -> 2/4, 0.5 -> 3/4
        assert recall_at_fpi(recs, gts, 0.0) == 0.25
        assert recall_at_fpi(recs, gts, 0.25) == 0.5
        assert recall_at_fpi(recs, gts, 0.5) == 0.75
        for t in (0.0, 0.25, 0.5, 1.0):
            assert recall_at_fpi(recs, gts, t) == sweep_recall(recs, gts, t)

    def test_random_against_sweep_oracle(self, rng):
        for _ in range(30):
            recs, gts = random_problem(rng)
            for t in (0.0, 0.14, 0.25, 0.5, 1.0, 2.0):
                assert recall_at_fpi(recs, gts, t) == sweep_recall(recs, gts, t)

    def test_monotone_in_t(self, rng):
        for _ in range(20):
            recs, gts = random_problem(rng)
            values = [recall_at_fpi(recs, gts, t) for t in np.linspace(0, 3, 13)]
            assert values == sorted(values)

    def test_zero_score_false_positive_changes_nothing(self, rng):
        for _ in range(20):
            recs, gts = random_problem(rng)
            if recs and min(r.score for r in recs) == 0.0:
                continue
            extra = recs + [DetectionRecord("img1", 0.0, box(6, 8, 0, 2))]
            for t in (0.14, 0.25, 0.5, 1.0):
                assert recall_at_fpi(extra, gts, t) == recall_at_fpi(recs, gts, t)

    def test_operating_threshold(self):
        gts = {"a": [box(0, 2, 0, 2)], "b": []}
        recs = [DetectionRecord("a", 0.9, gts["a"][0]), DetectionRecord("b", 0.3, box(0, 2, 0, 2))]
        assert operating_threshold(recs, gts, 0.25) == 0.9
        assert operating_threshold(recs, gts, 0.5) == 0.3
        assert operating_threshold([], gts, 0.25) == np.inf


class TestFroc:
    def test_single_tp(self):
        assert froc_curve([DetectionRecord("a", 0.7, box(0, 2, 0, 2))], {"a": [box(0, 2, 0, 2)]}) == [(0.0, 1.0)]

    def test_staircase_and_agreement(self, rng):
        for _ in range(30):
            recs, gts = random_problem(rng)
            curve = froc_curve(recs, gts)
            fpis = [p[0] for p in curve]
            recalls = [p[1] for p in curve]
            assert fpis == sorted(set(fpis))
            assert recalls == sorted(recalls)
            for t in (0.14, 0.25, 0.5, 1.0, float(rng.uniform(0, 2))):
                assert froc_recall_at(curve, t) == recall_at_fpi(recs, gts, t)

    def test_no_ground_truth_is_flat(self):
        assert froc_curve([DetectionRecord("a", 0.5, box(0, 2, 0, 2))], {"a": []}) == [(0.0, 0.0), (1.0, 0.0)]


class TestMalignancy:
    def test_hand_example(self):
        m = malignancy_metrics([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert m.roc_auc == 0.75

    def test_perfect_separation(self):
        m = malignancy_metrics([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert (m.roc_auc, m.sensitivity, m.specificity) == (1.0, 1.0, 1.0)

    def test_all_tied(self):
        assert malignancy_metrics([0.5] * 6, [0, 1] * 3).roc_auc == 0.5

    def test_single_class(self):
        with pytest.raises(MetricError):
            malignancy_metrics([0.2, 0.3], [1, 1])

    def test_random_against_pair_count(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 12))
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            scores = rng.integers(0, 5, n) / 4
            m = malignancy_metrics(scores, labels)
            assert m.roc_auc == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)
            # Youden point maximizes sens + spec over every cut
            best = max(((scores >= c)[labels == 1].mean() + (scores < c)[labels == 0].mean())
                       for c in np.unique(scores))
            assert m.sensitivity + m.specificity == pytest.approx(best)

    def test_gland_scores_take_max_above_threshold(self):
        recs = [DetectionRecord("c1/cc", 0.9, box(0, 1, 0, 1), 0.2), DetectionRecord("c1/mlo", 0.8, box(0, 1, 0, 1), 0.7),
                DetectionRecord("c1/cc", 0.1, box(0, 1, 0, 1), 0.99)]
        gland_of = {"c1/cc": "c1", "c1/mlo": "c1", "c2/cc": "c2", "c2/mlo": "c2"}
        assert gland_scores(recs, gland_of, 0.5) == {"c1": 0.7, "c2": 0.0}


class TestLinkAccuracy:
    def test_all_correct(self):
        assert link_accuracy([(0, 1), (1, 0)], {(0, 0), (1, 1)}, {0: 0, 1: 1}, {0: 1, 1: 0}) == 1.0

    def test_none_decoded(self):
        assert link_accuracy([], {(0, 0)}, {}, {}) == 0.0

    def test_half(self):
        assert link_accuracy([(0, 0)], {(0, 0), (1, 1)}, {0: 0}, {0: 0}) == 0.5

    def test_unmatched_detection_is_wrong(self):
        assert link_accuracy([(0, 0)], {(0, 0)}, {0: None}, {0: 0}) == 0.0

    def test_duplicate_links_count_once(self):
        assert link_accuracy([(0, 0), (1, 0)], {(0, 0)}, {0: 0, 1: 0}, {0: 0}) == 1.0

    def test_no_pairs(self):
        assert link_accuracy([(0, 0)], set(), {0: 0}, {0: 0}) == 0.0
