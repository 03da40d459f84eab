"""Ranking and distribution metrics against exhaustive enumeration oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anogen.metrics import (FeatureSpaceDistance, UndefinedMetricError, auroc,
                            average_precision, connected_components, f1_max,
                            ic_lpips, inception_score, pro)


# ---------------------------------------------------------------------------
# oracles: direct transcriptions of the definitions, loops only

def oracle_auroc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def _pr_points(scores, labels):
    pts = []
    for thr in sorted(set(scores), reverse=True):
        tp = sum(1 for s, l in zip(scores, labels) if s >= thr and l == 1)
        fp = sum(1 for s, l in zip(scores, labels) if s >= thr and l == 0)
        pts.append((tp, fp))
    return pts


def oracle_ap(scores, labels):
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for tp, fp in _pr_points(scores, labels):
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return ap


def oracle_f1_max(scores, labels):
    n_pos = sum(labels)
    best = 0.0
    for tp, fp in _pr_points(scores, labels):
        fn = n_pos - tp
        best = max(best, 2.0 * tp / (2.0 * tp + fp + fn))
    return best


def oracle_components(mask):
    """8-connected components by BFS; returns a list of coordinate sets."""
    h, w = len(mask), len(mask[0])
    seen = [[False] * w for _ in range(h)]
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r][c] and not seen[r][c]:
                queue, comp = [(r, c)], set()
                seen[r][c] = True
                while queue:
                    cr, cc = queue.pop()
                    comp.add((cr, cc))
                    for dr in (-1, 0, 1):
                        for dc in (-1, 0, 1):
                            nr, nc = cr + dr, cc + dc
                            if 0 <= nr < h and 0 <= nc < w and mask[nr][nc] \
                                    and not seen[nr][nc]:
                                seen[nr][nc] = True
                                queue.append((nr, nc))
                comps.append(comp)
    return comps


def oracle_pro(maps, masks, ceiling):
    comps = []
    negatives = set()
    for i, mask in enumerate(masks):
        for comp in oracle_components(mask):
            comps.append({(i, r, c) for r, c in comp})
        for r in range(len(mask)):
            for c in range(len(mask[0])):
                if not mask[r][c]:
                    negatives.add((i, r, c))
    every = sorted({float(s) for m in maps for row in m for s in row},
                   reverse=True)
    curve = {0.0: 0.0}
    for thr in every:
        pred = {(i, r, c)
                for i, m in enumerate(maps)
                for r, row in enumerate(m)
                for c, s in enumerate(row) if s >= thr}
        fpr = len(pred & negatives) / len(negatives)
        if fpr > ceiling + 1e-12:
            continue
        overlap = sum(len(pred & comp) / len(comp) for comp in comps) / len(comps)
        curve[fpr] = max(curve.get(fpr, 0.0), overlap)
    xs = sorted(curve)
    integral = 0.0
    for j, x in enumerate(xs):
        nxt = min(xs[j + 1] if j + 1 < len(xs) else ceiling, ceiling)
        integral += curve[x] * max(nxt - x, 0.0)
    return integral / ceiling


def random_instance(rng, *, need_both_classes):
    n = int(rng.integers(2 if need_both_classes else 1, 13))
    scores = (rng.integers(0, 9, size=n) / 8.0).tolist()
    while True:
        labels = rng.integers(0, 2, size=n).tolist()
        if need_both_classes and (sum(labels) == 0 or sum(labels) == n):
            continue
        if sum(labels) >= 1:
            return scores, labels


# ---------------------------------------------------------------------------

class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0

    def test_inverted_separation(self):
        assert auroc([0.9, 0.8, 0.1], [0, 1, 1]) == oracle_auroc(
            [0.9, 0.8, 0.1], [0, 1, 1]) == 0.0

    def test_all_ties_is_half(self):
        assert auroc([0.4] * 6, [0, 1, 0, 1, 0, 1]) == 0.5

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetricError):
            auroc([0.1, 0.2], [1, 1])
        with pytest.raises(UndefinedMetricError):
            auroc([0.1, 0.2], [0, 0])

    def test_matches_pair_counting(self):
        rng = np.random.default_rng(0)
        for _ in range(250):
            s, l = random_instance(rng, need_both_classes=True)
            assert auroc(s, l) == pytest.approx(oracle_auroc(s, l), abs=1e-9)

    def test_label_complement_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            s, l = random_instance(rng, need_both_classes=True)
            flipped = [1 - x for x in l]
            assert auroc(s, l) + auroc(s, flipped) == pytest.approx(1.0, abs=1e-12)


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0]) == 1.0

    def test_two_point_example(self):
        assert average_precision([0.9, 0.8], [0, 1]) == pytest.approx(0.5, abs=1e-12)

    def test_single_positive_ranked_first(self):
        assert average_precision([0.9, 0.5, 0.4, 0.3, 0.2], [1, 0, 0, 0, 0]) == 1.0

    def test_no_positives_undefined(self):
        with pytest.raises(UndefinedMetricError):
            average_precision([0.5, 0.4], [0, 0])

    def test_matches_enumeration(self):
        rng = np.random.default_rng(2)
        for _ in range(250):
            s, l = random_instance(rng, need_both_classes=False)
            assert average_precision(s, l) == pytest.approx(oracle_ap(s, l),
                                                            abs=1e-9)


class TestF1Max:
    def test_perfect_ranking(self):
        assert f1_max([0.9, 0.2], [1, 0]) == 1.0

    def test_tied_scores_example(self):
        assert f1_max([0.5, 0.5], [1, 0]) == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_no_positives_undefined(self):
        with pytest.raises(UndefinedMetricError):
            f1_max([0.5], [0])

    def test_matches_enumeration(self):
        rng = np.random.default_rng(3)
        for _ in range(250):
            s, l = random_instance(rng, need_both_classes=False)
            assert f1_max(s, l) == pytest.approx(oracle_f1_max(s, l), abs=1e-9)


def random_pro_instance(rng, shape=None):
    while True:
        h, w = shape or (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        mask = rng.integers(0, 2, size=(h, w))
        if mask.sum() == 0 or (mask == 0).sum() == 0:
            continue
        scores = rng.integers(0, 5, size=(h, w)) / 4.0
        return scores.tolist(), mask.tolist()


class TestPro:
    def test_predictions_equal_masks(self):
        mask = np.zeros((6, 6), dtype=np.uint8)
        mask[1:3, 1:3] = 1
        mask[4, 4] = 1
        for ceiling in (0.05, 0.3, 1.0):
            assert pro(mask.astype(float), mask, ceiling) == pytest.approx(
                1.0, abs=1e-12)

    def test_all_zero_predictions(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[0, 0] = 1
        assert pro(np.zeros((4, 4)), mask) == 0.0

    def test_half_covered_component(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[1, 1:3] = 1
        scores = np.zeros((4, 4))
        scores[1, 1] = 1.0
        assert pro(scores, mask) == pytest.approx(0.5, abs=1e-12)

    def test_equal_fpr_keeps_best_overlap(self):
        mask = np.zeros((3, 3), dtype=np.uint8)
        mask[0, 0:2] = 1
        scores = np.zeros((3, 3))
        scores[0, 0] = 0.9
        scores[0, 1] = 0.8
        assert pro(scores, mask) == pytest.approx(1.0, abs=1e-12)

    def test_diagonal_pixels_form_one_component(self):
        mask = np.eye(4, dtype=np.uint8)
        labels = connected_components(mask)
        assert labels.max() == 1
        scores = np.zeros((4, 4))
        scores[0, 0] = scores[1, 1] = 1.0
        assert pro(scores, mask) == pytest.approx(0.5, abs=1e-12)

    def test_batch_of_maps(self):
        masks = [[[1, 0], [0, 0]], [[0, 0], [0, 1]]]
        maps = [[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]
        assert pro(maps, masks) == pytest.approx(
            oracle_pro(maps, masks, 0.3), abs=1e-9)

    def test_no_components_undefined(self):
        with pytest.raises(UndefinedMetricError):
            pro(np.zeros((3, 3)), np.zeros((3, 3)))

    def test_no_negatives_undefined(self):
        with pytest.raises(UndefinedMetricError):
            pro(np.ones((2, 2)), np.ones((2, 2)))

    def test_matches_enumeration(self):
        rng = np.random.default_rng(4)
        for _ in range(150):
            scores, mask = random_pro_instance(rng)
            for ceiling in (0.3, 0.7):
                assert pro(np.array(scores), np.array(mask), ceiling) == \
                    pytest.approx(oracle_pro([scores], [mask], ceiling), abs=1e-9)

    def test_matches_enumeration_multi_image(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            shape = (int(rng.integers(1, 4)), int(rng.integers(2, 5)))
            pairs = [random_pro_instance(rng, shape) for _ in range(2)]
            maps = [p[0] for p in pairs]
            masks = [p[1] for p in pairs]
            got = pro(np.array(maps, dtype=float), np.array(masks), 0.3)
            assert got == pytest.approx(oracle_pro(maps, masks, 0.3), abs=1e-9)


@st.composite
def scored_instances(draw):
    n = draw(st.integers(2, 12))
    scores = [draw(st.integers(0, 8)) / 8.0 for _ in range(n)]
    labels = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)
                  .filter(lambda l: 0 < sum(l) < n))
    return scores, labels


class TestMonotoneInvariance:
    @settings(max_examples=60, deadline=None)
    @given(scored_instances())
    def test_affine_rescaling_preserves_ranking_metrics(self, inst):
        scores, labels = inst
        moved = [s / 4.0 + 0.5 for s in scores]
        assert auroc(moved, labels) == pytest.approx(auroc(scores, labels),
                                                     abs=1e-12)
        assert average_precision(moved, labels) == pytest.approx(
            average_precision(scores, labels), abs=1e-12)
        assert f1_max(moved, labels) == pytest.approx(f1_max(scores, labels),
                                                      abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(scored_instances())
    def test_ranges(self, inst):
        scores, labels = inst
        assert 0.0 <= auroc(scores, labels) <= 1.0
        assert 0.0 <= average_precision(scores, labels) <= 1.0
        assert 0.0 <= f1_max(scores, labels) <= 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_pro_monotone_invariance(self, seed):
        rng = np.random.default_rng(seed)
        scores, mask = random_pro_instance(rng)
        a = pro(np.array(scores), np.array(mask))
        b = pro(np.array(scores) * 3.0 + 1.0, np.array(mask))
        assert a == pytest.approx(b, abs=1e-12)
        assert 0.0 <= a <= 1.0


class TestInceptionScore:
    def test_uniform_posteriors_score_one(self):
        clf = lambda imgs: np.full((len(imgs), 5), 0.2)
        assert inception_score(list(range(10)), clf, splits=2) == 1.0

    def test_one_hot_covering_classes(self):
        for c in (2, 4, 7):
            clf = lambda imgs, c=c: np.eye(c)[np.arange(len(imgs)) % c]
            got = inception_score(list(range(c)), clf, splits=1)
            assert got == pytest.approx(c, abs=1e-9)

    def test_split_averaging(self):
        posteriors = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]] * 3 +
                              [[0.5, 0.5]] * 6)
        clf = lambda imgs: posteriors[:len(imgs)]
        split_a = posteriors[:6]
        split_b = posteriors[6:]

        def split_score(p):
            marginal = p.mean(axis=0)
            kls = []
            for row in p:
                kl = sum(v * math.log(v / marginal[i])
                         for i, v in enumerate(row) if v > 0)
                kls.append(kl)
            return math.exp(sum(kls) / len(kls))

        expected = (split_score(split_a) + split_score(split_b)) / 2.0
        assert inception_score(list(range(12)), clf, splits=2) == \
            pytest.approx(expected, abs=1e-9)

    def test_rows_must_be_distributions(self):
        clf = lambda imgs: np.full((len(imgs), 3), 0.5)
        with pytest.raises(ValueError, match="sum"):
            inception_score(list(range(4)), clf, splits=1)
        clf_neg = lambda imgs: np.tile([[1.5, -0.5]], (len(imgs), 1))
        with pytest.raises(ValueError):
            inception_score(list(range(4)), clf_neg, splits=1)

    def test_too_few_images_for_splits(self):
        clf = lambda imgs: np.full((len(imgs), 2), 0.5)
        with pytest.raises(UndefinedMetricError):
            inception_score(list(range(3)), clf, splits=4)


class _MatrixDistance:
    def __init__(self, table):
        self.table = table

    def pairwise(self, a, b):
        return np.array([[self.table[(x, y)] for y in b] for x in a])


class TestIcLpips:
    def test_identical_images_score_zero(self):
        embed = lambda imgs: np.ones((len(imgs), 4))
        dist = FeatureSpaceDistance(embed)
        assert ic_lpips([1, 1, 1], [0], dist) == 0.0

    def test_two_clusters_average(self):
        table = {}
        gen = ["g0", "g1", "g2", "g3"]
        train = ["tA", "tB"]
        for g in gen[:2]:
            table[(g, "tA")], table[(g, "tB")] = 0.1, 0.9
        for g in gen[2:]:
            table[(g, "tA")], table[(g, "tB")] = 0.9, 0.1
        for x in gen:
            for y in gen:
                table[(x, y)] = 0.0
        table[("g0", "g1")] = table[("g1", "g0")] = 0.2
        table[("g2", "g3")] = table[("g3", "g2")] = 0.6
        got = ic_lpips(gen, train, _MatrixDistance(table))
        assert got == pytest.approx((0.2 + 0.6) / 2.0, abs=1e-12)

    def test_singleton_clusters_ignored(self):
        table = {("g0", "tA"): 0.0, ("g1", "tA"): 0.0, ("g2", "tB"): 0.0,
                 ("g0", "tB"): 1.0, ("g1", "tB"): 1.0, ("g2", "tA"): 1.0}
        for x in ("g0", "g1", "g2"):
            for y in ("g0", "g1", "g2"):
                table[(x, y)] = 0.5 if x != y else 0.0
        got = ic_lpips(["g0", "g1", "g2"], ["tA", "tB"], _MatrixDistance(table))
        assert got == pytest.approx(0.5, abs=1e-12)

    def test_all_singletons_undefined(self):
        table = {("g0", "tA"): 0.0, ("g0", "tB"): 1.0,
                 ("g1", "tA"): 1.0, ("g1", "tB"): 0.0}
        with pytest.raises(UndefinedMetricError, match="singleton"):
            ic_lpips(["g0", "g1"], ["tA", "tB"], _MatrixDistance(table))

    def test_empty_inputs_undefined(self):
        dist = FeatureSpaceDistance(lambda imgs: np.ones((len(imgs), 2)))
        with pytest.raises(UndefinedMetricError):
            ic_lpips([], [1], dist)
        with pytest.raises(UndefinedMetricError):
            ic_lpips([1], [], dist)

    def test_feature_space_distance_geometry(self):
        feats = {"a": [1.0, 0.0], "b": [0.0, 2.0], "c": [3.0, 0.0]}
        dist = FeatureSpaceDistance(lambda imgs: np.array([feats[i] for i in imgs]))
        m = dist.pairwise(["a", "b", "c"], ["a", "b", "c"])
        assert m[0, 0] == pytest.approx(0.0, abs=1e-12)
        assert m[0, 2] == pytest.approx(0.0, abs=1e-12)  # same direction
        assert m[0, 1] == pytest.approx(math.sqrt(2.0), abs=1e-12)


class TestValidation:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            auroc([0.1, 0.2], [1])
        with pytest.raises(ValueError):
            pro(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_empty_undefined(self):
        with pytest.raises(UndefinedMetricError):
            auroc([], [])

    def test_non_binary_labels(self):
        with pytest.raises(ValueError):
            auroc([0.1, 0.2], [1, 2])

    def test_nan_scores_rejected(self):
        with pytest.raises(ValueError):
            auroc([float("nan"), 0.2], [1, 0])
