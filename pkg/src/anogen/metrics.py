"""Evaluation metrics over anomaly scores, score maps, and generated sets.

All ranking metrics are defined combinatorially (pair counts, unique-score
thresholds) and computed with sort/cumsum so pixel-level inputs with a
million scores stay fast while matching exhaustive enumeration exactly.
"""

from __future__ import annotations

import numpy as np
import cv2
from scipy.stats import rankdata

cv2.setNumThreads(1)


class UndefinedMetricError(ValueError):
    """The metric has no defined value for these inputs."""


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    l = np.asarray(labels).ravel()
    if s.shape != l.shape:
        raise ValueError("scores and labels differ in length")
    if s.size == 0:
        raise UndefinedMetricError("no samples")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    uniq = set(np.unique(l).tolist())
    if not uniq <= {0, 1}:
        raise ValueError("labels must be 0/1")
    return s, l.astype(np.int64)


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic: P(pos > neg) with ties counting half."""
    s, l = _scores_labels(scores, labels)
    n_pos = int(l.sum())
    n_neg = l.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auroc needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[l == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(s, l):
    """Cumulative TP/FP at each unique score threshold, descending."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    l_sorted = l[order]
    last = np.nonzero(np.diff(s_sorted))[0]
    ends = np.append(last, s_sorted.size - 1)
    tp = np.cumsum(l_sorted)[ends].astype(np.float64)
    fp = np.cumsum(1 - l_sorted)[ends].astype(np.float64)
    return tp, fp


def average_precision(scores, labels) -> float:
    """Step-interpolated PR integral: sum over descending unique-score
    thresholds of (R_k - R_{k-1}) * P_k."""
    s, l = _scores_labels(scores, labels)
    n_pos = int(l.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs a positive")
    tp, fp = _threshold_counts(s, l)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def pr_curve(scores, labels):
    """(recall, precision) arrays at descending unique-score thresholds."""
    s, l = _scores_labels(scores, labels)
    n_pos = int(l.sum())
    if n_pos == 0:
        raise UndefinedMetricError("pr curve needs a positive")
    tp, fp = _threshold_counts(s, l)
    return tp / n_pos, tp / (tp + fp)


def f1_max(scores, labels) -> float:
    """Best F1 over the unique-score threshold set (pred = score >= thr)."""
    s, l = _scores_labels(scores, labels)
    n_pos = int(l.sum())
    if n_pos == 0:
        raise UndefinedMetricError("f1 needs a positive")
    tp, fp = _threshold_counts(s, l)
    f1 = 2.0 * tp / (tp + fp + n_pos)
    return float(f1.max())


def connected_components(mask: np.ndarray) -> np.ndarray:
    """8-connected component labels (0 = background)."""
    grid = (np.asarray(mask) > 0).astype(np.uint8)
    if grid.ndim != 2:
        raise ValueError("mask must be 2-d")
    _, labels = cv2.connectedComponents(grid, connectivity=8)
    return labels


def pro(score_maps, masks, fpr_ceiling: float = 0.3) -> float:
    """Per-region overlap averaged over admissible thresholds.

    For every unique score threshold (pred = score >= thr) the mean
    per-component overlap is paired with the global false-positive rate;
    the resulting step curve is integrated over FPR in [0, ceiling] and
    normalized by the ceiling. Components use 8-connectivity.
    """
    if not 0.0 < fpr_ceiling <= 1.0:
        raise ValueError("fpr ceiling must lie in (0, 1]")
    score_maps = np.asarray(score_maps, dtype=np.float64)
    mask_arr = np.asarray(masks)
    if score_maps.shape != mask_arr.shape:
        raise ValueError("score maps and masks differ in shape")
    if score_maps.ndim == 2:
        score_maps = score_maps[None]
        mask_arr = mask_arr[None]
    if score_maps.ndim != 3:
        raise ValueError("expected [N, H, W] score maps")
    if not np.isfinite(score_maps).all():
        raise ValueError("scores must be finite")

    flat_scores = score_maps.reshape(-1)
    pro_weight = np.zeros(flat_scores.size, dtype=np.float64)
    fpr_weight = np.zeros(flat_scores.size, dtype=np.float64)
    n_components = 0
    offset = 0
    per_image = score_maps[0].size
    for i in range(score_maps.shape[0]):
        labels = connected_components(mask_arr[i]).reshape(-1)
        for comp in range(1, labels.max() + 1):
            member = labels == comp
            pro_weight[offset + np.nonzero(member)[0]] = 1.0 / member.sum()
            n_components += 1
        fpr_weight[offset + np.nonzero(labels == 0)[0]] = 1.0
        offset += per_image
    if n_components == 0:
        raise UndefinedMetricError("pro needs at least one anomalous component")
    n_neg = fpr_weight.sum()
    if n_neg == 0:
        raise UndefinedMetricError("pro needs normal pixels for the FPR axis")
    pro_weight /= n_components
    fpr_weight /= n_neg

    order = np.argsort(-flat_scores, kind="mergesort")
    s_sorted = flat_scores[order]
    ends = np.append(np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1)
    pro_at = np.cumsum(pro_weight[order])[ends]
    fpr_at = np.cumsum(fpr_weight[order])[ends]

    keep = fpr_at <= fpr_ceiling + 1e-12
    fprs = np.concatenate([[0.0], fpr_at[keep]])
    pros = np.concatenate([[0.0], pro_at[keep]])
    # collapse equal-FPR points to their best overlap (thresholds descend, so
    # the last entry of each group is the max)
    keep_last = np.append(np.diff(fprs) > 0, True)
    fprs, pros = fprs[keep_last], pros[keep_last]
    upper = np.append(fprs[1:], fpr_ceiling)
    upper = np.minimum(upper, fpr_ceiling)
    widths = np.maximum(upper - fprs, 0.0)
    return float(np.sum(widths * pros) / fpr_ceiling)


def _posteriors(classifier, images) -> np.ndarray:
    p = np.asarray(classifier(images), dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("classifier must return [N, C] posteriors")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-5:
        raise ValueError("classifier rows must be distributions summing to 1")
    return p


def inception_score(images, classifier, splits: int = 10) -> float:
    """exp(mean KL(p(y|x) || p(y))) per split, averaged over splits."""
    if splits < 1:
        raise ValueError("splits must be >= 1")
    p = _posteriors(classifier, images)
    if p.shape[0] < splits:
        raise UndefinedMetricError(
            f"{p.shape[0]} images cannot fill {splits} splits")
    scores = []
    for chunk in np.array_split(p, splits):
        marginal = chunk.mean(axis=0)
        log_marginal = np.log(np.where(marginal > 0, marginal, 1.0))
        ratio = np.zeros_like(chunk)
        hot = chunk > 0
        ratio[hot] = chunk[hot] * (np.log(chunk[hot]) - log_marginal[
            np.nonzero(hot)[1]])
        scores.append(np.exp(ratio.sum(axis=1).mean()))
    return float(np.mean(scores))


class FeatureSpaceDistance:
    """Pairwise distances from an embedding function.

    embed(images) must return [N, D] features; rows are unit-normalized and
    compared by euclidean distance (monotone in cosine distance).
    """

    def __init__(self, embed):
        self.embed = embed

    def _features(self, images) -> np.ndarray:
        f = np.asarray(self.embed(images), dtype=np.float64)
        if f.ndim != 2:
            raise ValueError("embed must return [N, D] features")
        norms = np.linalg.norm(f, axis=1, keepdims=True)
        return f / np.maximum(norms, 1e-12)

    def pairwise(self, a, b) -> np.ndarray:
        fa, fb = self._features(a), self._features(b)
        if fa.shape[1] != fb.shape[1]:
            raise ValueError("feature dims differ")
        # explicit differences keep identical inputs at distance exactly 0
        out = np.empty((fa.shape[0], fb.shape[0]))
        for start in range(0, fa.shape[0], 64):
            chunk = fa[start:start + 64]
            diff = chunk[:, None, :] - fb[None, :, :]
            out[start:start + 64] = np.sqrt(np.square(diff).sum(axis=2))
        return out


def ic_lpips(generated, train_images, distance) -> float:
    """Intra-cluster diversity: cluster generated images by nearest training
    image, then average the mean pairwise distance of non-singleton clusters."""
    n_gen = len(generated)
    n_train = len(train_images)
    if n_gen == 0:
        raise UndefinedMetricError("no generated images")
    if n_train == 0:
        raise UndefinedMetricError("no training images to cluster against")
    d_assign = np.asarray(distance.pairwise(generated, train_images), dtype=np.float64)
    if d_assign.shape != (n_gen, n_train):
        raise ValueError("distance.pairwise returned a wrong-shape matrix")
    nearest = d_assign.argmin(axis=1)
    cluster_means = []
    d_gen = None
    for t in range(n_train):
        members = np.nonzero(nearest == t)[0]
        if members.size < 2:
            continue
        if d_gen is None:
            d_gen = np.asarray(distance.pairwise(generated, generated),
                               dtype=np.float64)
        block = d_gen[np.ix_(members, members)]
        iu = np.triu_indices(members.size, k=1)
        cluster_means.append(float(block[iu].mean()))
    if not cluster_means:
        raise UndefinedMetricError(
            "every cluster is a singleton; intra-cluster diversity is undefined")
    return float(np.mean(cluster_means))
