"""Detection metrics with spoof as the positive class.

FAR is the fraction of spoofs accepted as live (score below threshold), FRR
the fraction of live samples rejected (score at or above threshold).
"""

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError

EER_POLICY = "eer"
FIXED_POLICY = "fixed"


def _split(scores, labels):
    scores = np.asarray(scores, float).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise MetricError("non-finite scores")
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("evaluation set needs both classes")
    return scores, labels, pos, neg


def auc_rank(scores, labels):
    """Mann-Whitney form: ``(sum of positive ranks - n1(n1+1)/2) / (n1 n0)``, ties averaged."""
    scores, labels, pos, neg = _split(scores, labels)
    ranks = rankdata(scores)
    n1, n0 = pos.size, neg.size
    return float((ranks[labels == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def roc_curve(scores, labels):
    """(FPR, TPR) at every distinct threshold, from (0, 0) to (1, 1)."""
    scores, labels, pos, neg = _split(scores, labels)
    thr = np.unique(scores)[::-1]
    tpr = [(pos >= t).mean() for t in thr]
    fpr = [(neg >= t).mean() for t in thr]
    return np.r_[0.0, fpr], np.r_[0.0, tpr], thr


def auc_trapezoid(scores, labels):
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.trapezoid(tpr, fpr))


def error_rates(scores, labels, threshold):
    """(FAR, FRR) at ``threshold``; a sample is called spoof when score >= threshold."""
    _, _, pos, neg = _split(scores, labels)
    far = float((pos < threshold).mean())
    frr = float((neg >= threshold).mean())
    return far, frr


def eer_threshold(scores, labels):
    """Threshold among the observed scores minimising ``|FAR - FRR|``.

    Returns ``(threshold, eer)`` where ``eer`` is the HTER at that threshold.
    """
    scores, labels, pos, neg = _split(scores, labels)
    cands = np.unique(np.r_[scores, np.inf])
    pos_s, neg_s = np.sort(pos), np.sort(neg)
    far = np.searchsorted(pos_s, cands, side="left") / pos.size
    frr = 1 - np.searchsorted(neg_s, cands, side="left") / neg.size
    i = int(np.argmin(np.abs(far - frr) + 1e-12 * (far + frr)))
    return float(cands[i]), float((far[i] + frr[i]) / 2)


def hter(scores, labels, threshold):
    far, frr = error_rates(scores, labels, threshold)
    return (far + frr) / 2


def resolve_threshold(scores, labels, policy=EER_POLICY):
    if policy == EER_POLICY:
        return eer_threshold(scores, labels)[0]
    if policy == FIXED_POLICY:
        return 0.5
    raise MetricError(f"unknown threshold policy {policy!r}")
