"""Verification, diarization and clustering metrics.

``cluster_pr`` is a pairwise definition: over all unordered segment pairs,
precision = |same cluster and same speaker| / |same cluster| and recall =
|same cluster and same speaker| / |same speaker|. It is not a mapped-segment
accuracy, and its numbers are not directly comparable to one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .timeline import Timeline


class MetricError(ValueError):
    pass


@dataclass
class DiarScore:
    miss_s: float
    falsealarm_s: float
    confusion_s: float
    total_ref_speech_s: float

    @property
    def der(self) -> float:
        return (self.miss_s + self.falsealarm_s + self.confusion_s) / self.total_ref_speech_s

    def __add__(self, other: "DiarScore") -> "DiarScore":
        return DiarScore(self.miss_s + other.miss_s, self.falsealarm_s + other.falsealarm_s,
                         self.confusion_s + other.confusion_s,
                         self.total_ref_speech_s + other.total_ref_speech_s)


def _trials(scores, is_target):
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(is_target, dtype=bool)
    if s.shape != t.shape or s.ndim != 1:
        raise MetricError("scores and target flags must be 1-d and equal length")
    if not t.any() or t.all():
        raise MetricError("need at least one target and one non-target trial")
    return s, t


def eer_curve(scores, is_target) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(threshold, FAR, FRR) at every distinct score plus +inf, ascending."""
    s, t = _trials(scores, is_target)
    thr = np.append(np.unique(s), np.inf)
    tgt = np.sort(s[t])
    non = np.sort(s[~t])
    far = 1.0 - np.searchsorted(non, thr, side="left") / len(non)
    frr = np.searchsorted(tgt, thr, side="left") / len(tgt)
    return thr, far, frr


def eer(scores, is_target=None) -> float:
    """Equal error rate. Accepts (scores, flags) or a list of (score, flag) trials."""
    if is_target is None:
        pairs = list(scores)
        scores = [p[0] for p in pairs]
        is_target = [p[1] for p in pairs]
    _, far, frr = eer_curve(scores, is_target)
    # FRR rises and FAR falls with t; at min score FAR = 1 > FRR = 0 and at
    # +inf FRR = 1 > FAR = 0, so the first crossing index i is >= 1
    i = int(np.argmax(frr >= far))
    if frr[i] == far[i]:
        return float(far[i])
    d0, d1 = far[i - 1] - frr[i - 1], far[i] - frr[i]
    a = d0 / (d0 - d1)
    return float(far[i - 1] + a * (far[i] - far[i - 1]))


def _breakpoints(*timelines: Timeline) -> np.ndarray:
    pts = {0.0}
    for tl in timelines:
        for s in tl:
            pts.add(s.start)
            pts.add(s.end)
    return np.array(sorted(pts))


def _active(tl: Timeline, mids: np.ndarray, labels: list[str]) -> np.ndarray:
    """Boolean (intervals x labels) activity at interval midpoints."""
    act = np.zeros((len(mids), len(labels)), dtype=bool)
    col = {lab: i for i, lab in enumerate(labels)}
    for s in tl:
        act[(mids > s.start) & (mids < s.end), col[s.label]] = True
    return act


def der(hyp: Timeline, ref: Timeline, collar_s: float = 0.25, score_overlap: bool = True) -> DiarScore:
    """Standard miss / false alarm / confusion decomposition.

    Time within ``collar_s`` of any reference span boundary is not scored.
    Hypothesis labels are mapped one-to-one onto reference labels to maximize
    matched time (Hungarian assignment).
    """
    if hyp.file_id != ref.file_id:
        raise MetricError(f"file ids differ: {hyp.file_id!r} vs {ref.file_id!r}")
    if len(ref) == 0:
        raise MetricError("reference has no speech")
    collars = []
    if collar_s > 0:
        for s in ref:
            for b in (s.start, s.end):
                collars.append((max(0.0, b - collar_s), b + collar_s))
    pts = set(_breakpoints(hyp, ref).tolist())
    for a, b in collars:
        pts.update((a, b))
    pts = np.array(sorted(pts))
    mids = 0.5 * (pts[:-1] + pts[1:])
    dur = np.diff(pts)
    scored = np.ones(len(mids), dtype=bool)
    for a, b in collars:
        scored &= ~((mids > a) & (mids < b))
    rlab, hlab = ref.labels, hyp.labels
    R = _active(ref, mids, rlab)
    H = _active(hyp, mids, hlab)
    if not score_overlap:
        scored &= R.sum(1) <= 1
    R, H, dur = R[scored], H[scored], dur[scored]
    total = float((R.sum(1) * dur).sum())
    if total <= 0:
        raise MetricError("no scored reference speech (collar covers everything)")
    # mapped hypothesis activity in reference label space
    mapped = np.zeros_like(R)
    if hlab and rlab:
        overlap = (H.T.astype(float) * dur) @ R.astype(float)  # hyp x ref seconds
        hi, ri = linear_sum_assignment(overlap, maximize=True)
        for h, r in zip(hi, ri):
            mapped[:, r] |= H[:, h]
    n_ref = R.sum(1)
    n_hyp = H.sum(1)
    n_correct = (R & mapped).sum(1)
    miss = float((np.maximum(0, n_ref - n_hyp) * dur).sum())
    fa = float((np.maximum(0, n_hyp - n_ref) * dur).sum())
    conf = float(((np.minimum(n_ref, n_hyp) - n_correct) * dur).sum())
    return DiarScore(miss, fa, conf, total)


def counting_accuracy(estimates: Sequence[int], truths: Sequence[int]) -> float:
    if len(estimates) != len(truths):
        raise MetricError("estimates and truths differ in length")
    if len(truths) == 0:
        raise MetricError("no meetings to score")
    return float(np.mean(np.asarray(estimates) == np.asarray(truths)))


def cluster_pr(labels, truth) -> tuple[float, float]:
    """Pairwise precision and recall of a clustering against true speakers.

    Precision is the fraction of same-cluster segment pairs that share a true
    speaker; recall is the fraction of same-speaker pairs put in one cluster.
    Both are invariant to renaming either side; with no qualifying pairs the
    value is 1.0.
    """
    h = np.asarray(labels)
    r = np.asarray(truth)
    if h.shape != r.shape:
        raise MetricError("hypothesis and truth differ in length")
    iu = np.triu_indices(len(h), 1)
    same_h = (h[:, None] == h[None, :])[iu]
    same_r = (r[:, None] == r[None, :])[iu]
    both = int((same_h & same_r).sum())
    precision = both / same_h.sum() if same_h.any() else 1.0
    recall = both / same_r.sum() if same_r.any() else 1.0
    return float(precision), float(recall)
