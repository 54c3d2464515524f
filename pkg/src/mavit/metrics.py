"""Presentation-attack metrics: APCER/BPCER/ACER, EER, HTER, TPR@FPR.

Decision rule everywhere: a sample is accepted as bonafide iff its score
is >= the threshold (ties accept). Threshold sweeps consider midpoints of
consecutive distinct scores plus -inf and +inf, which covers every
distinct operating point exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class ScoreSet:
    """Scores with liveness labels (1 bonafide, 0 attack)."""

    scores: np.ndarray
    labels: np.ndarray
    tags: list[str] | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.scores.size == 0:
            raise ContractError("empty score set")
        if self.scores.shape != self.labels.shape:
            raise ContractError("scores and labels differ in length")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ContractError("labels must be 0 (attack) or 1 (bonafide)")

    @property
    def bonafide(self) -> np.ndarray:
        return self.scores[self.labels == 1]

    @property
    def attacks(self) -> np.ndarray:
        return self.scores[self.labels == 0]

    def require_both_classes(self) -> None:
        if self.bonafide.size == 0 or self.attacks.size == 0:
            raise ContractError("metric needs at least one sample of each class")


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Midpoints of consecutive distinct scores, plus the two sentinels."""
    distinct = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate(([-np.inf], mids, [np.inf]))


def apcer_bpcer(scores: ScoreSet, threshold: float) -> tuple[float, float]:
    """Attack acceptance rate and bonafide rejection rate at a threshold."""
    scores.require_both_classes()
    apcer = float(np.mean(scores.attacks >= threshold))
    bpcer = float(np.mean(scores.bonafide < threshold))
    return apcer, bpcer


def acer(apcer: float, bpcer: float) -> float:
    return (apcer + bpcer) / 2.0


def eer_threshold(dev: ScoreSet) -> tuple[float, float]:
    """Threshold minimizing |FAR - FRR| on the dev set, and the EER there.

    Ties break toward the lower threshold.
    """
    dev.require_both_classes()
    best_thr = None
    best_gap = None
    best_eer = None
    for thr in candidate_thresholds(dev.scores):
        far, frr = apcer_bpcer(dev, thr)
        gap = abs(far - frr)
        if best_gap is None or gap < best_gap:
            best_thr, best_gap, best_eer = float(thr), gap, (far + frr) / 2.0
    return best_thr, best_eer


def bpcer_at(dev: ScoreSet, bpcer_target: float) -> float:
    """Largest threshold whose dev BPCER stays within the target.

    BPCER grows with the threshold, so this is the operating point that
    rejects as many attacks as the bonafide-error budget allows. A target
    of 1 admits every threshold and returns +inf.
    """
    if dev.bonafide.size == 0:
        raise ContractError("bpcer threshold needs bonafide samples")
    if bpcer_target < 0:
        raise ContractError(
            f"target {bpcer_target} unattainable; minimum achievable BPCER is 0.0"
        )
    best = None
    for thr in candidate_thresholds(dev.scores):
        bpcer = float(np.mean(dev.bonafide < thr))
        if bpcer <= bpcer_target:
            best = float(thr)
    return best


def hter(test: ScoreSet, threshold: float) -> float:
    """Mean of FAR and FRR at a (dev-derived) threshold."""
    far, frr = apcer_bpcer(test, threshold)
    return acer(far, frr)


def tpr_at_fpr(test: ScoreSet, fpr_target: float = 1e-4) -> float:
    """TPR at the smallest threshold keeping FPR within the target.

    FPR falls as the threshold rises; the smallest qualifying threshold
    accepts the most bonafide samples. If only reject-all qualifies, the
    TPR is 0.
    """
    test.require_both_classes()
    for thr in candidate_thresholds(test.scores):
        fpr = float(np.mean(test.attacks >= thr))
        if fpr <= fpr_target:
            return float(np.mean(test.bonafide >= thr))
    return 0.0
