import numpy as np
import numpy.testing as npt
import pytest

from mavit.errors import ContractError
from mavit.metrics import (
    ScoreSet,
    acer,
    apcer_bpcer,
    bpcer_at,
    candidate_thresholds,
    eer_threshold,
    hter,
    tpr_at_fpr,
)


def counting_apcer_bpcer(scores, labels, thr):
    """Sample-by-sample counting, accept iff score >= threshold."""
    attacks_accepted = bona_rejected = attacks = bona = 0
    for s, y in zip(scores, labels):
        if y == 0:
            attacks += 1
            attacks_accepted += s >= thr
        else:
            bona += 1
            bona_rejected += s < thr
    return attacks_accepted / attacks, bona_rejected / bona


def random_set(rng, n=20, spread=1.0):
    labels = rng.integers(0, 2, size=n)
    while labels.min() == labels.max():
        labels = rng.integers(0, 2, size=n)
    scores = np.clip(rng.normal(0.5 + spread * 0.2 * (labels - 0.5), 0.25), 0, 1)
    return ScoreSet(scores, labels)


# ---------------------------------------------------------------------------
# basic rates


def test_separated_scores_zero_errors():
    s = ScoreSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert apcer_bpcer(s, 0.5) == (0.0, 0.0)


def test_threshold_zero_accepts_everything():
    s = ScoreSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert apcer_bpcer(s, 0.0) == (1.0, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_rates_match_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    s = random_set(rng)
    for thr in [0.0, 0.3, 0.5, 0.71, 1.0]:
        assert apcer_bpcer(s, thr) == counting_apcer_bpcer(s.scores, s.labels, thr)


def test_single_class_rejected():
    s = ScoreSet([0.1, 0.2], [0, 0])
    with pytest.raises(ContractError):
        apcer_bpcer(s, 0.5)


def test_tie_at_threshold_counts_as_accept():
    s = ScoreSet([0.5, 0.5], [0, 1])
    a, b = apcer_bpcer(s, 0.5)
    assert a == 1.0 and b == 0.0


# ---------------------------------------------------------------------------
# ACER, including the published-table arithmetic


def test_acer_published_values():
    assert acer(0.78, 0.83) == pytest.approx(0.805, abs=1e-12)
    assert round(acer(0.78, 0.83), 2) == 0.80
    assert acer(3.80, 1.00) == pytest.approx(2.40, abs=1e-12)


def test_acer_trivial_and_symmetric():
    assert acer(0.0, 0.0) == 0.0
    assert acer(0.3, 0.7) == acer(0.7, 0.3)


# ---------------------------------------------------------------------------
# EER threshold


def test_eer_separable_returns_lowest_zero_gap_midpoint():
    s = ScoreSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    thr, eer = eer_threshold(s)
    assert thr == 0.5  # midpoint of 0.2 and 0.8, the lowest zero-gap candidate
    assert eer == 0.0


def test_eer_degenerate_equal_scores():
    s = ScoreSet([0.4, 0.4, 0.4], [0, 1, 1])
    thr, eer = eer_threshold(s)
    assert eer == 0.5


@pytest.mark.parametrize("seed", range(5))
def test_eer_matches_exhaustive_sweep_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    s = random_set(rng, n=50)
    thr, eer = eer_threshold(s)
    # independent sweep: recompute candidates and rates by counting
    distinct = sorted(set(s.scores))
    cands = [-np.inf] + [(a + b) / 2 for a, b in zip(distinct, distinct[1:])] + [np.inf]
    best = None
    for c in cands:
        far, frr = counting_apcer_bpcer(s.scores, s.labels, c)
        gap = abs(far - frr)
        if best is None or gap < best[0]:
            best = (gap, c, (far + frr) / 2)
    assert thr == best[1]
    assert eer == best[2]


# ---------------------------------------------------------------------------
# BPCER-target threshold


def test_bpcer_target_one_admits_reject_all():
    s = ScoreSet([0.1, 0.9], [0, 1])
    assert bpcer_at(s, 1.0) == np.inf


def test_bpcer_target_on_separable_set():
    s = ScoreSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    thr = bpcer_at(s, 0.01)
    # largest threshold that still accepts every bonafide sample
    assert thr == 0.5
    assert apcer_bpcer(s, thr)[1] <= 0.01


@pytest.mark.parametrize("seed", range(5))
def test_bpcer_threshold_matches_sweep_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    s = random_set(rng, n=40)
    target = float(rng.uniform(0, 0.3))
    thr = bpcer_at(s, target)
    distinct = sorted(set(s.scores))
    cands = [-np.inf] + [(a + b) / 2 for a, b in zip(distinct, distinct[1:])] + [np.inf]
    feasible = [c for c in cands if counting_apcer_bpcer(s.scores, s.labels, c)[1] <= target]
    assert thr == max(feasible)


def test_bpcer_unattainable_target_reports_floor():
    s = ScoreSet([0.1, 0.9], [0, 1])
    with pytest.raises(ContractError, match="0.0"):
        bpcer_at(s, -0.1)


# ---------------------------------------------------------------------------
# HTER


def test_hter_perfect_separation():
    s = ScoreSet([0.1, 0.9], [0, 1])
    assert hter(s, 0.5) == 0.0


def test_hter_label_flip_complement():
    rng = np.random.default_rng(9)
    s = random_set(rng, n=30)
    flipped = ScoreSet(s.scores, 1 - s.labels)
    thr = 0.47
    far, frr = counting_apcer_bpcer(s.scores, s.labels, thr)
    far_f, frr_f = counting_apcer_bpcer(flipped.scores, flipped.labels, thr)
    # flipping labels swaps the roles of the two error rates, up to ties
    assert hter(s, thr) == (far + frr) / 2
    assert hter(flipped, thr) == (far_f + frr_f) / 2


@pytest.mark.parametrize("seed", range(5))
def test_hter_matches_counting_oracle(seed):
    rng = np.random.default_rng(300 + seed)
    s = random_set(rng, n=25)
    thr = float(rng.uniform(0.2, 0.8))
    far, frr = counting_apcer_bpcer(s.scores, s.labels, thr)
    assert hter(s, thr) == (far + frr) / 2


# ---------------------------------------------------------------------------
# TPR at fixed FPR


def test_tpr_separable_is_one():
    s = ScoreSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert tpr_at_fpr(s, 1e-4) == 1.0


def test_tpr_inverted_is_zero():
    s = ScoreSet([0.8, 0.9, 0.1, 0.2], [0, 0, 1, 1])
    assert tpr_at_fpr(s, 1e-4) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_tpr_matches_sweep_oracle(seed):
    rng = np.random.default_rng(400 + seed)
    s = random_set(rng, n=40)
    target = float(rng.uniform(0, 0.2))
    got = tpr_at_fpr(s, target)
    distinct = sorted(set(s.scores))
    cands = [-np.inf] + [(a + b) / 2 for a, b in zip(distinct, distinct[1:])] + [np.inf]
    best = 0.0
    for c in cands:
        fpr = np.mean(s.attacks >= c)
        if fpr <= target:
            best = float(np.mean(s.bonafide >= c))
            break
    assert got == best


# ---------------------------------------------------------------------------
# cross-metric properties


def test_threshold_monotonicity():
    rng = np.random.default_rng(77)
    s = random_set(rng, n=60)
    last_apcer, last_bpcer = 1.1, -0.1
    for thr in np.sort(candidate_thresholds(s.scores)):
        a, b = apcer_bpcer(s, thr)
        assert a <= last_apcer + 1e-15
        assert b >= last_bpcer - 1e-15
        last_apcer, last_bpcer = a, b


def test_rank_metrics_invariant_under_increasing_transform():
    rng = np.random.default_rng(78)
    s = random_set(rng, n=50)
    transformed = ScoreSet(np.exp(3.0 * s.scores), s.labels)
    assert eer_threshold(s)[1] == eer_threshold(transformed)[1]
    assert tpr_at_fpr(s, 0.05) == tpr_at_fpr(transformed, 0.05)
    thr_a, _ = eer_threshold(s)
    thr_b, _ = eer_threshold(transformed)
    assert apcer_bpcer(s, thr_a) == apcer_bpcer(transformed, thr_b)


def test_all_metrics_against_counting_on_larger_sets():
    rng = np.random.default_rng(79)
    for _ in range(3):
        s = random_set(rng, n=100)
        thr, eer = eer_threshold(s)
        far, frr = counting_apcer_bpcer(s.scores, s.labels, thr)
        assert (far + frr) / 2 == eer
        assert apcer_bpcer(s, thr) == (far, frr)
        assert hter(s, thr) == acer(far, frr)


def test_scoreset_validation():
    with pytest.raises(ContractError):
        ScoreSet([], [])
    with pytest.raises(ContractError):
        ScoreSet([0.5], [2])
    with pytest.raises(ContractError):
        ScoreSet([0.5, 0.4], [1])
