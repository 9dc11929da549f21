import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from margincal.bounds import (
    BoundConfig,
    BoundError,
    ErrorProbs,
    SurrogateErrors,
    bound_report,
    epsilon_bound,
    epsilon_terms,
    error_probs,
    iou_lower_bound,
    sigma_term,
    surrogate_ell,
    verify_optimality,
)
from margincal.calibration import CalibConfig, ClassStats, MarginOffsets, compute_offsets
from margincal.losses import calibrated_log, margins, rho_margin
from margincal.metrics import confusion_matrix, per_class_iou


def test_error_probs_examples():
    p = error_probs(confusion_matrix([0, 1, 2], [0, 1, 2], 3))
    assert np.all(p.p_k0 == 0) and np.all(p.p_0k == 0)
    p = error_probs(confusion_matrix([0, 0, 1, 1], [0, 1, 1, 1], 2))
    assert p.p_k0[0] == 0.25 and p.p_0k[1] == 0.25
    assert p.p_k.tolist() == [0.5, 0.5]


def test_saturated_margins_give_zero_surrogate():
    y = np.array([0, 1, 2, 1])
    s = np.eye(3)[y] * 100.0
    off = MarginOffsets(np.full(3, 5.0), np.full(3, 5.0), np.ones(3), None)
    ell = surrogate_ell(s, y, off)
    assert np.all(ell.ell_k0 == 0) and np.all(ell.ell_0k == 0)


def test_lower_bound_limits():
    probs = ErrorProbs(np.zeros(2), np.zeros(2), np.array([0.4, 0.6]), 10)
    lb = iou_lower_bound(probs, SurrogateErrors(np.zeros(2), np.zeros(2), 10))
    assert lb.per_class.tolist() == [1.0, 1.0] and lb.miou == 1.0
    lb = iou_lower_bound(probs, SurrogateErrors(np.array([0.4, 0.7]), np.zeros(2), 10))
    assert np.all(lb.per_class <= 0) and lb.nonpositive.all()


def test_lower_bound_degenerate_class():
    probs = ErrorProbs(np.zeros(3), np.zeros(3), np.array([0.5, 0.5, 0.0]), 4)
    lb = iou_lower_bound(probs, SurrogateErrors(np.zeros(3), np.zeros(3), 4))
    assert lb.per_class[2] == 1.0 and lb.degenerate.tolist() == [False, False, True]
    with pytest.raises(BoundError):
        iou_lower_bound(probs, SurrogateErrors(np.array([0, 0, 0.1]), np.zeros(3), 4))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.integers(1, 64))
def test_bound_chain(seed, c, n):
    rng = np.random.default_rng(seed)
    s = rng.normal(scale=rng.uniform(0.1, 5), size=(n, c))
    y = rng.integers(0, c, n)
    off = MarginOffsets(rng.uniform(0.01, 5, c), rng.uniform(0.01, 5, c), np.ones(c), None)
    lam = margins(s)
    for rho in (off.rho_0k, off.rho_k0):
        ind = (lam <= 0).astype(float)
        hinge = rho_margin(lam, rho)
        smooth = calibrated_log(lam, rho)
        assert np.all(ind <= hinge) and np.all(hinge <= smooth)
    cm = confusion_matrix(y, np.argmax(s, axis=1), c)
    probs = error_probs(cm)
    ell = surrogate_ell(s, y, off, "rho_margin")
    assert np.all(probs.p_k0 <= ell.ell_k0) and np.all(probs.p_0k <= ell.ell_0k)
    smooth_ell = surrogate_ell(s, y, off, "calibrated_log")
    assert np.all(ell.ell_k0 <= smooth_ell.ell_k0) and np.all(ell.ell_0k <= smooth_ell.ell_0k)
    lb = iou_lower_bound(probs, ell)
    iou = per_class_iou(cm)
    assert np.all(lb.per_class <= iou + 1e-15)
    assert lb.miou <= iou.mean() + 1e-15


def test_epsilon_example():
    eps, valid = epsilon_terms(np.array([50, 50]), np.array([10.0, 10.0]), np.ones(2), 1.0)
    assert valid.all()
    expected = (2 * math.sqrt(50)) / (50 * 10 / 8 - math.sqrt(50))
    assert eps[0] == pytest.approx(expected, rel=1e-14)
    assert float(f"{eps[0]:.5g}") == 0.25514


def test_epsilon_decreases_to_zero_in_rho():
    nk = np.array([50, 50])
    prev = math.inf
    for rho in (10.0, 100.0, 1e3, 1e5, 1e8):
        e = epsilon_terms(nk, np.array([rho, rho]), np.ones(2), 1.0)[0][0]
        assert 0 < e < prev
        prev = e
    assert prev < 1e-6


def test_epsilon_vacuous_classes():
    eps, valid = epsilon_terms(np.array([50, 50]), np.array([0.1, 10.0]), np.ones(2), 1.0)
    assert valid.tolist() == [False, True] and eps[0] == math.inf
    stats = ClassStats([90, 10], 1)
    off = compute_offsets(stats, CalibConfig(10, 1))
    rep = epsilon_bound(stats, off, BoundConfig(F=1e9, c=2))
    assert rep.vacuous and math.isnan(rep.epsilon)


def test_sigma_term():
    off = MarginOffsets(np.array([1.0, 3.0]), np.array([0.5, 2.0]), np.ones(2), None)
    assert sigma_term(off, 0.05, 4) == pytest.approx(3 / 8 * math.sqrt(8 * math.log(80)))


def test_optimality_balanced_two_class():
    stats = ClassStats([500, 500], 100)
    config = CalibConfig(10.0, 1.0)
    off = compute_offsets(stats, config)
    np.testing.assert_allclose(off.rho_0k, off.rho_0k[0])
    v = verify_optimality(stats, config, BoundConfig(F=1.0, c=2), trials=100)
    assert v.holds and v.epsilon_calibrated <= v.worst_epsilon


def test_optimality_imbalanced():
    v = verify_optimality(ClassStats([90, 10], 10), CalibConfig(10.0, 1.0), BoundConfig(F=1.0, c=2), 200)
    assert v.holds and v.trials == 200


@pytest.mark.parametrize("seed", range(6))
def test_optimality_random_distributions(seed):
    rng = np.random.default_rng(seed)
    c = (2, 3, 5)[seed % 3]
    counts = rng.integers(50, 20_000, size=c)
    # pick F small enough for a non-vacuous bound at the calibrated offsets
    stats = ClassStats(counts, 1)
    v = verify_optimality(stats, CalibConfig(10.0, 1.0), BoundConfig(F=1e-3, c=c), trials=200, seed=seed)
    assert v.holds


def test_optimality_no_trials_warns(caplog):
    v = verify_optimality(ClassStats([90, 10], 10), CalibConfig(10.0, 1.0), BoundConfig(F=0.05, c=2), 0)
    assert v.holds and v.trials == 0
    assert "no trials" in caplog.text


def test_bound_report_ratio_column():
    rep = bound_report(ClassStats([90, 10], 100), CalibConfig(10.0, 1.0), BoundConfig(F=1.0, c=2), trials=10)
    rows = [r.split(",") for r in rep.to_csv().splitlines()]
    assert rows[0][5] == "rho_ratio_to_last"
    assert float(rows[1][5]) == pytest.approx(1 / 27, rel=1e-12)


def test_bound_report_huge_F_flags_everything():
    rep = bound_report(ClassStats([90, 10], 100), CalibConfig(10.0, 1.0), BoundConfig(F=1e12, c=2), trials=10)
    assert rep.vacuous and not rep.valid.any()
    rows = rep.to_csv().splitlines()
    assert all(r.split(",")[7] == "1" for r in rows[1:])
