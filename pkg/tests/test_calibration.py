import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from margincal.calibration import (
    CalibConfig,
    CalibrationError,
    ClassStats,
    MarginOffsets,
    class_stats,
    compute_mu,
    compute_offsets,
    load_offsets,
    save_offsets,
)
from margincal.core import LabelMask, load_manifest, save_manifest, save_mask, save_scores, ScoreMap


def mu_oracle(n, nk, upsilon):
    pk = nk / n
    return pk * math.sqrt(nk) / (upsilon * (n - nk) - pk * math.sqrt(n - nk))


def test_class_stats_single_class():
    masks = [LabelMask(2, 2, 2, np.zeros(4)), LabelMask(2, 2, 2, np.zeros(4))]
    s = class_stats(masks)
    assert s.total == 8 and s.pixel_counts.tolist() == [8, 0]
    assert s.frequencies[0] == 1.0
    assert s.pixels_per_image == 4


def test_class_stats_frequencies():
    masks = [np.array([0] * 45 + [1] * 5), np.array([0] * 45 + [1] * 5)]
    s = class_stats(masks, classes=2)
    assert s.pixel_counts.tolist() == [90, 10]
    np.testing.assert_allclose(s.frequencies, [0.9, 0.1])


def test_class_stats_empty():
    with pytest.raises(ValueError):
        class_stats([], classes=2)


def test_class_stats_from_manifest(tmp_path):
    save_mask(LabelMask(1, 4, 3, [0, 1, 2, 2]), tmp_path / "a.msk")
    save_scores(ScoreMap(1, 4, 3, np.zeros(12)), tmp_path / "a.scr")
    save_manifest([(tmp_path / "a.scr", tmp_path / "a.msk")] * 2, tmp_path / "m.tsv")
    s = class_stats(load_manifest(tmp_path / "m.tsv"))
    assert s.pixel_counts.tolist() == [2, 2, 4]


@pytest.mark.parametrize("nk, expected", [(20, 0.011436), (50, 0.0760911)])
def test_mu_examples(nk, expected):
    mu = compute_mu(ClassStats([nk, 100 - nk], 100), 1.0)
    assert mu[0] == pytest.approx(expected, rel=5e-5)
    assert mu[0] == pytest.approx(mu_oracle(100, nk, 1.0), rel=1e-14)


def test_mu_tiny_upsilon_fails_with_class_identity():
    with pytest.raises(CalibrationError) as info:
        compute_mu(ClassStats([90, 10], 100), 1e-6)
    assert info.value.cls == 0
    assert info.value.min_upsilon == pytest.approx(0.9 / math.sqrt(10))


def test_ratio_one_over_27():
    off = compute_offsets(ClassStats([90, 10], 100), CalibConfig(10.0, 1.0))
    assert off.rho_0k[0] / off.rho_0k[1] == pytest.approx(1 / 27, rel=1e-12)
    assert off.rho_0k.mean() == pytest.approx(10.0)
    np.testing.assert_allclose(off.rho_k0, off.mu_k * off.rho_0k)


def test_balanced_gives_tau():
    off = compute_offsets(ClassStats([25, 25, 25, 25], 10), CalibConfig(3.5, 1.0))
    np.testing.assert_allclose(off.rho_0k, 3.5)


def test_all_pixels_one_class_is_error():
    with pytest.raises(CalibrationError):
        compute_offsets(ClassStats([10, 0], 10))


def test_missing_class_gets_largest_offset():
    off = compute_offsets(ClassStats([80, 20, 0], 10), CalibConfig(10.0, 1.0))
    assert off.rho_0k[2] == off.rho_0k[:2].max()
    assert off.rho_0k[:2].mean() == pytest.approx(10.0)


counts = st.lists(st.integers(1, 10_000), min_size=2, max_size=6)


@settings(max_examples=200, deadline=None)
@given(counts, st.floats(0.1, 100), st.floats(0.1, 10))
def test_offsets_linear_in_tau(nk, tau, scale):
    s = ClassStats(nk, 1)
    a = compute_offsets(s, CalibConfig(tau, 1.0))
    b = compute_offsets(s, CalibConfig(tau * scale, 1.0))
    np.testing.assert_allclose(b.rho_0k, a.rho_0k * scale, rtol=1e-12)
    np.testing.assert_allclose(b.rho_k0, a.rho_k0 * scale, rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(counts)
def test_rarer_class_gets_larger_offset(nk):
    off = compute_offsets(ClassStats(nk, 1), CalibConfig(10.0, 1.0))
    order = np.argsort(nk, kind="stable")
    sorted_counts = np.asarray(nk)[order]
    sorted_rho = off.rho_0k[order]
    for i in range(len(nk) - 1):
        if sorted_counts[i] < sorted_counts[i + 1]:
            assert sorted_rho[i] > sorted_rho[i + 1]
    assert np.all(off.rho_0k > 0) and np.all(off.rho_k0 > 0)
    assert off.rho_0k.mean() == pytest.approx(10.0)


def test_offsets_round_trip(tmp_path):
    off = compute_offsets(ClassStats([700, 250, 50], 100), CalibConfig(7.0, 0.5))
    save_offsets(off, tmp_path / "o.rho")
    back = load_offsets(tmp_path / "o.rho")
    np.testing.assert_array_equal(back.rho_0k, off.rho_0k)
    np.testing.assert_array_equal(back.rho_k0, off.rho_k0)
    np.testing.assert_array_equal(back.mu_k, off.mu_k)
    assert back.config == off.config


def test_config_validation():
    with pytest.raises(ValueError):
        CalibConfig(0.0, 1.0)
    with pytest.raises(ValueError):
        CalibConfig(1.0, -1.0)
    with pytest.raises(ValueError):
        MarginOffsets(np.array([1.0, -1.0]), np.ones(2), np.ones(2), CalibConfig())
