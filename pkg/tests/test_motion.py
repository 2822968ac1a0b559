import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regionvad import motion
from regionvad.motion import FlowField, FlowHistogram, dominant_motion, hof, quantize_log_speed
from regionvad.records import Box

BOX = Box(2, 3, 12, 9)  # 10 x 6 pixels


def constant(u, v, h=16, w=16):
    return FlowField(np.full((h, w), float(u)), np.full((h, w), float(v)))


def test_zero_flow_is_all_background(backend):
    h = hof(FlowField.zeros(16, 16), BOX)
    assert h.background_ratio == 1.0
    assert h.counts.sum() == 0
    assert h.total_pixels == 60


def test_constant_rightward_flow(backend):
    h = hof(constant(2.0, 0.0), BOX)
    assert h.counts[0] == 60 and h.counts.sum() == 60
    assert h.mean_speeds[0] == 2.0
    assert h.background_ratio == 0.0


def test_quarter_turn_lands_on_bin_three(backend):
    # pi/2 is exactly 3 bin widths; the half-open rule puts it in bin 3
    h = hof(constant(0.0, 1.6), BOX)
    assert h.counts[3] == 60
    assert h.mean_speeds[3] == pytest.approx(1.6, abs=1e-15)


def test_threshold_is_inclusive(backend):
    assert hof(constant(1.5, 0.0), BOX).counts[0] == 60
    assert hof(constant(1.4999, 0.0), BOX).background_count == 60


def test_box_outside_raster_rejected():
    with pytest.raises(ValueError):
        hof(constant(1, 1), Box(20, 20, 30, 30))


def test_non_positive_threshold_rejected():
    with pytest.raises(ValueError):
        hof(constant(1, 1), BOX, mag_threshold=0.0)


def test_box_is_clipped_to_raster(backend):
    h = hof(constant(3, 0, h=8, w=8), Box(-4, -4, 4, 4))
    assert h.total_pixels == 16


def hist(counts, speeds, background=0):
    counts = np.asarray(counts, dtype=np.int64)
    return FlowHistogram(counts, np.asarray(speeds, dtype=float), background)


def test_dominant_motion_all_background():
    a = dominant_motion(hist(np.zeros(12), np.zeros(12), background=50))
    assert (a.orientation, a.speed, a.stationary) == (0.0, 0.0, True)


def test_dominant_motion_argmax():
    c = np.zeros(12)
    s = np.zeros(12)
    c[0], s[0], c[6], s[6] = 100, 2.0, 40, 3.0
    a = dominant_motion(hist(c, s))
    assert a.orientation == pytest.approx(math.pi / 12)
    assert a.speed == 2.0 and not a.stationary


def test_dominant_motion_tie_goes_to_smaller_bin():
    c = np.zeros(12)
    c[2] = c[5] = 50
    a = dominant_motion(hist(c, np.full(12, 2.0)))
    assert a.orientation == pytest.approx(2.5 * math.pi / 6)


def test_stationary_ratio_boundary():
    c = np.zeros(12)
    c[1] = 10
    assert dominant_motion(hist(c, np.full(12, 2.0), background=90)).stationary
    assert not dominant_motion(hist(c, np.full(12, 2.0), background=89)).stationary


@pytest.mark.parametrize("speed,expected", [(1.5, 0), (2.99, 0), (3.0, 1), (7.0, 2), (12.0, 3),
                                            (100.0, 3)])
def test_quantize_log_speed(speed, expected):
    assert quantize_log_speed(speed) == expected


def test_quantize_rejects_stationary_speeds():
    with pytest.raises(ValueError):
        quantize_log_speed(1.49)


@given(a=st.floats(1.5, 1e6), b=st.floats(1.5, 1e6))
def test_quantize_is_monotone(a, b):
    lo, hi = sorted((a, b))
    assert quantize_log_speed(lo) <= quantize_log_speed(hi)


flows = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s))


@given(rng=flows)
def test_hof_conserves_pixels(rng):
    h, w = rng.integers(4, 20, size=2)
    f = FlowField(rng.normal(0, 3, (h, w)), rng.normal(0, 3, (h, w)))
    x1, y1 = rng.uniform(-1, w - 1), rng.uniform(-1, h - 1)
    box = Box(x1, y1, x1 + rng.uniform(2.0, w + 2), y1 + rng.uniform(2.0, h + 2))
    hist_ = hof(f, box)
    x_lo, x_hi, y_lo, y_hi = box.pixel_range(w, h)
    assert hist_.counts.sum() + hist_.background_count == (x_hi - x_lo) * (y_hi - y_lo)
    nz = hist_.counts > 0
    assert np.all(hist_.mean_speeds[nz] >= 1.5)


@given(rng=flows)
def test_rotation_by_one_bin_shifts_histogram(rng):
    # angles are kept away from bin edges so the rotation cannot cross one by rounding
    n = 64
    bins = rng.integers(0, 12, size=n)
    ang = (bins + rng.uniform(0.05, 0.95, size=n)) * motion.BIN_WIDTH
    mag = rng.choice([0.5, 2.0, 4.0, 9.0], size=n)
    f0 = FlowField((mag * np.cos(ang)).reshape(8, 8), (mag * np.sin(ang)).reshape(8, 8))
    f1 = FlowField((mag * np.cos(ang + motion.BIN_WIDTH)).reshape(8, 8),
                   (mag * np.sin(ang + motion.BIN_WIDTH)).reshape(8, 8))
    h0, h1 = hof(f0, Box(0, 0, 8, 8)), hof(f1, Box(0, 0, 8, 8))
    assert np.array_equal(np.roll(h0.counts, 1), h1.counts)
    assert h0.background_count == h1.background_count
    np.testing.assert_allclose(np.roll(h0.mean_speeds, 1), h1.mean_speeds, rtol=1e-12)


@given(rng=flows, c=st.floats(1.01, 10.0))
def test_scaling_up_never_loses_foreground(rng, c):
    u, v = rng.normal(0, 2, (10, 10)), rng.normal(0, 2, (10, 10))
    h0 = hof(FlowField(u, v), Box(0, 0, 10, 10))
    h1 = hof(FlowField(c * u, c * v), Box(0, 0, 10, 10))
    assert h1.background_count <= h0.background_count
    assert np.all(h1.counts >= h0.counts)
    # bins that gained no pixels keep their members, so the mean scales by c
    same = (h0.counts > 0) & (h1.counts == h0.counts)
    np.testing.assert_allclose(h1.mean_speeds[same], c * h0.mean_speeds[same], rtol=1e-9)


def test_hof_union_adds_histograms(backend):
    a, b = constant(2, 0), constant(0, -3)
    u = motion.hof_union([(a, BOX), (b, BOX)])
    assert u.counts[0] == 60 and u.counts[9] == 60 and u.total_pixels == 120


def test_flow_field_validation():
    with pytest.raises(ValueError):
        FlowField(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        FlowField(np.array([[np.nan]]), np.zeros((1, 1)))
