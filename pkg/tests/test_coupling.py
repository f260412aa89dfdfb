import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emtts.coupling import (CouplingConfig, ExtractionWindow, InterpolatedState, ReconstructionState, SecondaryPoint,
                            cycle_frequency, extract_phasors, filter_response, interpolate_boundary,
                            reconstruct_direct, reconstruct_interpolated, secondary_coupling_step,
                            sliding_cycle_mean)
from emtts.phasors import PhasorSet, wrap_angle

H_EMT = 100e-6
W0 = 2 * math.pi * 60
PH = np.array([0.0, -2 * np.pi / 3, 2 * np.pi / 3])


def _extract(fn, h=H_EMT, n=400, n_ch=3):
    win = ExtractionWindow(h, n_ch=n_ch)
    for k in range(n):
        t = k * h
        win.push(fn(t), W0 * t)
    return extract_phasors(win)


# --------------------------------------------------------------- config
def test_config_validation():
    assert CouplingConfig(h=100e-6, H=1e-3).N == 10
    with pytest.raises(ValueError, match="integer multiple"):
        CouplingConfig(h=1e-3, H=1.5e-3)
    with pytest.raises(ValueError):
        CouplingConfig(mode="spline")
    with pytest.raises(ValueError):
        CouplingConfig(delay=-1e-3)
    assert CouplingConfig(H=2e-3).delay == 2e-3
    assert CouplingConfig(H=1e-3, delay=0.0).delay_steps == 0
    assert CouplingConfig(H=1e-3, delay=1.5e-3).delay_steps == 2


# ----------------------------------------------------------- extraction
def test_extract_pure_sinusoid():
    ps = _extract(lambda t: math.sqrt(2) * 120 * np.cos(W0 * t + 0.3 + PH))
    assert np.allclose(ps.mag, 120, atol=1e-6)
    assert np.allclose(wrap_angle(ps.ang - (0.3 + PH)), 0, atol=1e-6)


def test_extract_with_dc_offset():
    ps = _extract(lambda t: math.sqrt(2) * 100 * np.cos(W0 * t + PH) + 10)
    assert np.allclose(ps.mag, math.sqrt(100**2 + 100), atol=1e-6)
    assert np.allclose(wrap_angle(ps.ang - PH), 0, atol=1e-6)


def test_extract_with_fifth_harmonic():
    def fn(t):
        return math.sqrt(2) * 100 * (np.cos(W0 * t + PH) + 0.05 * np.cos(5 * (W0 * t + PH)))

    ps = _extract(fn)
    assert np.allclose(ps.mag, 100 * math.sqrt(1 + 0.05**2), atol=1e-6)
    assert np.allclose(wrap_angle(ps.ang - PH), 0, atol=1e-6)


def test_underfilled_window_not_ready():
    win = ExtractionWindow(H_EMT)
    for k in range(100):
        win.push(np.ones(3), W0 * k * H_EMT)
    assert not win.ready
    assert extract_phasors(win) is None


def test_period_shift_invariance():
    def fn(t):
        return math.sqrt(2) * np.array([100, 90, 80]) * np.cos(W0 * t + PH + 0.1) + 3 * np.cos(3 * W0 * t)

    a = _extract(fn, n=400)
    b = _extract(fn, n=400 + 500)  # 500 h = 3 full periods
    assert np.allclose(a.mag, b.mag, rtol=0, atol=1e-9)
    assert np.allclose(a.ang, b.ang, rtol=0, atol=1e-9)


def test_non_integer_window():
    # 60 Hz at h = 70 us: 238.1 samples per cycle
    ps = _extract(lambda t: math.sqrt(2) * 50 * np.cos(W0 * t - 1.0 + PH), h=70e-6, n=600)
    assert np.allclose(ps.mag, 50, rtol=1e-6)
    assert np.allclose(wrap_angle(ps.ang - (PH - 1.0)), 0, atol=1e-6)


def test_tracking_window_at_off_nominal_frequency():
    f = 59.7
    h = H_EMT
    fixed = ExtractionWindow(h)
    tracked = ExtractionWindow(h, track=True)
    mags_fixed, mags_tracked = [], []
    for k in range(2000):
        th = 2 * np.pi * f * k * h
        x = math.sqrt(2) * 100 * np.cos(th + PH)
        fixed.push(x, th)
        tracked.push(x, th)
        if k > 500:
            mags_fixed.append(fixed.extract().mag[0])
            mags_tracked.append(tracked.extract().mag[0])
    assert tracked.frequency() == pytest.approx(f, abs=1e-9)
    assert np.ptp(mags_tracked) < 1e-5
    assert np.ptp(mags_fixed) > 10 * np.ptp(mags_tracked)


def test_sliding_cycle_mean_of_sinusoid_is_zero():
    t = np.arange(1000) * H_EMT
    m = sliding_cycle_mean(np.sin(W0 * t) + 2.0, H_EMT)
    assert np.allclose(m[200:], 2.0, atol=1e-9)


def test_cycle_frequency_recovers_constant():
    t = np.arange(3000) * H_EMT
    phase = 2 * np.pi * 59.8 * t + 0.01 * np.sin(4 * np.pi * 59.8 * t)
    f = cycle_frequency(t, phase)
    assert np.allclose(f[300:], 59.8, atol=1e-3)


# -------------------------------------------------------- interpolation
def test_interpolation_endpoints_and_midpoint():
    a = PhasorSet([100, 100, 100], [0, 0, 0])
    b = PhasorSet([200, 200, 200], [0.2, 0.2, 0.2])
    assert interpolate_boundary(a, b, 0, 10) == a
    assert interpolate_boundary(a, b, 10, 10) == b
    mid = interpolate_boundary(a, b, 5, 10)
    assert np.allclose(mid.mag, 150)
    assert np.allclose(mid.ang, 0.1)
    with pytest.raises(ValueError):
        interpolate_boundary(a, b, 11, 10)


def test_interpolation_shortest_arc():
    a = PhasorSet([1, 1, 1], np.radians([179, 179, 179]))
    b = PhasorSet([1, 1, 1], np.radians([-179, -179, -179]))
    for n in range(11):
        ang = interpolate_boundary(a, b, n, 10).ang
        assert np.all(np.abs(ang) >= np.radians(179) - 1e-12)
    assert np.allclose(np.abs(interpolate_boundary(a, b, 5, 10).ang), np.pi)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1e3), min_size=6, max_size=6), st.lists(st.floats(-np.pi, np.pi), min_size=6, max_size=6),
       st.integers(1, 50), st.data())
def test_interpolation_bounded_and_arc_short(mags, angs, N, data):
    a = PhasorSet(mags[:3], angs[:3])
    b = PhasorSet(mags[3:], angs[3:])
    n = data.draw(st.integers(0, N))
    p = interpolate_boundary(a, b, n, N)
    assert np.all(p.mag >= np.minimum(a.mag, b.mag) - 1e-9)
    assert np.all(p.mag <= np.maximum(a.mag, b.mag) + 1e-9)
    assert np.all(np.abs(wrap_angle(p.ang - a.ang)) <= np.pi / 2 * (n / N) * 2 + 1e-9)


def test_interpolated_state_matches_function():
    a = PhasorSet([10, 20, 30], [0.1, 3.0, -3.0])
    b = PhasorSet([12, 18, 33], [0.3, -3.0, 3.0])
    s = InterpolatedState()
    s.set_window(a, b)
    for n in range(11):
        th = 0.37 * n
        assert np.allclose(s.step(n / 10, th), reconstruct_interpolated(a, b, n, 10, th), atol=1e-12)


# ------------------------------------------------------- reconstruction
def test_zero_phasor_gives_zero_output():
    st_ = ReconstructionState(H_EMT)
    st_.update(PhasorSet.zeros())
    assert all(np.all(reconstruct_direct(st_, W0 * k * H_EMT) == 0) for k in range(100))


def test_filter_gain_and_residual_phase():
    H = filter_response(W0, H_EMT)
    assert abs(H) == pytest.approx(0.99929, abs=1e-5)
    # feedforward omega*h leaves only the filter's departure from a pure delay
    assert abs(W0 * H_EMT + np.angle(H)) < 2e-5
    assert abs(np.angle(H)) == pytest.approx(0.0377, abs=1e-3)


@pytest.mark.parametrize("ff", [True, False])
def test_steady_state_phase_error(ff):
    ps = PhasorSet([100, 100, 100], PH)
    s = ReconstructionState(H_EMT, feedforward=ff)
    s.update(ps)
    win = ExtractionWindow(H_EMT)
    for k in range(400):
        th = W0 * k * H_EMT
        win.push(s.step(th, W0), th)
    err = np.abs(wrap_angle(win.extract().ang - PH))
    if ff:
        assert np.all(err < 2e-5)
    else:
        assert np.allclose(err, 0.0377, atol=1e-3)


def test_step_settles_within_five_filter_constants():
    s = ReconstructionState(H_EMT, feedforward=True, ff_mode="exact")
    s.update(PhasorSet([100, 100, 100], PH))
    for k in range(200):
        s.step(W0 * k * H_EMT, W0)
    s.update(PhasorSet([200, 200, 200], PH))
    for k in range(200, 205):
        y = s.step(W0 * k * H_EMT, W0)
    ideal = math.sqrt(2) * 200 * np.cos(W0 * 204 * H_EMT + PH)
    assert np.max(np.abs(np.array(y) - ideal)) <= 0.01 * math.sqrt(2) * 200


def _round_trip(ps, ff_mode):
    s = ReconstructionState(H_EMT, feedforward=True, ff_mode=ff_mode)
    s.update(ps)
    win = ExtractionWindow(H_EMT)
    for k in range(200):
        th = W0 * k * H_EMT
        win.push(s.step(th, W0), th)
    return win.extract()


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.floats(1.0, 1e3), min_size=3, max_size=3), st.lists(st.floats(-np.pi, np.pi), min_size=3, max_size=3))
def test_round_trip_exact_feedforward(mags, angs):
    ps = PhasorSet(mags, angs)
    out = _round_trip(ps, "exact")
    assert np.all(np.abs(out.mag - ps.mag) / ps.mag < 1e-6)
    assert np.all(np.abs(wrap_angle(out.ang - ps.ang)) < 1e-6)


def test_round_trip_time_feedforward_keeps_filter_gain():
    ps = PhasorSet([100, 50, 75], [0.2, -1.9, 2.3])
    out = _round_trip(ps, "time")
    assert np.allclose(out.mag / ps.mag, abs(filter_response(W0, H_EMT)), rtol=1e-6)
    assert np.all(np.abs(wrap_angle(out.ang - ps.ang)) < 2e-5)


def test_interpolated_slew_below_direct():
    # 300 A -> 600 A step at a window boundary, H = 1 ms
    N = 10
    a = PhasorSet([300] * 3, PH)
    b = PhasorSet([600] * 3, PH - 0.2)
    d = ReconstructionState(H_EMT)
    d.update(a)
    out_d, out_i = [], []
    it = InterpolatedState()
    it.set_window(a, a)
    for k in range(600):
        th = W0 * k * H_EMT
        if k == 300:
            d.update(b)
            it.set_window(a, b)
        if k == 310:
            it.set_window(b, b)
        out_d.append(list(d.step(th, W0)))
        out_i.append(it.step(min(k - 300, N) / N if 300 <= k < 310 else 0.0, th))
    slew_d = np.max(np.abs(np.diff(np.array(out_d)[250:], axis=0)))
    slew_i = np.max(np.abs(np.diff(np.array(out_i)[250:], axis=0)))
    assert slew_i < slew_d


def test_direct_output_continuous_at_update():
    s = ReconstructionState(H_EMT)
    s.update(PhasorSet([100] * 3, PH))
    prev = None
    worst = 0.0
    for k in range(400):
        if k == 200:
            s.update(PhasorSet([300] * 3, PH + 1.0))
        y = np.array(s.step(W0 * k * H_EMT, W0))
        if prev is not None and k >= 150:
            worst = max(worst, np.max(np.abs(y - prev)))
        prev = y
    # the filter passes at most 2/3 of an input jump in one step
    jump = 2 * math.sqrt(2) * 300
    assert worst <= 2 / 3 * jump


# -------------------------------------------------------------- secondary
def test_secondary_zero_current_passes_voltage():
    v = PhasorSet([2400, 2390, 2410], PH)
    pt = SecondaryPoint("83", np.eye(3) * (0.5 + 1j))
    emf, inj = secondary_coupling_step(pt, v, PhasorSet.zeros())
    assert np.allclose(emf.to_complex(), v.to_complex())
    assert np.all(inj.mag == 0)


def test_secondary_adds_drop():
    v = np.array([2400, 2400, 2400]) * np.exp(1j * PH)
    i = np.array([10, 10, 10]) * np.exp(1j * (PH + np.pi / 2))
    z = np.eye(3) * (0.5 + 1j)
    emf, inj = secondary_coupling_step(SecondaryPoint("83", z), v, i)
    assert np.allclose(emf.to_complex(), v + z @ i)
    with pytest.raises(KeyError):
        secondary_coupling_step(None, v, i)
