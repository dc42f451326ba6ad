import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from echobp.errors import SignalError
from echobp.signal_core import (SampledSeries, envelope, interp_spline, resample_to,
                                second_derivative_max, spline_operator, zero_phase_lowpass)

FS = 80e6
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def _hilbert_oracle(x):
    # Analytic signal built by hand: zero the negative frequencies.
    n = x.size
    X = np.fft.fft(x)
    h = np.zeros(n)
    h[0] = 1
    if n % 2 == 0:
        h[n // 2] = 1
        h[1:n // 2] = 2
    else:
        h[1:(n + 1) // 2] = 2
    return np.abs(np.fft.ifft(X * h))


def test_series_times_and_validation():
    s = SampledSeries([1.0, 2.0, 3.0], 4.0, t0_s=0.5)
    assert np.allclose(s.times, [0.5, 0.75, 1.0])
    assert s.duration_s == 0.75
    with pytest.raises(SignalError, match="empty series"):
        SampledSeries([], 10.0)
    with pytest.raises(SignalError):
        SampledSeries([1.0], 0.0)


def test_envelope_of_tone():
    t = np.arange(4000) / FS
    x = 3.0 * np.sin(2 * np.pi * 5e6 * t)
    env = envelope(SampledSeries(x, FS)).values
    mid = env[400:3600]
    assert np.all(np.abs(mid - 3.0) <= 0.02 * 3.0)


def test_envelope_zero_and_empty():
    assert np.all(envelope(SampledSeries(np.zeros(64), FS)).values == 0)
    with pytest.raises(SignalError, match="empty series"):
        envelope(SampledSeries(np.array([]), FS))


def test_envelope_hann_burst():
    n = 800
    center = 400
    half = 20  # 2.5 cycles of 5 MHz at 80 MHz is 40 samples
    k = np.arange(n) - center
    w = np.where(np.abs(k) <= half, np.cos(np.pi * k / (2 * half)) ** 2, 0.0)
    x = w * np.cos(2 * np.pi * 5e6 * k / FS)
    env = envelope(SampledSeries(x, FS)).values
    oracle = _hilbert_oracle(x)
    assert abs(int(np.argmax(env)) - center) <= 1
    assert abs(env.max() - w.max()) <= 0.02 * w.max()
    assert np.allclose(env, np.maximum(oracle, np.abs(x)), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 300), elements=finite))
def test_envelope_dominates_abs(x):
    env = envelope(SampledSeries(x, FS)).values
    assert env.shape == x.shape
    assert np.all(env >= np.abs(x))


def test_interp_ramp_identity_and_errors():
    s = SampledSeries([0.0, 1.0, 2.0, 3.0], 10.0)
    up = interp_spline(s, 15)
    assert len(up) == 46 and up.rate_hz == 150.0
    assert np.allclose(up.values, np.arange(46) / 15, atol=1e-12)
    assert interp_spline(s, 1) is s
    with pytest.raises(SignalError):
        interp_spline(s, 0)
    with pytest.raises(SignalError):
        interp_spline(SampledSeries([0.0, 1.0, 2.0], 10.0), 15)


def test_interp_sinusoid_accuracy():
    n = 400
    t = np.arange(n) / FS
    s = SampledSeries(np.sin(2 * np.pi * 5e6 * t), FS)
    up = interp_spline(s, 15)
    truth = np.sin(2 * np.pi * 5e6 * up.times)
    lo, hi = int(0.05 * len(up)), int(0.95 * len(up))
    assert np.max(np.abs(up.values - truth)[lo:hi]) < 0.01
    assert np.array_equal(up.values[::15], s.values)


@settings(max_examples=40, deadline=None)
@given(st.floats(-50, 50), st.floats(-5, 5), st.integers(4, 40), st.integers(1, 20))
def test_interp_affine_exact(a, b, n, factor):
    x = a + b * np.arange(n)
    up = interp_spline(SampledSeries(x, 1.0), factor)
    ref = a + b * np.arange(len(up)) / factor
    assert np.allclose(up.values, ref, atol=1e-9 * (1 + abs(a) + abs(b) * n))


def test_spline_operator_matches_interp(rng):
    x = rng.standard_normal(12)
    m = spline_operator(12, 15)
    assert np.allclose(m @ x, interp_spline(SampledSeries(x, 1.0), 15).values, atol=1e-12)


def test_lowpass_dc_and_nyquist():
    s = SampledSeries(np.full(500, 7.5), 200.0)
    out = zero_phase_lowpass(s, 4, 16.0)
    assert np.allclose(out.values, 7.5, rtol=1e-9)
    with pytest.raises(SignalError):
        zero_phase_lowpass(SampledSeries(np.ones(500), 30.0), 4, 16.0)


def test_lowpass_symmetric_gaussian_peak():
    t = np.arange(-400, 401) / 200.0
    s = SampledSeries(np.exp(-0.5 * (t / 0.05) ** 2), 200.0)
    out = zero_phase_lowpass(s, 4, 16.0)
    assert int(np.argmax(out.values)) == int(np.argmax(s.values))


def test_lowpass_50hz_attenuation_matches_butterworth():
    fs, f, fc, order = 2000.0, 50.0, 16.0, 4
    t = np.arange(int(4 * fs)) / fs
    x = np.sin(2 * np.pi * f * t)
    y = zero_phase_lowpass(SampledSeries(x, fs), order, fc).values
    mid = slice(len(t) // 4, 3 * len(t) // 4)
    atten_db = 20 * np.log10(np.sqrt(np.mean(y[mid] ** 2)) / np.sqrt(np.mean(x[mid] ** 2)))
    # Bilinear Butterworth: |H|^2 = 1 / (1 + (tan(w/2) / tan(wc/2))^(2N)); two passes square it.
    r = math.tan(math.pi * f / fs) / math.tan(math.pi * fc / fs)
    oracle_db = -20 * math.log10(1 + r ** (2 * order))
    assert atten_db <= -40
    assert abs(atten_db - oracle_db) < 0.5


def test_resample_identity_ramp_and_sine():
    s = SampledSeries(np.arange(100.0), 2000.0)
    assert resample_to(s, 2000.0) is s
    up = resample_to(s, 10_000.0)
    assert up.rate_hz == 10_000.0
    assert np.max(np.abs(up.values - np.arange(len(up)) / 5)) < 1e-6 * 99
    assert abs(up.times[-1] - s.times[-1]) <= 1 / up.rate_hz

    t = np.arange(2000) / 2000.0
    sine = SampledSeries(np.sin(2 * np.pi * 10 * t), 2000.0)
    u = resample_to(sine, 10_000.0)
    assert np.max(np.abs(u.values - np.sin(2 * np.pi * 10 * u.times))) < 0.005
    assert abs(u.duration_s - sine.duration_s) <= 1 / u.rate_hz + 1 / sine.rate_hz


def test_second_derivative_max_sine():
    f = 5.0
    rate = 1000.0
    t = np.arange(int(rate / f)) / rate
    s = SampledSeries(np.sin(2 * np.pi * f * t), rate)
    tm = second_derivative_max(s, (0, len(s)))
    assert abs(tm - 3 / (4 * f)) <= 1 / rate


def test_second_derivative_max_parabola_tie_earliest():
    x = 0.5 * np.arange(50.0) ** 2
    s = SampledSeries(x, 100.0)
    assert second_derivative_max(s, (10, 40)) == pytest.approx(10 / 100.0)


def test_second_derivative_max_logistic():
    rate, k, t1 = 10_000.0, 80.0, 0.05
    t = np.arange(1000) / rate
    s = SampledSeries(1 / (1 + np.exp(-k * (t - t1))), rate)
    tm = second_derivative_max(s, (0, len(s)))
    # Analytic d'' of the logistic peaks at t1 - ln(2 + sqrt 3) / k.
    analytic = t1 - math.log(2 + math.sqrt(3)) / k
    assert tm < t1
    assert abs(tm - analytic) <= 1 / rate


def test_second_derivative_max_errors():
    s = SampledSeries(np.zeros(20), 100.0)
    with pytest.raises(SignalError):
        second_derivative_max(s, (-1, 10))
    with pytest.raises(SignalError):
        second_derivative_max(s, (5, 25))
    with pytest.raises(SignalError):
        second_derivative_max(s, (5, 8))


@settings(max_examples=40, deadline=None)
@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.02, 0.08))
def test_second_derivative_max_affine_invariant(a, b, t1):
    rate = 2000.0
    t = np.arange(400) / rate
    base = 1 / (1 + np.exp(-60 * (t - t1)))
    s0 = SampledSeries(base, rate)
    s1 = SampledSeries(base + a + b * t, rate)
    assert second_derivative_max(s0, (0, 400)) == pytest.approx(
        second_derivative_max(s1, (0, 400)), abs=1 / rate)


def test_operations_are_deterministic(rng):
    x = rng.standard_normal(300)
    s = SampledSeries(x, 2000.0)
    for fn in (lambda v: envelope(v).values,
               lambda v: zero_phase_lowpass(v).values,
               lambda v: resample_to(v, 10_000.0).values,
               lambda v: interp_spline(v, 15).values):
        assert np.array_equal(fn(s), fn(SampledSeries(x.copy(), 2000.0)))
