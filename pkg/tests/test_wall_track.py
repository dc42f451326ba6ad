import math

import numpy as np
import pytest

from echobp.errors import NoArteryError, SNRGateError, TrackingError
from echobp.phantom import PhantomConfig, synth_rf
from echobp.rfio import ArrayRfStream
from echobp.signal_core import SampledSeries, interp_spline
from echobp.wall_track import (WallRegion, _pick, distension_series, identify_walls,
                               interp_sample_m, snr_db, track_frames, track_peak, xcorr_shift)

FS = 80e6
C = 1480.0
N = 3200


def burst_frame(centers_raw, amp=20000.0, n=N):
    """Sum of 2.5-cycle Hann 5 MHz bursts centred at (fractional) raw indices."""
    i = np.arange(n)[None, :]
    c = np.atleast_1d(np.asarray(centers_raw, float))[:, None]
    dt = (i - c) / FS
    half = 2.5 / 5e6 / 2
    w = np.where(np.abs(dt) <= half, np.cos(np.pi * dt / (2 * half)) ** 2, 0.0)
    return amp * (w * np.cos(2 * np.pi * 5e6 * dt)).sum(axis=0)


def ncc_oracle(ref, cmp, u, w, lags):
    a = ref[u - w + 1:u + w + 1]
    out = []
    for d in lags:
        b = cmp[u - w + 1 + d:u + w + 1 + d]
        out.append(float(np.dot(a, b) / math.sqrt(np.dot(a, a) * np.dot(b, b))))
    return np.array(out)


def test_interp_sample_depth():
    assert interp_sample_m(FS, C, 15) == pytest.approx(C / (2 * 1.2e9))
    assert interp_sample_m(FS, C, 15) * 1e6 == pytest.approx(0.617, abs=5e-4)


def test_region_invariant():
    with pytest.raises(TrackingError):
        WallRegion(0, 3000, 2000)
    assert WallRegion(1, 24000, 37500).centers_raw == (1600, 2500)


def test_xcorr_identical_and_constructed_delay():
    x = interp_spline(SampledSeries(burst_frame([200]), FS), 15).values
    est = xcorr_shift(x, x, 3000, 240, (-10, 10))
    assert est.delta == 0
    assert est.peak_corr == pytest.approx(1.0, abs=1e-12)
    delayed = np.concatenate((np.zeros(5), x[:-5]))
    est = xcorr_shift(x, delayed, 3000, 240, (-10, 10))
    assert est.delta == 5
    assert est.search_lo <= est.delta <= est.search_hi


def test_xcorr_fractional_raw_shift_matches_oracle():
    a = interp_spline(SampledSeries(burst_frame([300.0]), FS), 15).values
    b = interp_spline(SampledSeries(burst_frame([300.2]), FS), 15).values
    lags = np.arange(-10, 11)
    est = xcorr_shift(a, b, 4500, 240, (-10, 10))
    oracle = lags[int(np.argmax(ncc_oracle(a, b, 4500, 240, lags)))]
    assert est.delta == oracle
    assert abs(est.delta - 3) <= 1


def test_xcorr_bounds():
    x = np.ones(1000)
    with pytest.raises(TrackingError):
        xcorr_shift(x, x, 100, 240, (-5, 5))
    with pytest.raises(TrackingError):
        xcorr_shift(x, x, 700, 240, (-5, 70))
    with pytest.raises(TrackingError):
        xcorr_shift(x, x, 500, 240, (5, -5))


def test_tie_break_smallest_abs_then_negative():
    lags = np.arange(-3, 4)
    assert _pick(lags, np.array([0.1, 0.9, 0.5, 0.2, 0.5, 0.9, 0.1])) == -2
    assert _pick(lags, np.array([0.1, 0.2, 0.9, 0.9, 0.9, 0.2, 0.1])) == 0
    assert _pick(lags, np.array([0.9, 0.2, 0.1, 0.1, 0.1, 0.2, 0.9])) == -3


def test_track_peak_stationary():
    frames = np.tile(burst_frame([1600]), (10, 1))
    peaks, dps, fb = track_peak(frames, 1600 * 15)
    assert np.all(dps == 0) and not fb.any()
    assert np.all(peaks == peaks[0])


def test_track_peak_ramp_drift():
    frames = np.array([burst_frame([1600 + 0.1 * k]) for k in range(21)])
    peaks, dps, fb = track_peak(frames, 1600 * 15)
    assert abs((peaks[-1] - peaks[0]) - 30) <= 1
    assert not fb.any()


def test_track_peak_jump_sets_fallback():
    shifts = [0.0] * 5 + [50 / 15] * 5
    frames = np.array([burst_frame([1600 + s]) for s in shifts])
    peaks, dps, fb = track_peak(frames, 1600 * 15)
    assert fb[5] and not fb[:5].any() and not fb[6:].any()
    assert abs(dps[5] - 50) <= 1


def test_snr_formula_identities():
    region = WallRegion(0, 1600 * 15, 2500 * 15)
    sign = np.where(np.arange(N) % 2, 1.0, -1.0)
    frame = sign.copy()
    assert snr_db(frame, region, FS, C) == pytest.approx(0.0, abs=1e-12)
    frame[1584:1616] *= 10
    frame[2484:2516] *= 10
    assert snr_db(frame, region, FS, C) == pytest.approx(20.0, abs=1e-12)
    frame[:600] = 0
    assert snr_db(frame, region, FS, C) == math.inf


def _noiseless_frames(n=5):
    stream, _ = synth_rf(PhantomConfig(snr_db=float("inf"), duration_s=0.1))
    return stream.read(np.arange(n))[:, 0].astype(float)


def test_identify_walls_geometry_and_snr():
    stream, _ = synth_rf(PhantomConfig(snr_db=20.0, duration_s=0.1))
    frames = stream.read(np.arange(5))[:, 1]
    r = identify_walls(frames, 1, FS, C)
    ant = 2 * (19.0 - 4.1) * 1e-3 / C * FS     # 1610.8
    post = 2 * (19.0 + 4.1) * 1e-3 / C * FS    # 2497.3
    assert abs(r.anterior_center_u / 15 - ant) <= 2
    assert abs(r.posterior_center_u / 15 - post) <= 2
    assert abs(r.snr_db - 20.0) <= 1.0
    assert r.channel == 1
    assert snr_db(frames, r, FS, C) == pytest.approx(r.snr_db, abs=1e-12)


def test_identify_walls_pure_noise():
    rng = np.random.default_rng(3)
    with pytest.raises(NoArteryError, match="no artery found"):
        identify_walls(rng.standard_normal((5, N)) * 100, 2, FS, C)


def _frames_with_ratio(ratio):
    """Noiseless echoes plus shallow-only noise scaled to a mean-abs ratio."""
    frames = _noiseless_frames()
    region = identify_walls(frames, 0, FS, C, gate_db=0.0)
    n_noise = int(2 * 5e-3 / C * FS)
    wall = np.zeros(N, bool)
    for c in region.centers_raw:
        wall[c - 16:c + 16] = True
    z = np.random.default_rng(11).standard_normal((5, n_noise))
    target = np.abs(frames[:, wall]).mean() / ratio
    frames[:, :n_noise] = z * target / np.abs(z).mean()
    return frames, region


def test_snr_gate_boundary_passes():
    frames, ref = _frames_with_ratio(5.623)
    r = identify_walls(frames, 0, FS, C, gate_db=15.0)
    assert (r.anterior_center_u, r.posterior_center_u) == (ref.anterior_center_u,
                                                           ref.posterior_center_u)
    assert r.snr_db == pytest.approx(20 * math.log10(5.623), abs=1e-9)
    assert round(r.snr_db, 1) == 15.0


def test_snr_gate_failure_names_channel():
    frames, _ = _frames_with_ratio(5.4)
    with pytest.raises(SNRGateError, match="channel 0") as info:
        identify_walls(frames, 0, FS, C, gate_db=15.0)
    assert info.value.channel == 0
    assert info.value.snr_db == pytest.approx(20 * math.log10(5.4), abs=1e-9)


def _stream(frames):
    cfg = PhantomConfig()
    data = np.rint(np.repeat(np.asarray(frames)[:, None, :], 3, axis=1)).astype(np.int16)
    return ArrayRfStream(cfg.header(), data)


def test_distension_static_is_zero():
    s = _stream(np.tile(burst_frame([1611, 2497]), (60, 1)))
    region = WallRegion(0, 1611 * 15, 2497 * 15)
    d = distension_series(s, region, np.arange(0, 60, 2))
    assert np.all(d.values == 0)
    assert d.rate_hz == 1000.0


def test_common_mode_translation_rejected():
    x = 3.0 * np.sin(2 * np.pi * np.arange(200) / 200)  # raw samples
    s = _stream([burst_frame([1611 + v, 2497 + v]) for v in x])
    region = WallRegion(0, 1611 * 15, 2497 * 15)
    tr = track_frames(s, [region], np.arange(200))[0]
    assert np.max(np.abs(tr.posterior_u - tr.anterior_u)) <= 1
    assert abs(tr.anterior_u.max() - 45) <= 2


def test_distension_matches_truth_noiseless(short_noiseless):
    stream, gt = short_noiseless
    h = stream.header
    frames = stream.read(np.arange(5))[:, 0]
    region = identify_walls(frames, 0, h.rf_rate_hz, h.speed_of_sound_mps)
    idx = np.arange(0, stream.n_frames, 10)
    d = distension_series(stream, region, idx)
    truth = gt.diameter_mm[0].values[idx] - gt.diameter_mm[0].values[0]
    assert np.sqrt(np.mean((d.values - truth) ** 2)) < 0.01


def test_reanchor_preserves_displacement():
    x = 2.0 * np.sin(2 * np.pi * np.arange(300) / 150)
    s = _stream([burst_frame([1611 + v, 2497 - v]) for v in x])
    region = WallRegion(0, 1611 * 15, 2497 * 15)
    plain = track_frames(s, [region], np.arange(300))[0]
    anchored = track_frames(s, [region], np.arange(300), reanchor_at=[75, 150, 225])[0]
    assert np.max(np.abs(plain.anterior_u - anchored.anterior_u)) <= 1
    assert np.max(np.abs(plain.posterior_u - anchored.posterior_u)) <= 1
    assert abs(anchored.anterior_u[-1]) <= 1
