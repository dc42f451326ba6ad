"""Two-stage local PWV estimation from three-channel distension timing.

Stage one tracks every channel at 100 Hz to find the beat minima. Stage two
re-tracks the 160 frames (80 ms) following each minimum at the full PRF,
low-pass filters the result at 16 Hz with zero phase, upsamples it to
10 kHz and takes the second-derivative maximum as the per-channel time
reference. PWV for the beat is the least-squares slope of element position
against time reference.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks

from .errors import BeatDetectionError, EchoBPError, InsufficientBeatsError, TrackingError
from .signal_core import (SampledSeries, interp_spline, resample_to, second_derivative_max,
                          zero_phase_lowpass)
from .wall_track import INTERP_FACTOR, track_frames

LOWRATE_HZ = 100.0
HIGHRATE_SAMPLES = 8       # low-rate samples spanned by one high-rate window
FILTER_ORDER = 4
FILTER_CUTOFF_HZ = 16.0
REFERENCE_RATE_HZ = 10_000.0
REFRACTORY_S = 0.4
CONTEXT_S = 0.25


class RetrogradeTimingError(EchoBPError):
    """Time references do not increase along the probe."""


@dataclass(frozen=True)
class BeatWindow:
    lowrate_min_index: int
    hi_start_frame: int
    hi_end_frame: int

    @property
    def duration(self):
        return self.hi_end_frame - self.hi_start_frame


@dataclass
class PwvEstimate:
    per_beat_mps: list
    mean_mps: float
    sd_mps: float
    per_beat_times: list = field(default_factory=list)   # per-channel references (s)
    regression_r2: list = field(default_factory=list)
    windows: list = field(default_factory=list)
    n_invalid: int = 0
    invalid_reasons: list = field(default_factory=list)

    def to_dict(self):
        return {
            "mean_mps": self.mean_mps,
            "sd_mps": self.sd_mps,
            "per_beat_mps": list(self.per_beat_mps),
            "per_beat_times_s": [list(t) for t in self.per_beat_times],
            "regression_r2": list(self.regression_r2),
            "windows": [[w.hi_start_frame, w.hi_end_frame] for w in self.windows],
            "n_invalid": self.n_invalid,
            "invalid_reasons": list(self.invalid_reasons),
        }


@dataclass
class LowRateResult:
    distension: list          # SampledSeries per channel, mm
    minima: np.ndarray        # indices into the low-rate series
    frame_step: int


def summarize(per_beat):
    """Mean and sample SD of per-beat PWV values."""
    v = np.asarray(per_beat, dtype=float)
    if v.size < 1:
        raise InsufficientBeatsError("insufficient beats")
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), sd


def detect_beat_minima(series, refractory_s=REFRACTORY_S, min_prominence_frac=0.3,
                       f_lo=0.5, f_hi=3.0):
    """Beat minima of a distension-like series.

    The series is low-passed (16 Hz, zero phase) and searched for local
    minima at least ``refractory_s`` apart whose prominence is a fraction of
    the series range. Raises :class:`BeatDetectionError` when no periodicity
    between ``f_lo`` and ``f_hi`` is found.
    """
    x = series.values
    if series.rate_hz > 2 * FILTER_CUTOFF_HZ and len(series) > 3 * FILTER_ORDER:
        x = zero_phase_lowpass(series, FILTER_ORDER, FILTER_CUTOFF_HZ).values
    span = float(np.ptp(x))
    if not span > 1e-12 * max(1.0, float(np.max(np.abs(x)))):
        raise BeatDetectionError("no beat detected (flat distension)")
    distance = max(int(round(refractory_s * series.rate_hz)), 1)
    minima, _ = find_peaks(-x, distance=distance, prominence=min_prominence_frac * span)
    if minima.size < 2:
        raise BeatDetectionError("no beat detected (fewer than two minima)")
    f0 = series.rate_hz / float(np.median(np.diff(minima)))
    if not f_lo <= f0 <= f_hi:
        raise BeatDetectionError(f"no beat detected (fundamental {f0:.2f} Hz)")
    return minima


def lowrate_pass(stream, regions, duration_s=None, lowrate_hz=LOWRATE_HZ, min_channel=0):
    """Track every region at ``lowrate_hz`` and locate beat minima.

    Minima are taken from the distension of region ``min_channel`` (the
    proximal element).
    """
    prf = stream.header.prf_hz
    step = int(round(prf / lowrate_hz))
    if step < 1 or abs(prf / step - lowrate_hz) > 1e-9:
        raise TrackingError(f"low rate {lowrate_hz} Hz must divide the PRF {prf} Hz")
    n = stream.n_frames if duration_s is None else min(stream.n_frames,
                                                       int(round(duration_s * prf)))
    if n < 2 * prf:
        raise TrackingError("low-rate pass needs at least 2 s of frames")
    idx = np.arange(0, n, step)
    tracks = track_frames(stream, regions, idx, "optimized")
    h = stream.header
    dist = [SampledSeries(t.distension_mm(h.rf_rate_hz, h.speed_of_sound_mps,
                                          regions[i].interp_factor), prf / step, 0.0, unit="mm")
            for i, t in enumerate(tracks)]
    minima = detect_beat_minima(dist[min_channel])
    return LowRateResult(dist, minima, step)


def locate_highrate_ranges(minima, frame_step=20, n_frames=None, n_low=HIGHRATE_SAMPLES):
    """High-rate windows from the minimum to ``n_low`` low-rate samples later.

    Windows running past ``n_frames`` are dropped.
    """
    out = []
    for m in np.asarray(minima, dtype=np.int64):
        start = int(m) * frame_step
        end = start + n_low * frame_step
        if n_frames is not None and end > n_frames:
            continue
        out.append(BeatWindow(int(m), start, end))
    return out


def _with_context(hi, window, context, prf):
    """Embed the high-rate window into upsampled low-rate context.

    The high-rate series is shifted so that its first sample equals the
    low-rate sample at the window start, which is the same frame.
    """
    step = int(round(prf / context.rate_hz))
    ctx = interp_spline(context, step) if len(context) >= 4 else context
    vals = ctx.values.copy()
    base = window.hi_start_frame
    pad = int(round(CONTEXT_S * prf))
    a = max(base - pad, 0)
    b = min(window.hi_end_frame + pad, vals.size)
    if base >= vals.size:
        raise TrackingError("window starts past the low-rate context")
    offset = vals[base] - hi.values[0]
    merged = vals[a:b].copy()
    seg = hi.values + offset
    stop = min(base + seg.size, b)
    merged[base - a:stop - a] = seg[:stop - base]
    return SampledSeries(merged, prf, a / prf, unit=hi.unit), base - a


def beat_time_reference(hi, window, context=None, refine=True):
    """Second-derivative-maximum time (s) of one channel in one beat window.

    ``hi`` is the channel's distension over the window frames at the PRF.
    When ``context`` (the channel's low-rate distension) is given, it pads
    the window before filtering; otherwise the filter's own edge handling
    applies. The maximum is located on the 10 kHz grid (0.1 ms) and, with
    ``refine``, interpolated between grid points.
    """
    prf = hi.rate_hz
    if context is not None:
        series, offset = _with_context(hi, window, context, prf)
    else:
        series, offset = hi, 0
    filt = zero_phase_lowpass(series, FILTER_ORDER, FILTER_CUTOFF_HZ)
    up = resample_to(filt, REFERENCE_RATE_HZ)
    k = int(round(REFERENCE_RATE_HZ / prf))
    lo = offset * k
    hi_idx = min((offset + len(hi) - 1) * k + 1, len(up))
    return second_derivative_max(up, (lo, hi_idx), refine=refine)


def pwv_regression(positions_m, times_s):
    """Least-squares slope of position against time; returns (pwv, r2)."""
    x = np.asarray(positions_m, dtype=float)
    t = np.asarray(times_s, dtype=float)
    if x.size != t.size or x.size < 2 or not np.all(np.isfinite(t)):
        raise ValueError("need matching finite positions and times")
    if np.any(np.diff(t) <= 0):
        raise RetrogradeTimingError("retrograde timing: references do not increase along the probe")
    tc = t - t.mean()
    xc = x - x.mean()
    sxx = float(tc @ tc)
    slope = float(tc @ xc) / sxx
    ss_tot = float(xc @ xc)
    resid = xc - slope * tc
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return slope, r2


@dataclass
class _BeatResult:
    times: tuple | None
    pwv: float | None
    r2: float | None
    reason: str | None


def _process_beat(stream, regions, window, contexts, positions):
    prf = stream.header.prf_hz
    h = stream.header
    try:
        idx = np.arange(window.hi_start_frame, window.hi_end_frame)
        tracks = track_frames(stream, regions, idx, "optimized")
        times = []
        for i, tr in enumerate(tracks):
            mm = tr.distension_mm(h.rf_rate_hz, h.speed_of_sound_mps, regions[i].interp_factor)
            hi = SampledSeries(mm, prf, window.hi_start_frame / prf, unit="mm")
            ctx = contexts[i] if contexts is not None else None
            times.append(beat_time_reference(hi, window, ctx))
        pwv, r2 = pwv_regression(positions, times)
        return _BeatResult(tuple(times), pwv, r2, None)
    except (TrackingError, RetrogradeTimingError) as exc:
        return _BeatResult(None, None, None, str(exc))


def estimate_from_windows(stream, regions, windows, contexts=None, workers=1):
    """Per-beat high-rate refinement; results keep window order."""
    positions = np.array([r.channel for r in regions]) * stream.header.element_spacing_m
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda w: _process_beat(stream, regions, w, contexts, positions), windows))
    else:
        results = [_process_beat(stream, regions, w, contexts, positions) for w in windows]
    return _collect(results, windows)


def _collect(results, windows):
    good = [(r, w) for r, w in zip(results, windows) if r.reason is None and r.pwv > 0]
    bad = [r.reason or "non-positive pwv" for r in results if r.reason is not None or r.pwv <= 0]
    if len(good) < 3:
        raise InsufficientBeatsError(
            f"insufficient beats: {len(good)} valid of {len(results)} ({'; '.join(bad)})")
    per_beat = [r.pwv for r, _ in good]
    mean, sd = summarize(per_beat)
    return PwvEstimate(per_beat, mean, sd, [r.times for r, _ in good], [r.r2 for r, _ in good],
                       [w for _, w in good], len(bad), bad)


def pwv_session(stream, regions, assess_duration_s=10.0, workers=1, start_frame=0):
    """Session PWV (mean and sample SD over valid beats) from the first
    ``assess_duration_s`` of ``stream`` after ``start_frame``."""
    sub = _SubStream(stream, start_frame) if start_frame else stream
    low = lowrate_pass(sub, regions, assess_duration_s)
    n = min(sub.n_frames, int(round(assess_duration_s * sub.header.prf_hz)))
    windows = locate_highrate_ranges(low.minima, low.frame_step, n)
    est = estimate_from_windows(sub, regions, windows, low.distension, workers)
    if start_frame:
        shift = start_frame / stream.header.prf_hz
        est.per_beat_times = [tuple(t + shift for t in ts) for ts in est.per_beat_times]
        est.windows = [BeatWindow(w.lowrate_min_index, w.hi_start_frame + start_frame,
                                  w.hi_end_frame + start_frame) for w in est.windows]
    return est, low


def pwv_full_rate(stream, regions, windows, duration_s=None, mode="exhaustive", refine=True):
    """Reference PWV: track every frame at the PRF, filter each channel's whole
    series, and take time references inside the same beat windows."""
    prf = stream.header.prf_hz
    h = stream.header
    n = stream.n_frames if duration_s is None else min(stream.n_frames,
                                                       int(round(duration_s * prf)))
    tracks = track_frames(stream, regions, np.arange(n), mode)
    k = int(round(REFERENCE_RATE_HZ / prf))
    ups = []
    for i, tr in enumerate(tracks):
        mm = tr.distension_mm(h.rf_rate_hz, h.speed_of_sound_mps, regions[i].interp_factor)
        filt = zero_phase_lowpass(SampledSeries(mm, prf, unit="mm"), FILTER_ORDER,
                                  FILTER_CUTOFF_HZ)
        ups.append(resample_to(filt, REFERENCE_RATE_HZ))
    positions = np.array([r.channel for r in regions]) * h.element_spacing_m
    results = []
    for w in windows:
        if w.hi_end_frame > n:
            results.append(_BeatResult(None, None, None, "window past end"))
            continue
        lo, hi_idx = w.hi_start_frame * k, (w.hi_end_frame - 1) * k + 1
        times = [second_derivative_max(u, (lo, hi_idx), refine=refine) for u in ups]
        try:
            pwv, r2 = pwv_regression(positions, times)
            results.append(_BeatResult(tuple(times), pwv, r2, None))
        except RetrogradeTimingError as exc:
            results.append(_BeatResult(None, None, None, str(exc)))
    return _collect(results, windows), tracks


class _SubStream:
    """View of a stream starting at ``start`` frames."""

    def __init__(self, stream, start):
        self._s = stream
        self._start = int(start)
        self.header = stream.header
        self.n_frames = stream.n_frames - self._start

    def read(self, indices):
        return self._s.read(np.asarray(indices, dtype=np.int64) + self._start)
