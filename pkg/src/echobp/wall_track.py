"""Arterial wall localisation, SNR gating and cross-correlation wall tracking.

Positions are expressed in samples of the spline-interpolated RF grid
(``interp_factor`` times the ADC rate, 1.2 GHz by default). A raw sample at
index ``i`` sits at interpolated index ``i * interp_factor``.

The optimised tracker applies three cost reductions:

* a short correlation window (2W = 480 interpolated samples, two carrier
  periods) instead of one spanning the whole echo envelope;
* a narrow search ``[dp - 3, dp + 3]`` around the shift predicted by
  following the RF crest from frame to frame;
* only the frames the caller asks for are tracked (decimated streams and
  short high-rate windows).

:class:`WallTracker` in ``"exhaustive"`` mode is the reference tracker:
full-envelope window and a +/-60 search around the previous estimate.
"""
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import find_peaks, firwin

from .errors import NoArteryError, SNRGateError, TrackingError, SignalError
from .phantom import wall_mask
from .pressure import NOISE_DEPTH_M
from .signal_core import SampledSeries, envelope, spline_operator

INTERP_FACTOR = 15
HALF_WINDOW = 240          # 2W = 480 at 1.2 GHz
EXHAUSTIVE_HALF_WINDOW = 780  # 2W = 1560, the full echo envelope
NARROW_RADIUS = 3
WIDE_RADIUS = 60
PEAK_BOUND = 15            # |dp| per frame at 2000 Hz
PEAK_SEARCH = 100          # crest search half-width
SNR_GATE_DB = 15.0
SNR_HALF_WINDOW = 16       # raw samples either side of each echo centre
SNR_DECIMALS = 1           # the gate compares SNR as reported, to 0.1 dB
_MAX_EXTENSIONS = 20
RX_CUTOFF_HZ = 10e6        # receive low-pass, as in the analog front end
RX_TAPS = 17


@lru_cache(maxsize=16)
def tracking_operator(n_out, interp_factor, rf_rate_hz, taps=RX_TAPS, cutoff_hz=RX_CUTOFF_HZ):
    """Receive low-pass followed by spline upsampling, as one matrix.

    Maps ``n_out + taps - 1`` raw samples to ``(n_out - 1) * interp_factor + 1``
    interpolated samples centred on the same span as ``n_out`` raw samples.
    The FIR is linear phase, so it adds no delay.
    """
    spline = spline_operator(n_out, interp_factor)
    if taps <= 1:
        return spline
    h = firwin(taps, cutoff_hz, fs=rf_rate_hz)
    fir = np.zeros((n_out, n_out + taps - 1))
    for i in range(n_out):
        fir[i, i:i + taps] = h[::-1]
    op = spline @ fir
    op.setflags(write=False)
    return op


@dataclass(frozen=True)
class WallRegion:
    channel: int
    anterior_center_u: int
    posterior_center_u: int
    half_window_w: int = HALF_WINDOW
    snr_db: float = math.inf
    interp_factor: int = INTERP_FACTOR

    def __post_init__(self):
        if not self.anterior_center_u < self.posterior_center_u:
            raise TrackingError("anterior wall must be shallower than posterior wall")

    @property
    def centers_raw(self):
        f = self.interp_factor
        return (int(round(self.anterior_center_u / f)), int(round(self.posterior_center_u / f)))


@dataclass(frozen=True)
class ShiftEstimate:
    delta: int
    peak_corr: float
    search_lo: int
    search_hi: int
    fallback_used: bool = False


def depth_to_samples(depth_m, rf_rate_hz, speed_of_sound_mps):
    return 2.0 * depth_m / speed_of_sound_mps * rf_rate_hz


def interp_sample_m(rf_rate_hz, speed_of_sound_mps, interp_factor=INTERP_FACTOR):
    """Depth spanned by one interpolated sample, in metres."""
    return speed_of_sound_mps / (2.0 * rf_rate_hz * interp_factor)


def snr_db(frame, region, rf_rate_hz, speed_of_sound_mps, half_width=SNR_HALF_WINDOW):
    """Echo SNR: 20 log10(mean |wall echo| / mean |noise above 5 mm depth|)."""
    frames = np.atleast_2d(np.asarray(frame, dtype=float))
    n = frames.shape[-1]
    n_noise = int(depth_to_samples(NOISE_DEPTH_M, rf_rate_hz, speed_of_sound_mps))
    if n_noise < 1:
        raise SignalError("frame has no samples shallower than 5 mm")
    mask = wall_mask(n, region.centers_raw, half_width)
    wall = np.abs(frames[:, mask]).mean()
    noise = np.abs(frames[:, :n_noise]).mean()
    if noise == 0:
        return math.inf
    if wall == 0:
        return -math.inf
    return 20.0 * math.log10(wall / noise)


def identify_walls(frames, channel, rf_rate_hz, speed_of_sound_mps, gate_db=SNR_GATE_DB,
                   interp_factor=INTERP_FACTOR, half_window=HALF_WINDOW,
                   min_separation_m=1e-3):
    """Locate the anterior and posterior wall echoes in one channel's frames.

    The frame-averaged envelope is searched below 5 mm depth for its two
    largest well-separated peaks. Peaks must exceed six times the mean noise
    envelope. Each echo centre is the midpoint of its half-maximum crossings.
    The SNR gate accepts the SNR rounded to 0.1 dB when it is ``>= gate_db``.
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=float))
    n = frames.shape[-1]
    env = np.mean([envelope(SampledSeries(f, rf_rate_hz)).values for f in frames], axis=0)
    n_noise = int(depth_to_samples(NOISE_DEPTH_M, rf_rate_hz, speed_of_sound_mps))
    noise_env = env[:n_noise].mean()
    sep = max(int(depth_to_samples(min_separation_m, rf_rate_hz, speed_of_sound_mps)), 1)
    peaks, props = find_peaks(env, height=6.0 * noise_env if noise_env > 0 else 1e-12,
                              distance=sep)
    peaks = peaks[peaks >= n_noise]
    if peaks.size < 2:
        raise NoArteryError(f"no artery found on channel {channel}")
    top = np.sort(peaks[np.argsort(env[peaks], kind="stable")[::-1][:2]])
    margin = int(math.ceil((half_window + WIDE_RADIUS) / interp_factor)) + 2
    if top[0] - margin < 0 or top[1] + margin >= n:
        raise NoArteryError(f"wall echoes too close to the frame edge on channel {channel}")
    centers = [int(round(_half_max_center(env, p) * interp_factor)) for p in top]
    region = WallRegion(channel, centers[0], centers[1], half_window, math.inf, interp_factor)
    snr = snr_db(frames, region, rf_rate_hz, speed_of_sound_mps)
    region = WallRegion(channel, centers[0], centers[1], half_window, snr, interp_factor)
    if not round(snr, SNR_DECIMALS) >= gate_db:
        raise SNRGateError(channel, snr, gate_db)
    return region


def _half_max_center(env, i):
    """Midpoint of the half-maximum crossings either side of peak ``i``.

    For a symmetric echo envelope this is the peak position, but it is read
    off the steep flanks rather than the flat top, so noise moves it far
    less than it moves the argmax.
    """
    level = 0.5 * env[i]
    lo = i
    while lo > 0 and env[lo - 1] >= level:
        lo -= 1
    hi = i
    while hi < env.size - 1 and env[hi + 1] >= level:
        hi += 1
    if lo == 0 or hi == env.size - 1:
        return float(i)
    left = (lo - 1) + (level - env[lo - 1]) / (env[lo] - env[lo - 1])
    right = hi + (env[hi] - level) / (env[hi] - env[hi + 1])
    return 0.5 * (left + right)


def _ncc(ref_win, cmp, start, count):
    """Normalised correlation of ``ref_win`` against ``count`` consecutive
    windows of ``cmp`` starting at index ``start``."""
    L = ref_win.size
    if start < 0 or start + count - 1 + L > cmp.size:
        raise TrackingError("comparison window outside frame bounds")
    seg = cmp[start:start + count - 1 + L]
    views = sliding_window_view(seg, L)
    num = views @ ref_win
    c2 = np.concatenate(([0.0], np.cumsum(seg * seg)))
    energy = c2[L:] - c2[:-L]
    den = np.sqrt(np.maximum(energy, 0.0) * float(ref_win @ ref_win))
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _pick(lags, corr):
    """Argmax with ties resolved to the smallest |lag|, negative first."""
    best = corr.max()
    tied = lags[corr >= best - 1e-12 * max(1.0, abs(best))]
    order = np.lexsort((tied, np.abs(tied)))
    return int(tied[order[0]])


def xcorr_shift(ref_frame, cmp_frame, u, half_window, search):
    """Shift of the wall window centred at ``u`` between two interpolated frames.

    The reference window is ``ref_frame[u - W + 1 : u + W + 1]``; for each
    integer lag ``d`` in ``search = (lo, hi)`` it is correlated with the
    window displaced by ``d`` in ``cmp_frame``.
    """
    lo, hi = (int(v) for v in search)
    if lo > hi:
        raise TrackingError(f"empty search range [{lo}, {hi}]")
    ref_frame = np.asarray(ref_frame, dtype=float)
    cmp_frame = np.asarray(cmp_frame, dtype=float)
    a = u - half_window + 1
    if a < 0 or u + half_window + 1 > ref_frame.size:
        raise TrackingError("reference window outside frame bounds")
    ref_win = ref_frame[a:u + half_window + 1]
    corr = _ncc(ref_win, cmp_frame, a + lo, hi - lo + 1)
    lags = np.arange(lo, hi + 1)
    d = _pick(lags, corr)
    return ShiftEstimate(d, float(corr[d - lo]), lo, hi, False)


class WallTracker:
    """Sequential tracker for one wall echo of one channel.

    Displacement is measured against an anchor frame; :meth:`reanchor`
    moves the anchor to the most recent frame while keeping the cumulative
    displacement, which bounds decorrelation over long recordings.
    ``frame_step`` is the number of PRF ticks between successive frames and
    scales the per-frame physiological bound on the crest shift.
    """

    def __init__(self, center_u, mode="optimized", interp_factor=INTERP_FACTOR,
                 half_window=None, frame_step=1, narrow_radius=NARROW_RADIUS,
                 wide_radius=WIDE_RADIUS, peak_bound=PEAK_BOUND, rf_rate_hz=80e6,
                 rx_taps=RX_TAPS):
        if mode not in ("optimized", "exhaustive"):
            raise ValueError(f"unknown tracker mode {mode!r}")
        self.mode = mode
        self.f = int(interp_factor)
        if half_window is None:
            half_window = HALF_WINDOW if mode == "optimized" else EXHAUSTIVE_HALF_WINDOW
        self.w = int(half_window)
        self.narrow = narrow_radius
        self.wide = wide_radius
        self.bound = peak_bound * frame_step
        if mode == "optimized":
            reach = self.w + max(self.wide, 2 * PEAK_SEARCH) + 2 * self.narrow * _MAX_EXTENSIONS
        else:
            reach = self.w + self.wide
        self._half_raw = int(math.ceil(reach / self.f)) + 2
        self._taps_half = max(rx_taps, 1) // 2
        self._op = tracking_operator(2 * self._half_raw + 1, self.f, float(rf_rate_hz),
                                     max(rx_taps, 1))
        self.anchor_u = int(center_u)
        self.offset = 0        # displacement accumulated before the current anchor
        self.cum = 0           # displacement of the latest frame w.r.t. the anchor
        self.peak_u = None
        self.last_dp = 0
        self._ref = None
        self._last_seg = None
        self.n_fallback = 0
        self.n_frames = 0

    @property
    def displacement(self):
        return self.offset + self.cum

    def _segment(self, frame, center_u):
        """Interpolate the raw samples around ``center_u``; returns (values, origin_u)."""
        c = int(round(center_u / self.f))
        a = c - self._half_raw
        b = c + self._half_raw + 1
        if a - self._taps_half < 0 or b + self._taps_half > frame.size:
            raise TrackingError("wall left the frame bounds")
        raw = np.asarray(frame[a - self._taps_half:b + self._taps_half], dtype=float)
        return self._op @ raw, a * self.f

    def _crest(self, seg, origin, around):
        lo = max(around - PEAK_SEARCH - origin, 0)
        hi = min(around + PEAK_SEARCH + 1 - origin, seg.size)
        return origin + lo + int(np.argmax(seg[lo:hi]))

    def _set_anchor(self, seg, origin):
        a = self.anchor_u - self.w + 1 - origin
        self._ref = seg[a:a + 2 * self.w].copy()

    def start(self, frame):
        seg, origin = self._segment(frame, self.anchor_u)
        self._set_anchor(seg, origin)
        self.peak_u = self._crest(seg, origin, self.anchor_u)
        self._last_seg = (seg, origin)
        self.cum = 0
        self.n_frames = 1
        return ShiftEstimate(0, 1.0, 0, 0, False)

    def reanchor(self):
        """Make the most recent frame the new reference."""
        if self._last_seg is None:
            raise TrackingError("tracker not started")
        self.offset += self.cum
        self.anchor_u += self.cum
        seg, origin = self._segment_for_anchor()
        self._set_anchor(seg, origin)
        self.cum = 0

    def _segment_for_anchor(self):
        seg, origin = self._last_seg
        a = self.anchor_u - self.w + 1 - origin
        if a < 0 or a + 2 * self.w > seg.size:
            raise TrackingError("anchor window outside interpolated segment")
        return seg, origin

    def _corr(self, seg, origin, lo, hi):
        start = self.anchor_u - self.w + 1 + lo - origin
        return _ncc(self._ref, seg, start, hi - lo + 1)

    def update(self, frame):
        """Track one frame; returns its :class:`ShiftEstimate` (``delta`` is
        the displacement from the anchor)."""
        if self._ref is None:
            raise TrackingError("tracker not started")
        seg, origin = self._segment(frame, self.anchor_u + self.cum)
        fallback = False
        if self.mode == "exhaustive":
            lo, hi = self.cum - self.wide, self.cum + self.wide
        else:
            new_peak = self._crest(seg, origin, self.peak_u)
            dp = new_peak - self.peak_u
            self.peak_u = new_peak
            self.last_dp = dp
            if abs(dp) <= self.bound:
                pred = self.cum + dp
                lo, hi = pred - self.narrow, pred + self.narrow
            else:
                fallback = True
                lo, hi = self.cum - self.wide, self.cum + self.wide
        lags = np.arange(lo, hi + 1)
        corr = self._corr(seg, origin, lo, hi)
        if self.mode == "optimized":
            step = 2 * self.narrow
            for _ in range(_MAX_EXTENSIONS):
                d = _pick(lags, corr)
                if d == lags[0]:
                    new = np.arange(lags[0] - step, lags[0])
                    corr = np.concatenate((self._corr(seg, origin, new[0], new[-1]), corr))
                    lags = np.concatenate((new, lags))
                elif d == lags[-1]:
                    new = np.arange(lags[-1] + 1, lags[-1] + step + 1)
                    corr = np.concatenate((corr, self._corr(seg, origin, new[0], new[-1])))
                    lags = np.concatenate((lags, new))
                else:
                    break
        d = _pick(lags, corr)
        if fallback:
            self.n_fallback += 1
        self.cum = d
        self._last_seg = (seg, origin)
        self.n_frames += 1
        if self.mode == "exhaustive":
            self.peak_u = None
        return ShiftEstimate(d, float(corr[d - lags[0]]), int(lags[0]), int(lags[-1]), fallback)


def track_peak(frames, center_u, interp_factor=INTERP_FACTOR, peak_bound=PEAK_BOUND,
               frame_step=1, rf_rate_hz=80e6):
    """Follow the RF crest nearest ``center_u`` across ``frames``.

    Returns ``(peak_u, dp, fallback)`` arrays: crest position per frame,
    inter-frame crest shift (0 for the first frame) and whether the shift
    exceeded the physiological bound.
    """
    tr = WallTracker(center_u, "optimized", interp_factor, frame_step=frame_step,
                     peak_bound=peak_bound, rf_rate_hz=rf_rate_hz)
    frames = np.asarray(frames)
    peaks, dps, fb = [], [], []
    for k, frame in enumerate(frames):
        seg, origin = tr._segment(frame, tr.peak_u if tr.peak_u is not None else center_u)
        if k == 0:
            p = tr._crest(seg, origin, center_u)
            dp = 0
        else:
            p = tr._crest(seg, origin, tr.peak_u)
            dp = p - tr.peak_u
        tr.peak_u = p
        peaks.append(p)
        dps.append(dp)
        fb.append(abs(dp) > tr.bound)
    return np.array(peaks), np.array(dps), np.array(fb)


@dataclass
class ChannelTrack:
    """Tracking output for one channel over a frame sequence."""

    channel: int
    frame_indices: np.ndarray
    anterior_u: np.ndarray   # displacement, interpolated samples
    posterior_u: np.ndarray
    min_corr: float
    n_fallback: int

    def distension_mm(self, rf_rate_hz, speed_of_sound_mps, interp_factor=INTERP_FACTOR):
        dz = interp_sample_m(rf_rate_hz, speed_of_sound_mps, interp_factor) * 1e3
        return (self.posterior_u - self.anterior_u) * dz


def track_frames(stream, regions, frame_indices, mode="optimized", reanchor_at=(),
                 block=256):
    """Track both walls of every region over ``frame_indices``.

    ``reanchor_at`` holds frame indices at which each tracker re-anchors to
    the current frame. Returns one :class:`ChannelTrack` per region.
    """
    frame_indices = np.asarray(frame_indices, dtype=np.int64)
    if frame_indices.size < 1:
        raise TrackingError("no frames to track")
    steps = np.diff(frame_indices)
    frame_step = int(steps.max()) if steps.size else 1
    reanchor = set(int(k) for k in reanchor_at)
    trackers = []
    for r in regions:
        kw = dict(mode=mode, interp_factor=r.interp_factor, frame_step=frame_step,
                  rf_rate_hz=float(stream.header.rf_rate_hz))
        if mode == "optimized":
            kw["half_window"] = r.half_window_w
        trackers.append((WallTracker(r.anterior_center_u, **kw),
                         WallTracker(r.posterior_center_u, **kw)))
    n = frame_indices.size
    ant = np.zeros((len(regions), n), dtype=np.int64)
    post = np.zeros((len(regions), n), dtype=np.int64)
    min_corr = np.ones(len(regions))
    pos = 0
    for b0 in range(0, n, block):
        idx = frame_indices[b0:b0 + block]
        data = stream.read(idx)
        for j, k in enumerate(idx):
            for ri, r in enumerate(regions):
                frame = data[j, r.channel]
                for wi, tr in enumerate(trackers[ri]):
                    if pos == 0:
                        tr.start(frame)
                    else:
                        est = tr.update(frame)
                        min_corr[ri] = min(min_corr[ri], est.peak_corr)
                        if int(k) in reanchor:
                            tr.reanchor()
                    (ant if wi == 0 else post)[ri, pos] = tr.displacement
            pos += 1
    return [ChannelTrack(r.channel, frame_indices, ant[i], post[i], float(min_corr[i]),
                         trackers[i][0].n_fallback + trackers[i][1].n_fallback)
            for i, r in enumerate(regions)]


def distension_series(stream, region, frame_indices, mode="optimized", reanchor_at=()):
    """Diameter-change series (mm) of one channel at the given frames.

    ``frame_indices`` must be evenly spaced; the output rate is the PRF
    divided by that spacing.
    """
    frame_indices = np.asarray(frame_indices, dtype=np.int64)
    steps = np.unique(np.diff(frame_indices))
    if steps.size > 1:
        raise TrackingError("frame indices must be evenly spaced")
    step = int(steps[0]) if steps.size else 1
    h = stream.header
    tr = track_frames(stream, [region], frame_indices, mode, reanchor_at)[0]
    mm = tr.distension_mm(h.rf_rate_hz, h.speed_of_sound_mps, region.interp_factor)
    return SampledSeries(mm, h.prf_hz / step, frame_indices[0] / h.prf_hz, unit="mm")
