"""End-to-end pressure reconstruction from a three-channel RF stream.

The session runs in three stages:

1. wall identification and SNR gating on the first frames of every channel;
2. local PWV over the assessment period (two-stage tracking, see
   :mod:`echobp.pwv`);
3. diameter tracking at 200 Hz on the best channel, anchored to the
   end-diastolic diameter, and conversion to absolute pressure.

Frames are read in blocks so memory does not grow with stream length.
Worker threads are only used for per-beat PWV refinement and results are
merged in beat order, so outputs do not depend on the worker count.
"""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrackingError
from .pressure import (MMHG_PA, RHO_BLOOD, DiameterWaveform, PressureWaveform, beat_metrics,
                       diameter_waveform, end_diastolic_diameter, stiffness_indices)
from .pwv import REFRACTORY_S, detect_beat_minima, pwv_session
from .signal_core import SampledSeries
from .wall_track import SNR_GATE_DB, WallTracker, identify_walls, interp_sample_m

WALL_ID_FRAMES = 5
D0_FRAMES = 5
BLOCK_FRAMES = 256


@dataclass(frozen=True)
class SessionConfig:
    dbp_input_mmHg: float
    rho_kg_m3: float = RHO_BLOOD
    assess_duration_s: float = 10.0
    pwv_reassess_interval_s: float | None = None
    snr_gate_db: float = SNR_GATE_DB
    diameter_rate_hz: float = 200.0
    workers: int = 1
    d0_threshold_frac: float = 0.3
    csv_path: str | None = None
    beats_path: str | None = None
    summary_path: str | None = None

    def __post_init__(self):
        if not self.dbp_input_mmHg > 0:
            raise ConfigError(f"dbp_input_mmHg must be positive, got {self.dbp_input_mmHg}")
        if not self.snr_gate_db >= 0:
            raise ConfigError(f"snr_gate_db must be >= 0, got {self.snr_gate_db}")
        if not self.rho_kg_m3 > 0:
            raise ConfigError("rho must be positive")
        if not self.assess_duration_s >= 2.0:
            raise ConfigError("assessment period must be at least 2 s")
        if self.pwv_reassess_interval_s is not None and \
                not self.pwv_reassess_interval_s >= self.assess_duration_s:
            raise ConfigError("re-assessment interval must not be shorter than the assessment")
        if not self.diameter_rate_hz > 0:
            raise ConfigError("diameter rate must be positive")
        if int(self.workers) < 1:
            raise ConfigError("workers must be >= 1")


@dataclass
class PwvUpdate:
    start_s: float
    pwv_mps: float
    sd_mps: float
    d0_mm: float
    anchor_s: float


@dataclass
class PipelineResult:
    pressure: PressureWaveform
    beats: list
    pwv: object                     # PwvEstimate of the first assessment
    diameter: object                # DiameterWaveform
    regions: list
    diameter_channel: int
    updates: list = field(default_factory=list)

    def summary(self):
        return {
            "diameter_channel": self.diameter_channel,
            "snr_db": [r.snr_db for r in self.regions],
            "wall_centers_u": [[r.anterior_center_u, r.posterior_center_u] for r in self.regions],
            "dbp_input_mmHg": self.pressure.dbp_input_mmHg,
            "rho_kg_m3": self.pressure.rho_kg_m3,
            "pwv": self.pwv.to_dict(),
            "pwv_updates": [vars(u) for u in self.updates],
            "d0_mm": self.diameter.d0_mm,
            "n_beats": len(self.beats),
            "beat_onsets_s": list(self.pressure.beat_onsets_s),
        }


class OnsetDetector:
    """Causal end-diastole detector for a streaming distension series.

    A sample becomes an onset once ``confirm_s`` of later samples have stayed
    above it and the series fell by at least ``drop_frac`` of its recent
    range on the way down to it. Consecutive onsets are at least
    ``refractory_s`` apart.
    """

    def __init__(self, rate_hz, refractory_s=REFRACTORY_S, confirm_s=0.1, history_s=2.0,
                 drop_frac=0.3):
        self.rate = float(rate_hz)
        self.refractory = max(int(round(refractory_s * rate_hz)), 1)
        self.confirm = max(int(round(confirm_s * rate_hz)), 1)
        self.history = max(int(round(history_s * rate_hz)), self.refractory + 1)
        self.drop_frac = drop_frac
        self._buf = []
        self._i = -1
        self._cand = None
        self._blocked_until = 0
        self.onsets = []

    def _value(self, i):
        return self._buf[i - (self._i - len(self._buf) + 1)]

    def push(self, value):
        """Feed one sample; returns the confirmed onset index or None."""
        self._i += 1
        self._buf.append(float(value))
        if len(self._buf) > self.history:
            del self._buf[0]
        i = self._i
        if i < self._blocked_until:
            return None
        if self._cand is None or value < self._value(self._cand):
            self._cand = i
            return None
        if i - self._cand < self.confirm:
            return None
        c = self._cand
        first = self._i - len(self._buf) + 1
        before = self._buf[:c - first]
        span = max(self._buf) - min(self._buf)
        self._cand = None
        if before and span > 0 and max(before) - self._value(c) >= self.drop_frac * span:
            self.onsets.append(c)
            self._blocked_until = c + self.refractory
            return c
        return None


def locate_walls(stream, gate_db=SNR_GATE_DB, n_frames=WALL_ID_FRAMES):
    """Wall regions for every channel from the first frames of ``stream``."""
    h = stream.header
    frames = stream.read(np.arange(min(n_frames, stream.n_frames)))
    return [identify_walls(frames[:, ch], ch, h.rf_rate_hz, h.speed_of_sound_mps, gate_db=gate_db)
            for ch in range(h.n_channels)]


def select_diameter_channel(regions):
    """Channel with the highest SNR; ties go to the lowest index."""
    best = max(range(len(regions)), key=lambda i: (regions[i].snr_db, -i))
    return best


def track_diameter(stream, region, step, n_frames=None, detector=None):
    """Distension (mm) of one region every ``step`` frames, re-anchored at
    each onset reported by ``detector``."""
    h = stream.header
    n = stream.n_frames if n_frames is None else min(n_frames, stream.n_frames)
    idx = np.arange(0, n, step)
    kw = dict(interp_factor=region.interp_factor, half_window=region.half_window_w,
              frame_step=step, rf_rate_hz=float(h.rf_rate_hz))
    ant = WallTracker(region.anterior_center_u, **kw)
    post = WallTracker(region.posterior_center_u, **kw)
    dz = interp_sample_m(h.rf_rate_hz, h.speed_of_sound_mps, region.interp_factor) * 1e3
    out = np.empty(idx.size)
    pos = 0
    for b0 in range(0, idx.size, BLOCK_FRAMES):
        block = stream.read(idx[b0:b0 + BLOCK_FRAMES])[:, region.channel]
        for frame in block:
            if pos == 0:
                ant.start(frame)
                post.start(frame)
            else:
                ant.update(frame)
                post.update(frame)
            out[pos] = (post.displacement - ant.displacement) * dz
            if detector is not None and detector.push(out[pos]) is not None and pos > 0:
                ant.reanchor()
                post.reanchor()
            pos += 1
    return SampledSeries(out, h.prf_hz / step, 0.0, unit="mm")


def measure_d0(stream, region, frame, threshold_frac=0.3, n_avg=D0_FRAMES):
    """End-diastolic diameter averaged over ``n_avg`` frames centred on ``frame``."""
    h = stream.header
    a = min(max(frame - n_avg // 2, 0), max(stream.n_frames - n_avg, 0))
    frames = stream.read(np.arange(a, min(a + n_avg, stream.n_frames)))[:, region.channel]
    vals = [end_diastolic_diameter(f, region, h.rf_rate_hz, h.speed_of_sound_mps,
                                   threshold_frac, region.interp_factor) for f in frames]
    return float(np.mean(vals))


def _assessment_starts(n_frames, prf, cfg):
    starts = [0]
    if cfg.pwv_reassess_interval_s:
        step = int(round(cfg.pwv_reassess_interval_s * prf))
        need = int(round(cfg.assess_duration_s * prf))
        k = step
        while k + need <= n_frames:
            starts.append(k)
            k += step
    return starts


def run_pipeline(stream, config):
    """Pressure waveform, beat records and PWV for one RF stream."""
    h = stream.header
    prf = h.prf_hz
    step = int(round(prf / config.diameter_rate_hz))
    if step < 1 or abs(prf / step - config.diameter_rate_hz) > 1e-9:
        raise ConfigError(f"diameter rate {config.diameter_rate_hz} Hz must divide the PRF {prf} Hz")

    regions = locate_walls(stream, config.snr_gate_db)
    starts = _assessment_starts(stream.n_frames, prf, config)
    estimates = []
    for s in starts:
        est, _ = pwv_session(stream, regions, config.assess_duration_s,
                             workers=int(config.workers), start_frame=s)
        estimates.append(est)

    ch = select_diameter_channel(regions)
    region = regions[ch]
    rate = prf / step
    dist = track_diameter(stream, region, step, detector=OnsetDetector(rate))
    onset_idx = detect_beat_minima(dist)
    onsets = [float(i) / rate for i in onset_idx]

    # Piecewise diameter: each assessment re-measures D0 at its first onset.
    values = np.empty(len(dist))
    updates = []
    bounds = [s // step for s in starts] + [len(dist)]
    for j, (est, s) in enumerate(zip(estimates, starts)):
        a, b = bounds[j], bounds[j + 1]
        later = [i for i in onset_idx if i >= a]
        k = int(later[0]) if later else a
        d0 = measure_d0(stream, region, k * step, config.d0_threshold_frac)
        seg = dist.with_values(dist.values[a:b], t0_s=a / rate)
        values[a:b] = diameter_waveform(seg, d0, anchor_time_s=k / rate).series.values
        updates.append(PwvUpdate(s / prf, est.mean_mps, est.sd_mps, d0, k / rate))
    first = updates[0]
    diam = DiameterWaveform(dist.with_values(values, unit="mm"), first.d0_mm,
                            tuple(onsets), first.anchor_s)

    pvals = np.empty(len(dist))
    for j, u in enumerate(updates):
        a, b = bounds[j], bounds[j + 1]
        k = 2.0 * config.rho_kg_m3 * u.pwv_mps ** 2 / MMHG_PA
        seg = values[a:b]
        if np.any(seg <= 0):
            raise TrackingError("non-positive diameter")
        pvals[a:b] = config.dbp_input_mmHg + k * np.log(seg / u.d0_mm)
    pressure = PressureWaveform(dist.with_values(pvals, unit="mmHg"),
                                float(config.dbp_input_mmHg), first.pwv_mps,
                                float(config.rho_kg_m3), tuple(onsets))
    beats = beat_metrics(pressure, diam)
    result = PipelineResult(pressure, beats, estimates[0], diam, regions, ch, updates)
    write_outputs(result, config)
    return result


def beat_dicts(beats):
    out = []
    for b in beats:
        d = b.to_dict()
        ep = ac = None
        if b.ds_mm is not None and b.ds_mm > b.dd_mm and b.pp_mmHg > 0:
            ep, ac = stiffness_indices(b.pp_mmHg, b.ds_mm, b.dd_mm)
        d["ep_mmHg"] = ep
        d["ac_mm2_per_mmHg"] = ac
        out.append(d)
    return out


def write_csv(path, pressure, diameter):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "pressure_mmHg", "diameter_mm"])
        for t, p, d in zip(pressure.series.times, pressure.series.values,
                           diameter.series.values):
            w.writerow([f"{t:.6f}", f"{p:.4f}", f"{d:.6f}"])


def read_csv(path):
    """Pressure (and diameter) series from a CSV written by :func:`write_csv`."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] < 2:
        raise ConfigError(f"{path}: need at least two rows")
    t = data[:, 0]
    rate = (t.size - 1) / (t[-1] - t[0])
    p = SampledSeries(data[:, 1], rate, float(t[0]), unit="mmHg")
    d = SampledSeries(data[:, 2], rate, float(t[0]), unit="mm") if data.shape[1] > 2 else None
    return p, d


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_outputs(result, config):
    if config.csv_path:
        write_csv(config.csv_path, result.pressure, result.diameter)
    if config.beats_path:
        write_json(config.beats_path, beat_dicts(result.beats))
    if config.summary_path:
        write_json(config.summary_path, result.summary())
