"""Agreement statistics between a measured and a reference pressure waveform.

Waveform agreement (RMSE, Pearson r) is computed on the measured sample grid
after the reference is interpolated onto it. Beat agreement (MAE, SD of the
error, Bland-Altman) pairs beats through the measured onsets and compares
per-beat pulse pressure; SBP, DBP and MAP are reported alongside.
"""
from dataclasses import dataclass, asdict, field

import numpy as np

from .errors import InsufficientBeatsError, SignalError
from .pressure import PressureWaveform, beat_metrics
from .pwv import FILTER_CUTOFF_HZ, FILTER_ORDER, detect_beat_minima
from .signal_core import SampledSeries, zero_phase_lowpass

ALIGNMENTS = ("first-cycle-minimum", "none")
LOA_Z = 1.96


@dataclass(frozen=True)
class BlandAltman:
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    pct_within: float
    n: int


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    pearson_r: float
    mae: float
    sd_of_error: float
    bland_altman: BlandAltman
    per_metric: dict = field(default_factory=dict)   # name -> BlandAltman
    n_beats: int = 0
    time_shift_s: float = 0.0
    alignment: str = "first-cycle-minimum"
    pp_errors: tuple = ()          # measured minus reference PP, per beat

    def to_dict(self):
        d = asdict(self)
        d["per_metric"] = {k: asdict(v) for k, v in self.per_metric.items()}
        d["pp_errors"] = list(self.pp_errors)
        return d


def bland_altman(measured, reference):
    """Bias, sample SD of the differences and 95% limits of agreement."""
    m = np.asarray(measured, dtype=float)
    r = np.asarray(reference, dtype=float)
    if m.shape != r.shape or m.ndim != 1:
        raise SignalError("measured and reference must be 1-D and the same length")
    if m.size < 2:
        raise InsufficientBeatsError(f"need at least 2 paired values, got {m.size}")
    diff = m - r
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    lo, hi = mean - LOA_Z * sd, mean + LOA_Z * sd
    within = float(np.count_nonzero((diff >= lo) & (diff <= hi))) / diff.size * 100.0
    return BlandAltman(mean, sd, lo, hi, within, int(diff.size))


def rmse(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def pearson_r(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    if den == 0:
        return float("nan")
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def _min_time(series, t_lo, t_hi):
    """Time of the minimum in [t_lo, t_hi) of the 16 Hz low-passed series.

    The bottom of a pressure cycle is nearly flat, so the raw argmin of a
    quantised or noisy trace wanders by several milliseconds. Low-passing
    both series the same way rounds the foot into a well-defined minimum,
    which is then refined by a parabola through its neighbours.
    """
    if series.rate_hz > 2 * FILTER_CUTOFF_HZ and len(series) > 3 * FILTER_ORDER:
        series = zero_phase_lowpass(series, FILTER_ORDER, FILTER_CUTOFF_HZ)
    t = series.times
    sel = np.flatnonzero((t >= t_lo) & (t < t_hi))
    if sel.size < 1:
        raise SignalError("no samples in the first cycle")
    x = series.values
    i = int(sel[np.argmin(x[sel])])
    pos = float(i)
    if 0 < i < x.size - 1:
        den = x[i - 1] - 2 * x[i] + x[i + 1]
        if den > 0:
            pos += min(max(0.5 * (x[i - 1] - x[i + 1]) / den, -0.5), 0.5)
    return series.t0_s + pos / series.rate_hz


def _series(x):
    if isinstance(x, PressureWaveform):
        return x.series
    if isinstance(x, SampledSeries):
        return x
    raise TypeError(f"expected a pressure series, got {type(x).__name__}")


def evaluate(measured, reference, onsets_s=None, alignment="first-cycle-minimum"):
    """Compare a measured pressure waveform with a reference.

    ``onsets_s`` are the measured beat onsets; when omitted they come from
    the measured waveform itself (or its ``beat_onsets_s``). With
    ``"first-cycle-minimum"`` alignment the reference is shifted in time so
    that its minimum near the first measured onset coincides with the
    measured one (both located on the 16 Hz low-passed traces).
    """
    if alignment not in ALIGNMENTS:
        raise ValueError(f"alignment must be one of {ALIGNMENTS}, got {alignment!r}")
    m = _series(measured)
    ref = _series(reference)
    if onsets_s is None and isinstance(measured, PressureWaveform) and measured.beat_onsets_s:
        onsets_s = measured.beat_onsets_s
    if onsets_s is None:
        onsets_s = [float(m.times[i]) for i in detect_beat_minima(m)]
    onsets = sorted(float(t) for t in onsets_s)
    if len(onsets) < 2:
        raise InsufficientBeatsError("fewer than 2 overlapping beats")

    shift = 0.0
    if alignment == "first-cycle-minimum":
        a, b = onsets[0], onsets[1]
        q = 0.25 * (b - a)
        t_m = _min_time(m, a - q, a + q)
        t_r = _min_time(ref, t_m - q, t_m + q)
        shift = t_m - t_r
    ref = ref.with_values(ref.values, t0_s=ref.t0_s + shift)

    r_t = ref.times
    lo, hi = r_t[0], r_t[-1]
    keep = (m.times >= lo) & (m.times <= hi)
    if np.count_nonzero(keep) < 2:
        raise InsufficientBeatsError("measured and reference series do not overlap")
    mv = m.values[keep]
    rv = np.interp(m.times[keep], r_t, ref.values)

    inside = [t for t in onsets if lo <= t <= hi and m.times[0] <= t <= m.times[-1]]
    if len(inside) < 3:
        raise InsufficientBeatsError(
            f"fewer than 2 overlapping beats ({max(len(inside) - 1, 0)})")
    mb = beat_metrics(PressureWaveform(m, 0.0, 1.0), beat_onsets_s=inside)
    rb = beat_metrics(PressureWaveform(ref, 0.0, 1.0), beat_onsets_s=inside)
    if len(mb) != len(rb) or len(mb) < 2:
        raise InsufficientBeatsError(f"fewer than 2 overlapping beats ({min(len(mb), len(rb))})")

    per_metric = {}
    for name in ("pp", "sbp", "dbp", "map"):
        key = f"{name}_mmHg"
        per_metric[name] = bland_altman([getattr(x, key) for x in mb],
                                        [getattr(x, key) for x in rb])
    err = np.array([x.pp_mmHg - y.pp_mmHg for x, y in zip(mb, rb)])
    return EvalReport(
        rmse=rmse(mv, rv),
        pearson_r=pearson_r(mv, rv),
        mae=float(np.mean(np.abs(err))),
        sd_of_error=float(err.std(ddof=1)),
        bland_altman=per_metric["pp"],
        per_metric=per_metric,
        n_beats=len(mb),
        time_shift_s=float(shift),
        alignment=alignment,
        pp_errors=tuple(float(e) for e in err),
    )
