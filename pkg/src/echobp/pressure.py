"""Diameter -> absolute pressure conversion and per-beat hemodynamics.

Pressure follows the logarithmic area law for a circular lumen,
``P(t) = DBP + 2 rho PWV^2 ln(D(t) / Dd)``, evaluated in SI units and
reported in mmHg.
"""
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import SignalError, TrackingError
from .signal_core import SampledSeries, envelope

MMHG_PA = 133.322
RHO_BLOOD = 1060.0
NOISE_DEPTH_M = 5e-3


@dataclass(frozen=True)
class DiameterWaveform:
    series: SampledSeries  # mm
    d0_mm: float
    beat_onsets_s: tuple = ()
    anchor_time_s: float = 0.0

    def __post_init__(self):
        if not self.d0_mm > 0:
            raise SignalError(f"end-diastolic diameter must be positive, got {self.d0_mm}")


@dataclass(frozen=True)
class PressureWaveform:
    series: SampledSeries  # mmHg
    dbp_input_mmHg: float
    pwv_used_mps: float
    rho_kg_m3: float = RHO_BLOOD
    beat_onsets_s: tuple = ()


@dataclass(frozen=True)
class BeatRecord:
    onset_s: float
    dbp_mmHg: float
    map_mmHg: float
    sbp_mmHg: float
    pp_mmHg: float
    ff: float | None
    ds_mm: float | None = None
    dd_mm: float | None = None
    flagged: bool = False
    flags: tuple = field(default=())

    def to_dict(self):
        d = asdict(self)
        d["flags"] = list(self.flags)
        return d


def _pa_per_unit_log(pwv_mps, rho):
    return 2.0 * rho * pwv_mps ** 2


def pressure_from_diameter(d, pwv_mps, dbp_mmHg, rho=RHO_BLOOD):
    """Absolute pressure waveform from a :class:`DiameterWaveform`.

    ``d.d0_mm`` is the end-diastolic diameter at which pressure equals
    ``dbp_mmHg``.
    """
    if not pwv_mps > 0:
        raise SignalError(f"pwv must be positive, got {pwv_mps}")
    dvals = d.series.values
    if np.any(dvals <= 0) or not np.all(np.isfinite(dvals)):
        raise SignalError("diameter must be finite and positive everywhere")
    dp_pa = _pa_per_unit_log(pwv_mps, rho) * np.log(dvals / d.d0_mm)
    series = d.series.with_values(dbp_mmHg + dp_pa / MMHG_PA, unit="mmHg")
    return PressureWaveform(series, float(dbp_mmHg), float(pwv_mps), float(rho),
                            tuple(d.beat_onsets_s))


def pulse_pressure(ds_mm, dd_mm, pwv_mps, rho=RHO_BLOOD):
    """Pulse pressure in mmHg from systolic/diastolic diameters."""
    if not dd_mm > 0 or not pwv_mps > 0:
        raise SignalError("dd and pwv must be positive")
    if ds_mm < dd_mm:
        raise SignalError(f"inverted systole: ds={ds_mm} mm < dd={dd_mm} mm")
    return _pa_per_unit_log(pwv_mps, rho) * math.log(ds_mm / dd_mm) / MMHG_PA


def diameter_waveform(distension, d0_mm, anchor_time_s=None, beat_onsets_s=()):
    """Absolute diameter: ``d0`` plus distension relative to the anchor instant.

    The anchor defaults to the first beat onset, or the first sample when no
    onsets are known.
    """
    if anchor_time_s is None:
        anchor_time_s = beat_onsets_s[0] if len(beat_onsets_s) else distension.t0_s
    k = min(max(distension.index_of(anchor_time_s), 0), len(distension) - 1)
    vals = d0_mm + (distension.values - distension.values[k])
    return DiameterWaveform(distension.with_values(vals, unit="mm"), float(d0_mm),
                            tuple(float(t) for t in beat_onsets_s), float(anchor_time_s))


def _beat_slices(series, onsets):
    if len(onsets) < 2:
        return [(series.t0_s, slice(0, len(series)))]
    idx = [series.index_of(t) for t in onsets]
    out = []
    for t, a, b in zip(onsets, idx[:-1], idx[1:]):
        a, b = max(a, 0), min(b, len(series))
        if b - a >= 2:
            out.append((float(t), slice(a, b)))
    return out


def beat_metrics(p, diameter=None, beat_onsets_s=None):
    """Per-beat DBP/MAP/SBP/PP/FF.

    Beats are the half-open intervals between consecutive onsets; a series
    without onsets is treated as a single beat. MAP is the beat's time
    average. A beat with zero pulse pressure has no form factor and is
    flagged.
    """
    onsets = p.beat_onsets_s if beat_onsets_s is None else tuple(beat_onsets_s)
    records = []
    for onset, sl in _beat_slices(p.series, onsets):
        seg = p.series.values[sl]
        dbp, sbp = float(seg.min()), float(seg.max())
        mean = float(seg.mean())
        # Keep dbp <= map <= sbp under rounding.
        mean = min(max(mean, dbp), sbp)
        pp = sbp - dbp
        flags = []
        if pp <= 1e-9 * max(1.0, abs(sbp)):
            ff = None
            flags.append("zero_pp")
        else:
            ff = (mean - dbp) / pp
        ds = dd = None
        if diameter is not None:
            dseg = diameter.series.values[sl]
            ds, dd = float(dseg.max()), float(dseg.min())
        records.append(BeatRecord(onset, dbp, mean, sbp, pp, ff, ds, dd,
                                  bool(flags), tuple(flags)))
    return records


def stiffness_indices(pp_mmHg, ds_mm, dd_mm):
    """Pressure-strain modulus Ep (mmHg) and area compliance AC (mm^2/mmHg)."""
    delta = ds_mm - dd_mm
    if not dd_mm > 0:
        raise SignalError("dd must be positive")
    if delta <= 0:
        raise SignalError(f"diameter change must be positive, got {delta}")
    if not pp_mmHg > 0:
        raise SignalError("pulse pressure must be positive")
    ep = pp_mmHg * dd_mm / delta
    ac = math.pi / 4.0 * (ds_mm ** 2 - dd_mm ** 2) / pp_mmHg
    return ep, ac


def transform_reference_pp(pp_fin_mmHg, ff_c, ff_fin):
    """Map a peripheral reference PP onto the measurement site via form factors."""
    if not ff_fin > 0:
        raise SignalError(f"ff_fin must be positive, got {ff_fin}")
    return pp_fin_mmHg * ff_c / ff_fin


def transform_reference_sbp(pp_fin_mmHg, ff_c, ff_fin, dbp_mmHg):
    return transform_reference_pp(pp_fin_mmHg, ff_c, ff_fin) + dbp_mmHg


def _leading_edge(env, peak_idx, level, lo):
    """Sub-sample position where ``env`` first rises through ``level`` before
    ``peak_idx``, scanning back no further than ``lo``."""
    j = peak_idx
    while j > lo and env[j - 1] >= level:
        j -= 1
    if j <= lo:
        return None
    a, b = env[j - 1], env[j]
    return (j - 1) + (level - a) / (b - a)


def end_diastolic_diameter(frame, region, rf_rate_hz, speed_of_sound_mps,
                           threshold_frac=0.3, interp_factor=15):
    """Inner diameter (mm) from the leading edges of the two wall echoes.

    ``frame`` is one raw RF frame; ``region`` a WallRegion whose centers are
    in interpolated-rate samples. Each edge is where the envelope first rises
    through ``threshold_frac`` of its local peak. The threshold must sit at
    least one noise-envelope level away from both the noise floor and the
    peak, otherwise the edge is not resolvable.
    """
    if not 0 < threshold_frac < 1:
        raise SignalError(f"threshold_frac must lie in (0, 1), got {threshold_frac}")
    x = np.asarray(frame, dtype=float)
    env = envelope(SampledSeries(x, rf_rate_hz)).values
    n_noise = int(2 * NOISE_DEPTH_M / speed_of_sound_mps * rf_rate_hz)
    noise_level = float(env[:n_noise].mean()) if n_noise > 0 else 0.0
    half = int(round(region.half_window_w / interp_factor))
    span = 4 * half
    edges = []
    for name, center_u in (("anterior", region.anterior_center_u),
                           ("posterior", region.posterior_center_u)):
        c = int(round(center_u / interp_factor))
        a, b = max(c - half, 1), min(c + half + 1, env.size)
        pk_idx = a + int(np.argmax(env[a:b]))
        pk = env[pk_idx]
        level = threshold_frac * pk
        if level - noise_level <= 0 or pk - level <= noise_level:
            raise TrackingError(
                f"{name} wall: threshold {threshold_frac:g} of peak is not resolvable "
                f"above the noise envelope ({noise_level:.1f} vs peak {pk:.1f})")
        edge = _leading_edge(env, pk_idx, level, max(pk_idx - span, 0))
        if edge is None:
            raise TrackingError(f"{name} wall: envelope threshold never crossed")
        edges.append(edge)
    return (edges[1] - edges[0]) / rf_rate_hz * speed_of_sound_mps / 2.0 * 1e3
