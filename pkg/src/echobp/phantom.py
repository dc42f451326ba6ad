"""Synthetic cardiovascular phantom: ground-truth kinematics and RF frames.

Each channel sees the same pressure template delayed by its position along
the tube divided by the true PWV. Lumen diameter follows the inverse of the
logarithmic pressure-area law, and every RF frame carries two Hann-windowed
5 MHz bursts at the anterior and posterior lumen boundaries plus white
Gaussian noise.
"""
import json
import math
from dataclasses import dataclass, field, asdict, fields

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConfigError, SignalError
from .pressure import MMHG_PA, RHO_BLOOD, NOISE_DEPTH_M
from .rfio import RfStream, RfStreamHeader
from .signal_core import SampledSeries

INT16_MAX = 32767

TEMPLATES = ("carotid", "sine")

# Carotid-like beat: exponential diastolic runoff restarting at the foot,
# systolic peak, late-systolic shoulder, dicrotic notch and wave. The raw
# shape has a step at the foot and is smoothed by a periodic Gaussian kernel.
_FOOT_PHASE = 0.15
_RUNOFF_TAU = 0.45
_BUMPS = ((0.35, 0.10, 0.040), (0.18, 0.22, 0.050),
          (-0.12, 0.33, 0.020), (0.08, 0.40, 0.040))
_SMOOTH_SIGMA = 0.012
_GRID_N = 4096


def _carotid_table():
    s = np.arange(_GRID_N) / _GRID_N
    raw = np.exp(-s / _RUNOFF_TAU)
    for amp, mu, sig in _BUMPS:
        raw += amp * np.exp(-0.5 * ((s - mu) / sig) ** 2)
    k = np.fft.rfftfreq(_GRID_N, d=1.0 / _GRID_N)
    smooth = np.fft.irfft(np.fft.rfft(raw) * np.exp(-0.5 * (2 * np.pi * k * _SMOOTH_SIGMA) ** 2),
                          n=_GRID_N)
    return np.roll(smooth, int(round(_FOOT_PHASE * _GRID_N)))


def _periodic_spline(table):
    closed = np.append(table, table[0])
    cs = CubicSpline(np.linspace(0.0, 1.0, closed.size), closed, bc_type="periodic")
    return lambda ph: cs(np.mod(ph, 1.0))


class BeatShape:
    """Periodic one-beat shape on phase [0, 1), normalised to [0, 1]."""

    _GRID = 20000

    def __init__(self, name_or_table):
        if isinstance(name_or_table, str):
            if name_or_table == "carotid":
                self._raw = _periodic_spline(_carotid_table())
            elif name_or_table == "sine":
                self._raw = lambda ph: 0.5 - 0.5 * np.cos(2 * np.pi * (ph - 0.1))
            else:
                raise ConfigError(f"unknown template {name_or_table!r}; "
                                  f"available: {', '.join(TEMPLATES)}")
            self.name = name_or_table
        else:
            table = np.asarray(name_or_table, dtype=float)
            if table.ndim != 1 or table.size < 4 or not np.all(np.isfinite(table)):
                raise ConfigError("tabulated template needs >= 4 finite samples")
            self._raw = _periodic_spline(table)
            self.name = "table"
        grid = np.arange(self._GRID) / self._GRID
        raw = self._raw(grid)
        self._lo = float(raw.min())
        self._span = float(raw.max() - raw.min())
        self.min_phase = float(grid[int(np.argmin(raw))])

    def __call__(self, phase):
        phase = np.mod(np.asarray(phase, dtype=float), 1.0)
        if self._span == 0:
            return np.zeros_like(phase)
        return np.clip((self._raw(phase) - self._lo) / self._span, 0.0, 1.0)


def pressure_function(name_or_table, dbp_mmHg, pp_mmHg, heart_rate_hz):
    """Continuous-time pressure ``p(t)`` in mmHg."""
    if pp_mmHg < 0:
        raise ConfigError("pulse pressure must be non-negative")
    shape = BeatShape(name_or_table)
    return lambda t: dbp_mmHg + pp_mmHg * shape(np.asarray(t) * heart_rate_hz)


def pressure_template(name_or_table, dbp_mmHg, pp_mmHg, heart_rate_hz, duration_s,
                      rate_hz):
    if duration_s * heart_rate_hz < 1:
        raise ConfigError("duration must cover at least one beat")
    n = int(round(duration_s * rate_hz))
    p = pressure_function(name_or_table, dbp_mmHg, pp_mmHg, heart_rate_hz)
    return SampledSeries(p(np.arange(n) / rate_hz), rate_hz, unit="mmHg")


def diameter_from_pressure(p, pwv_mps, dd_mm, dbp_mmHg, rho=RHO_BLOOD):
    """Inverse of the logarithmic area law: D = Dd exp((P - DBP) / (2 rho PWV^2))."""
    if not pwv_mps > 0 or not dd_mm > 0:
        raise SignalError("pwv and dd must be positive")
    dp_pa = (p.values - dbp_mmHg) * MMHG_PA
    return p.with_values(dd_mm * np.exp(dp_pa / (2.0 * rho * pwv_mps ** 2)), unit="mm")


@dataclass
class PhantomConfig:
    dbp_mmHg: float = 63.0
    pp_mmHg: float = 40.0
    heart_rate_hz: float = 1.0
    pwv_true_mps: float = 8.03
    dd_mm: float = 8.2
    wall_thickness_mm: float = 0.4
    tube_center_depth_mm: float = 19.0
    speed_of_sound_mps: float = 1480.0
    rho_kg_m3: float = RHO_BLOOD
    prf_hz: int = 2000
    rf_rate_hz: int = 80_000_000
    frame_window_us: float = 40.0
    n_channels: int = 3
    element_spacing_mm: float = 18.0
    snr_db: float = 20.0
    duration_s: float = 10.0
    waveform_template: object = "carotid"
    rng_seed: int = 0
    center_frequency_hz: float = 5e6
    burst_cycles: float = 2.5
    echo_amplitude_frac: float = 0.6
    snr_half_window: int = 16  # raw samples either side of each echo centre

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.dd_mm > 0:
            raise ConfigError("dd_mm must be positive")
        if not self.pwv_true_mps > 0:
            raise ConfigError("pwv_true_mps must be positive")
        if self.pp_mmHg < 0:
            raise ConfigError("pp_mmHg must be non-negative")
        if not self.heart_rate_hz > 0:
            raise ConfigError("heart_rate_hz must be positive")
        if self.prf_hz < 2 * self.heart_rate_hz * 50:
            raise ConfigError(
                f"prf_hz={self.prf_hz} gives fewer than 50 samples per beat at "
                f"{self.heart_rate_hz} Hz")
        depth_limit = self.speed_of_sound_mps * self.frame_window_us * 1e-6 / 2 * 1e3
        bottom = self.tube_center_depth_mm + self.dd_mm / 2 + self.wall_thickness_mm
        if bottom >= depth_limit:
            raise ConfigError(
                f"tube extends to {bottom:.2f} mm, beyond the {depth_limit:.2f} mm "
                "imaging window")
        top = self.tube_center_depth_mm - self.dd_mm / 2 - self.wall_thickness_mm
        if top <= NOISE_DEPTH_M * 1e3:
            raise ConfigError("tube must lie below the 5 mm noise reference depth")
        window_mm = 2 * self.snr_half_window / self.rf_rate_hz * self.speed_of_sound_mps / 2 * 1e3
        if self.dd_mm <= window_mm:
            raise ConfigError("dd_mm too small: the two SNR wall windows would overlap")
        if not 0 < self.echo_amplitude_frac < 1:
            raise ConfigError("echo_amplitude_frac must lie in (0, 1)")
        if self.n_channels < 1 or self.duration_s <= 0:
            raise ConfigError("need at least one channel and positive duration")
        BeatShape(self.waveform_template)

    @property
    def n_frames(self):
        return int(round(self.duration_s * self.prf_hz))

    @property
    def samples_per_frame(self):
        return int(round(self.rf_rate_hz * self.frame_window_us * 1e-6))

    def channel_delays_s(self):
        return np.arange(self.n_channels) * self.element_spacing_mm * 1e-3 / self.pwv_true_mps

    def header(self):
        return RfStreamHeader(
            n_channels=self.n_channels, rf_rate_hz=int(self.rf_rate_hz),
            prf_hz=int(self.prf_hz), samples_per_frame=self.samples_per_frame,
            element_spacing_um=int(round(self.element_spacing_mm * 1000)),
            speed_of_sound_mmps=int(round(self.speed_of_sound_mps * 1000)))

    def to_dict(self):
        d = asdict(self)
        if not isinstance(d["waveform_template"], str):
            d["waveform_template"] = list(np.asarray(d["waveform_template"], float))
        if math.isinf(d["snr_db"]):
            d["snr_db"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("snr_db"), str):
            d["snr_db"] = float(d["snr_db"])
        return cls(**d)

    @classmethod
    def preset(cls, name, **overrides):
        """Named starting point: ``"phantom"`` (water, 1480 m/s) or
        ``"tissue"`` (1540 m/s)."""
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})


PRESETS = {
    "phantom": {},
    "tissue": {"speed_of_sound_mps": 1540.0},
}


@dataclass
class GroundTruth:
    pressure_mmHg: SampledSeries  # at channel 0
    diameter_mm: list  # one SampledSeries per channel
    pwv_true_mps: float
    dbp_mmHg: float
    beat_onsets_s: list
    channel_pressure_mmHg: list = field(default_factory=list)
    channel_delays_s: list = field(default_factory=list)

    def pressure_at_channel(self, ch):
        if self.channel_pressure_mmHg:
            return self.channel_pressure_mmHg[ch]
        return self.pressure_mmHg

    def to_dict(self):
        def ser(s):
            return {"rate_hz": s.rate_hz, "t0_s": s.t0_s, "values": s.values.tolist()}
        return {
            "pwv_true_mps": self.pwv_true_mps,
            "dbp_mmHg": self.dbp_mmHg,
            "beat_onsets_s": list(self.beat_onsets_s),
            "channel_delays_s": list(self.channel_delays_s),
            "pressure_mmHg": ser(self.pressure_mmHg),
            "diameter_mm": [ser(s) for s in self.diameter_mm],
            "channel_pressure_mmHg": [ser(s) for s in self.channel_pressure_mmHg],
        }

    @classmethod
    def from_dict(cls, d):
        def de(s, unit):
            return SampledSeries(np.asarray(s["values"], float), s["rate_hz"], s["t0_s"], unit)
        return cls(
            pressure_mmHg=de(d["pressure_mmHg"], "mmHg"),
            diameter_mm=[de(s, "mm") for s in d.get("diameter_mm", [])],
            pwv_true_mps=float(d["pwv_true_mps"]),
            dbp_mmHg=float(d["dbp_mmHg"]),
            beat_onsets_s=[float(t) for t in d.get("beat_onsets_s", [])],
            channel_pressure_mmHg=[de(s, "mmHg") for s in d.get("channel_pressure_mmHg", [])],
            channel_delays_s=[float(t) for t in d.get("channel_delays_s", [])],
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class SyntheticRfStream(RfStream):
    """RF frames computed on demand from a :class:`PhantomConfig`.

    Noise for frame ``k`` comes from a generator seeded with ``(rng_seed, k)``,
    so any subset of frames, read in any order, is bit-identical to the same
    frames of a full sequential read. The noise of each frame and channel is
    scaled so that the SNR formula (wall windows at the true echo centres)
    evaluates to ``snr_db`` on that frame.
    """

    def __init__(self, config):
        config.validate()
        self.config = config
        self.header = config.header()
        self.n_frames = config.n_frames
        self._p = pressure_function(config.waveform_template, config.dbp_mmHg,
                                    config.pp_mmHg, config.heart_rate_hz)
        self._delays = config.channel_delays_s()
        self._scale = config.echo_amplitude_frac * INT16_MAX
        self._half_burst = config.burst_cycles / config.center_frequency_hz / 2

    def diameters_mm(self, t):
        """Per-channel diameter at times ``t``; shape (len(t), n_channels)."""
        c = self.config
        t = np.asarray(t, dtype=float)[:, None] - self._delays[None, :]
        dp_pa = (self._p(t) - c.dbp_mmHg) * MMHG_PA
        return c.dd_mm * np.exp(dp_pa / (2.0 * c.rho_kg_m3 * c.pwv_true_mps ** 2))

    def echo_times_s(self, diam_mm):
        c = self.config
        z = c.tube_center_depth_mm * 1e-3
        half = np.asarray(diam_mm) * 1e-3 / 2
        return 2 * (z - half) / c.speed_of_sound_mps, 2 * (z + half) / c.speed_of_sound_mps

    def _echoes(self, diam_mm):
        """Noiseless echoes, unit peak amplitude; shape diam.shape + (samples,)."""
        c = self.config
        fs = c.rf_rate_hz
        n = c.samples_per_frame
        t_ant, t_post = self.echo_times_s(diam_mm)
        out = np.zeros(np.shape(diam_mm) + (n,))
        half = self._half_burst
        span = 2 * int(math.ceil(half * fs)) + 2
        flat_out = out.reshape(-1, n)
        rows = np.arange(flat_out.shape[0])[:, None]
        for taus in (np.ravel(t_ant), np.ravel(t_post)):
            i0 = np.floor((taus - half) * fs).astype(np.int64)
            idx = i0[:, None] + np.arange(span)[None, :]
            dt = idx / fs - taus[:, None]
            w = np.where(np.abs(dt) <= half, np.cos(np.pi * dt / (2 * half)) ** 2, 0.0)
            vals = w * np.cos(2 * np.pi * c.center_frequency_hz * dt)
            ok = (idx >= 0) & (idx < n)
            flat_out[np.broadcast_to(rows, idx.shape)[ok], idx[ok]] += vals[ok]
        return out

    def _noisy(self):
        c = self.config
        return not (math.isinf(c.snr_db) and c.snr_db > 0)

    def _wall_index(self, diam):
        """Raw-sample indices of both wall windows; shape (rows, ch, 4h)."""
        c = self.config
        h = c.snr_half_window
        off = np.arange(-h, h)
        idx = [np.rint(t * c.rf_rate_hz).astype(np.int64)[..., None] + off
               for t in self.echo_times_s(diam)]
        return np.concatenate(idx, axis=-1)

    def _noise_scale(self, echoes, z, wall_idx):
        """Per-frame, per-channel noise scale so that the SNR formula on the
        noisy frame equals the configured SNR.

        Solves mean|e + s z|_wall = R s mean|z|_noise for s by Newton steps.
        The left side is convex in s, so iterates started from the noiseless
        estimate approach the root monotonically and stop after finitely many
        steps.
        """
        c = self.config
        ratio = 10 ** (c.snr_db / 20)
        n_noise = int(2 * NOISE_DEPTH_M / c.speed_of_sound_mps * c.rf_rate_hz)
        a = np.abs(z[..., :n_noise]).mean(axis=-1)
        e_w = np.take_along_axis(echoes, wall_idx, axis=-1)
        z_w = np.take_along_axis(z, wall_idx, axis=-1)
        s = np.abs(e_w).mean(axis=-1) / (ratio * a)
        for _ in range(100):
            v = e_w + s[..., None] * z_w
            g = np.abs(v).mean(axis=-1) - ratio * s * a
            dg = (np.sign(v) * z_w).mean(axis=-1) - ratio * a
            step = g / dg
            s = s - step
            if np.all(np.abs(step) <= 1e-12 * np.abs(s)):
                break
        return s

    def read(self, indices):
        c = self.config
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.n_frames):
            raise IndexError("frame index out of range")
        diam = self.diameters_mm(indices / c.prf_hz)
        frames = self._echoes(diam) * self._scale
        if self._noisy() and indices.size:
            shape = (c.n_channels, c.samples_per_frame)
            z = np.stack([np.random.default_rng([int(c.rng_seed), int(k)]).standard_normal(shape)
                          for k in indices])
            s = self._noise_scale(frames, z, self._wall_index(diam))
            frames += s[..., None] * z
        return np.clip(np.rint(frames), -INT16_MAX - 1, INT16_MAX).astype("<i2")

    def ground_truth(self):
        c = self.config
        t = np.arange(self.n_frames) / c.prf_hz
        diam = self.diameters_mm(t)
        ch_p = [SampledSeries(self._p(t - d), c.prf_hz, unit="mmHg") for d in self._delays]
        shape = BeatShape(c.waveform_template)
        period = 1.0 / c.heart_rate_hz
        first = shape.min_phase * period
        onsets = [float(x) for x in np.arange(first, c.duration_s, period)]
        return GroundTruth(
            pressure_mmHg=ch_p[0],
            diameter_mm=[SampledSeries(diam[:, i], c.prf_hz, unit="mm")
                         for i in range(c.n_channels)],
            pwv_true_mps=c.pwv_true_mps,
            dbp_mmHg=c.dbp_mmHg,
            beat_onsets_s=onsets,
            channel_pressure_mmHg=ch_p,
            channel_delays_s=[float(d) for d in self._delays],
        )


def wall_mask(n_samples, centers, half_width):
    """Boolean mask of raw samples within ``half_width`` of any echo centre."""
    mask = np.zeros(n_samples, dtype=bool)
    for c in centers:
        mask[max(c - half_width, 0):min(c + half_width, n_samples)] = True
    return mask


def synth_rf(config):
    """Return ``(stream, truth)`` for a phantom configuration."""
    stream = SyntheticRfStream(config)
    return stream, stream.ground_truth()
