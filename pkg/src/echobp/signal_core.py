"""DSP primitives shared by the tracking, PWV and pressure stages.

Every function here is pure: identical inputs give bit-identical outputs and
nothing holds mutable state, so the functions are safe to call from worker
threads.
"""
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import signal
from scipy.interpolate import CubicSpline

from .errors import SignalError


@dataclass(frozen=True)
class SampledSeries:
    """Uniformly sampled series; sample ``i`` sits at ``t0_s + i / rate_hz``."""

    values: np.ndarray
    rate_hz: float
    t0_s: float = 0.0
    unit: str = field(default="", compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size < 1:
            raise SignalError("empty series")
        if not self.rate_hz > 0:
            raise SignalError(f"rate_hz must be positive, got {self.rate_hz}")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    @property
    def times(self):
        return self.t0_s + np.arange(self.values.size) / self.rate_hz

    @property
    def duration_s(self):
        return self.values.size / self.rate_hz

    def with_values(self, values, **changes):
        kw = dict(rate_hz=self.rate_hz, t0_s=self.t0_s, unit=self.unit)
        kw.update(changes)
        return SampledSeries(values, **kw)

    def index_of(self, t_s):
        """Nearest sample index for time ``t_s``."""
        return int(round((t_s - self.t0_s) * self.rate_hz))


def _as_series(x):
    if isinstance(x, SampledSeries):
        return x
    raise TypeError(f"expected SampledSeries, got {type(x).__name__}")


def envelope(series):
    """Magnitude of the analytic signal."""
    series = _as_series(series)
    x = series.values
    # np.hypot against the original samples keeps env >= |x| exactly.
    quad = np.imag(signal.hilbert(x))
    env = np.maximum(np.hypot(x, quad), np.abs(x))
    return series.with_values(env)


def interp_spline(series, factor):
    """Natural cubic spline upsampling by an integer factor.

    The output starts at the first input sample and ends at the last one, so
    ``len(out) == (len(in) - 1) * factor + 1`` and ``out[::factor] == in``.
    """
    series = _as_series(series)
    factor = _check_factor(factor)
    if factor == 1:
        return series
    n = len(series)
    if n < 4:
        raise SignalError(f"series too short for spline interpolation ({n} < 4)")
    out = _spline_eval(series.values, factor)
    return series.with_values(out, rate_hz=series.rate_hz * factor)


def _check_factor(factor):
    if int(factor) != factor or factor < 1:
        raise SignalError(f"interpolation factor must be a positive integer, got {factor}")
    return int(factor)


def _spline_eval(values, factor):
    n = values.shape[0]
    cs = CubicSpline(np.arange(n), values, bc_type="natural", axis=0)
    out = cs(np.arange((n - 1) * factor + 1) / factor)
    out[::factor] = values
    return out


@lru_cache(maxsize=32)
def spline_operator(n, factor):
    """Matrix ``M`` with ``M @ x == interp_spline(x, factor).values``.

    Natural-spline interpolation is linear in the data, so upsampling many
    equal-length RF segments reduces to one matrix product.
    """
    factor = _check_factor(factor)
    if n < 4:
        raise SignalError(f"series too short for spline interpolation ({n} < 4)")
    m = _spline_eval(np.eye(n), factor)
    m.setflags(write=False)
    return m


def butter_lowpass_sos(order, cutoff_hz, rate_hz):
    nyq = rate_hz / 2.0
    if not 0 < cutoff_hz < nyq:
        raise SignalError(f"cutoff {cutoff_hz} Hz must lie in (0, Nyquist={nyq} Hz)")
    return signal.butter(order, cutoff_hz / nyq, btype="low", output="sos")


def zero_phase_lowpass(series, order=4, cutoff_hz=16.0):
    """Butterworth low-pass run forward then backward (zero net phase)."""
    series = _as_series(series)
    sos = butter_lowpass_sos(order, cutoff_hz, series.rate_hz)
    padlen = 3 * order
    if len(series) <= padlen:
        raise SignalError(f"series length {len(series)} must exceed pad length {padlen}")
    out = signal.sosfiltfilt(sos, series.values, padtype="odd", padlen=padlen)
    return series.with_values(out)


def resample_to(series, target_rate_hz):
    """Band-limited resampling onto a ``target_rate_hz`` grid.

    The straight line through the end samples is removed, the residual is
    extended with odd symmetry (so the periodic extension stays C1) and
    resampled in the Fourier domain, then the line is added back. Affine
    inputs are reproduced exactly and, unlike spline upsampling, the second
    derivative of the result is smooth between the original samples.
    """
    series = _as_series(series)
    if not target_rate_hz > 0:
        raise SignalError(f"target rate must be positive, got {target_rate_hz}")
    if target_rate_hz == series.rate_hz:
        return series
    n = len(series)
    if n < 4:
        raise SignalError(f"series too short for resampling ({n} < 4)")
    ratio = Fraction(target_rate_hz / series.rate_hz).limit_denominator(1000)
    p, q = ratio.numerator, ratio.denominator
    x = series.values
    frac = np.arange(n) / (n - 1)
    line0, line1 = x[0], x[-1]
    resid = x - (line0 + (line1 - line0) * frac)
    ext = np.concatenate((resid, -resid[-2:0:-1]))
    up = signal.resample(ext, ext.size * p)[::q]
    m = int(np.floor((n - 1) * p / q + 1e-9)) + 1
    pos = np.arange(m) * q / p / (n - 1)
    out = up[:m] + line0 + (line1 - line0) * pos
    return series.with_values(out, rate_hz=float(series.rate_hz * p / q))


def second_derivative(values):
    """Central second difference; length n - 2, aligned to samples 1..n-2."""
    v = np.asarray(values, dtype=float)
    return v[:-2] - 2.0 * v[1:-1] + v[2:]


def second_derivative_max(series, search_window, refine=False):
    """Time of the largest central second difference inside ``search_window``.

    ``search_window`` is a half-open ``(start, stop)`` index range. Values
    equal to the maximum within rounding noise count as ties and resolve to
    the earliest index. With ``refine`` the grid maximum is moved to the
    vertex of the parabola through it and its neighbours (at most half a
    sample either way).
    """
    series = _as_series(series)
    start, stop = (int(v) for v in search_window)
    n = len(series)
    if start < 0 or stop > n or start >= stop:
        raise SignalError(f"window [{start}, {stop}) outside series of length {n}")
    if stop - start < 5:
        raise SignalError("search window must span at least 5 samples")
    lo = max(start, 1)
    hi = min(stop, n - 1)
    x = series.values
    d2 = second_derivative(x[lo - 1:hi + 1])
    tol = 16.0 * np.finfo(float).eps * float(np.max(np.abs(x[lo - 1:hi + 1])))
    j = int(np.flatnonzero(d2 >= d2.max() - tol)[0])
    pos = float(lo + j)
    if refine and 0 < j < d2.size - 1:
        a, b, c = d2[j - 1], d2[j], d2[j + 1]
        den = a - 2.0 * b + c
        if den < 0:
            pos += min(max(0.5 * (a - c) / den, -0.5), 0.5)
    return series.t0_s + pos / series.rate_hz
