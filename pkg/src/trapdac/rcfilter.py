"""Two-stage RC low-pass between DAC outputs and trap electrodes.

Two identical cascaded RC sections. Unbuffered (the default), the second
stage loads the first and H(s) = 1/(s^2 R^2 C^2 + 3 s R C + 1); with an
ideal buffer between stages H(s) = 1/(1 + s R C)^2. Time-domain response
to the zero-order-hold DAC staircase is propagated analytically interval
by interval, so values at update instants are exact.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FilterParams:
    r_per_stage: float  # ohms
    c_per_stage: float  # farads
    buffered: bool = False

    def __post_init__(self):
        if self.r_per_stage <= 0 or self.c_per_stage <= 0:
            raise ValueError("r_per_stage and c_per_stage must be positive")

    @property
    def rc(self) -> float:
        return self.r_per_stage * self.c_per_stage

    def poles(self) -> tuple[float, float]:
        """Real poles (rad/s), slowest last; equal when buffered."""
        if self.buffered:
            p = -1.0 / self.rc
            return (p, p)
        s5 = math.sqrt(5.0)
        return ((-3.0 - s5) / (2.0 * self.rc), (-3.0 + s5) / (2.0 * self.rc))


NOMINAL = FilterParams(r_per_stage=35e3, c_per_stage=220e-12)
BUFFERED = FilterParams(r_per_stage=35e3, c_per_stage=220e-12, buffered=True)
# Effective RC fitted so f3db reproduces the measured 12.1 kHz cutoff; the
# nominal-component two-pole models bracket it (7.7 kHz unbuffered,
# 13.3 kHz buffered) but neither matches the installed network.
MEASURED_FIT = FilterParams(r_per_stage=35e3, c_per_stage=4.925e-6 / 35e3)

FILTER_CONFIGS = {"nominal": NOMINAL, "buffered": BUFFERED, "measured": MEASURED_FIT}


def transfer(f_hz, params: FilterParams):
    """Complex gain at frequency f_hz (scalar or array)."""
    f = np.asarray(f_hz, dtype=float)
    if np.any(f < 0):
        raise ValueError("frequency must be >= 0")
    x = 2j * np.pi * f * params.rc
    if params.buffered:
        h = 1.0 / (1.0 + x) ** 2
    else:
        h = 1.0 / (x * x + 3.0 * x + 1.0)
    return complex(h) if np.isscalar(f_hz) else h


def f3db(params: FilterParams) -> float:
    """Half-power frequency in Hz, from the closed-form root of |H|^2 = 1/2."""
    if params.buffered:
        x = math.sqrt(math.sqrt(2.0) - 1.0)
    else:
        x = math.sqrt((-7.0 + math.sqrt(53.0)) / 2.0)
    return x / (2.0 * math.pi * params.rc)


def dc_group_delay(params: FilterParams) -> float:
    """Low-frequency group delay -dphase/dw in seconds (3RC or 2RC)."""
    return (2.0 if params.buffered else 3.0) * params.rc


def step_response(t_s, params: FilterParams):
    """Unit-step output at t_s (scalar or array), 0 -> 1 monotone."""
    t = np.asarray(t_s, dtype=float)
    if np.any(t < 0):
        raise ValueError("t_s must be >= 0")
    p1, p2 = params.poles()
    if params.buffered:
        y = 1.0 - (1.0 - p1 * t) * np.exp(p1 * t)
    else:
        y = 1.0 + (p2 * np.exp(p1 * t) - p1 * np.exp(p2 * t)) / (p1 - p2)
    return float(y) if np.isscalar(t_s) else y


class FilteredTimeline:
    """Electrode voltages after the filter, for a ZOH input sequence.

    update_times_s (strictly increasing) are the instants the DAC output
    jumps to the matching row of voltages (n_steps, n_channels). State
    (v, dv/dt) is propagated analytically across each hold interval, and
    stored per-interval modal coefficients make pointwise evaluation two
    exponentials plus a fused multiply-add per channel:

        distinct poles:  v(tau) = u + ca*exp(l1*tau) + cb*exp(l2*tau)
        repeated pole:   v(tau) = u + (ca + cb*tau)*exp(l1*tau)

    Before the first update the output sits settled at an initial vector
    (default: the first row).
    """

    def __init__(self, update_times_s, voltages, params: FilterParams,
                 initial_voltages=None):
        times = np.asarray(update_times_s, dtype=float)
        u = np.atleast_2d(np.asarray(voltages, dtype=float))
        if times.ndim != 1 or times.size != u.shape[0]:
            raise ValueError("need one update time per voltage row")
        if times.size == 0:
            raise ValueError("timeline has no updates")
        if np.any(np.diff(times) <= 0):
            raise ValueError("update times must be strictly increasing")
        self.params = params
        self.update_times_s = times
        self.inputs = u
        self.n_steps, self.n_channels = u.shape
        l1, l2 = params.poles()
        self.l1, self.l2 = l1, l2
        self.repeated = params.buffered

        v0 = u[0].copy() if initial_voltages is None else \
            np.asarray(initial_voltages, dtype=float).copy()
        vd0 = np.zeros(self.n_channels)
        self.initial = v0.copy()

        ca = np.empty_like(u)
        cb = np.empty_like(u)
        v, vd = v0, vd0
        for k in range(self.n_steps):
            dv = v - u[k]
            if self.repeated:
                ca[k] = dv
                cb[k] = vd - l1 * dv
            else:
                ca[k] = (l2 * dv - vd) / (l2 - l1)
                cb[k] = dv - ca[k]
            if k + 1 < self.n_steps:
                dt = times[k + 1] - times[k]
                v, vd = self._advance(k, dt, ca, cb)
        self.ca, self.cb = ca, cb

    def _advance(self, k, tau, ca, cb):
        e1 = math.exp(self.l1 * tau)
        if self.repeated:
            lin = ca[k] + cb[k] * tau
            v = self.inputs[k] + lin * e1
            vd = (cb[k] + self.l1 * lin) * e1
        else:
            e2 = math.exp(self.l2 * tau)
            v = self.inputs[k] + ca[k] * e1 + cb[k] * e2
            vd = self.l1 * ca[k] * e1 + self.l2 * cb[k] * e2
        return v, vd

    def __call__(self, t_s: float) -> np.ndarray:
        """All channel voltages at one instant."""
        t0 = self.update_times_s[0]
        if t_s < t0:
            return self.initial.copy()
        k = int(np.searchsorted(self.update_times_s, t_s, side="right")) - 1
        v, _ = self._advance(k, t_s - self.update_times_s[k], self.ca, self.cb)
        return v

    def sample(self, times_s) -> np.ndarray:
        """Voltages on a time grid, shape (n_times, n_channels)."""
        return np.stack([self(float(t)) for t in np.asarray(times_s, dtype=float)])

    def modal_arrays(self):
        """Raw propagation data for compiled integrators.

        Returns (update_times_s, inputs, ca, cb, l1, l2, repeated,
        initial); all arrays are float64 and C-contiguous.
        """
        return (np.ascontiguousarray(self.update_times_s),
                np.ascontiguousarray(self.inputs),
                np.ascontiguousarray(self.ca),
                np.ascontiguousarray(self.cb),
                self.l1, self.l2, self.repeated,
                np.ascontiguousarray(self.initial))


def filter_timeline(update_times_s, voltages, params: FilterParams,
                    initial_voltages=None) -> FilteredTimeline:
    return FilteredTimeline(update_times_s, voltages, params, initial_voltages)


def bode_rows(params: FilterParams, f_min_hz: float, f_max_hz: float, n_points: int):
    """(f_hz, gain_db, phase_deg) rows, log-spaced."""
    if not (0 < f_min_hz < f_max_hz) or n_points < 2:
        raise ValueError("need 0 < f_min < f_max and n_points >= 2")
    f = np.logspace(math.log10(f_min_hz), math.log10(f_max_hz), n_points)
    h = transfer(f, params)
    return np.column_stack([f, 20.0 * np.log10(np.abs(h)), np.degrees(np.angle(h))])


def step_rows(params: FilterParams, t_max_s: float, n_points: int):
    """(t_s, output) rows on a uniform grid from 0."""
    if t_max_s <= 0 or n_points < 2:
        raise ValueError("need t_max > 0 and n_points >= 2")
    t = np.linspace(0.0, t_max_s, n_points)
    return np.column_stack([t, step_response(t, params)])
