"""Measurement reductions: sideband thermometry, linear fits, line positions.

Sideband strengths arrive as plain scalars; the ratio rule n = x/(1-x)
with x = I_red/I_blue is all the lineshape physics kept here. Fits are
ordinary or weighted least squares on two parameters with the standard
error conventions: measurement sigmas propagate unscaled, bare data uses
the residual variance.
"""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import UnphysicalRatioError
from .trapfield import WellProperties


@dataclass(frozen=True)
class NbarResult:
    nbar: float
    sigma: float = None  # None when strengths came without uncertainties


def nbar_from_sidebands(i_red: float, i_blue: float, sigma_red: float = None,
                        sigma_blue: float = None) -> NbarResult:
    """Mean occupation from the red/blue sideband strength ratio.

    First-order propagation: sigma_n = sigma_x / (1-x)^2 with the ratio
    variance assembled from the two strength uncertainties.
    """
    if i_red < 0 or i_blue < 0:
        raise ValueError("sideband strengths must be non-negative")
    if i_blue == 0:
        raise ValueError("blue sideband strength is zero; ratio undefined")
    x = i_red / i_blue
    if x >= 1.0:
        raise UnphysicalRatioError(
            f"sideband ratio {x:.4f} >= 1; thermometry breaks down")
    nbar = x / (1.0 - x)
    if sigma_red is None and sigma_blue is None:
        return NbarResult(nbar)
    sr = 0.0 if sigma_red is None else float(sigma_red)
    sb = 0.0 if sigma_blue is None else float(sigma_blue)
    var_x = (sr / i_blue) ** 2 + (i_red * sb / i_blue ** 2) ** 2
    return NbarResult(nbar, math.sqrt(var_x) / (1.0 - x) ** 2)


@dataclass(frozen=True)
class SidebandPoint:
    """One thermometry sample: sideband strengths after a wait."""
    delay_ms: float
    i_red: float
    i_blue: float
    sigma_red: float = None
    sigma_blue: float = None

    def __post_init__(self):
        if self.i_red < 0 or self.i_blue < 0:
            raise ValueError("sideband strengths must be non-negative")

    def nbar(self) -> NbarResult:
        return nbar_from_sidebands(self.i_red, self.i_blue,
                                   self.sigma_red, self.sigma_blue)


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    slope_stderr: float
    intercept_stderr: float
    n_points: int

    def __post_init__(self):
        if self.slope_stderr < 0 or self.intercept_stderr < 0:
            raise ValueError("standard errors must be non-negative")

    def as_text(self, slope_unit: str = "", x_name: str = "x") -> str:
        unit = f" {slope_unit}" if slope_unit else ""
        return "\n".join([
            f"points           {self.n_points}",
            f"slope            {self.slope:.6g} +/- {self.slope_stderr:.3g}{unit}",
            f"intercept        {self.intercept:.6g} +/- {self.intercept_stderr:.3g}"
            f" (at {x_name} = 0)",
        ])


def _linear_fit(x, y, sigma=None) -> LinearFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size or x.size < 2:
        raise ValueError("need at least two (x, y) samples")
    if np.ptp(x) == 0:
        raise ValueError("all abscissae equal; fit is degenerate")
    a = np.column_stack([x, np.ones_like(x)])
    if sigma is not None:
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma <= 0):
            raise ValueError("uncertainties must be positive")
        aw = a / sigma[:, None]
        yw = y / sigma
        cov = np.linalg.inv(aw.T @ aw)
        beta = cov @ (aw.T @ yw)
        # sigmas are trusted as absolute: covariance is not rescaled
        err = np.sqrt(np.diag(cov))
    else:
        beta, res, _, _ = np.linalg.lstsq(a, y, rcond=None)
        dof = x.size - 2
        if dof > 0:
            rss = float(res[0]) if res.size else float(np.sum((y - a @ beta) ** 2))
            s2 = rss / dof
        else:
            s2 = 0.0
        cov = s2 * np.linalg.inv(a.T @ a)
        err = np.sqrt(np.diag(cov))
    return LinearFit(slope=float(beta[0]), intercept=float(beta[1]),
                     slope_stderr=float(err[0]), intercept_stderr=float(err[1]),
                     n_points=int(x.size))


def heating_rate_fit(points) -> LinearFit:
    """Heating rate (quanta/ms): n-bar against delay, weighted when possible.

    Weights come from the propagated n-bar uncertainties; if any point
    arrives without them the fit falls back to uniform weights.
    """
    points = list(points)
    if len(points) < 3:
        raise ValueError("need at least three sideband points")
    nb = [p.nbar() for p in points]
    delays = [p.delay_ms for p in points]
    values = [r.nbar for r in nb]
    sigmas = [r.sigma for r in nb]
    if all(s is not None and s > 0 for s in sigmas):
        return _linear_fit(delays, values, sigmas)
    return _linear_fit(delays, values)


def drift_fit(times_hr, freqs_hz) -> LinearFit:
    """Mode-frequency drift (Hz/hr) by ordinary least squares."""
    return _linear_fit(times_hr, freqs_hz)


# ---------------------------------------------------------------------------
# spectrum line positions

@dataclass(frozen=True)
class SpectrumLine:
    offset_hz: float
    freq_hz: float
    label: str


def _combo_label(coeffs) -> str:
    names = ("z", "r1", "r2")
    parts = []
    for n, name in zip(coeffs, names):
        if n == 0:
            continue
        mag = abs(n)
        parts.append(("+" if n > 0 else "-")
                     + (str(mag) if mag > 1 else "") + name)
    return "".join(parts) if parts else "carrier"


def sideband_spectrum(well: WellProperties, carrier_freq_hz: float,
                      order: int = 1):
    """Motional line positions around a carrier, up to second order.

    Returns SpectrumLine entries sorted by offset: the carrier plus every
    integer combination n_z w_z + n_r1 w_r1 + n_r2 w_r2 with total order
    sum |n_i| <= order. Line strengths are out of scope.
    """
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1, or 2")
    freqs = (well.omega_axial, well.omega_r1, well.omega_r2)
    lines = []
    span = range(-order, order + 1)
    for nz in span:
        for n1 in span:
            for n2 in span:
                if abs(nz) + abs(n1) + abs(n2) > order:
                    continue
                off = (nz * freqs[0] + n1 * freqs[1] + n2 * freqs[2]) \
                    / (2.0 * math.pi)
                lines.append(SpectrumLine(
                    offset_hz=float(off),
                    freq_hz=float(carrier_freq_hz + off),
                    label=_combo_label((nz, n1, n2))))
    return sorted(lines, key=lambda s: s.offset_hz)


# ---------------------------------------------------------------------------
# CSV input schemas (comment lines start with '#')

def _data_rows(text: str):
    rows = []
    for line in io.StringIO(text):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        rows.append(s)
    if not rows:
        raise ValueError("no data rows found")
    return list(csv.reader(rows))


def parse_sidebands_csv(text: str):
    """sidebands CSV: delay_ms, i_red, i_blue[, sigma_red, sigma_blue]."""
    rows = _data_rows(text)
    header = [h.strip().lower() for h in rows[0]]
    if header[:3] != ["delay_ms", "i_red", "i_blue"]:
        raise ValueError(f"unexpected sideband header: {rows[0]}")
    with_sigma = header[3:5] == ["sigma_red", "sigma_blue"]
    points = []
    for r in rows[1:]:
        vals = [float(c) for c in r]
        if with_sigma:
            points.append(SidebandPoint(vals[0], vals[1], vals[2],
                                        vals[3], vals[4]))
        else:
            points.append(SidebandPoint(vals[0], vals[1], vals[2]))
    return points


def parse_drift_csv(text: str):
    """drift CSV: time_hr, freq_hz[, reload_flag]; flags are metadata."""
    rows = _data_rows(text)
    header = [h.strip().lower() for h in rows[0]]
    if header[:2] != ["time_hr", "freq_hz"]:
        raise ValueError(f"unexpected drift header: {rows[0]}")
    with_reload = len(header) > 2 and header[2] == "reload_flag"
    times, freqs, reloads = [], [], []
    for r in rows[1:]:
        times.append(float(r[0]))
        freqs.append(float(r[1]))
        reloads.append(bool(int(r[2])) if with_reload and len(r) > 2 else False)
    return np.array(times), np.array(freqs), np.array(reloads)
