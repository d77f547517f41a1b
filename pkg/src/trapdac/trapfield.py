"""Surface-electrode trap field engine.

Electrodes are rectangles in the grounded z=0 plane (gapless-plane model:
gaps and the loading slot are ignored, untiled area is ground). Each patch
held at 1 V contributes the analytic potential

    phi = (1/2pi) * sum over corners of +/- arctan(X*Y / (z*R))

with X, Y the corner offsets from the field point and R the corner
distance; gradient and Hessian are analytic as well. The trap axis runs
along x, y is the in-plane transverse direction, and z is height above the
plane. The RF drive makes a ponderomotive pseudopotential
Psi = q^2 V^2 |grad phi_rf|^2 / (4 m Omega^2) confining the ion radially.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .constants import ELEMENTARY_CHARGE, IonSpecies, CA40
from .dacmodel import ChannelId, V_MAX, V_MIN
from .errors import (DuplicateChannelError, InfeasibleVoltagesError, NoWellError,
                     SaddlePointError)

RF_TAG = "RF"
GND_TAG = "GND"


@dataclass(frozen=True)
class Electrode:
    """Rectangular patch [x1,x2]x[y1,y2] in the z=0 plane.

    channel is a DC channel name ("A0".."B39"), "RF", or "GND". Electrodes
    wired to one DAC channel in parallel carry shorted=True.
    """

    name: str
    channel: str
    x1: float
    x2: float
    y1: float
    y2: float
    shorted: bool = False

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate rectangle for electrode {self.name}")
        if self.channel not in (RF_TAG, GND_TAG):
            ChannelId.parse(self.channel)  # raises on a bad channel name

    @property
    def rect(self) -> tuple:
        return (self.x1, self.x2, self.y1, self.y2)

    @property
    def is_rf(self) -> bool:
        return self.channel == RF_TAG

    @property
    def is_gnd(self) -> bool:
        return self.channel == GND_TAG


@dataclass
class ElectrodeGeometry:
    """Electrode layout plus RF drive and the ion it holds."""

    electrodes: list
    rf_v_peak: float
    rf_omega: float  # rad/s
    ion: IonSpecies = CA40

    def __post_init__(self):
        if self.rf_omega <= 0:
            raise ValueError("rf_omega must be positive")
        by_channel = {}
        for el in self.electrodes:
            if el.is_rf or el.is_gnd:
                continue
            by_channel.setdefault(el.channel, []).append(el)
        for ch, els in by_channel.items():
            if len(els) > 1 and not all(e.shorted for e in els):
                raise DuplicateChannelError(
                    f"channel {ch} drives {len(els)} electrodes not marked shorted")

    @property
    def dc_channels(self) -> tuple:
        seen = {}
        for el in self.electrodes:
            if not (el.is_rf or el.is_gnd):
                seen[ChannelId.parse(el.channel)] = None
        return tuple(sorted(seen))

    def to_json(self) -> str:
        obj = {
            "electrodes": [
                {"name": el.name, "channel": el.channel, "x1": el.x1, "x2": el.x2,
                 "y1": el.y1, "y2": el.y2, **({"shorted": True} if el.shorted else {})}
                for el in self.electrodes
            ],
            "rf": {"v_peak": self.rf_v_peak, "freq_hz": self.rf_omega / (2 * math.pi)},
            "ion": {"mass_amu": self.ion.mass_amu, "charge_e": self.ion.charge_e},
        }
        return json.dumps(obj, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ElectrodeGeometry":
        obj = json.loads(text)
        electrodes = [Electrode(name=e["name"], channel=e["channel"],
                                x1=float(e["x1"]), x2=float(e["x2"]),
                                y1=float(e["y1"]), y2=float(e["y2"]),
                                shorted=bool(e.get("shorted", False)))
                      for e in obj["electrodes"]]
        ion = IonSpecies.from_amu(float(obj["ion"]["mass_amu"]),
                                  float(obj["ion"]["charge_e"]))
        return cls(electrodes=electrodes, rf_v_peak=float(obj["rf"]["v_peak"]),
                   rf_omega=2 * math.pi * float(obj["rf"]["freq_hz"]), ion=ion)


def _as_points(point):
    pts = np.asarray(point, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 3:
        raise ValueError("points must be 3-vectors")
    if np.any(pts[:, 2] <= 0):
        raise ValueError("field points must have z > 0 (above the plane)")
    return pts, single


def _rect_fields(rects, pts):
    """phi, grad, hess of unit-voltage patches at field points.

    rects: (M,4) rows (x1,x2,y1,y2); pts: (N,3). Returns phi (N,M),
    grad (N,M,3), hess (N,M,3,3). All derivatives are with respect to the
    field-point coordinates.
    """
    rects = np.asarray(rects, dtype=float).reshape(-1, 4)
    n, m = pts.shape[0], rects.shape[0]
    phi = np.zeros((n, m))
    grad = np.zeros((n, m, 3))
    hess = np.zeros((n, m, 3, 3))
    z = pts[:, 2][:, None]                      # (N,1)
    z2 = z * z
    # corner signs: + for (x2,y2) and (x1,y1), - for mixed corners
    for xi, yi, s in ((1, 3, 1.0), (0, 2, 1.0), (0, 3, -1.0), (1, 2, -1.0)):
        X = rects[None, :, xi] - pts[:, 0][:, None]   # (N,M)
        Y = rects[None, :, yi] - pts[:, 1][:, None]
        X2, Y2 = X * X, Y * Y
        R2 = X2 + Y2 + z2
        R = np.sqrt(R2)
        R3 = R2 * R
        qx = X2 + z2
        qy = Y2 + z2
        phi += s * np.arctan(X * Y / (z * R))
        gx = -z * Y / (R * qx)
        gy = -z * X / (R * qy)
        gz = -X * Y * (R2 + z2) / (R * qx * qy)
        grad[:, :, 0] += s * gx
        grad[:, :, 1] += s * gy
        grad[:, :, 2] += s * gz
        hxx = -z * X * Y * (qx + 2 * R2) / (R3 * qx * qx)
        hyy = -z * X * Y * (qy + 2 * R2) / (R3 * qy * qy)
        hxy = z / R3
        hxz = -Y * ((X2 + Y2) * qx - 2 * z2 * R2) / (R3 * qx * qx)
        hyz = -X * ((X2 + Y2) * qy - 2 * z2 * R2) / (R3 * qy * qy)
        hzz = -X * Y * z * ((3 * R2 - z2) * qx * qy
                            - 2 * R2 * (R2 + z2) * (X2 + Y2 + 2 * z2)) \
            / (R3 * qx * qx * qy * qy)
        hess[:, :, 0, 0] += s * hxx
        hess[:, :, 1, 1] += s * hyy
        hess[:, :, 2, 2] += s * hzz
        hess[:, :, 0, 1] += s * hxy
        hess[:, :, 1, 0] += s * hxy
        hess[:, :, 0, 2] += s * hxz
        hess[:, :, 2, 0] += s * hxz
        hess[:, :, 1, 2] += s * hyz
        hess[:, :, 2, 1] += s * hyz
    return phi / (2 * math.pi), grad / (2 * math.pi), hess / (2 * math.pi)


def basis_potential(rect, point):
    """(phi, grad, hess) of one unit-voltage rectangle at a point (z > 0)."""
    if isinstance(rect, Electrode):
        rect = rect.rect
    pts, single = _as_points(point)
    phi, grad, hess = _rect_fields(np.asarray(rect, dtype=float), pts)
    if single:
        return float(phi[0, 0]), grad[0, 0], hess[0, 0]
    return phi[:, 0], grad[:, 0], hess[:, 0]


class BasisField:
    """Per-channel unit-voltage field evaluators for a geometry.

    Shorted electrodes are summed into their shared channel, so the DC
    basis has one column per addressable channel (in .channels order).
    """

    def __init__(self, geometry: ElectrodeGeometry):
        self.geometry = geometry
        self.channels = geometry.dc_channels
        ch_index = {ch: i for i, ch in enumerate(self.channels)}
        dc_rects, dc_owner, rf_rects = [], [], []
        for el in geometry.electrodes:
            if el.is_gnd:
                continue
            if el.is_rf:
                rf_rects.append(el.rect)
            else:
                dc_rects.append(el.rect)
                dc_owner.append(ch_index[ChannelId.parse(el.channel)])
        self.dc_rects = np.asarray(dc_rects, dtype=float).reshape(-1, 4)
        self.dc_owner = np.asarray(dc_owner, dtype=np.int64)
        self.rf_rects = np.asarray(rf_rects, dtype=float).reshape(-1, 4)
        self.n_channels = len(self.channels)

    def _gather(self, per_rect):
        out_shape = (per_rect.shape[0], self.n_channels) + per_rect.shape[2:]
        out = np.zeros(out_shape)
        np.add.at(out, (slice(None), self.dc_owner), per_rect)
        return out

    def dc_basis(self, point):
        """(phi (N,C), grad (N,C,3), hess (N,C,3,3)) per channel."""
        pts, single = _as_points(point)
        phi, grad, hess = _rect_fields(self.dc_rects, pts)
        phi, grad, hess = self._gather(phi), self._gather(grad), self._gather(hess)
        if single:
            return phi[0], grad[0], hess[0]
        return phi, grad, hess

    def rf_basis(self, point):
        """(phi (N,), grad (N,3), hess (N,3,3)) of the unit-voltage RF set."""
        pts, single = _as_points(point)
        phi, grad, hess = _rect_fields(self.rf_rects, pts)
        phi, grad, hess = phi.sum(axis=1), grad.sum(axis=1), hess.sum(axis=1)
        if single:
            return phi[0], grad[0], hess[0]
        return phi, grad, hess

    def voltage_vector(self, voltages) -> np.ndarray:
        """Map {ChannelId: V} (missing channels ground) to basis order."""
        if isinstance(voltages, dict):
            unknown = set(voltages) - set(self.channels)
            if unknown:
                raise KeyError(f"voltages for channels not in geometry: {sorted(unknown)}")
            return np.array([float(voltages.get(ch, 0.0)) for ch in self.channels])
        v = np.asarray(voltages, dtype=float)
        if v.shape != (self.n_channels,):
            raise ValueError(f"expected {self.n_channels} voltages, got {v.shape}")
        return v

    def dc_potential(self, voltages, point):
        """DC potential (V), gradient (V/m), Hessian (V/m^2) at points."""
        v = self.voltage_vector(voltages)
        pts, single = _as_points(point)
        phi, grad, hess = _rect_fields(self.dc_rects, pts)
        vr = v[self.dc_owner]
        pot = phi @ vr
        g = np.einsum("nmk,m->nk", grad, vr)
        h = np.einsum("nmkl,m->nkl", hess, vr)
        if single:
            return pot[0], g[0], h[0]
        return pot, g, h

    def packed_arrays(self):
        """(dc_rects, dc_owner, rf_rects) as contiguous arrays for kernels."""
        return (np.ascontiguousarray(self.dc_rects),
                np.ascontiguousarray(self.dc_owner),
                np.ascontiguousarray(self.rf_rects))


def _pseudo_coeff(geometry: ElectrodeGeometry, species: IonSpecies) -> float:
    """C in Psi = C |grad phi_rf|^2, i.e. q^2 V^2 / (4 m Omega^2)."""
    return (species.charge * geometry.rf_v_peak) ** 2 / (
        4.0 * species.mass * geometry.rf_omega ** 2)


def pseudopotential(geometry: ElectrodeGeometry, point, species: IonSpecies = None,
                    basis: BasisField = None):
    """Ponderomotive energy (J) at points with z > 0."""
    species = species or geometry.ion
    basis = basis or BasisField(geometry)
    pts, single = _as_points(point)
    _, g, _ = basis.rf_basis(pts)
    psi = _pseudo_coeff(geometry, species) * np.sum(g * g, axis=1)
    return float(psi[0]) if single else psi


def pseudo_gradient(geometry, point, species=None, basis=None):
    """Exact gradient of the pseudopotential (J/m)."""
    species = species or geometry.ion
    basis = basis or BasisField(geometry)
    pts, single = _as_points(point)
    _, g, h = basis.rf_basis(pts)
    grad = 2.0 * _pseudo_coeff(geometry, species) * np.einsum("nkl,nl->nk", h, g)
    return grad[0] if single else grad


_FD_STEP = 1e-9  # m; third-derivative finite-difference step, ~1e-5 of ion height


def pseudo_hessian(geometry, point, species=None, basis=None):
    """Pseudopotential Hessian (J/m^2).

    2C (H.H + sum_k g_k dH/dx_k); the third-derivative term comes from
    central differences of the analytic Hessian and vanishes on the RF nil
    where g = 0.
    """
    species = species or geometry.ion
    basis = basis or BasisField(geometry)
    pts, single = _as_points(point)
    c = _pseudo_coeff(geometry, species)
    _, g, h = basis.rf_basis(pts)
    out = 2.0 * c * np.einsum("nkl,nlm->nkm", h, h)
    for k in range(3):
        dp = pts.copy()
        dm = pts.copy()
        dp[:, k] += _FD_STEP
        dm[:, k] -= _FD_STEP
        _, _, hp = basis.rf_basis(dp)
        _, _, hm = basis.rf_basis(dm)
        t_k = (hp - hm) / (2.0 * _FD_STEP)
        out += 2.0 * c * g[:, k][:, None, None] * t_k
    return out[0] if single else out


def mathieu_q(geometry: ElectrodeGeometry, point, axis, species: IonSpecies = None,
              basis: BasisField = None) -> float:
    """Dimensionless RF drive parameter 2 q V phi'' / (m Omega^2) along axis."""
    species = species or geometry.ion
    basis = basis or BasisField(geometry)
    if isinstance(axis, str):
        axis = {"x": (1, 0, 0), "y": (0, 1, 0), "z": (0, 0, 1)}[axis]
    u = np.asarray(axis, dtype=float)
    u = u / np.linalg.norm(u)
    _, _, h = basis.rf_basis(np.asarray(point, dtype=float))
    curv = float(u @ h @ u)
    return 2.0 * species.charge * geometry.rf_v_peak * curv / (
        species.mass * geometry.rf_omega ** 2)


def total_energy(geometry, voltages, point, species=None, basis=None,
                 external_field=None):
    """Potential energy (J), gradient, Hessian of DC + pseudopotential.

    external_field is a uniform stray E (V/m) adding -q E.r to the energy.
    """
    species = species or geometry.ion
    basis = basis or BasisField(geometry)
    pts, single = _as_points(point)
    pot, g_dc, h_dc = basis.dc_potential(voltages, pts)
    q = species.charge
    _, g_rf, h_rf = basis.rf_basis(pts)
    c = _pseudo_coeff(geometry, species)
    u = q * pot + c * np.sum(g_rf * g_rf, axis=1)
    grad = q * g_dc + 2.0 * c * np.einsum("nkl,nl->nk", h_rf, g_rf)
    hess = q * h_dc + pseudo_hessian(geometry, pts, species, basis)
    if external_field is not None:
        e = np.asarray(external_field, dtype=float)
        u = u - q * pts @ e
        grad = grad - q * e
    if single:
        return float(u[0]), grad[0], hess[0]
    return u, grad, hess


@dataclass
class WellProperties:
    """Local characterization of a potential minimum."""

    position: np.ndarray        # (3,) m
    omega_axial: float          # rad/s, mode closest to the x axis
    omega_r1: float             # rad/s, remaining modes ascending
    omega_r2: float
    axes: np.ndarray            # (3,3) unit eigenvectors as rows, axial first
    depth_ev: float

    @property
    def axial_freq_hz(self) -> float:
        return self.omega_axial / (2 * math.pi)

    @property
    def radial_freqs_hz(self) -> tuple:
        return (self.omega_r1 / (2 * math.pi), self.omega_r2 / (2 * math.pi))

    def as_text(self) -> str:
        p = self.position
        lines = [
            f"position_m      {p[0]:+.6e} {p[1]:+.6e} {p[2]:+.6e}",
            f"axial_freq_hz   {self.axial_freq_hz:.6e}",
            f"radial_freq_hz  {self.radial_freqs_hz[0]:.6e} {self.radial_freqs_hz[1]:.6e}",
            f"depth_ev        {self.depth_ev:.6e}",
        ]
        return "\n".join(lines) + "\n"


# Characteristic length for the Newton convergence criterion: gradients are
# compared against |H| * this scale, so tolerances track the well stiffness.
_CHAR_LENGTH = 1e-3
_GRAD_RTOL = 1e-9


def _newton_minimize(value_grad_hess, seed, max_iter=100):
    """Damped Newton descent on a smooth scalar field; returns (r, g, h)."""
    r = np.asarray(seed, dtype=float).copy()
    if r[2] <= 0:
        raise ValueError("seed point must have z > 0")
    _, g, h = value_grad_hess(r)
    for _ in range(max_iter):
        scale = np.linalg.norm(h) * _CHAR_LENGTH
        if np.linalg.norm(g) <= _GRAD_RTOL * scale:
            return r, g, h
        try:
            step = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            step = -g * (_CHAR_LENGTH / max(np.linalg.norm(g), 1e-300))
        # keep strictly above the plane and back off while |grad| grows
        alpha = 1.0
        while r[2] + alpha * step[2] <= 0:
            alpha *= 0.5
        g_norm = np.linalg.norm(g)
        for _ in range(60):
            r_try = r + alpha * step
            _, g_try, h_try = value_grad_hess(r_try)
            if np.linalg.norm(g_try) < g_norm:
                r, g, h = r_try, g_try, h_try
                break
            alpha *= 0.5
        else:
            raise NoWellError("Newton stalled: no descent direction found")
    raise NoWellError(f"no stationary point within {max_iter} Newton iterations")


def axial_depth_ev(geometry, voltages, well_position, species=None, basis=None,
                   external_field=None, n_samples=2001):
    """Barrier height (eV) along the axial line through the minimum."""
    species = species or geometry.ion
    basis = basis or BasisField(geometry)
    rects = np.vstack([basis.dc_rects, basis.rf_rects])
    x_lo, x_hi = rects[:, 0].min(), rects[:, 1].max()
    xs = np.linspace(x_lo, x_hi, n_samples)
    pts = np.tile(np.asarray(well_position, dtype=float), (n_samples, 1))
    pts[:, 0] = xs
    u, _, _ = total_energy(geometry, voltages, pts, species, basis, external_field)
    u0, _, _ = total_energy(geometry, voltages, well_position, species, basis,
                            external_field)
    left = u[xs < well_position[0]]
    right = u[xs > well_position[0]]
    if left.size == 0 or right.size == 0:
        return 0.0
    barrier = min(left.max(), right.max()) - u0
    return max(barrier, 0.0) / ELEMENTARY_CHARGE


def find_well(geometry, voltages, seed_point, species=None, basis=None,
              external_field=None, compute_depth=True) -> WellProperties:
    """Locate the potential minimum near a seed and characterize it."""
    species = species or geometry.ion
    basis = basis or BasisField(geometry)

    def f(r):
        return total_energy(geometry, voltages, r, species, basis, external_field)

    r0, _, h = _newton_minimize(f, seed_point)
    evals, evecs = np.linalg.eigh(h)
    if np.any(evals <= 0):
        raise SaddlePointError(
            f"stationary point at {r0} is not a minimum (curvatures {evals})")
    omegas = np.sqrt(evals / species.mass)
    # the axial mode is the one whose eigenvector leans most along x
    i_ax = int(np.argmax(np.abs(evecs[0, :])))
    i_rad = sorted(set(range(3)) - {i_ax}, key=lambda i: omegas[i])
    axes = np.vstack([evecs[:, i_ax], evecs[:, i_rad[0]], evecs[:, i_rad[1]]])
    depth = axial_depth_ev(geometry, voltages, r0, species, basis,
                           external_field) if compute_depth else float("nan")
    return WellProperties(position=r0, omega_axial=float(omegas[i_ax]),
                          omega_r1=float(omegas[i_rad[0]]),
                          omega_r2=float(omegas[i_rad[1]]),
                          axes=axes, depth_ev=depth)


def find_rf_nil(geometry, axial_position_m: float, basis: BasisField = None,
                seed_height_m: float = None) -> np.ndarray:
    """Point of vanishing RF field in the transverse plane at fixed x."""
    basis = basis or BasisField(geometry)
    if seed_height_m is None:
        rails = basis.rf_rects
        if rails.size == 0:
            raise NoWellError("geometry has no RF electrodes")
        # infinite-rail estimate sqrt(inner*outer) from the first rail
        seed_height_m = math.sqrt(abs(rails[0, 2] * rails[0, 3]))

    # minimize |g|^2 over (y, z) at fixed x; with finite rails the axial
    # component g_x need not vanish there, so convergence is judged on the
    # Newton step, not the full gradient
    r = np.array([axial_position_m, 0.0, seed_height_m])
    yz = np.ix_([1, 2], [1, 2])
    for _ in range(100):
        _, g, h = basis.rf_basis(r)
        grad2 = 2.0 * (h @ g)
        hess2 = 2.0 * (h @ h)  # Gauss-Newton form; exact at the nil
        step = np.linalg.solve(hess2[yz], -grad2[[1, 2]])
        alpha = 1.0
        while r[2] + alpha * step[1] <= 0:
            alpha *= 0.5
        r[1] += alpha * step[0]
        r[2] += alpha * step[1]
        if np.linalg.norm(step) < 1e-13:
            return r
    raise NoWellError(f"RF nil search did not converge at x = {axial_position_m}")


def solve_voltages(geometry, axial_position_m: float, omega_axial: float,
                   species: IonSpecies = None, stray_field=None,
                   bound_v: float = V_MAX, basis: BasisField = None) -> dict:
    """Electrode voltages for a well at x0 with the requested axial curvature.

    Minimal-2-norm solution of the four Taylor constraints on the DC
    potential at the RF nil: gradient equal to the stray field being
    cancelled (zero by default) and axial curvature m w^2 / q. Falls back
    to a bound-constrained solve when the minimal-norm solution exceeds
    the voltage bounds.
    """
    species = species or geometry.ion
    basis = basis or BasisField(geometry)
    if omega_axial <= 0:
        raise ValueError("omega_axial must be positive")
    r0 = find_rf_nil(geometry, axial_position_m, basis)
    _, grad_b, hess_b = basis.dc_basis(r0)
    a = np.vstack([grad_b.T, hess_b[:, 0, 0]])          # (4, C)
    e = np.zeros(3) if stray_field is None else np.asarray(stray_field, dtype=float)
    curv = species.mass * omega_axial ** 2 / species.charge
    b = np.array([e[0], e[1], e[2], curv])

    v = np.linalg.pinv(a) @ b
    if np.max(np.abs(v)) > bound_v:
        v = _bounded_min_norm(a, b, bound_v, basis.channels, v)
    return {ch: float(v[i]) for i, ch in enumerate(basis.channels)}


def _bounded_min_norm(a, b, bound_v, channels, v_seed):
    """min ||v||^2 subject to a v = b and |v| <= bound."""
    n = a.shape[1]
    res = scipy.optimize.minimize(
        lambda v: v @ v, np.clip(v_seed, -bound_v, bound_v),
        jac=lambda v: 2.0 * v, method="SLSQP",
        bounds=[(-bound_v, bound_v)] * n,
        constraints=[{"type": "eq", "fun": lambda v: a @ v - b,
                      "jac": lambda v: a}],
        options={"maxiter": 500, "ftol": 1e-14})
    v = res.x
    scale = max(np.linalg.norm(b), 1e-30)
    if not res.success or np.linalg.norm(a @ v - b) > 1e-6 * scale:
        binding = tuple(ch for ch, vi in zip(channels, v)
                        if abs(abs(vi) - bound_v) < 1e-6 * bound_v)
        raise InfeasibleVoltagesError(
            f"constraints unreachable within +/-{bound_v} V", binding_channels=binding)
    return v


@dataclass
class StrayFieldResult:
    """Outcome of the well-scaling stray-field measurement."""

    e_z_estimate: float          # V/m along the trap axis
    shift_per_unit_scale: float  # m, fitted slope of x_min vs 1/scale
    omega_axial_unscaled: float  # rad/s measured at scale 1
    scales: np.ndarray
    positions_m: np.ndarray      # axial minimum per scale

    def as_text(self) -> str:
        lines = [
            f"e_axial_v_per_m       {self.e_z_estimate:.6e}",
            f"shift_per_unit_scale_m {self.shift_per_unit_scale:.6e}",
            f"axial_freq_unscaled_hz {self.omega_axial_unscaled / (2 * math.pi):.6e}",
            "scale,axial_min_m",
        ]
        lines += [f"{s:.6f},{x:.9e}" for s, x in zip(self.scales, self.positions_m)]
        return "\n".join(lines) + "\n"


def stray_field_measurement(geometry, voltages, hidden_e_axial: float, scales,
                            species: IonSpecies = None,
                            basis: BasisField = None) -> StrayFieldResult:
    """Estimate an axial stray field by scaling the DC well strength.

    For each scale s the well minimum is located under s * (DC voltages)
    with the hidden uniform field present; the axial minimum obeys
    x_min(s) = x0 + q E / (s m w0^2), so a linear fit against 1/s yields E.
    """
    species = species or geometry.ion
    basis = basis or BasisField(geometry)
    scales = np.asarray(sorted(scales), dtype=float)
    if scales.size < 2 or np.unique(scales).size < 2 or np.any(scales <= 0):
        raise ValueError("need at least 2 distinct positive scale factors")
    e_vec = np.array([hidden_e_axial, 0.0, 0.0])
    v_vec = basis.voltage_vector(voltages)

    unit_well = find_well(geometry, v_vec, _seed_from_voltages(basis, v_vec),
                          species, basis, external_field=e_vec, compute_depth=False)
    omega0 = unit_well.omega_axial
    xs = np.empty(scales.size)
    seed = unit_well.position
    for i, s in enumerate(scales):
        w = find_well(geometry, v_vec * s, seed, species, basis,
                      external_field=e_vec, compute_depth=False)
        xs[i] = w.position[0]
        seed = w.position
    slope, _ = np.polyfit(1.0 / scales, xs, 1)
    e_est = slope * species.mass * omega0 ** 2 / species.charge
    return StrayFieldResult(e_z_estimate=float(e_est),
                            shift_per_unit_scale=float(slope),
                            omega_axial_unscaled=float(omega0),
                            scales=scales, positions_m=xs)


def _seed_from_voltages(basis: BasisField, v_vec) -> np.ndarray:
    """Crude well seed: deepest DC+RF-nil point over a coarse axial scan."""
    rails = basis.rf_rects
    h = math.sqrt(abs(rails[0, 2] * rails[0, 3])) if rails.size else 50e-6
    x_lo = basis.dc_rects[:, 0].min()
    x_hi = basis.dc_rects[:, 1].max()
    xs = np.linspace(x_lo, x_hi, 257)[1:-1]
    pts = np.column_stack([xs, np.zeros_like(xs), np.full_like(xs, h)])
    pot, _, _ = basis.dc_potential(v_vec, pts)
    return np.array([xs[int(np.argmin(pot))], 0.0, h])


def field_map_rows(geometry, voltages, plane: str, lo1: float, hi1: float,
                   lo2: float, hi2: float, n1: int, n2: int, fixed: float,
                   species: IonSpecies = None):
    """Grid of DC potential, pseudopotential and total energy.

    plane picks the two swept coordinates ("xy", "xz", or "yz"); the third
    is held at `fixed`. Returns rows (c1, c2, dc_v, pseudo_ev, total_ev).
    """
    species = species or geometry.ion
    basis = BasisField(geometry)
    axes = {"xy": (0, 1, 2), "xz": (0, 2, 1), "yz": (1, 2, 0)}
    if plane not in axes:
        raise ValueError("plane must be one of xy, xz, yz")
    i1, i2, i3 = axes[plane]
    c1 = np.linspace(lo1, hi1, n1)
    c2 = np.linspace(lo2, hi2, n2)
    g1, g2 = np.meshgrid(c1, c2, indexing="ij")
    pts = np.zeros((n1 * n2, 3))
    pts[:, i1] = g1.ravel()
    pts[:, i2] = g2.ravel()
    pts[:, i3] = fixed
    v_vec = basis.voltage_vector(voltages)
    pot, _, _ = basis.dc_potential(v_vec, pts)
    psi = pseudopotential(geometry, pts, species, basis)
    q = species.charge
    total_ev = (q * pot + psi) / ELEMENTARY_CHARGE
    psi_ev = psi / ELEMENTARY_CHARGE
    return np.column_stack([pts[:, i1], pts[:, i2], pot, psi_ev, total_ev])


# -- bundled linear-trap layout ---------------------------------------------

ION_HEIGHT = 60e-6
_RAIL_INNER = 40e-6
_RAIL_OUTER = ION_HEIGHT ** 2 / _RAIL_INNER   # nil at sqrt(inner*outer)
_RAIL_SPAN = 6e-3
_SEG_PITCH = 60e-6
_N_SEGMENTS = 39
_SEG_DEPTH = 500e-6
_OUTER_DEPTH = 2e-3


def _segment_channel_b(k: int) -> str:
    """Side-B segment wiring: both end pairs share one channel each."""
    if k <= 1:
        return "B0"
    if k >= _N_SEGMENTS - 2:
        return "B36"
    return f"B{k - 1}"


def reference_geometry(species: IonSpecies = CA40, rf_freq_hz: float = 53.17e6,
                       q_target: float = 0.3) -> ElectrodeGeometry:
    """Bundled linear surface trap, RF amplitude calibrated to q_target.

    Two RF rails put the field nil 60 um above the plane. 39 DC segments
    per side at 60 um pitch provide axial control (A0-A38 and B0-B36; the
    four side-B end segments are shorted pairwise onto B0 and B36). B37 is
    the center strip between the rails and B38 the shorted pair of outer
    strips; A39/B39 stay unwired as bench diagnostics. A stand-in layout:
    ion height, q, and achievable mode frequencies are calibrated, not
    traced from any fabricated device.
    """
    half_span = _N_SEGMENTS * _SEG_PITCH / 2.0
    electrodes = [
        Electrode("rf_top", RF_TAG, -_RAIL_SPAN, _RAIL_SPAN, _RAIL_INNER, _RAIL_OUTER),
        Electrode("rf_bot", RF_TAG, -_RAIL_SPAN, _RAIL_SPAN, -_RAIL_OUTER, -_RAIL_INNER),
        Electrode("center", "B37", -_RAIL_SPAN, _RAIL_SPAN, -_RAIL_INNER, _RAIL_INNER),
        Electrode("outer_top", "B38", -_RAIL_SPAN, _RAIL_SPAN, _RAIL_OUTER + _SEG_DEPTH,
                  _RAIL_OUTER + _SEG_DEPTH + _OUTER_DEPTH, shorted=True),
        Electrode("outer_bot", "B38", -_RAIL_SPAN, _RAIL_SPAN,
                  -_RAIL_OUTER - _SEG_DEPTH - _OUTER_DEPTH,
                  -_RAIL_OUTER - _SEG_DEPTH, shorted=True),
    ]
    for k in range(_N_SEGMENTS):
        x1 = -half_span + k * _SEG_PITCH
        x2 = x1 + _SEG_PITCH
        electrodes.append(Electrode(f"segA{k}", f"A{k}", x1, x2,
                                    _RAIL_OUTER, _RAIL_OUTER + _SEG_DEPTH))
        ch_b = _segment_channel_b(k)
        electrodes.append(Electrode(f"segB{k}", ch_b, x1, x2,
                                    -_RAIL_OUTER - _SEG_DEPTH, -_RAIL_OUTER,
                                    shorted=k <= 1 or k >= _N_SEGMENTS - 2))
    omega_rf = 2 * math.pi * rf_freq_hz
    geom = ElectrodeGeometry(electrodes=electrodes, rf_v_peak=1.0,
                             rf_omega=omega_rf, ion=species)
    basis = BasisField(geom)
    nil = find_rf_nil(geom, 0.0, basis)
    q_unit = mathieu_q(geom, nil, "z", species, basis)  # linear in v_peak
    geom.rf_v_peak = q_target / abs(q_unit)
    return geom
