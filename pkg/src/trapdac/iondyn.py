"""Classical ion dynamics in filtered, stepped trap potentials.

integrate() follows a single ion through a transport waveform: electrode
voltages pass through the RC filter model, the compiled kernels advance
the motion with a fixed-step 4th-order symplectic scheme, and energy is
booked relative to the instantaneous well minimum so heating shows up as
secular quanta rather than as coherent sloshing.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .constants import ELEMENTARY_CHARGE, EPSILON_0, HBAR, IonSpecies
from .errors import SimulationError
from .rcfilter import FilterParams, FilteredTimeline
from .trapfield import (BasisField, ElectrodeGeometry, WellProperties,
                        _newton_minimize, _pseudo_coeff, find_rf_nil,
                        find_well, solve_voltages, total_energy)

AXIAL = 0  # trap axis is x; the transverse in-plane direction is y


@dataclass(frozen=True)
class IonState:
    """Instantaneous position (m) and velocity (m/s)."""
    position_m: tuple
    velocity_m_s: tuple

    def __post_init__(self):
        p = np.asarray(self.position_m, dtype=float)
        v = np.asarray(self.velocity_m_s, dtype=float)
        if p.shape != (3,) or v.shape != (3,):
            raise ValueError("position and velocity must be 3-vectors")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
            raise ValueError("ion state components must be finite")
        object.__setattr__(self, "position_m", tuple(float(c) for c in p))
        object.__setattr__(self, "velocity_m_s", tuple(float(c) for c in v))


@dataclass(frozen=True)
class TransportPlan:
    """Waypoint wells plus the voltage row solved for each update step."""
    geometry: ElectrodeGeometry
    species: IonSpecies
    update_period_s: float
    times_s: np.ndarray          # (n,) update instants, starts at 0
    positions_m: np.ndarray      # (n,) axial well positions
    omega_axial: float           # rad/s target curvature at every waypoint
    voltages: np.ndarray         # (n, C) rows in channel order
    channels: tuple

    def __post_init__(self):
        t = np.asarray(self.times_s, dtype=float)
        x = np.asarray(self.positions_m, dtype=float)
        v = np.asarray(self.voltages, dtype=float)
        if t.ndim != 1 or t.size == 0 or np.any(np.diff(t) <= 0):
            raise ValueError("update times must be non-empty and increasing")
        if x.shape != t.shape:
            raise ValueError("one well position per update time")
        if v.shape != (t.size, len(self.channels)):
            raise ValueError("voltage matrix shape mismatch")
        if not np.all(np.isfinite(v)):
            raise ValueError("voltage rows must be finite")
        object.__setattr__(self, "times_s", t)
        object.__setattr__(self, "positions_m", x)
        object.__setattr__(self, "voltages", v)

    @property
    def n_steps(self) -> int:
        return int(self.times_s.size)

    @property
    def duration_s(self) -> float:
        return float(self.times_s[-1])

    @property
    def distance_m(self) -> float:
        return float(abs(self.positions_m[-1] - self.positions_m[0]))

    def voltage_map(self, step: int) -> dict:
        return {ch: float(v) for ch, v in zip(self.channels, self.voltages[step])}


def plan_transport(geometry: ElectrodeGeometry, start_m: float, stop_m: float,
                   speed_m_s: float, omega_axial: float, update_rate_hz: float,
                   species: IonSpecies = None, stray_field=None,
                   profile: str = "linear", bound_v: float = None) -> TransportPlan:
    """Constant-speed waypoint ladder with per-step voltage solutions.

    profile "scurve" replaces the linear ramp with a smoothstep of the
    same average speed; update spacing is 1/update_rate_hz either way.
    """
    if speed_m_s <= 0 or update_rate_hz <= 0:
        raise ValueError("speed and update rate must be positive")
    if profile not in ("linear", "scurve"):
        raise ValueError(f"unknown profile {profile!r}")
    species = species or geometry.ion
    period = 1.0 / update_rate_hz
    dist = stop_m - start_m
    n_moves = max(int(math.ceil(abs(dist) / (speed_m_s * period) - 1e-12)), 0)
    times = np.arange(n_moves + 1) * period
    if n_moves == 0:
        positions = np.array([float(start_m)])
    elif profile == "linear":
        positions = start_m + np.sign(dist) * np.minimum(
            times * speed_m_s, abs(dist))
    else:
        s = times / times[-1]
        positions = start_m + dist * (3.0 * s ** 2 - 2.0 * s ** 3)
    positions[-1] = float(stop_m) if n_moves else positions[-1]

    basis = BasisField(geometry)
    kwargs = {} if bound_v is None else {"bound_v": bound_v}
    rows = []
    for x in positions:
        v = solve_voltages(geometry, float(x), omega_axial, species=species,
                           stray_field=stray_field, basis=basis, **kwargs)
        rows.append([v[ch] for ch in basis.channels])
    return TransportPlan(geometry=geometry, species=species,
                         update_period_s=period, times_s=times,
                         positions_m=positions, omega_axial=float(omega_axial),
                         voltages=np.array(rows), channels=basis.channels)


@dataclass
class TransportResult:
    """Sampled trajectory with secular-energy bookkeeping."""
    mode: str
    dt_s: float
    times_s: np.ndarray
    positions_m: np.ndarray       # (n, 3)
    velocities_m_s: np.ndarray    # (n, 3)
    well_positions_m: np.ndarray  # (n, 3) instantaneous minimum
    omega_axial_rad_s: np.ndarray
    secular_energy_j: np.ndarray
    quanta: np.ndarray
    depth_ev: float
    survived: bool
    escaped_at_s: float           # nan when the ion stayed bound
    halving_energy_change: float  # nan when the halving check was skipped

    @property
    def final_secular_energy_j(self) -> float:
        return float(self.secular_energy_j[-1])

    @property
    def quanta_gained(self) -> float:
        return float(self.quanta[-1] - self.quanta[0])

    @property
    def converged(self) -> bool:
        h = self.halving_energy_change
        return bool(h != h or h < 0.01)

    def as_text(self) -> str:
        lines = [
            "transport result",
            f"  mode               {self.mode}",
            f"  timestep           {self.dt_s:.4e} s",
            f"  duration           {self.times_s[-1] - self.times_s[0]:.4e} s",
            f"  samples            {self.times_s.size}",
            f"  final energy       {self.final_secular_energy_j:.4e} J",
            f"  quanta gained      {self.quanta_gained:.4f}",
            f"  well depth         {self.depth_ev:.4f} eV",
            f"  survived           {self.survived}",
        ]
        if self.escaped_at_s == self.escaped_at_s:
            lines.append(f"  escaped at         {self.escaped_at_s:.4e} s")
        h = self.halving_energy_change
        if h == h:
            lines.append(f"  halving check      {h:.3e} relative"
                         f" ({'ok' if h < 0.01 else 'NOT CONVERGED'})")
        return "\n".join(lines)


def trajectory_header() -> str:
    return "t_s,x_m,y_m,z_m,energy_j,quanta"


def trajectory_rows(result: TransportResult):
    """Rows (t, x, y, z, energy, quanta) matching trajectory_header."""
    for j in range(result.times_s.size):
        p = result.positions_m[j]
        yield (result.times_s[j], p[0], p[1], p[2],
               result.secular_energy_j[j], result.quanta[j])


def _settle_tail(params: FilterParams) -> float:
    # slowest unbuffered pole decays with tau = 2.618 RC; 15 RC covers
    # both topologies to well under 1 percent residual
    return 15.0 * params.rc


def _run_kernel(mode_id, modal, basis_arrays, pseudo_c, rf_v, rf_w,
                charge, inv_mass, bounds, pos0, vel0, dt, n_steps, stride):
    times, u, ca, cb, l1, l2, repeated, _ = modal
    dc_rects, dc_owner, rf_rects = basis_arrays
    n_out = n_steps // stride + 3
    out_t = np.empty(n_out)
    out_pos = np.empty((n_out, 3))
    out_vel = np.empty((n_out, 3))
    n_rec, escape = _kernels.integrate_trap(
        mode_id, pos0, vel0, 0.0, dt, n_steps, stride,
        times, u, ca, cb, l1, float(l2), repeated,
        dc_rects, dc_owner, rf_rects,
        pseudo_c, rf_v, rf_w, charge, inv_mass,
        bounds, out_t, out_pos, out_vel)
    return out_t[:n_rec], out_pos[:n_rec], out_vel[:n_rec], escape


def _track_wells(geometry, basis, species, ftl, times, seed):
    """Instantaneous minimum, axial frequency, and depth proxy per sample."""
    n = times.size
    r0 = np.empty((n, 3))
    wz = np.empty(n)
    u0 = np.empty(n)
    guess = np.asarray(seed, dtype=float)
    for j in range(n):
        v = ftl(float(times[j]))

        def f(r, v=v):
            return total_energy(geometry, v, r, species, basis)

        r, _, h = _newton_minimize(f, guess)
        evals, evecs = np.linalg.eigh(h)
        i_ax = int(np.argmax(np.abs(evecs[0, :])))
        r0[j] = r
        wz[j] = math.sqrt(max(evals[i_ax], 0.0) / species.mass)
        u0[j] = total_energy(geometry, v, r, species, basis)[0]
        guess = r
    return r0, wz, u0


def _secular_energies(geometry, basis, species, ftl, times, pos, vel, r0, u0):
    n = times.size
    e = np.empty(n)
    r0_dot = np.gradient(r0, times, axis=0) if n > 2 else np.zeros_like(r0)
    for j in range(n):
        v = ftl(float(times[j]))
        u, _, _ = total_energy(geometry, v, pos[j], species, basis)
        dv = vel[j] - r0_dot[j]
        e[j] = 0.5 * species.mass * float(dv @ dv) + (u - u0[j])
    return e


def integrate(plan: TransportPlan, filter_params: FilterParams,
              species: IonSpecies = None, initial: IonState = None,
              mode: str = "secular", dt_s: float = None,
              n_samples: int = 600, settle_tail_s: float = None,
              convergence_check: bool = True) -> TransportResult:
    """Propagate one ion through the plan's filtered voltage sequence.

    secular mode moves the ion in the filtered DC potential plus the
    static pseudopotential; full_rf drives the bare RF field at the trap
    frequency instead (timestep capped at 1/50 of the RF period). The
    step-halving check reruns at dt/2 and reports the relative change in
    final secular energy; below 1 percent counts as converged.
    """
    if mode not in ("secular", "full_rf"):
        raise ValueError(f"unknown integration mode {mode!r}")
    species = species or plan.species
    geometry = plan.geometry
    basis = BasisField(geometry)
    ftl = FilteredTimeline(plan.times_s, plan.voltages, filter_params)

    nil = find_rf_nil(geometry, float(plan.positions_m[0]), basis)
    start = find_well(geometry, plan.voltages[0], nil, species=species,
                      basis=basis)
    if initial is None:
        initial = IonState(tuple(start.position), (0.0, 0.0, 0.0))

    if settle_tail_s is None:
        settle_tail_s = _settle_tail(filter_params)
    duration = plan.duration_s + settle_tail_s

    omega_fast = max(start.omega_axial, start.omega_r1, start.omega_r2)
    rf_period = 2.0 * math.pi / geometry.rf_omega
    if mode == "secular":
        dt_cap = (2.0 * math.pi / omega_fast) / 48.0
    else:
        dt_cap = rf_period / 64.0
    dt = dt_cap if dt_s is None else float(dt_s)
    if mode == "full_rf" and dt > rf_period / 50.0:
        raise ValueError("full_rf timestep must be at most RF period / 50")
    n_steps = int(math.ceil(duration / dt))
    stride = max(n_steps // max(n_samples, 2), 1)

    rects = np.vstack([basis.dc_rects, basis.rf_rects])
    pad = 50e-6
    height = float(start.position[2])
    bounds = np.array([rects[:, 0].min() - pad, rects[:, 1].max() + pad,
                       1e-3, height * 0.05, height * 20.0])

    modal = ftl.modal_arrays()
    packed = basis.packed_arrays()
    pseudo_c = _pseudo_coeff(geometry, species)
    rf_w = geometry.rf_omega
    mode_id = _kernels.MODE_SECULAR if mode == "secular" else _kernels.MODE_FULL_RF
    pos0 = np.asarray(initial.position_m, dtype=float)
    vel0 = np.asarray(initial.velocity_m_s, dtype=float)

    t_s, pos, vel, escape = _run_kernel(
        mode_id, modal, packed, pseudo_c, geometry.rf_v_peak, rf_w,
        species.charge, 1.0 / species.mass, bounds, pos0, vel0,
        dt, n_steps, stride)

    r0, wz, u0 = _track_wells(geometry, basis, species, ftl, t_s,
                              start.position)
    energy = _secular_energies(geometry, basis, species, ftl, t_s, pos, vel,
                               r0, u0)
    quanta = energy / (HBAR * np.maximum(wz, 1.0))

    halving = float("nan")
    if convergence_check and escape < 0:
        t2, pos2, vel2, esc2 = _run_kernel(
            mode_id, modal, packed, pseudo_c, geometry.rf_v_peak, rf_w,
            species.charge, 1.0 / species.mass, bounds, pos0, vel0,
            dt / 2.0, n_steps * 2, stride * 2)
        if esc2 < 0:
            # a few samples so the endpoint well velocity is estimated with
            # the same stencil as the main run (frames must match)
            k = min(3, t2.size)
            tail = t2[-k:]
            r0b, wzb, u0b = _track_wells(geometry, basis, species, ftl, tail,
                                         r0[-1])
            eb = _secular_energies(geometry, basis, species, ftl, tail,
                                   pos2[-k:], vel2[-k:], r0b, u0b)
            floor = HBAR * wz[-1]  # one quantum; keeps adiabatic cases sane
            halving = abs(energy[-1] - eb[-1]) / max(abs(eb[-1]), floor)
        else:
            halving = float("inf")

    depth_j = start.depth_ev * ELEMENTARY_CHARGE
    survived = bool(escape < 0 and np.all(energy < depth_j))
    escaped_at = float(t_s[-1]) if escape >= 0 else float("nan")

    return TransportResult(mode=mode, dt_s=dt, times_s=t_s, positions_m=pos,
                           velocities_m_s=vel, well_positions_m=r0,
                           omega_axial_rad_s=wz, secular_energy_j=energy,
                           quanta=quanta, depth_ev=start.depth_ev,
                           survived=survived, escaped_at_s=escaped_at,
                           halving_energy_change=halving)


# ---------------------------------------------------------------------------
# multi-ion statics

def _chain_equilibrium(n: int) -> np.ndarray:
    """Dimensionless 1D Coulomb-chain equilibrium positions (ascending)."""
    if n < 1:
        raise ValueError("need at least one ion")
    if n == 1:
        return np.zeros(1)
    u = np.linspace(-1.0, 1.0, n) * 0.5 * n ** (2.0 / 3.0)
    for _ in range(200):
        d = u[:, None] - u[None, :]
        np.fill_diagonal(d, np.inf)
        inv2 = np.sign(d) / d ** 2
        inv3 = 2.0 / np.abs(d) ** 3
        g = u - inv2.sum(axis=1)
        if np.max(np.abs(g)) < 1e-14 * max(np.max(np.abs(u)), 1.0):
            return u
        h = -inv3
        np.fill_diagonal(h, 1.0 + inv3.sum(axis=1))
        step = np.linalg.solve(h, -g)
        # keep the chain ordered; halve the step until it is
        alpha = 1.0
        for _ in range(60):
            trial = u + alpha * step
            if np.all(np.diff(trial) > 0):
                break
            alpha *= 0.5
        u = u + alpha * step
    raise SimulationError(f"{n}-ion equilibrium did not converge")


def _length_scale(species: IonSpecies, omega_axial: float) -> float:
    q = species.charge
    return (q * q / (4.0 * math.pi * EPSILON_0 * species.mass
                     * omega_axial ** 2)) ** (1.0 / 3.0)


def equilibrium_positions(n_ions: int, species: IonSpecies,
                          omega_axial: float) -> np.ndarray:
    """Axial equilibrium positions (m) about the well center."""
    if omega_axial <= 0:
        raise ValueError("omega_axial must be positive")
    return _chain_equilibrium(n_ions) * _length_scale(species, omega_axial)


def equilibrium_spacing(species: IonSpecies, omega_axial: float,
                        n_ions: int = 2) -> float:
    """Nearest-neighbor spacing (m); closed form for two ions."""
    if omega_axial <= 0:
        raise ValueError("omega_axial must be positive")
    if n_ions == 2:
        q = species.charge
        return (q * q / (2.0 * math.pi * EPSILON_0 * species.mass
                         * omega_axial ** 2)) ** (1.0 / 3.0)
    pos = equilibrium_positions(n_ions, species, omega_axial)
    return float(np.min(np.diff(pos)))


def normal_modes(n_ions: int, species: IonSpecies, omega_axial: float,
                 return_vectors: bool = False):
    """Axial normal-mode frequencies (rad/s, ascending).

    Diagonalizes the Hessian of the n-ion chain about its Coulomb
    equilibrium; the lowest mode is always the center of mass at the
    bare well frequency.
    """
    if omega_axial <= 0:
        raise ValueError("omega_axial must be positive")
    u = _chain_equilibrium(n_ions)
    if n_ions == 1:
        lam = np.ones(1)
        vec = np.ones((1, 1))
    else:
        d = u[:, None] - u[None, :]
        np.fill_diagonal(d, np.inf)
        inv3 = 2.0 / np.abs(d) ** 3
        a = -inv3
        np.fill_diagonal(a, 1.0 + inv3.sum(axis=1))
        lam, vec = np.linalg.eigh(a)
    freqs = omega_axial * np.sqrt(lam)
    if return_vectors:
        return freqs, vec
    return freqs
