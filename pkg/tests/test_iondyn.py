"""Transport dynamics: integrator quality, chain statics, heating runs."""

import math

import numpy as np
import pytest

from trapdac import _kernels
from trapdac.constants import CA40, EPSILON_0, HBAR
from trapdac.iondyn import (IonState, equilibrium_positions,
                            equilibrium_spacing, integrate, normal_modes,
                            plan_transport, trajectory_header,
                            trajectory_rows)
from trapdac.rcfilter import MEASURED_FIT
from trapdac.trapfield import BasisField, reference_geometry

GEO = reference_geometry()
OMEGA = 2 * math.pi * 1.5e6


# ---------------------------------------------------------------------------
# integrator self-checks on a static quadratic well (no field machinery)

def test_energy_drift_bounded_over_many_periods():
    pos0 = np.array([1.0, 0.5, -0.3])
    vel0 = np.array([0.0, 0.2, 0.1])
    dt = 2 * math.pi / 200  # 200 steps per period at omega = 1
    out = _kernels.integrate_quadratic(1.0, 1.0, 1.0, 1.0, pos0, vel0,
                                       dt, 200 * 10000)
    assert out[-1] < 1e-6  # worst relative drift over 1e4 periods


def test_integrator_is_fourth_order():
    pos0 = np.array([1.0, 0.5, -0.3])
    vel0 = np.array([0.0, 0.2, 0.1])
    T = 2 * math.pi
    drifts = []
    for steps in (100, 200, 400):
        out = _kernels.integrate_quadratic(1.0, 1.0, 1.0, 1.0, pos0, vel0,
                                           T / steps, steps * 100)
        drifts.append(out[-1])
    # halving dt cuts the drift by ~2^4
    assert drifts[0] / drifts[1] == pytest.approx(16.0, rel=0.05)
    assert drifts[1] / drifts[2] == pytest.approx(16.0, rel=0.05)


def test_integrator_tracks_analytic_oscillator():
    pos0 = np.array([1.0, 0.5, -0.3])
    vel0 = np.array([0.0, 0.2, 0.1])
    dt = 2 * math.pi / 200
    n = 200 * 50
    out = _kernels.integrate_quadratic(1.0, 1.0, 1.0, 1.0, pos0, vel0, dt, n)
    t = dt * n
    exact = pos0 * math.cos(t) + vel0 * math.sin(t)
    assert np.abs(np.array(out[0:3]) - exact).max() < 1e-4


# ---------------------------------------------------------------------------
# compiled field kernels against the vectorized reference evaluators

def test_dc_kernel_matches_basis_evaluator():
    basis = BasisField(GEO)
    dc_rects, dc_owner, rf_rects = basis.packed_arrays()
    rng = np.random.default_rng(7)
    volts = rng.uniform(-5, 5, len(basis.channels))
    for _ in range(40):
        p = np.array([rng.uniform(-150e-6, 150e-6),
                      rng.uniform(-80e-6, 80e-6),
                      rng.uniform(20e-6, 200e-6)])
        u_ref, g_ref, _ = basis.dc_potential(volts, p)
        u, gx, gy, gz = _kernels.dc_potential_gradient(
            dc_rects, dc_owner, volts, p[0], p[1], p[2])
        assert u == pytest.approx(float(u_ref), rel=1e-12, abs=1e-14)
        scale = max(np.abs(g_ref).max(), 1.0)
        assert np.abs(np.array([gx, gy, gz]) - g_ref).max() < 1e-12 * scale


def test_rf_kernel_matches_basis_evaluator():
    basis = BasisField(GEO)
    _, _, rf_rects = basis.packed_arrays()
    rng = np.random.default_rng(11)
    for _ in range(40):
        p = np.array([rng.uniform(-150e-6, 150e-6),
                      rng.uniform(-80e-6, 80e-6),
                      rng.uniform(20e-6, 200e-6)])
        _, g_ref, h_ref = basis.rf_basis(p[None, :])
        out = _kernels.rf_gradient_hessian(rf_rects, p[0], p[1], p[2])
        g = np.array(out[0:3])
        hxx, hyy, hzz, hxy, hxz, hyz = out[3:9]
        h = np.array([[hxx, hxy, hxz], [hxy, hyy, hyz], [hxz, hyz, hzz]])
        assert np.abs(g - g_ref[0]).max() < 1e-12 * max(np.abs(g_ref).max(), 1.0)
        assert np.abs(h - h_ref[0]).max() < 1e-12 * np.abs(h_ref).max()


# ---------------------------------------------------------------------------
# transport planning

def test_linear_plan_waypoints():
    period = 1.0 / 38000.0
    dist = 1.9 * period  # lands on 2 moves, 3 waypoints
    plan = plan_transport(GEO, 0.0, dist, 1.0, OMEGA, 38000.0)
    assert plan.n_steps == 3
    assert plan.update_period_s == pytest.approx(period)
    assert np.allclose(np.diff(plan.times_s), period)
    assert plan.positions_m[0] == 0.0
    assert plan.positions_m[-1] == dist  # endpoint exact despite overshoot
    assert plan.positions_m[1] == pytest.approx(period * 1.0)
    assert plan.duration_s == pytest.approx(2 * period)
    assert plan.distance_m == pytest.approx(dist)
    assert plan.voltages.shape == (3, len(plan.channels))


def test_scurve_plan_midpoint_and_endpoints():
    period = 1.0 / 38000.0
    dist = 1.9 * period
    plan = plan_transport(GEO, 0.0, dist, 1.0, OMEGA, 38000.0,
                          profile="scurve")
    # smoothstep hits exactly half the distance halfway through
    assert plan.positions_m[0] == 0.0
    assert plan.positions_m[1] == pytest.approx(0.5 * dist)
    assert plan.positions_m[-1] == dist


def test_plan_voltage_rows_place_the_well():
    from trapdac.trapfield import find_rf_nil, find_well
    period = 1.0 / 38000.0
    plan = plan_transport(GEO, 0.0, 1.9 * period, 1.0, OMEGA, 38000.0)
    basis = BasisField(GEO)
    for step in (0, 2):
        target = float(plan.positions_m[step])
        nil = find_rf_nil(GEO, target, basis)
        well = find_well(GEO, plan.voltage_map(step), nil, basis=basis,
                         compute_depth=False)
        assert well.position[0] == pytest.approx(target, abs=1e-6)
        assert well.omega_axial == pytest.approx(OMEGA, rel=0.01)


def test_stationary_plan_is_single_waypoint():
    plan = plan_transport(GEO, 10e-6, 10e-6, 1.0, OMEGA, 38000.0)
    assert plan.n_steps == 1
    assert plan.duration_s == 0.0
    assert plan.distance_m == 0.0


def test_plan_rejects_bad_arguments():
    with pytest.raises(ValueError):
        plan_transport(GEO, 0.0, 1e-6, 0.0, OMEGA, 38000.0)
    with pytest.raises(ValueError):
        plan_transport(GEO, 0.0, 1e-6, 1.0, OMEGA, -1.0)
    with pytest.raises(ValueError):
        plan_transport(GEO, 0.0, 1e-6, 1.0, OMEGA, 38000.0, profile="jerk")


def test_ion_state_validation():
    with pytest.raises(ValueError):
        IonState((0.0, 0.0), (0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        IonState((0.0, 0.0, math.nan), (0.0, 0.0, 0.0))


# ---------------------------------------------------------------------------
# single-ion propagation

def test_static_well_stays_cold():
    plan = plan_transport(GEO, 0.0, 0.0, 1.0, OMEGA, 38000.0)
    res = integrate(plan, MEASURED_FIT, settle_tail_s=20e-6, n_samples=50)
    assert res.survived
    assert res.quanta.max() < 1e-3  # starts at the minimum, stays there
    assert res.halving_energy_change < 0.01
    assert res.converged
    assert math.isnan(res.escaped_at_s)


def test_overkicked_ion_escapes():
    plan = plan_transport(GEO, 0.0, 0.0, 1.0, OMEGA, 38000.0)
    cold = integrate(plan, MEASURED_FIT, settle_tail_s=5e-6, n_samples=10,
                     convergence_check=False)
    start = tuple(cold.positions_m[0])
    # 2 km/s axial is ~0.8 eV, well past the 0.39 eV depth
    hot = IonState(start, (2000.0, 0.0, 0.0))
    res = integrate(plan, MEASURED_FIT, initial=hot, settle_tail_s=20e-6,
                    n_samples=50, convergence_check=False)
    assert not res.survived
    assert math.isfinite(res.escaped_at_s)
    assert math.isnan(res.halving_energy_change)
    assert res.converged  # nan halving counts as not-checked, not failed


def test_integrate_rejects_bad_modes_and_steps():
    plan = plan_transport(GEO, 0.0, 0.0, 1.0, OMEGA, 38000.0)
    with pytest.raises(ValueError):
        integrate(plan, MEASURED_FIT, mode="classical")
    rf_period = 2 * math.pi / GEO.rf_omega
    with pytest.raises(ValueError):
        integrate(plan, MEASURED_FIT, mode="full_rf", dt_s=rf_period / 10.0)


def test_trajectory_rows_match_result():
    plan = plan_transport(GEO, 0.0, 0.0, 1.0, OMEGA, 38000.0)
    res = integrate(plan, MEASURED_FIT, settle_tail_s=5e-6, n_samples=10,
                    convergence_check=False)
    assert trajectory_header() == "t_s,x_m,y_m,z_m,energy_j,quanta"
    rows = list(trajectory_rows(res))
    assert len(rows) == res.times_s.size
    assert rows[0][0] == res.times_s[0]
    assert rows[-1][5] == res.quanta[-1]
    assert "survived" in res.as_text()


def test_fast_transport_heats_thermal_ion():
    """Dragging a displaced ion 50 um at 1 m/s in a 200 kHz well heats it.

    The update staircase at 38 kHz is only ~5x below the axial frequency,
    so each voltage step rings the ion up; the gain is hundreds of quanta
    and reproducible per seed.
    """
    omega = 2 * math.pi * 200e3
    plan = plan_transport(GEO, 0.0, 50e-6, 1.0, omega, 38000.0)
    base = integrate(plan, MEASURED_FIT, settle_tail_s=40e-6, n_samples=40,
                     convergence_check=False)
    x0 = np.array(base.well_positions_m[0], dtype=float)
    amp = math.sqrt(2 * 0.5 * HBAR / (CA40.mass * omega))  # nbar = 0.5
    gains = []
    for seed in range(8):
        rng = np.random.default_rng(1000 + seed)
        phi = rng.uniform(0, 2 * math.pi)
        p = x0.copy()
        p[0] += amp * math.cos(phi)
        v = (-amp * omega * math.sin(phi), 0.0, 0.0)
        res = integrate(plan, MEASURED_FIT, initial=IonState(tuple(p), v),
                        settle_tail_s=40e-6, n_samples=40,
                        convergence_check=False)
        assert res.survived
        gains.append(res.quanta_gained)
    gains = np.array(gains)
    assert np.all(gains > 100.0)
    assert 250.0 < gains.mean() < 430.0


# ---------------------------------------------------------------------------
# multi-ion statics

def test_two_ion_spacing_closed_form():
    q = CA40.charge
    want = (q * q / (2 * math.pi * EPSILON_0 * CA40.mass
                     * OMEGA ** 2)) ** (1.0 / 3.0)
    got = equilibrium_spacing(CA40, OMEGA)
    assert got == pytest.approx(want, rel=1e-12)
    assert got == pytest.approx(4.2777728585e-6, rel=1e-9)
    pos = equilibrium_positions(2, CA40, OMEGA)
    assert float(np.diff(pos)[0]) == pytest.approx(want, rel=1e-9)


def test_three_ion_spacing_closed_form():
    # outer ions sit at (5/4)^(1/3) length units
    q = CA40.charge
    ell = (q * q / (4 * math.pi * EPSILON_0 * CA40.mass
                    * OMEGA ** 2)) ** (1.0 / 3.0)
    want = (1.25) ** (1.0 / 3.0) * ell
    assert equilibrium_spacing(CA40, OMEGA, n_ions=3) == pytest.approx(
        want, rel=1e-9)


def test_equilibrium_positions_symmetric_and_ordered():
    for n in (1, 2, 3, 5, 8):
        pos = equilibrium_positions(n, CA40, OMEGA)
        assert pos.size == n
        assert np.all(np.diff(pos) > 0) or n == 1
        assert np.abs(pos + pos[::-1]).max() < 1e-15 * max(np.abs(pos).max(), 1.0)
    assert equilibrium_positions(1, CA40, OMEGA)[0] == 0.0


def test_mode_ratios_two_and_three_ions():
    f2 = normal_modes(2, CA40, OMEGA)
    assert f2[0] == pytest.approx(OMEGA, rel=1e-12)
    assert f2[1] / f2[0] == pytest.approx(math.sqrt(3.0), rel=1e-9)
    f3 = normal_modes(3, CA40, OMEGA)
    assert f3[1] / f3[0] == pytest.approx(math.sqrt(3.0), rel=1e-9)
    assert f3[2] / f3[0] == pytest.approx(math.sqrt(29.0 / 5.0), rel=1e-9)
    # absolute frequencies at 1.5 MHz
    assert f3[0] / (2 * math.pi) == pytest.approx(1.5e6, rel=1e-12)
    assert f3[2] / (2 * math.pi) == pytest.approx(3.612478e6, rel=1e-6)


def test_modes_against_finite_difference_hessian():
    """Four-ion chain: diagonalize an FD Hessian of the raw chain energy."""
    n = 4
    ell = (CA40.charge ** 2 / (4 * math.pi * EPSILON_0 * CA40.mass
                               * OMEGA ** 2)) ** (1.0 / 3.0)
    u = equilibrium_positions(n, CA40, OMEGA) / ell

    def pot(v):
        e = 0.5 * np.sum(v * v)
        for i in range(n):
            for j in range(i + 1, n):
                e += 1.0 / abs(v[i] - v[j])
        return e

    h = 1e-4
    hess = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            vpp = u.copy(); vpp[i] += h; vpp[j] += h
            vpm = u.copy(); vpm[i] += h; vpm[j] -= h
            vmp = u.copy(); vmp[i] -= h; vmp[j] += h
            vmm = u.copy(); vmm[i] -= h; vmm[j] -= h
            hess[i, j] = (pot(vpp) - pot(vpm) - pot(vmp) + pot(vmm)) / (4 * h * h)
    want = OMEGA * np.sqrt(np.linalg.eigvalsh(hess))
    got = normal_modes(n, CA40, OMEGA)
    assert np.abs(got - want).max() < 1e-6 * want.max()


def test_mode_vectors_orthonormal_com_first():
    freqs, vecs = normal_modes(5, CA40, OMEGA, return_vectors=True)
    assert np.all(np.diff(freqs) > 0)
    assert np.allclose(vecs.T @ vecs, np.eye(5), atol=1e-12)
    com = vecs[:, 0]
    assert np.abs(np.abs(com) - 1 / math.sqrt(5)).max() < 1e-12


def test_statics_reject_bad_arguments():
    with pytest.raises(ValueError):
        equilibrium_positions(0, CA40, OMEGA)
    with pytest.raises(ValueError):
        equilibrium_positions(2, CA40, -OMEGA)
    with pytest.raises(ValueError):
        equilibrium_spacing(CA40, 0.0)
    with pytest.raises(ValueError):
        normal_modes(3, CA40, 0.0)
