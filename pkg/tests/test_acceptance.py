"""End-to-end acceptance gates.

Ten numbered checks, one test each, covering timing arithmetic, protocol
round trips, the BER bound, filter responses, the field engine, trap
calibration, normal modes, the stray-field procedure, thermometry fits,
and transport. Each test finishes by printing a single pass line with the
measured values (visible with pytest -s or in captured output).
"""

import json
import math
import time

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import dblquad, solve_ivp
from scipy.optimize import brentq

from trapdac import rcfilter
from trapdac.analysis import (SidebandPoint, drift_fit, heating_rate_fit,
                              nbar_from_sidebands)
from trapdac.constants import CA40, ELEMENTARY_CHARGE
from trapdac.dacmodel import ALL_CHANNELS, code_to_voltage
from trapdac.iondyn import integrate, normal_modes, plan_transport
from trapdac.rcfilter import BUFFERED, MEASURED_FIT, NOMINAL
from trapdac.serialbus import (PAPER_NOMINAL_TIMING, ber_test,
                               ber_upper_bound, decode_bitstream,
                               encode_packet, pair_writes, replay_trace,
                               upload_time)
from trapdac.trapfield import (BasisField, Electrode, ElectrodeGeometry,
                               find_rf_nil, find_well, mathieu_q,
                               reference_geometry, solve_voltages,
                               stray_field_measurement)
from trapdac.wavecomp import (VoltageTimeline, compile_timeline,
                              max_update_rate, replay,
                              simulate_waveform_session)

GEO = reference_geometry()
BASIS = BasisField(GEO)


def _ok(n, detail):
    print(f"criterion {n:2d}: PASS  {detail}")


def test_criterion_01_update_rate_arithmetic():
    t0 = time.time()
    timing = PAPER_NOMINAL_TIMING
    t40 = upload_time(40, timing)
    t8 = upload_time(8, timing)
    assert t40 == pytest.approx(60.0e-6, abs=1e-15)
    assert t8 == pytest.approx(25.0e-6, abs=1e-15)

    # 8-pair delta waveform: steady rate floor is the delta upload + LDAC
    channels = [str(ALL_CHANNELS[i]) for i in range(8)] + \
               [str(ALL_CHANNELS[40 + i]) for i in range(8)]
    steps = [[0.0] * 16, [1.0] * 16, [2.0] * 16]
    tl = VoltageTimeline.from_json(json.dumps(
        {"channels": channels, "step_period_s": 1e-4, "steps": steps}))
    report = max_update_rate(compile_timeline(tl), timing)
    overhead = max(timing.ldac_pulse_s, timing.ldac_to_next_packet_delay_s)
    assert report.max_rate_hz == pytest.approx(1.0 / (t8 + overhead),
                                               rel=1e-12)
    assert abs(report.max_rate_hz - 38.46e3) < 5.0  # displayed as 38.46 kHz
    elapsed = time.time() - t0
    assert elapsed < 1.0
    _ok(1, f"upload 60/25 us exact, rate {report.max_rate_hz:.2f} Hz "
           f"({elapsed:.2f} s)")


def test_criterion_02_protocol_round_trip_and_replay():
    t0 = time.time()
    rng = np.random.default_rng(20240601)
    n_waveforms = 10_000
    for _ in range(n_waveforms):
        nch = int(rng.integers(1, 4))
        idx = rng.choice(len(ALL_CHANNELS), size=nch, replace=False)
        chans = [str(ALL_CHANNELS[i]) for i in sorted(idx)]
        steps = rng.uniform(-10, 10, (int(rng.integers(1, 3)), nch)).tolist()
        tl = VoltageTimeline.from_json(json.dumps(
            {"channels": chans, "step_period_s": 1e-4, "steps": steps}))
        wf = compile_timeline(tl)

        for p in wf.packets:  # decode(encode) identity, both chips
            bits_a, bits_b, nf = encode_packet(p)
            fa = decode_bitstream(bits_a, "A")
            fb = decode_bitstream(bits_b, "B")
            slots = pair_writes(p)
            assert len(fa) == len(fb) == len(slots) == nf
            for (sa, sb), da, db in zip(slots, fa, fb):
                assert (da.mode, da.address, da.data) == \
                    (sa.mode, sa.address, sa.data)
                assert (db.mode, db.address, db.data) == \
                    (sb.mode, sb.address, sb.data)

        # trace replay must land on the register-model voltages
        trace = simulate_waveform_session(wf, PAPER_NOMINAL_TIMING)
        snaps = replay_trace(trace)
        expected = replay(wf)
        assert len(snaps) == wf.n_steps
        for i, snap in enumerate(snaps):
            for ch, code in snap.items():
                assert code_to_voltage(code) == expected.channels[ch][i]
    elapsed = time.time() - t0
    assert elapsed < 60.0
    _ok(2, f"{n_waveforms} randomized waveforms, zero mismatches "
           f"({elapsed:.1f} s)")


def test_criterion_03_ber_bound():
    t0 = time.time()
    res = ber_test(15_000_000, 0.0, 0.95, seed=1)
    assert res.bit_errors == 0
    assert res.bits_total >= 15_000_000
    assert 1.9e-7 <= res.upper_bound <= 2.1e-7
    assert res.upper_bound == pytest.approx(
        ber_upper_bound(res.bits_total, 0, 0.95), rel=1e-12)
    elapsed = time.time() - t0
    assert elapsed < 120.0
    _ok(3, f"{res.bits_total} bits, 0 errors, bound "
           f"{res.upper_bound:.4e} ({elapsed:.1f} s)")


def test_criterion_04_filter_responses():
    t0 = time.time()
    quoted = {id(NOMINAL): 7.74e3, id(BUFFERED): 13.31e3,
              id(MEASURED_FIT): 12.1e3}
    frozen = {id(NOMINAL): 7735.326, id(BUFFERED): 13302.754,
              id(MEASURED_FIT): 12093.81}
    f3dbs = []
    for params in (NOMINAL, BUFFERED, MEASURED_FIT):
        analytic = rcfilter.f3db(params)
        target = 1.0 / math.sqrt(2.0)
        numeric = brentq(
            lambda f: abs(rcfilter.transfer(f, params)) - target,
            10.0, 1e6, xtol=1e-6)
        assert analytic == pytest.approx(numeric, rel=1e-3)
        assert analytic == pytest.approx(frozen[id(params)], rel=1e-4)
        assert analytic == pytest.approx(quoted[id(params)], rel=1e-2)
        f3dbs.append(analytic)

    # analytic step response against a stiff ODE oracle (loaded cascade)
    p = NOMINAL
    r, c = p.r_per_stage, p.c_per_stage

    def rhs(t, y):
        v1, v2 = y
        return [((1.0 - v1) / r - (v1 - v2) / r) / c, (v1 - v2) / (r * c)]

    ts = np.linspace(0.0, 30.0 * r * c, 400)
    sol = solve_ivp(rhs, (0.0, ts[-1]), [0.0, 0.0], t_eval=ts,
                    method="LSODA", rtol=1e-11, atol=1e-14)
    got = rcfilter.step_response(ts, p)
    assert np.abs(got - sol.y[1]).max() < 1e-6
    elapsed = time.time() - t0
    assert elapsed < 10.0
    _ok(4, "f3db " + "/".join(f"{f:.1f}" for f in f3dbs)
           + f" Hz, step vs ODE < 1e-6 ({elapsed:.1f} s)")


def test_criterion_05_field_engine_invariants():
    t0 = time.time()
    rng = np.random.default_rng(55)
    n_pts = 1000
    pts = np.column_stack([rng.uniform(-400e-6, 400e-6, n_pts),
                           rng.uniform(-150e-6, 150e-6, n_pts),
                           rng.uniform(15e-6, 250e-6, n_pts)])
    volts = rng.uniform(-5, 5, len(BASIS.channels))
    _, grad, hess = BASIS.dc_potential(volts, pts)

    trace = np.trace(hess, axis1=1, axis2=2)
    eig_scale = np.abs(np.linalg.eigvalsh(hess)).max(axis=1)
    assert np.all(np.abs(trace) <= 1e-6 * eig_scale)

    # central finite differences on the potential, all three axes at once
    h = 1e-9
    fd = np.empty_like(grad)
    for k in range(3):
        dp = np.zeros(3)
        dp[k] = h
        up, _, _ = BASIS.dc_potential(volts, pts + dp)
        dn, _, _ = BASIS.dc_potential(volts, pts - dp)
        fd[:, k] = (up - dn) / (2.0 * h)
    scale = np.abs(grad).max(axis=1)
    assert np.all(np.abs(fd - grad).max(axis=1) <= 1e-6 * np.maximum(scale, 1e-3))

    # square electrode against a quadrature oracle (scaled to O(1) values)
    a = 50e-6
    geo = ElectrodeGeometry(
        electrodes=[Electrode("pad", "A0", -a, a, -a, a)],
        rf_v_peak=1.0, rf_omega=2 * math.pi * 50e6)
    pad = BasisField(geo)
    worst = 0.0
    for (x, y, z) in ((0.0, 0.0, 30e-6), (20e-6, -35e-6, 60e-6),
                      (70e-6, 10e-6, 120e-6)):
        got, _, _ = pad.dc_potential([1.0], (x, y, z))
        xs, ys, zs = x / a, y / a, z / a
        want, err = dblquad(
            lambda v, u: zs / (2 * math.pi * ((xs - u) ** 2 + (ys - v) ** 2
                                              + zs ** 2) ** 1.5),
            -1, 1, -1, 1, epsabs=1e-12, epsrel=1e-10)
        assert err < 1e-8
        worst = max(worst, abs(got - want) / want)
    assert worst < 1e-4
    elapsed = time.time() - t0
    assert elapsed < 60.0
    _ok(5, f"laplace+gradient at {n_pts} points, quadrature dev "
           f"{worst:.1e} ({elapsed:.1f} s)")


def test_criterion_06_trap_calibration():
    t0 = time.time()
    assert GEO.rf_omega == pytest.approx(2 * math.pi * 53.17e6, rel=1e-12)
    omega = 2 * math.pi * 1.5e6
    volts = solve_voltages(GEO, -390e-6, omega, basis=BASIS)
    assert max(abs(v) for v in volts.values()) <= 10.0

    nil = find_rf_nil(GEO, -390e-6, BASIS)
    well = find_well(GEO, volts, nil, basis=BASIS)
    assert well.axial_freq_hz == pytest.approx(1.5e6, rel=0.05)
    assert abs(well.position[0] - (-390e-6)) < 2e-6

    q = mathieu_q(GEO, well.position, "z")
    assert abs(abs(q) - 0.30) < 0.05
    mean_radial = 0.5 * sum(well.radial_freqs_hz)
    assert abs(mean_radial - 5.95e6) / 5.95e6 < 0.15
    elapsed = time.time() - t0
    assert elapsed < 120.0
    _ok(6, f"|q| {abs(q):.3f}, mean radial {mean_radial/1e6:.2f} MHz, "
           f"fz {well.axial_freq_hz/1e6:.3f} MHz at -390 um, max|V| "
           f"{max(abs(v) for v in volts.values()):.2f} ({elapsed:.1f} s)")


def test_criterion_07_normal_mode_ratios():
    t0 = time.time()
    omega = 2 * math.pi * 1.5e6
    f2 = normal_modes(2, CA40, omega)
    assert f2[1] / f2[0] == pytest.approx(math.sqrt(3.0), rel=1e-6)

    f3 = normal_modes(3, CA40, omega)
    assert f3[2] == pytest.approx(math.sqrt(29.0 / 5.0) * omega, rel=1e-4)

    # brute-force Hessian oracle: FD second derivatives of the chain energy
    from trapdac.constants import EPSILON_0
    from trapdac.iondyn import equilibrium_positions
    ell = (CA40.charge ** 2 / (4 * math.pi * EPSILON_0 * CA40.mass
                               * omega ** 2)) ** (1.0 / 3.0)
    u = equilibrium_positions(3, CA40, omega) / ell

    def pot(v):
        e = 0.5 * np.sum(v * v)
        for i in range(3):
            for j in range(i + 1, 3):
                e += 1.0 / abs(v[i] - v[j])
        return e

    h = 1e-4
    hess = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            vpp = u.copy(); vpp[i] += h; vpp[j] += h
            vpm = u.copy(); vpm[i] += h; vpm[j] -= h
            vmp = u.copy(); vmp[i] -= h; vmp[j] += h
            vmm = u.copy(); vmm[i] -= h; vmm[j] -= h
            hess[i, j] = (pot(vpp) - pot(vpm) - pot(vmp) + pot(vmm)) \
                / (4 * h * h)
    oracle = omega * np.sqrt(np.linalg.eigvalsh(hess))
    assert np.abs(f3 - oracle).max() < 1e-4 * oracle.max()
    elapsed = time.time() - t0
    assert elapsed < 10.0
    _ok(7, f"ratios {f2[1]/f2[0]:.6f}, {f3[2]/f3[0]:.6f} vs sqrt(3), "
           f"sqrt(29/5) ({elapsed:.1f} s)")


def test_criterion_08_stray_field_recovery():
    t0 = time.time()
    omega = 2 * math.pi * 1.5e6
    volts = solve_voltages(GEO, 0.0, omega, basis=BASIS)
    scales = [0.98, 0.99, 1.0, 1.01, 1.02]
    res = stray_field_measurement(GEO, volts, 500.0, scales, basis=BASIS)
    assert abs(res.e_z_estimate - 500.0) / 500.0 < 0.01

    closed = ELEMENTARY_CHARGE * 500.0 / (CA40.mass
                                          * res.omega_axial_unscaled ** 2)
    assert abs(res.shift_per_unit_scale - closed) / closed < 1e-3
    quoted = ELEMENTARY_CHARGE * 500.0 / (CA40.mass * omega ** 2)
    assert abs(quoted - 13.6e-6) / 13.6e-6 < 1e-3
    elapsed = time.time() - t0
    assert elapsed < 30.0
    _ok(8, f"E {res.e_z_estimate:.2f} V/m, shift/scale "
           f"{res.shift_per_unit_scale*1e6:.4f} um vs closed form "
           f"{closed*1e6:.4f} (13.6 um quote: {quoted*1e6:.4f}) "
           f"({elapsed:.1f} s)")


def test_criterion_09_thermometry_and_fits():
    t0 = time.time()
    assert nbar_from_sidebands(0.5, 1.0).nbar == 1.0
    assert nbar_from_sidebands(1.0, 6.0).nbar == pytest.approx(0.2, abs=1e-15)

    # synthetic heating data: 0.8 quanta/ms, nbar noise sigma 0.15
    rng = np.random.default_rng(98)
    delays = np.array([0.0, 1.0, 2.0, 3.0])
    sig = 0.15
    nbars = 1.0 + 0.8 * delays + rng.normal(0.0, sig, delays.size)
    pts = []
    for d, n in zip(delays, nbars):
        x = n / (1.0 + n)
        pts.append(SidebandPoint(d, x, 1.0, sigma_red=sig * (1 - x) ** 2))
    fit = heating_rate_fit(pts)
    assert abs(fit.slope - 0.8) < 2.0 * fit.slope_stderr
    assert 0.05 <= fit.slope_stderr <= 0.15

    # synthetic drift: 100 Hz/hr under 50 Hz scatter
    rng = np.random.default_rng(2718)
    t = np.linspace(0.0, 12.0, 25)
    f = 3.1e6 + 100.0 * t + rng.normal(0.0, 50.0, t.size)
    dfit = drift_fit(t, f)
    assert abs(dfit.slope - 100.0) < 2.0 * dfit.slope_stderr
    elapsed = time.time() - t0
    assert elapsed < 60.0
    _ok(9, f"heating {fit.slope:.3f}({fit.slope_stderr:.3f}) quanta/ms, "
           f"drift {dfit.slope:.1f}({dfit.slope_stderr:.1f}) Hz/hr "
           f"({elapsed:.1f} s)")


def test_criterion_10_transport_suite():
    t0 = time.time()
    omega = 2 * math.pi * 1.5e6

    # 1 mm pass at 1 m/s, 38 kHz updates, measured-fit filtering
    plan = plan_transport(GEO, -500e-6, 500e-6, 1.0, omega, 38000.0)
    nil = find_rf_nil(GEO, -500e-6, BASIS)
    start = find_well(GEO, plan.voltages[0], nil, basis=BASIS)
    om_fast = max(start.omega_axial, start.omega_r1, start.omega_r2)
    dt = (2 * math.pi / om_fast) / 96.0
    res = integrate(plan, MEASURED_FIT, dt_s=dt, n_samples=60)
    assert res.survived
    assert res.quanta_gained < 10.0
    assert res.converged

    # adiabatic limit: 20 um over 100 axial periods
    plan_a = plan_transport(GEO, 0.0, 20e-6, 0.3, omega, 38000.0)
    res_a = integrate(plan_a, MEASURED_FIT, n_samples=40)
    assert res_a.survived
    assert res_a.quanta_gained < 0.01

    # secular vs full RF drive, q = 0.3, soft axial well so gains are large
    w2 = 2 * math.pi * 200e3
    plan_c = plan_transport(GEO, 0.0, 100e-6, 1.0, w2, 38000.0)
    sec = integrate(plan_c, MEASURED_FIT, mode="secular",
                    settle_tail_s=60e-6, n_samples=40,
                    convergence_check=False)
    full = integrate(plan_c, MEASURED_FIT, mode="full_rf",
                     settle_tail_s=60e-6, n_samples=40,
                     convergence_check=False)
    rel = abs(sec.quanta_gained - full.quanta_gained) / full.quanta_gained
    assert rel < 0.20
    elapsed = time.time() - t0
    assert elapsed < 300.0
    _ok(10, f"1 mm gain {res.quanta_gained:.3f} quanta, adiabatic "
            f"{res_a.quanta_gained:.4f}, secular/full_rf dev {rel:.3f} "
            f"({elapsed:.0f} s)")
