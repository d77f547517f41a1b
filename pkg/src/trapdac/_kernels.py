"""Compiled inner loops for ion dynamics.

Scalar re-implementations of the rectangle-patch field formulas plus a
fixed-step 4th-order symplectic integrator (Yoshida composition of three
velocity-Verlet substeps). Everything is passed as plain arrays so these
stay independent of the object layer; trapfield's vectorized evaluators
are the reference implementation the tests compare against.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def dc_potential_gradient(rects, owner, volts, px, py, pz):
    """Potential (V) and gradient (V/m) of weighted rectangle patches."""
    u = 0.0
    gx = 0.0
    gy = 0.0
    gz = 0.0
    z = pz
    z2 = z * z
    for m in range(rects.shape[0]):
        w = volts[owner[m]]
        if w == 0.0:
            continue
        for c in range(4):
            if c == 0:
                cx, cy, s = rects[m, 1], rects[m, 3], 1.0
            elif c == 1:
                cx, cy, s = rects[m, 0], rects[m, 2], 1.0
            elif c == 2:
                cx, cy, s = rects[m, 0], rects[m, 3], -1.0
            else:
                cx, cy, s = rects[m, 1], rects[m, 2], -1.0
            x = cx - px
            y = cy - py
            x2 = x * x
            y2 = y * y
            r2 = x2 + y2 + z2
            r = math.sqrt(r2)
            qx = x2 + z2
            qy = y2 + z2
            sw = s * w
            u += sw * math.atan(x * y / (z * r))
            gx -= sw * z * y / (r * qx)
            gy -= sw * z * x / (r * qy)
            gz -= sw * x * y * (r2 + z2) / (r * qx * qy)
    k = 1.0 / (2.0 * math.pi)
    return u * k, gx * k, gy * k, gz * k


@njit(cache=True)
def rf_gradient_hessian(rects, px, py, pz):
    """Gradient and Hessian of the unit-voltage RF basis at one point."""
    gx = 0.0
    gy = 0.0
    gz = 0.0
    hxx = 0.0
    hyy = 0.0
    hzz = 0.0
    hxy = 0.0
    hxz = 0.0
    hyz = 0.0
    z = pz
    z2 = z * z
    for m in range(rects.shape[0]):
        for c in range(4):
            if c == 0:
                cx, cy, s = rects[m, 1], rects[m, 3], 1.0
            elif c == 1:
                cx, cy, s = rects[m, 0], rects[m, 2], 1.0
            elif c == 2:
                cx, cy, s = rects[m, 0], rects[m, 3], -1.0
            else:
                cx, cy, s = rects[m, 1], rects[m, 2], -1.0
            x = cx - px
            y = cy - py
            x2 = x * x
            y2 = y * y
            r2 = x2 + y2 + z2
            r = math.sqrt(r2)
            r3 = r2 * r
            qx = x2 + z2
            qy = y2 + z2
            gx -= s * z * y / (r * qx)
            gy -= s * z * x / (r * qy)
            gz -= s * x * y * (r2 + z2) / (r * qx * qy)
            hxx -= s * z * x * y * (qx + 2.0 * r2) / (r3 * qx * qx)
            hyy -= s * z * x * y * (qy + 2.0 * r2) / (r3 * qy * qy)
            hxy += s * z / r3
            hxz -= s * y * ((x2 + y2) * qx - 2.0 * z2 * r2) / (r3 * qx * qx)
            hyz -= s * x * ((x2 + y2) * qy - 2.0 * z2 * r2) / (r3 * qy * qy)
            hzz -= s * x * y * z * ((3.0 * r2 - z2) * qx * qy
                                    - 2.0 * r2 * (r2 + z2) * (x2 + y2 + 2.0 * z2)) \
                / (r3 * qx * qx * qy * qy)
    k = 1.0 / (2.0 * math.pi)
    return (gx * k, gy * k, gz * k,
            hxx * k, hyy * k, hzz * k, hxy * k, hxz * k, hyz * k)


@njit(cache=True)
def voltages_at(t, times, u, ca, cb, l1, l2, repeated, out):
    """Filtered channel voltages at time t from modal interval data."""
    if t <= times[0]:
        k = 0
        tau = 0.0
    else:
        k = np.searchsorted(times, t, side="right") - 1
        tau = t - times[k]
    e1 = math.exp(l1 * tau)
    n = out.shape[0]
    if repeated:
        for j in range(n):
            out[j] = u[k, j] + (ca[k, j] + cb[k, j] * tau) * e1
    else:
        e2 = math.exp(l2 * tau)
        for j in range(n):
            out[j] = u[k, j] + ca[k, j] * e1 + cb[k, j] * e2


MODE_SECULAR = 0
MODE_FULL_RF = 1


@njit(cache=True)
def acceleration(mode, t, px, py, pz,
                 times, u, ca, cb, l1, l2, repeated, vbuf,
                 dc_rects, dc_owner, rf_rects,
                 pseudo_c, rf_v_peak, rf_omega, charge, inv_mass):
    voltages_at(t, times, u, ca, cb, l1, l2, repeated, vbuf)
    _, gx, gy, gz = dc_potential_gradient(dc_rects, dc_owner, vbuf, px, py, pz)
    fx = -charge * gx
    fy = -charge * gy
    fz = -charge * gz
    if mode == MODE_SECULAR:
        (rgx, rgy, rgz, hxx, hyy, hzz, hxy, hxz, hyz) = \
            rf_gradient_hessian(rf_rects, px, py, pz)
        # grad Psi = 2 C H g
        fx -= 2.0 * pseudo_c * (hxx * rgx + hxy * rgy + hxz * rgz)
        fy -= 2.0 * pseudo_c * (hxy * rgx + hyy * rgy + hyz * rgz)
        fz -= 2.0 * pseudo_c * (hxz * rgx + hyz * rgy + hzz * rgz)
    else:
        (rgx, rgy, rgz, hxx, hyy, hzz, hxy, hxz, hyz) = \
            rf_gradient_hessian(rf_rects, px, py, pz)
        vrf = rf_v_peak * math.cos(rf_omega * t)
        fx -= charge * vrf * rgx
        fy -= charge * vrf * rgy
        fz -= charge * vrf * rgz
    return fx * inv_mass, fy * inv_mass, fz * inv_mass


# Yoshida 4th-order composition weights for three velocity-Verlet substeps.
_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_W0 = 1.0 - 2.0 * _W1


@njit(cache=True)
def integrate_trap(mode, pos0, vel0, t0, dt, n_steps, sample_stride,
                   times, u, ca, cb, l1, l2, repeated,
                   dc_rects, dc_owner, rf_rects,
                   pseudo_c, rf_v_peak, rf_omega, charge, inv_mass,
                   bounds, out_t, out_pos, out_vel):
    """Fixed-step 4th-order run; returns (samples_written, escape_step).

    escape_step is -1 while the ion stays inside the bounds box
    (x_lo, x_hi, y_abs, z_lo, z_hi).
    """
    px, py, pz = pos0[0], pos0[1], pos0[2]
    vx, vy, vz = vel0[0], vel0[1], vel0[2]
    t = t0
    vbuf = np.empty(u.shape[1])
    out_t[0] = t
    out_pos[0, 0] = px
    out_pos[0, 1] = py
    out_pos[0, 2] = pz
    out_vel[0, 0] = vx
    out_vel[0, 1] = vy
    out_vel[0, 2] = vz
    n_rec = 1
    escape = -1
    ax, ay, az = acceleration(mode, t, px, py, pz, times, u, ca, cb, l1, l2,
                              repeated, vbuf, dc_rects, dc_owner, rf_rects,
                              pseudo_c, rf_v_peak, rf_omega, charge, inv_mass)
    for step in range(n_steps):
        for sub in range(3):
            w = _W0 if sub == 1 else _W1
            h = w * dt
            vx += 0.5 * h * ax
            vy += 0.5 * h * ay
            vz += 0.5 * h * az
            px += h * vx
            py += h * vy
            pz += h * vz
            t += h
            ax, ay, az = acceleration(mode, t, px, py, pz, times, u, ca, cb,
                                      l1, l2, repeated, vbuf, dc_rects,
                                      dc_owner, rf_rects, pseudo_c, rf_v_peak,
                                      rf_omega, charge, inv_mass)
            vx += 0.5 * h * ax
            vy += 0.5 * h * ay
            vz += 0.5 * h * az
        if (px < bounds[0] or px > bounds[1] or abs(py) > bounds[2]
                or pz < bounds[3] or pz > bounds[4]
                or px != px or py != py or pz != pz):
            escape = step
        if (step + 1) % sample_stride == 0 or step == n_steps - 1 or escape >= 0:
            out_t[n_rec] = t
            out_pos[n_rec, 0] = px
            out_pos[n_rec, 1] = py
            out_pos[n_rec, 2] = pz
            out_vel[n_rec, 0] = vx
            out_vel[n_rec, 1] = vy
            out_vel[n_rec, 2] = vz
            n_rec += 1
        if escape >= 0:
            break
    return n_rec, escape


@njit(cache=True)
def integrate_quadratic(kx, ky, kz, inv_mass, pos0, vel0, dt, n_steps):
    """Integrator self-check on a static quadratic well.

    Returns (final state..., max relative energy drift) so the scheme's
    conservation properties can be asserted without any field machinery.
    """
    px, py, pz = pos0[0], pos0[1], pos0[2]
    vx, vy, vz = vel0[0], vel0[1], vel0[2]
    m = 1.0 / inv_mass
    e0 = 0.5 * m * (vx * vx + vy * vy + vz * vz) \
        + 0.5 * (kx * px * px + ky * py * py + kz * pz * pz)
    ax = -kx * px * inv_mass
    ay = -ky * py * inv_mass
    az = -kz * pz * inv_mass
    worst = 0.0
    for _ in range(n_steps):
        for sub in range(3):
            w = _W0 if sub == 1 else _W1
            h = w * dt
            vx += 0.5 * h * ax
            vy += 0.5 * h * ay
            vz += 0.5 * h * az
            px += h * vx
            py += h * vy
            pz += h * vz
            ax = -kx * px * inv_mass
            ay = -ky * py * inv_mass
            az = -kz * pz * inv_mass
            vx += 0.5 * h * ax
            vy += 0.5 * h * ay
            vz += 0.5 * h * az
        e = 0.5 * m * (vx * vx + vy * vy + vz * vz) \
            + 0.5 * (kx * px * px + ky * py * py + kz * pz * pz)
        drift = abs(e - e0) / e0
        if drift > worst:
            worst = drift
    return px, py, pz, vx, vy, vz, worst
