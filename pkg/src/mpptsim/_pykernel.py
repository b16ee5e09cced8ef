"""Pure-Python implementation of the numerical core.

Mirrors ``_ckernel.pyx`` function for function; selected by
:mod:`mpptsim.kernels` when the compiled extension is unavailable.

Module electrical parameters are passed as rows
``(i_ph, i_0, a, r_series, 1/r_shunt)`` where ``a`` is the modified
ideality factor ``ideality * n_cells * kT/q`` in volts.
"""
import math

MAX_ITER = 200
STATUS_OK = 0
STATUS_SOLVER = 1
STATUS_NONFINITE = 2


def diode_voltage(i, iph, i0, a, rsh_inv, guess):
    """Junction voltage ``vd`` with ``i = iph - i0*(exp(vd/a)-1) - vd/rsh``.

    Returns ``-inf`` when no finite solution exists (ideal shunt, current
    above photocurrent + i0), NaN on non-convergence.
    """
    c = iph - i
    if rsh_inv == 0.0:
        if c <= -i0:
            return -math.inf
        return a * math.log1p(c / i0)
    if c >= 0.0:
        lo = 0.0
        hi = a * math.log1p(c / i0)
    else:
        lo = c / rsh_inv
        hi = 0.0
    if hi - lo <= 0.0:
        return lo
    x = guess
    if not (lo < x < hi):
        x = 0.5 * (lo + hi)
    for _ in range(MAX_ITER):
        e = i0 * math.exp(x / a)
        g = c - (e - i0) - x * rsh_inv
        if abs(g) < 1e-13 * (1.0 + abs(iph)):
            return x
        if g > 0.0:
            lo = x
        else:
            hi = x
        dg = -(e / a + rsh_inv)
        xn = x - g / dg
        if not (lo <= xn <= hi):
            xn = 0.5 * (lo + hi)
        if abs(xn - x) < 1e-14 * (1.0 + abs(x)):
            return xn
        x = xn
        if hi - lo < 1e-14 * (1.0 + abs(x)):
            return x
    return math.nan


def string_voltage(i, mods, vb, guesses):
    """Series string voltage and its slope dV/dI at string current ``i``.

    ``guesses`` holds per-module junction-voltage warm starts and is
    updated in place.
    """
    v = 0.0
    dv = 0.0
    for k, (iph, i0, a, rs, rsh_inv) in enumerate(mods):
        vd = diode_voltage(i, iph, i0, a, rsh_inv, guesses[k])
        if vd != vd:
            return math.nan, math.nan
        vm = vd - i * rs if vd != -math.inf else -math.inf
        if vm <= -vb:
            v -= vb
            continue
        guesses[k] = vd
        v += vm
        dv += -1.0 / (i0 / a * math.exp(vd / a) + rsh_inv) - rs
    return v, dv


def string_current(v, mods, vb, guess, guesses, v_open=math.nan):
    """String current at terminal voltage ``v`` (bypass diodes included).

    ``v_open`` is the string voltage at zero current when already known.
    """
    hi = 0.0
    for row in mods:
        hi = max(hi, row[0])
    hi += 1e-9
    lo = 0.0
    f_lo = v_open
    if v_open != v_open:
        f_lo, _ = string_voltage(lo, mods, vb, guesses)
        if f_lo != f_lo:
            return math.nan
    step = 1.0
    while f_lo < v:
        hi = lo
        lo -= step
        step *= 2.0
        f_lo, _ = string_voltage(lo, mods, vb, guesses)
        if f_lo != f_lo or step > 1e9:
            return math.nan
    x = guess
    if not (lo < x < hi):
        x = 0.5 * (lo + hi)
    for _ in range(MAX_ITER):
        fv, d = string_voltage(x, mods, vb, guesses)
        if fv != fv:
            return math.nan
        f = fv - v
        if abs(f) < 1e-10 * (1.0 + abs(v)):
            return x
        if f > 0.0:
            lo = x
        else:
            hi = x
        if d < 0.0:
            xn = x - f / d
            if not (lo < xn < hi):
                xn = 0.5 * (lo + hi)
        else:
            xn = 0.5 * (lo + hi)
        if hi - lo < 1e-13 * (1.0 + abs(x)):
            return xn
        x = xn
    return math.nan


def _derivs(v_in, i_l, v_out, duty, i_pv, c_in, c_out, ind, r_load):
    return (
        (i_pv - i_l) / c_in,
        (v_in - (1.0 - duty) * v_out) / ind,
        ((1.0 - duty) * i_l - v_out / r_load) / c_out,
    )


def integrate(state, conv, mods, vb, mode, command, k_p, r_damp,
              d_min, d_max, n_steps, avg_start, record_every, out):
    """Advance the averaged boost plant ``n_steps`` RK4 steps.

    ``state`` is ``[v_in, i_l, v_out, duty, i_pv]`` and is updated in place.
    ``conv`` is ``(c_in, c_out, inductance, r_load, dt)``. ``mode`` 0 holds
    ``command`` as the duty cycle (plus the damping term when ``r_damp`` > 0,
    which vanishes at equilibrium); mode 1 treats it as a PV voltage
    reference regulated by the damped feed-forward law. Every
    ``record_every`` steps a row ``(v_in, i_pv, p_pv, v_out, i_out, p_out,
    duty)`` is written to ``out`` (skipped when ``out`` is None).

    Returns ``(status, failed_step, mean_p_pv_from_avg_start, n_recorded)``.
    """
    c_in, c_out, ind, r_load, dt = conv
    v_in, i_l, v_out, duty, i_pv = state
    guesses = [0.0] * len(mods)
    v_open, _ = string_voltage(0.0, mods, vb, guesses)
    psum = 0.0
    pcount = 0
    nrec = 0
    half = 0.5 * dt
    for step in range(n_steps):
        if mode == 1:
            denom = v_out if v_out > 1e-6 else 1e-6
            target = command - k_p * (v_in - command) - r_damp * (i_pv - i_l)
            duty = 1.0 - target / denom
        elif r_damp > 0.0 and v_out > 1e-6:
            duty = command + r_damp * (i_pv - i_l) / v_out
        else:
            duty = command
        if duty < d_min:
            duty = d_min
        elif duty > d_max:
            duty = d_max

        k1 = _derivs(v_in, i_l, v_out, duty, i_pv, c_in, c_out, ind, r_load)
        a_vin = v_in + half * k1[0]
        ip2 = string_current(max(a_vin, 0.0), mods, vb, i_pv, guesses, v_open)
        k2 = _derivs(a_vin, i_l + half * k1[1], v_out + half * k1[2], duty,
                     ip2, c_in, c_out, ind, r_load)
        b_vin = v_in + half * k2[0]
        ip3 = string_current(max(b_vin, 0.0), mods, vb, ip2, guesses, v_open)
        k3 = _derivs(b_vin, i_l + half * k2[1], v_out + half * k2[2], duty,
                     ip3, c_in, c_out, ind, r_load)
        c_vin = v_in + dt * k3[0]
        ip4 = string_current(max(c_vin, 0.0), mods, vb, ip3, guesses, v_open)
        k4 = _derivs(c_vin, i_l + dt * k3[1], v_out + dt * k3[2], duty,
                     ip4, c_in, c_out, ind, r_load)
        v_in += dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        i_l += dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        v_out += dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
        if not math.isfinite(v_in):
            state[:] = [v_in, i_l, v_out, duty, i_pv]
            return STATUS_NONFINITE, step, 0, nrec
        if not (math.isfinite(i_l) and math.isfinite(v_out)):
            state[:] = [v_in, i_l, v_out, duty, i_pv]
            return STATUS_NONFINITE, step, 0, nrec
        if v_in < 0.0:
            v_in = 0.0
        if i_l < 0.0:
            i_l = 0.0
        if v_out < 0.0:
            v_out = 0.0
        i_pv = string_current(v_in, mods, vb, ip4, guesses, v_open)
        if i_pv != i_pv:
            state[:] = [v_in, i_l, v_out, duty, i_pv]
            return STATUS_SOLVER, step, 0, nrec
        p_pv = v_in * i_pv
        if step >= avg_start:
            psum += p_pv
            pcount += 1
        if out is not None and (step + 1) % record_every == 0:
            row = out[nrec]
            row[0] = v_in
            row[1] = i_pv
            row[2] = p_pv
            row[3] = v_out
            row[4] = v_out / r_load
            row[5] = v_out * v_out / r_load
            row[6] = duty
            nrec += 1
    state[:] = [v_in, i_l, v_out, duty, i_pv]
    return STATUS_OK, n_steps, psum / pcount if pcount else math.nan, nrec
