# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled numerical core; same contract as ``_pykernel``."""
from libc.math cimport exp, log1p, fabs, isfinite, INFINITY, NAN
from libc.stdlib cimport malloc, free

DEF MAX_ITER = 200

STATUS_OK = 0
STATUS_SOLVER = 1
STATUS_NONFINITE = 2


cdef inline double _diode_voltage(double i, double iph, double i0, double a,
                                  double rsh_inv, double guess) nogil:
    cdef double c = iph - i
    cdef double lo, hi, x, xn, e, g, dg
    cdef int it
    if rsh_inv == 0.0:
        if c <= -i0:
            return -INFINITY
        return a * log1p(c / i0)
    if c >= 0.0:
        lo = 0.0
        hi = a * log1p(c / i0)
    else:
        lo = c / rsh_inv
        hi = 0.0
    if hi - lo <= 0.0:
        return lo
    x = guess
    if not (lo < x < hi):
        x = 0.5 * (lo + hi)
    for it in range(MAX_ITER):
        e = i0 * exp(x / a)
        g = c - (e - i0) - x * rsh_inv
        if fabs(g) < 1e-13 * (1.0 + fabs(iph)):
            return x
        if g > 0.0:
            lo = x
        else:
            hi = x
        dg = -(e / a + rsh_inv)
        xn = x - g / dg
        if not (lo <= xn <= hi):
            xn = 0.5 * (lo + hi)
        if fabs(xn - x) < 1e-14 * (1.0 + fabs(x)):
            return xn
        x = xn
        if hi - lo < 1e-14 * (1.0 + fabs(x)):
            return x
    return NAN


cdef inline int _string_voltage(double i, const double[:, ::1] mods, double vb,
                                double* guesses, double* v_out,
                                double* dv_out) nogil:
    cdef Py_ssize_t k
    cdef double v = 0.0, dv = 0.0, vd, vm
    cdef double iph, i0, a, rs, rsh_inv
    for k in range(mods.shape[0]):
        iph = mods[k, 0]
        i0 = mods[k, 1]
        a = mods[k, 2]
        rs = mods[k, 3]
        rsh_inv = mods[k, 4]
        vd = _diode_voltage(i, iph, i0, a, rsh_inv, guesses[k])
        if vd != vd:
            return 1
        if vd == -INFINITY:
            v -= vb
            continue
        vm = vd - i * rs
        if vm <= -vb:
            v -= vb
            continue
        guesses[k] = vd
        v += vm
        dv += -1.0 / (i0 / a * exp(vd / a) + rsh_inv) - rs
    v_out[0] = v
    dv_out[0] = dv
    return 0


cdef double _string_current(double v, const double[:, ::1] mods, double vb,
                            double guess, double* guesses, double v_open) nogil:
    cdef Py_ssize_t k
    cdef double hi = 0.0, lo = 0.0, step = 1.0
    cdef double f_lo, fv, d, f, x, xn
    cdef int it
    for k in range(mods.shape[0]):
        if mods[k, 0] > hi:
            hi = mods[k, 0]
    hi += 1e-9
    f_lo = v_open
    if v_open != v_open:
        if _string_voltage(lo, mods, vb, guesses, &f_lo, &d):
            return NAN
    while f_lo < v:
        hi = lo
        lo -= step
        step *= 2.0
        if _string_voltage(lo, mods, vb, guesses, &f_lo, &d) or step > 1e9:
            return NAN
    x = guess
    if not (lo < x < hi):
        x = 0.5 * (lo + hi)
    for it in range(MAX_ITER):
        if _string_voltage(x, mods, vb, guesses, &fv, &d):
            return NAN
        f = fv - v
        if fabs(f) < 1e-10 * (1.0 + fabs(v)):
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
        if hi - lo < 1e-13 * (1.0 + fabs(x)):
            return xn
        x = xn
    return NAN


def diode_voltage(double i, double iph, double i0, double a, double rsh_inv,
                  double guess):
    return _diode_voltage(i, iph, i0, a, rsh_inv, guess)


def string_voltage(double i, mods, double vb, guesses):
    cdef const double[:, ::1] m = mods
    cdef Py_ssize_t n = m.shape[0], k
    cdef double* g = <double*> malloc(max(n, 1) * sizeof(double))
    cdef double v, dv
    cdef int err
    try:
        for k in range(n):
            g[k] = guesses[k]
        err = _string_voltage(i, m, vb, g, &v, &dv)
        for k in range(n):
            guesses[k] = g[k]
    finally:
        free(g)
    if err:
        return NAN, NAN
    return v, dv


def string_current(double v, mods, double vb, double guess, guesses):
    cdef const double[:, ::1] m = mods
    cdef Py_ssize_t n = m.shape[0], k
    cdef double* g = <double*> malloc(max(n, 1) * sizeof(double))
    cdef double res
    try:
        for k in range(n):
            g[k] = guesses[k]
        res = _string_current(v, m, vb, guess, g, NAN)
        for k in range(n):
            guesses[k] = g[k]
    finally:
        free(g)
    return res


def integrate(double[::1] state, conv, mods, double vb, int mode,
              double command, double k_p, double r_damp, double d_min,
              double d_max, long n_steps, long avg_start, long record_every,
              double[:, ::1] out):
    cdef const double[:, ::1] m = mods
    cdef double c_in = conv[0], c_out = conv[1], ind = conv[2]
    cdef double r_load = conv[3], dt = conv[4]
    cdef double v_in = state[0], i_l = state[1], v_out = state[2]
    cdef double duty = state[3], i_pv = state[4]
    cdef double half = 0.5 * dt, psum = 0.0, p_pv, denom, target
    cdef double a_vin, b_vin, c_vin, ip2, ip3, ip4
    cdef double k1a, k1b, k1c, k2a, k2b, k2c, k3a, k3b, k3c, k4a, k4b, k4c
    cdef double il, vo
    cdef long step, pcount = 0, nrec = 0
    cdef int status = 0
    cdef long failed = n_steps
    cdef bint record = out is not None
    cdef Py_ssize_t n = m.shape[0], k
    cdef double* g = <double*> malloc(max(n, 1) * sizeof(double))
    cdef double v_open, dv_open
    for k in range(n):
        g[k] = 0.0
    if _string_voltage(0.0, m, vb, g, &v_open, &dv_open):
        v_open = NAN
    with nogil:
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

            k1a = (i_pv - i_l) / c_in
            k1b = (v_in - (1.0 - duty) * v_out) / ind
            k1c = ((1.0 - duty) * i_l - v_out / r_load) / c_out

            a_vin = v_in + half * k1a
            il = i_l + half * k1b
            vo = v_out + half * k1c
            ip2 = _string_current(a_vin if a_vin > 0.0 else 0.0, m, vb, i_pv, g, v_open)
            k2a = (ip2 - il) / c_in
            k2b = (a_vin - (1.0 - duty) * vo) / ind
            k2c = ((1.0 - duty) * il - vo / r_load) / c_out

            b_vin = v_in + half * k2a
            il = i_l + half * k2b
            vo = v_out + half * k2c
            ip3 = _string_current(b_vin if b_vin > 0.0 else 0.0, m, vb, ip2, g, v_open)
            k3a = (ip3 - il) / c_in
            k3b = (b_vin - (1.0 - duty) * vo) / ind
            k3c = ((1.0 - duty) * il - vo / r_load) / c_out

            c_vin = v_in + dt * k3a
            il = i_l + dt * k3b
            vo = v_out + dt * k3c
            ip4 = _string_current(c_vin if c_vin > 0.0 else 0.0, m, vb, ip3, g, v_open)
            k4a = (ip4 - il) / c_in
            k4b = (c_vin - (1.0 - duty) * vo) / ind
            k4c = ((1.0 - duty) * il - vo / r_load) / c_out

            v_in += dt / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
            i_l += dt / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b)
            v_out += dt / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c)
            if not (isfinite(v_in) and isfinite(i_l) and isfinite(v_out)):
                status = 2
                failed = step
                break
            if v_in < 0.0:
                v_in = 0.0
            if i_l < 0.0:
                i_l = 0.0
            if v_out < 0.0:
                v_out = 0.0
            i_pv = _string_current(v_in, m, vb, ip4, g, v_open)
            if i_pv != i_pv:
                status = 1
                failed = step
                break
            p_pv = v_in * i_pv
            if step >= avg_start:
                psum += p_pv
                pcount += 1
            if record and (step + 1) % record_every == 0:
                out[nrec, 0] = v_in
                out[nrec, 1] = i_pv
                out[nrec, 2] = p_pv
                out[nrec, 3] = v_out
                out[nrec, 4] = v_out / r_load
                out[nrec, 5] = v_out * v_out / r_load
                out[nrec, 6] = duty
                nrec += 1
    free(g)
    state[0] = v_in
    state[1] = i_l
    state[2] = v_out
    state[3] = duty
    state[4] = i_pv
    if status:
        return status, failed, 0.0, nrec
    return 0, n_steps, psum / pcount if pcount else NAN, nrec
