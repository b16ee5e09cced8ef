import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpptsim.converter import ConverterParams, PVSource
from mpptsim.errors import ConfigError
from mpptsim.harness import Scenario, regulable_range
from mpptsim.mppt import (CsParams, IterationLog, Measurement, PoParams, PsoParams, Stopper,
                          check_zone, cs_init, cs_iterate, hybrid_step, levy_draw,
                          levy_step, po_step, pso_init, pso_iterate, sigma_u, track_cs,
                          track_po, track_pso)
from mpptsim.pvmodel import ShadingPattern, find_gmpp, string_curve

from conftest import PSC

PARAMS = ConverterParams()


class Landscape:
    """Static power as a function of duty or voltage, from a dense curve."""

    def __init__(self, specs, pattern):
        c = string_curve(specs, ShadingPattern(pattern), n_samples=20000)
        self.curve = c
        self.v_g, self.p_g = find_gmpp(c)
        v, i = c.voltage[1:-1], c.current[1:-1]
        # a fixed duty loads the string with r_load (1 - D)^2
        d = 1.0 - np.sqrt(v / i / PARAMS.r_load)
        order = np.argsort(d)
        self.d, self.p_d = d[order], (v * i)[order]
        # the windows closed-loop searches use by default
        sc = Scenario(schedule=((0.0, ShadingPattern(pattern)),), specs=specs)
        pv = PVSource(specs, ShadingPattern(pattern))
        lo, hi = regulable_range(PARAMS, pv)
        self.v_range = (max(lo, sc.voltage_window[0] * c.v_oc),
                        min(hi, sc.voltage_window[1] * c.v_oc))
        self.d_range = sc.duty_window

    def of_duty(self, d):
        return float(np.interp(d, self.d, self.p_d))

    def of_voltage(self, v):
        return float(np.interp(v, self.curve.voltage, self.curve.power))

    def is_global(self, p, band=0.02):
        return abs(p - self.p_g) <= band * self.p_g


@pytest.fixture(scope="module")
def psc(specs3):
    return Landscape(specs3, PSC)


@pytest.fixture(scope="module")
def uniform(specs3):
    return Landscape(specs3, (1000.0, 1000.0, 1000.0))


def run_pso(params, f, iters, seed):
    rng = np.random.default_rng(seed)
    s = pso_init(params, f, rng)
    history = [s]
    for _ in range(iters):
        s = pso_iterate(s, params, f, rng)
        history.append(s)
    return history


def run_cs(params, f, iters, seed):
    rng = np.random.default_rng(seed)
    s = cs_init(params, f, rng)
    history = [s]
    for _ in range(iters):
        s = cs_iterate(s, params, f, rng)
        history.append(s)
    return history


# Levy flight


def test_sigma_u_matches_high_precision():
    mpmath.mp.dps = 50
    b = mpmath.mpf(3) / 2
    ref = (mpmath.gamma(1 + b) * mpmath.sin(mpmath.pi * b / 2)
           / (mpmath.gamma((1 + b) / 2) * b * 2 ** ((b - 1) / 2))) ** (1 / b)
    assert abs(sigma_u(1.5) - float(ref)) <= 1e-9 * float(ref)
    assert sigma_u(1.5) == pytest.approx(0.6966, abs=1e-4)


@pytest.mark.parametrize("beta", [1.0, 2.5])
def test_sigma_u_domain(beta):
    with pytest.raises(ValueError):
        sigma_u(beta)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.floats(-100.0, 100.0))
def test_levy_step_vanishes_at_incumbent(seed, x):
    rng = np.random.default_rng(seed)
    assert levy_step(rng, CsParams(), x, x) == 0.0


def test_levy_step_is_scaled_ratio():
    p = CsParams(k_levy=0.8, beta=1.5, gamma0=1.0)
    a, b = np.random.default_rng(7), np.random.default_rng(7)
    for _ in range(100):
        u, v = levy_draw(a, p.beta)
        expected = p.k_levy * u / abs(v) ** (1.0 / p.beta) * (60.0 - 20.0)
        assert levy_step(b, p, 60.0, 20.0) == expected


def test_levy_draw_has_heavy_tail():
    rng = np.random.default_rng(0)
    s = np.array([u / abs(v) ** (1 / 1.5) for u, v in (levy_draw(rng, 1.5)
                                                        for _ in range(200000))])
    a = np.abs(s)
    ratio = np.mean(a > 10.0) / np.mean(a > 100.0)
    # power-law tail of index beta: 10**1.5 ~ 31.6 per decade
    assert 15.0 < ratio < 65.0
    assert np.std(s[: 1000]) > 0.0


# constructor gates


def test_acceleration_sum_gate():
    with pytest.raises(ValueError, match="exceeds 4"):
        PsoParams(w=0.5, alpha1=2.1, alpha2=2.0)
    PsoParams(w=0.5, alpha1=2.0, alpha2=2.0)


def test_low_inertia_warns():
    with pytest.warns(UserWarning, match="inertia weight"):
        PsoParams(w=0.3)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        PsoParams(w=0.5)


@pytest.mark.parametrize("kw", [dict(w=0.0), dict(w=1.0), dict(n=1), dict(alpha1=0.0),
                                dict(random_draw="nest"), dict(bounds=(0.9, 0.1))])
def test_pso_rejects(kw):
    with pytest.raises(ValueError):
        PsoParams(**kw)


@pytest.mark.parametrize("kw", [dict(beta=1.0), dict(k_levy=0.0), dict(n=1),
                                dict(p_abandon=1.0)])
def test_cs_rejects(kw):
    with pytest.raises(ValueError):
        CsParams(**kw)


def test_po_rejects_zero_step():
    with pytest.raises(ValueError):
        PoParams(step=0.0)


# incumbents


def bumpy(seed):
    r = np.random.default_rng(seed)
    c, h, w = r.uniform(0.05, 0.95, 4), r.uniform(1, 10, 4), r.uniform(0.02, 0.2, 4)
    return lambda x: float(np.sum(h * np.exp(-((x - c) / w) ** 2)))


@settings(max_examples=100)
@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_pso_incumbents_never_drop(seed, fseed):
    hist = run_pso(PsoParams(), bumpy(fseed), 15, seed)
    g = [s.g_best_pow for s in hist]
    assert all(b >= a for a, b in zip(g, g[1:]))
    for a, b in zip(hist, hist[1:]):
        assert np.all(b.p_best_pow >= a.p_best_pow)
        assert b.g_best_pow == b.p_best_pow.max() or b.g_best_pow >= b.p_best_pow.max()


@settings(max_examples=100)
@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_cs_incumbent_never_drops(seed, fseed):
    hist = run_cs(CsParams(), bumpy(fseed), 15, seed)
    g = [s.best_pow for s in hist]
    assert all(b >= a for a, b in zip(g, g[1:]))
    for a, b in zip(hist, hist[1:]):
        assert np.all(b.powers >= a.powers)


# bound respect


class Recorder:
    def __init__(self, f):
        self.f = f
        self.xs = []

    def __call__(self, x):
        self.xs.append(x)
        return self.f(x)


def test_every_controller_stays_in_bounds():
    for seed in range(1000):
        r = np.random.default_rng(seed)
        lo = r.uniform(0.0, 0.5)
        hi = lo + r.uniform(0.01, 0.5)
        f = Recorder(bumpy(seed))
        rng = np.random.default_rng(seed)
        track_pso(PsoParams(bounds=(lo, hi), init="random"), f, 40, rng)
        track_cs(CsParams(bounds=(lo, hi), init="random", p_abandon=0.3), f, 40, rng)
        track_po(PoParams(step=r.uniform(0.001, 0.2), bounds=(lo, hi)), f, 40,
                 r.uniform(lo - 0.2, hi + 0.2), int(r.choice([-1, 1])))
        zone = (lo, hi)
        x, d = 0.5 * (lo + hi), 1
        prev = Measurement(0.0, 0.0, f(x))
        for _ in range(20):
            x, d = hybrid_step(zone, prev, Measurement(0.0, 0.0, f(x)), d,
                               PoParams(step=0.05), x)
            prev = Measurement(0.0, 0.0, f(x))
            f.xs.append(x)
        xs = np.array(f.xs)
        assert np.all((xs >= lo) & (xs <= hi)), seed


# perturb and observe


def test_po_keeps_direction_on_gain():
    x, d = po_step(Measurement(0, 0, 10.0), Measurement(0, 0, 11.0), 1, PoParams(0.01), 0.5)
    assert (x, d) == (pytest.approx(0.51), 1)


def test_po_reverses_on_loss():
    x, d = po_step(Measurement(0, 0, 10.0), Measurement(0, 0, 9.0), 1, PoParams(0.01), 0.5)
    assert (x, d) == (pytest.approx(0.49), -1)


def test_po_equal_power_keeps_direction():
    _, d = po_step(Measurement(0, 0, 10.0), Measurement(0, 0, 10.0), -1, PoParams(0.01), 0.5)
    assert d == -1


def test_po_clamps_to_bounds():
    x, _ = po_step(Measurement(0, 0, 1.0), Measurement(0, 0, 2.0), 1,
                   PoParams(0.1, (0.05, 0.95)), 0.9)
    assert x == 0.95


def test_hybrid_pins_to_zone():
    m0, m1 = Measurement(0, 0, 1.0), Measurement(0, 0, 2.0)
    x, _ = hybrid_step((80.0, 88.0), m0, m1, 1, PoParams(step=5.0), 86.0)
    assert x == 88.0
    x, _ = hybrid_step((80.0, 88.0), m1, m0, 1, PoParams(step=5.0), 82.0)
    assert x == 80.0


def test_hybrid_over_full_range_is_po():
    p = PoParams(step=0.7, bounds=(0.0, 100.0))
    r = np.random.default_rng(3)
    for _ in range(200):
        a, b = Measurement(0, 0, r.random()), Measurement(0, 0, r.random())
        x0, d0 = r.uniform(0, 100), int(r.choice([-1, 1]))
        assert hybrid_step(p.bounds, a, b, d0, p, x0) == po_step(a, b, d0, p, x0)


def test_check_zone():
    assert check_zone((80.0, 88.0), (0.0, 98.0)) == (80.0, 88.0)
    for bad in [(88.0, 80.0), (-1.0, 50.0), (50.0, 99.0)]:
        with pytest.raises(ConfigError):
            check_zone(bad, (0.0, 98.0))


# static search quality


def test_cs_finds_global_peak(psc):
    params = CsParams(bounds=psc.v_range)
    hits = sum(psc.is_global(run_cs(params, psc.of_voltage, 30, s)[-1].best_pow)
               for s in range(100))
    assert hits >= 95


def test_pso_finds_global_peak(psc):
    params = PsoParams(bounds=psc.d_range)
    hits = sum(psc.is_global(run_pso(params, psc.of_duty, 40, s)[-1].g_best_pow)
               for s in range(100))
    assert hits >= 90


def test_pso_shared_draw_beats_per_particle_draw(psc):
    def rate(mode):
        # over the full converter range; inside the default window both reach 100%
        p = PsoParams(bounds=(0.05, 0.95), random_draw=mode)
        return sum(psc.is_global(run_pso(p, psc.of_duty, 40, s)[-1].g_best_pow)
                   for s in range(200))
    assert rate("iteration") > rate("particle")


@pytest.mark.xfail(strict=True, reason="measured 95/100: the incumbent nest cannot move, "
                   "so a swarm that collapses beside the peak creeps toward it slowly")
def test_cs_unimodal_within_fifteen_iterations(uniform):
    params = CsParams(bounds=uniform.v_range)
    hits = sum(uniform.is_global(run_cs(params, uniform.of_voltage, 15, s)[-1].best_pow)
               for s in range(100))
    assert hits == 100


def test_cs_unimodal_eventually_global(uniform):
    params = CsParams(bounds=uniform.v_range)
    for s in range(100):
        assert uniform.is_global(run_cs(params, uniform.of_voltage, 60, s)[-1].best_pow), s


def test_all_controllers_agree_on_single_peak(uniform):
    rng = np.random.default_rng(0)
    s_pso, _ = track_pso(PsoParams(bounds=uniform.d_range), uniform.of_duty, 150, rng)
    s_cs, _ = track_cs(CsParams(bounds=uniform.v_range), uniform.of_voltage, 150, rng)
    x_po, _ = track_po(PoParams(step=0.005), uniform.of_duty, 200, 0.9, -1)
    x_hy, _ = track_po(PoParams(step=0.5, bounds=uniform.v_range), uniform.of_voltage, 200,
                       sum(uniform.v_range) / 2)
    for p in (s_pso.g_best_pow, s_cs.best_pow, uniform.of_duty(x_po),
              uniform.of_voltage(x_hy)):
        assert uniform.is_global(p)


def test_po_from_high_duty_stops_on_local_peak(psc):
    x, _ = track_po(PoParams(), psc.of_duty, 400, 0.9, -1)
    assert not psc.is_global(psc.of_duty(x))


# drivers


def test_tracker_uses_whole_budget_and_holds_best(psc):
    log = IterationLog()
    state, _ = track_cs(CsParams(bounds=psc.v_range), psc.of_voltage, 120,
                        np.random.default_rng(1), Stopper(patience=5), log)
    assert len(log.rows) == 120
    assert log.rows[-1][1] == state.best_pos
    inc = [r[3] for r in log.rows]
    assert all(b >= a for a, b in zip(inc, inc[1:]))


def test_stopper_stall_and_spread():
    s = Stopper(rel_tol=1e-3, patience=3, max_iter=100)
    assert [s.update(10.0, [0.0], 0.0, (0, 1), k) for k in range(1, 5)] == \
        [False, False, False, True]
    c = Stopper(spread_tol=0.01)
    assert not c.update(1.0, [0.0, 0.5], 0.5, (0.0, 1.0), 1)
    assert c.update(2.0, [0.499, 0.5], 0.5, (0.0, 1.0), 2)
    assert Stopper(max_iter=2).update(1.0, [0], 0, (0, 1), 2)


def test_iteration_log_csv(tmp_path):
    log = IterationLog()
    log.add(0, 0.5, 10.0, 10.0)
    log.to_csv(tmp_path / "it.csv")
    assert (tmp_path / "it.csv").read_text().splitlines()[0] == \
        "iteration,candidate,power_W,incumbent_W"


def test_same_seed_same_search(psc):
    a = run_cs(CsParams(bounds=psc.v_range), psc.of_voltage, 20, 5)[-1]
    b = run_cs(CsParams(bounds=psc.v_range), psc.of_voltage, 20, 5)[-1]
    assert np.array_equal(a.positions, b.positions)
    assert math.isclose(a.best_pow, b.best_pow, rel_tol=0.0)


def test_sigma_u_other_exponents():
    # sin(pi) = 0: the closed form vanishes at beta = 2, up to double rounding
    assert sigma_u(2.0) == pytest.approx(0.0, abs=1e-7)
    assert sigma_u(1.2) > sigma_u(1.9)


def test_levy_max_step_dwarfs_median():
    rng = np.random.default_rng(11)
    steps = np.abs([levy_step(rng, CsParams(), 1.0, 0.0) for _ in range(100000)])
    assert steps.max() > 10.0 * np.median(steps)


def test_collapsed_nests_stay_put():
    pos = np.full(4, 0.4)
    s = cs_iterate(cs_state(pos), CsParams(), lambda x: 1.0, np.random.default_rng(0))
    assert np.array_equal(s.positions, pos)
    assert s.iteration == 1


def cs_state(pos):
    from mpptsim.mppt import NestState
    return NestState(pos.copy(), np.ones(len(pos)), float(pos[0]), 1.0)


def test_particle_at_rest_on_best_stays_fixed():
    from mpptsim.mppt import SwarmState
    pos = np.array([0.3, 0.6, 0.6])
    st0 = SwarmState(pos.copy(), np.array([0.1, 0.0, 0.0]), pos.copy(),
                     np.array([1.0, 5.0, 5.0]), 0.6, 5.0)
    s = pso_iterate(st0, PsoParams(), lambda x: 1.0, np.random.default_rng(0))
    assert s.positions[1] == 0.6 and s.positions[2] == 0.6
    assert s.velocities[1] == 0.0


def test_point_zone_pins_reference():
    m0, m1 = Measurement(0, 0, 1.0), Measurement(0, 0, 2.0)
    zone = check_zone((84.0, 84.0), (0.0, 98.0))
    x, d = 84.0, 1
    for _ in range(5):
        x, d = hybrid_step(zone, m0, m1, d, PoParams(step=0.5), x)
        assert x == 84.0
