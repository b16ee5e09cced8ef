import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpptsim import kernels
from mpptsim.errors import CalibrationError, ConfigError, SolverError
from mpptsim.pvmodel import (KC200GT_DATASHEET, T_STC, ShadingPattern,
                             calibrate_module, find_gmpp, golden_max, module_current,
                             module_params, module_pmax, module_voltage, string_curve,
                             string_power, string_rows)

from conftest import PSC


def brute_force_max(specs, pattern, n=20001):
    rows = string_rows(specs, pattern)
    v_oc = sum(r[2] * math.log1p(r[0] / r[1]) for r in rows)
    v = np.linspace(0.0, v_oc, n)
    p = np.array([x * kernels.string_current(x, rows, 0.0) for x in v])
    k = int(np.argmax(p))
    return v[k], p[k]


class TestModuleCurrent:
    def test_short_circuit(self, spec):
        i = module_current(spec, 1000.0, T_STC, 0.0)
        assert abs(i - spec.i_sc_stc) / spec.i_sc_stc < 0.005

    def test_open_circuit(self, spec):
        assert abs(module_current(spec, 1000.0, T_STC, spec.v_oc_stc)) < 0.01

    def test_half_irradiance_halves_short_circuit(self, spec):
        i = module_current(spec, 500.0, T_STC, 0.0)
        assert i == pytest.approx(0.5 * spec.i_sc_stc, rel=0.005)

    def test_residual_below_tolerance(self, spec):
        i_ph, i0, a, rs, g_sh = module_params(spec, 800.0, 310.0)
        for v in np.linspace(0.0, 30.0, 13):
            i = module_current(spec, 800.0, 310.0, v)
            vd = v + i * rs
            res = i_ph - i0 * math.expm1(vd / a) - vd * g_sh - i
            assert abs(res) < 1e-9

    def test_iteration_cap_raises_with_residual(self, spec):
        with pytest.raises(SolverError) as err:
            module_current(spec, 1000.0, T_STC, 10.0, max_iter=1)
        assert math.isfinite(err.value.residual)

    def test_negative_irradiance_rejected(self, spec):
        with pytest.raises(ValueError):
            module_current(spec, -1.0, T_STC, 0.0)

    def test_voltage_inverts_current(self, spec):
        for v in (0.0, 10.0, 20.0, 26.3, 30.0):
            i = module_current(spec, 700.0, T_STC, v)
            assert float(module_voltage(spec, 700.0, T_STC, i)) == pytest.approx(v, abs=1e-7)


class TestCalibration:
    def test_kc200gt_matches_datasheet_power(self, spec):
        p = module_pmax(spec)
        assert abs(p - spec.p_mp_stc) / spec.p_mp_stc < 0.01

    def test_resistances_are_physical(self, spec):
        assert spec.r_series > 0.0
        assert spec.r_shunt > spec.r_series

    def test_degenerate_datasheet(self):
        bad = dict(KC200GT_DATASHEET, v_mp=33.0)
        with pytest.raises(ValueError):
            calibrate_module(bad)

    def test_lossless_forced(self):
        spec = calibrate_module(KC200GT_DATASHEET, r_series=0.0, r_shunt=math.inf)
        assert spec.r_shunt == math.inf
        assert module_pmax(spec) >= spec.p_mp_stc

    def test_infeasible_datasheet(self):
        # fill factor above what any single-diode module with this ideality reaches
        ds = dict(KC200GT_DATASHEET, v_mp=32.0, i_mp=8.2)
        with pytest.raises(CalibrationError):
            calibrate_module(ds)

    def test_spec_invariants(self, spec):
        from dataclasses import replace
        with pytest.raises(ValueError):
            replace(spec, ideality=2.5)
        with pytest.raises(ValueError):
            replace(spec, r_shunt=0.1, r_series=0.2)


class TestShadingPattern:
    def test_out_of_range_irradiance(self):
        with pytest.raises(ValueError):
            ShadingPattern((1600.0,))

    def test_out_of_range_temperature(self):
        with pytest.raises(ValueError):
            ShadingPattern((1000.0,), 400.0)

    def test_length_mismatch(self, spec):
        with pytest.raises(ConfigError):
            string_curve([spec] * 2, ShadingPattern(PSC))

    def test_empty_string(self):
        with pytest.raises(ConfigError):
            string_curve([], ShadingPattern(PSC))


class TestStringCurve:
    def test_psc_has_three_peaks(self, psc_curve):
        assert len(psc_curve.peaks) == 3

    def test_psc_gmpp_near_400w(self, psc_curve):
        v, p = find_gmpp(psc_curve)
        assert abs(p - 400.0) / 400.0 < 0.05
        assert 79.99 <= v <= 88.0

    def test_uniform_single_peak(self, specs3, spec):
        c = string_curve(specs3, ShadingPattern((1000.0,) * 3))
        assert len(c.peaks) == 1
        v, _ = find_gmpp(c)
        assert abs(v - 3 * spec.v_mp_stc) / (3 * spec.v_mp_stc) < 0.03

    def test_two_plateaus_two_peaks(self, specs3):
        c = string_curve(specs3, ShadingPattern((1000.0, 1000.0, 200.0)))
        assert len(c.peaks) == 2

    def test_single_module_equals_module_maximum(self, spec):
        c = string_curve([spec], ShadingPattern((700.0,)))
        v, p = find_gmpp(c)
        vb, pb = brute_force_max([spec], ShadingPattern((700.0,)))
        assert p >= pb - 1e-6
        assert v == pytest.approx(vb, abs=0.02)

    def test_gmpp_matches_brute_force(self, specs3, psc_curve):
        vb, pb = brute_force_max(specs3, ShadingPattern(PSC))
        v, p = find_gmpp(psc_curve)
        assert p >= pb - 1e-6
        assert p == pytest.approx(pb, rel=1e-5)
        assert v == pytest.approx(vb, abs=0.01)

    def test_curve_shape(self, psc_curve):
        v, i = psc_curve.voltage, psc_curve.current
        assert v[0] == 0.0
        assert np.all(np.diff(v) > 0.0)
        assert np.all(np.diff(i) <= 0.0)
        assert np.all(psc_curve.power >= 0.0)
        assert psc_curve.points[0] == (v[0], i[0], psc_curve.power[0])

    def test_open_circuit_end(self, psc_curve, specs3):
        rows = string_rows(specs3, ShadingPattern(PSC))
        assert kernels.string_current(psc_curve.v_oc, rows, 0.0) == pytest.approx(0.0, abs=1e-6)

    def test_sample_minimum(self, specs3):
        with pytest.raises(ValueError):
            string_curve(specs3, ShadingPattern(PSC), n_samples=50)

    def test_dark_string(self, specs3):
        c = string_curve(specs3, ShadingPattern((0.0, 0.0, 0.0)))
        assert c.peaks == []
        assert np.all(c.power == 0.0)

    def test_bypass_drop_lowers_shaded_peak(self, specs3):
        ideal = string_curve(specs3, ShadingPattern(PSC))
        drop = string_curve(specs3, ShadingPattern(PSC), v_bypass=0.6)
        assert len(drop.peaks) == 3
        assert drop.peaks[0][1] < ideal.peaks[0][1]

    def test_csv_export(self, psc_curve, tmp_path):
        path = tmp_path / "c.csv"
        psc_curve.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "voltage_V,current_A,power_W"
        assert len(lines) == len(psc_curve.voltage) + 1


def test_golden_section_finds_parabola_peak():
    x, fx = golden_max(lambda x: -(x - 1.234) ** 2, 0.0, 3.0, 1e-6)
    assert x == pytest.approx(1.234, abs=1e-6)


def test_string_power_is_v_times_i(specs3):
    rows = string_rows(specs3, ShadingPattern(PSC))
    for v in (10.0, 50.0, 83.0):
        p = string_power(specs3, ShadingPattern(PSC), v)
        assert p == v * kernels.string_current(v, rows, 0.0)


irradiance = st.floats(0.0, 1200.0, allow_nan=False).map(lambda g: round(g, 1))


@settings(max_examples=1000)
@given(st.lists(irradiance, min_size=1, max_size=4))
def test_peak_count_bounded_by_distinct_levels(spec, gs):
    c = string_curve([spec] * len(gs), ShadingPattern(tuple(gs)))
    assert len(c.peaks) <= len(set(gs))
    v, p = find_gmpp(c)
    assert all(pp <= p for _, pp in c.peaks)
    assert np.all(c.power >= 0.0)


@settings(max_examples=60)
@given(st.lists(st.floats(100.0, 1000.0), min_size=3, max_size=3),
       st.integers(0, 2), st.floats(1.0, 300.0))
def test_raising_irradiance_never_lowers_gmpp(spec, gs, k, dg):
    base = find_gmpp(string_curve([spec] * 3, ShadingPattern(tuple(gs))))[1]
    up = list(gs)
    up[k] = min(up[k] + dg, 1500.0)
    raised = find_gmpp(string_curve([spec] * 3, ShadingPattern(tuple(up))))[1]
    assert raised >= base - 1e-6 * base
