"""Single-diode PV module and bypass-diode series string model.

The module follows the five-parameter single-diode equation::

    I = I_ph - I_0 * (exp((V + I*Rs) / a) - 1) - (V + I*Rs) / Rsh

with ``a = ideality * n_cells * k*T/q``. Photocurrent scales linearly with
irradiance and with temperature through ``k_i``; the saturation current is
pinned so the model passes exactly through the (temperature-shifted) open
circuit voltage.

String curves are built by sweeping the string current, adding each
module's voltage (clamped at ``-v_bypass`` by its bypass diode) and then
resampling onto a uniform voltage grid.
"""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.signal import find_peaks

from . import kernels
from .errors import CalibrationError, ConfigError, SolverError

Q_E = 1.602176634e-19
K_B = 1.380649e-23
T_STC = 298.15
G_STC = 1000.0

# Minimum peak prominence as a fraction of the curve maximum; suppresses
# interpolation ripples, never real bypass peaks (those exceed 0.5 %).
PEAK_PROMINENCE = 2e-4


def thermal_voltage(t: float) -> float:
    return K_B * t / Q_E


@dataclass(frozen=True)
class ModuleSpec:
    v_oc_stc: float
    i_sc_stc: float
    v_mp_stc: float
    i_mp_stc: float
    n_cells: int
    ideality: float
    r_series: float
    r_shunt: float
    k_i: float
    k_v: float

    def __post_init__(self):
        if not 0.0 < self.v_mp_stc < self.v_oc_stc:
            raise ValueError("module requires 0 < v_mp < v_oc")
        if not 0.0 < self.i_mp_stc < self.i_sc_stc:
            raise ValueError("module requires 0 < i_mp < i_sc")
        if self.n_cells < 1:
            raise ValueError("n_cells must be positive")
        if not 1.0 <= self.ideality <= 2.0:
            raise ValueError("ideality must lie in [1, 2]")
        if self.r_series < 0.0 or not self.r_shunt > self.r_series:
            raise ValueError("need r_series >= 0 and r_shunt > r_series")

    @property
    def p_mp_stc(self) -> float:
        return self.v_mp_stc * self.i_mp_stc


#: KC200GT datasheet values with series/shunt resistance from
#: :func:`calibrate_module` (ideality 1.3).
KC200GT_DATASHEET = {
    "v_oc": 32.9,
    "i_sc": 8.21,
    "v_mp": 26.3,
    "i_mp": 7.61,
    "n_cells": 54,
    "k_i": 3.18e-3,
    "k_v": -0.123,
}


@dataclass(frozen=True)
class ShadingPattern:
    irradiances: tuple
    temperature: float = T_STC

    def __post_init__(self):
        object.__setattr__(self, "irradiances",
                           tuple(float(g) for g in self.irradiances))
        if not self.irradiances:
            raise ValueError("shading pattern needs at least one module")
        for g in self.irradiances:
            if not 0.0 <= g <= 1500.0:
                raise ValueError(f"irradiance {g} outside [0, 1500] W/m2")
        if not 233.0 <= self.temperature <= 373.0:
            raise ValueError(f"temperature {self.temperature} K outside [233, 373]")

    def __len__(self):
        return len(self.irradiances)


@dataclass
class PVCurve:
    """Sampled string characteristic.

    ``rows`` and ``v_bypass`` keep the electrical parameters the curve was
    built from so the oracle can refine maxima on the exact model.
    """

    voltage: np.ndarray
    current: np.ndarray
    power: np.ndarray
    peaks: list = field(default_factory=list)
    rows: np.ndarray | None = None
    v_bypass: float = 0.0

    @property
    def points(self):
        return list(zip(self.voltage.tolist(), self.current.tolist(),
                        self.power.tolist()))

    @property
    def v_oc(self) -> float:
        return float(self.voltage[-1])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["voltage_V", "current_A", "power_W"])
            for v, i, p in zip(self.voltage, self.current, self.power):
                w.writerow([f"{v:.6f}", f"{i:.6f}", f"{p:.6f}"])


def module_params(spec: ModuleSpec, g: float, t: float):
    """Electrical row ``(i_ph, i_0, a, r_series, 1/r_shunt)`` at (g, t)."""
    dt = t - T_STC
    a = spec.ideality * spec.n_cells * thermal_voltage(t)
    g_sh = 0.0 if math.isinf(spec.r_shunt) else 1.0 / spec.r_shunt
    i_ph_stc = spec.i_sc_stc * (1.0 + spec.r_series * g_sh)
    i_ph_t = i_ph_stc + spec.k_i * dt
    v_oc_t = spec.v_oc_stc + spec.k_v * dt
    i0 = (i_ph_t - v_oc_t * g_sh) / math.expm1(v_oc_t / a)
    if not i0 > 0.0:
        raise ValueError("module parameters give non-positive saturation current")
    i_ph = i_ph_t * g / G_STC
    return (i_ph, i0, a, spec.r_series, g_sh)


def module_current(spec: ModuleSpec, g: float, t: float, v: float,
                   tol: float = 1e-9, max_iter: int = 100) -> float:
    """Terminal current of one module at voltage ``v`` (Newton on I)."""
    if g < 0.0:
        raise ValueError("irradiance must be non-negative")
    i_ph, i0, a, rs, g_sh = module_params(spec, g, t)
    i = i_ph
    res = math.inf
    for _ in range(max_iter):
        vd = v + i * rs
        e = i0 * math.exp(vd / a)
        res = i_ph - (e - i0) - vd * g_sh - i
        if abs(res) < tol:
            return i
        d = -(e / a + g_sh) * rs - 1.0
        i -= res / d
    raise SolverError(f"module current did not converge at v={v:g} V", res)


def _diode_voltage_vec(i, i_ph, i0, a, g_sh, iters=200):
    """Vectorised safeguarded Newton for the junction voltage at current i."""
    c = i_ph - i
    if g_sh == 0.0:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(c > -i0, a * np.log1p(np.maximum(c / i0, -1.0)), -np.inf)
    lo = np.where(c >= 0.0, 0.0, c / g_sh)
    hi = np.where(c >= 0.0, a * np.log1p(np.maximum(c, 0.0) / i0), 0.0)
    # concave residual: Newton from the ideal-shunt bound converges monotonically
    x = np.where(c >= 0.0, hi, lo)
    for _ in range(iters):
        e = i0 * np.exp(x / a)
        gx = c - (e - i0) - x * g_sh
        lo = np.where(gx > 0.0, x, lo)
        hi = np.where(gx > 0.0, hi, x)
        xn = x + gx / (e / a + g_sh)
        xn = np.where((xn < lo) | (xn > hi), 0.5 * (lo + hi), xn)
        if np.all((np.abs(xn - x) <= 1e-13 * (1.0 + np.abs(x)))
                  | (np.abs(gx) <= 1e-13 * (1.0 + abs(i_ph)))):
            return xn
        x = xn
    return x


def module_voltage(spec: ModuleSpec, g: float, t: float, i):
    """Module terminal voltage at current(s) ``i`` without bypass clamping."""
    i_ph, i0, a, rs, g_sh = module_params(spec, g, t)
    i = np.asarray(i, dtype=float)
    return _diode_voltage_vec(i, i_ph, i0, a, g_sh) - i * rs


def _rows_for(specs: Sequence[ModuleSpec], pattern: ShadingPattern) -> np.ndarray:
    if not specs:
        raise ConfigError("string needs at least one module")
    if len(specs) != len(pattern):
        raise ConfigError(
            f"pattern has {len(pattern)} irradiances for {len(specs)} modules")
    return np.array([module_params(s, g, pattern.temperature)
                     for s, g in zip(specs, pattern.irradiances)])


def string_rows(specs, pattern) -> np.ndarray:
    """Per-module electrical rows consumed by the numerical kernel."""
    return _rows_for(list(specs), pattern)


def _sweep(rows: np.ndarray, v_bypass: float, n_current: int):
    i_max = float(rows[:, 0].max())
    grids = [np.linspace(0.0, i_max, n_current)]
    # refine around every module's photocurrent, where bypass diodes switch
    for i_ph in rows[:, 0]:
        if i_ph > 0.0:
            grids.append(i_ph * (1.0 - np.geomspace(1e-6, 0.2, n_current // 4)))
    cur = np.unique(np.concatenate(grids))
    cur = cur[(cur >= 0.0) & (cur <= i_max)]
    volt = np.zeros_like(cur)
    for i_ph, i0, a, rs, g_sh in rows:
        vm = _diode_voltage_vec(cur, i_ph, i0, a, g_sh) - cur * rs
        volt += np.maximum(vm, -v_bypass)
    return cur, volt


def string_curve(specs: Sequence[ModuleSpec], pattern: ShadingPattern,
                 n_samples: int = 2000, v_bypass: float = 0.0) -> PVCurve:
    """I-V/P-V curve of a series string with one bypass diode per module."""
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    rows = _rows_for(list(specs), pattern)
    v_oc = float(sum(max(0.0, r[2] * math.log1p(r[0] / r[1])) for r in rows))
    if rows[:, 0].max() <= 0.0 or v_oc <= 0.0:
        v = np.linspace(0.0, max(v_oc, 1e-9), n_samples)
        z = np.zeros(n_samples)
        return PVCurve(v, z, z.copy(), [], rows, v_bypass)
    cur, volt = _sweep(rows, v_bypass, max(8 * n_samples, 4000))
    # V(I) is non-increasing; keep the branch down to the first V <= 0
    keep = np.ones_like(cur, dtype=bool)
    nonpos = np.nonzero(volt <= 0.0)[0]
    if nonpos.size:
        keep[nonpos[0] + 1:] = False
    cur, volt = cur[keep], volt[keep]
    v_oc = float(volt[0])
    vgrid = np.linspace(0.0, v_oc, n_samples)
    igrid = np.interp(vgrid, volt[::-1], cur[::-1])
    igrid[-1] = 0.0
    igrid = np.minimum.accumulate(igrid)
    power = vgrid * igrid
    curve = PVCurve(vgrid, igrid, power, [], rows, v_bypass)
    curve.peaks = _detect_peaks(curve)
    return curve


def _exact_power(curve: PVCurve, v: float) -> float:
    i = kernels.string_current(v, curve.rows, curve.v_bypass)
    if i != i:
        raise SolverError(f"string current did not converge at v={v:g} V")
    return v * i


def _refine(curve: PVCurve, k: int):
    v = curve.voltage
    n = len(v)
    lo = v[max(k - 1, 0)]
    hi = v[min(k + 1, n - 1)]
    if curve.rows is None or hi <= lo:
        return float(v[k]), float(curve.power[k])
    x, px = golden_max(lambda x: _exact_power(curve, x), lo, hi, 1e-3)
    pk = float(curve.power[k])
    if px >= pk:
        return x, px
    return float(v[k]), pk


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_max(f, lo: float, hi: float, xtol: float = 1e-3):
    """Golden-section search for the maximum of a unimodal ``f`` on [lo, hi]."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > xtol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    if fc >= fd:
        return c, fc
    return d, fd


def _detect_peaks(curve: PVCurve):
    p = curve.power
    pmax = float(p.max())
    if pmax <= 0.0:
        return []
    padded = np.concatenate(([0.0], p, [0.0]))
    idx, _ = find_peaks(padded, prominence=PEAK_PROMINENCE * pmax)
    return [_refine(curve, k - 1) for k in idx]


def find_gmpp(curve: PVCurve):
    """Global maximum power point ``(voltage, power)`` of a sampled curve."""
    if len(curve.voltage) == 0:
        raise ValueError("empty curve")
    k = int(np.argmax(curve.power))
    v, p = _refine(curve, k)
    for pv, pp in curve.peaks:
        if pp > p:
            v, p = pv, pp
    return v, p


def string_power(specs, pattern, v, v_bypass=0.0) -> float:
    """Exact string power at terminal voltage ``v``."""
    rows = _rows_for(list(specs), pattern)
    return v * kernels.string_current(v, rows, v_bypass)


def _mpp_slope_residual(rs, ds, a):
    """dI/dV + I/V at the datasheet MPP for series resistance ``rs``."""
    g_sh = _shunt_for(rs, ds, a)
    if g_sh is None:
        return None
    v_oc, i_sc, v_mp, i_mp = ds["v_oc"], ds["i_sc"], ds["v_mp"], ds["i_mp"]
    i_ph = i_sc * (1.0 + rs * g_sh)
    i0 = (i_ph - v_oc * g_sh) / math.expm1(v_oc / a)
    d = i0 / a * math.exp((v_mp + i_mp * rs) / a) + g_sh
    return -d / (1.0 + rs * d) + i_mp / v_mp


def _shunt_for(rs, ds, a):
    """Shunt conductance putting the datasheet MPP on the curve (None if infeasible)."""
    v_oc, i_sc, v_mp, i_mp = ds["v_oc"], ds["i_sc"], ds["v_mp"], ds["i_mp"]
    vx = v_mp + i_mp * rs
    e = math.expm1(vx / a) / math.expm1(v_oc / a)
    den = i_sc * rs * (1.0 - e) + v_oc * e - vx
    num = i_sc * (1.0 - e) - i_mp
    if den == 0.0:
        return None
    g_sh = -num / den
    if g_sh < 0.0 or i_sc * (1.0 + rs * g_sh) - v_oc * g_sh <= 0.0:
        return None
    return g_sh


def module_pmax(spec: ModuleSpec, g: float = G_STC, t: float = T_STC) -> float:
    """Maximum power of one module, by sweep plus bounded refinement."""
    curve = string_curve([spec], ShadingPattern((g,), t), 2000)
    return find_gmpp(curve)[1]


def calibrate_module(datasheet: Mapping, ideality: float = 1.3,
                     r_series: float | None = None,
                     r_shunt: float | None = None) -> ModuleSpec:
    """Fit series/shunt resistance so the modelled MPP matches the datasheet.

    ``r_series``/``r_shunt`` force the corresponding value and skip the fit.
    """
    ds = {k: float(datasheet[k]) for k in ("v_oc", "i_sc", "v_mp", "i_mp")}
    n_cells = int(datasheet["n_cells"])
    if not 0.0 < ds["v_mp"] < ds["v_oc"]:
        raise ValueError("datasheet requires 0 < v_mp < v_oc")
    if not 0.0 < ds["i_mp"] < ds["i_sc"]:
        raise ValueError("datasheet requires 0 < i_mp < i_sc")
    base = dict(v_oc_stc=ds["v_oc"], i_sc_stc=ds["i_sc"], v_mp_stc=ds["v_mp"],
                i_mp_stc=ds["i_mp"], n_cells=n_cells, ideality=ideality,
                k_i=float(datasheet.get("k_i", 0.0)),
                k_v=float(datasheet.get("k_v", 0.0)))
    if r_series is not None or r_shunt is not None:
        return ModuleSpec(r_series=0.0 if r_series is None else r_series,
                          r_shunt=math.inf if r_shunt is None else r_shunt, **base)

    a = ideality * n_cells * thermal_voltage(T_STC)
    rs_hi = (ds["v_oc"] - ds["v_mp"]) / ds["i_mp"]
    grid = np.linspace(0.0, rs_hi, 400)
    vals = [_mpp_slope_residual(r, ds, a) for r in grid]
    bracket = None
    for k in range(len(grid) - 1):
        if vals[k] is not None and vals[k + 1] is not None and vals[k] * vals[k + 1] <= 0.0:
            bracket = (grid[k], grid[k + 1])
            break
    if bracket is None:
        raise CalibrationError("no series resistance makes the datasheet MPP a maximum")
    rs = brentq(lambda r: _mpp_slope_residual(r, ds, a), *bracket, xtol=1e-12)
    g_sh = _shunt_for(rs, ds, a)
    spec = ModuleSpec(r_series=rs, r_shunt=math.inf if g_sh == 0.0 else 1.0 / g_sh,
                      **base)
    p_model = module_pmax(spec)
    if abs(p_model - spec.p_mp_stc) > 0.01 * spec.p_mp_stc:
        raise CalibrationError(
            f"calibrated P_max {p_model:.2f} W misses datasheet {spec.p_mp_stc:.2f} W")
    return spec


@functools.lru_cache(maxsize=None)
def default_module(ideality: float = 1.3) -> ModuleSpec:
    """Calibrated KC200GT-class module (cached)."""
    return calibrate_module(KC200GT_DATASHEET, ideality)


def with_resistances(spec: ModuleSpec, r_series: float, r_shunt: float) -> ModuleSpec:
    return replace(spec, r_series=r_series, r_shunt=r_shunt)
