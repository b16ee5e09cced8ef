"""Averaged boost converter between the PV string and a resistive load.

State equations (continuous conduction, lossless)::

    c_in  dv_in/dt  = i_pv(v_in) - i_l
    L     di_l/dt   = v_in - (1 - D) v_out
    c_out dv_out/dt = (1 - D) i_l - v_out / r_load

integrated with fixed-step RK4 inside :mod:`mpptsim.kernels`. States are
clamped at zero from below after each step (diode blocks reverse current).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from . import kernels
from .errors import InstabilityError, SolverError
from .pvmodel import ModuleSpec, ShadingPattern, string_rows

STATE_NAMES = ("v_in", "i_l", "v_out")


@dataclass(frozen=True)
class ConverterParams:
    c_in: float = 800e-6
    c_out: float = 850e-6
    inductance: float = 5e-4
    r_load: float = 50.0
    dt: float = 1e-5
    d_min: float = 0.05
    d_max: float = 0.95

    def __post_init__(self):
        for name in ("c_in", "c_out", "inductance", "r_load", "dt"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if self.dt > 1e-4:
            raise ValueError("dt must not exceed 1e-4 s")
        if not 0.0 < self.d_min < self.d_max < 1.0:
            raise ValueError("duty limits must satisfy 0 < d_min < d_max < 1")

    @property
    def kernel_tuple(self):
        return (self.c_in, self.c_out, self.inductance, self.r_load, self.dt)


@dataclass(frozen=True)
class PlantState:
    v_in: float = 0.0
    i_l: float = 0.0
    v_out: float = 0.0
    t: float = 0.0
    duty: float = 0.5


@dataclass(frozen=True)
class PVSource:
    """A string of modules under a fixed shading pattern."""

    specs: Sequence[ModuleSpec]
    pattern: ShadingPattern
    v_bypass: float = 0.0

    @cached_property
    def rows(self) -> np.ndarray:
        return string_rows(self.specs, self.pattern)

    @cached_property
    def v_open(self) -> float:
        return float(sum(max(0.0, r[2] * math.log1p(r[0] / r[1])) for r in self.rows))

    def current(self, v: float) -> float:
        i = kernels.string_current(max(v, 0.0), self.rows, self.v_bypass)
        if i != i:
            raise SolverError(f"string current did not converge at v={v:g} V")
        return i


@dataclass
class HoldResult:
    state: PlantState
    i_pv: float
    mean_power: float
    rows: np.ndarray = field(default_factory=lambda: np.empty((0, 7)))


def hold(state: PlantState, params: ConverterParams, pv: PVSource, command: float,
         n_steps: int, *, regulate: bool = False, k_p: float = 0.0,
         r_damp: float = 0.0, avg_start: int = 0, record_every: int = 0,
         i_pv: float | None = None, backend: str | None = None) -> HoldResult:
    """Integrate ``n_steps`` with a constant duty or a regulated voltage reference.

    With ``regulate`` the duty follows
    ``D = 1 - (v_ref - k_p (v_in - v_ref) - r_damp (i_pv - i_l)) / v_out``,
    an exact feed-forward for the lossless plant plus active damping of the
    input LC resonance.
    """
    if i_pv is None:
        i_pv = pv.current(state.v_in)
    buf = np.array([state.v_in, state.i_l, state.v_out, state.duty, i_pv])
    out = None
    if record_every > 0:
        out = np.zeros((n_steps // record_every, 7))
    status, failed, mean_p, nrec = kernels.integrate(
        buf, params.kernel_tuple, pv.rows, pv.v_bypass, 1 if regulate else 0,
        command, k_p, r_damp, params.d_min, params.d_max, n_steps, avg_start,
        record_every, out, backend=backend)
    if status != kernels.STATUS_OK:
        t_fail = state.t + (failed + 1) * params.dt
        # a solve failure far above open circuit is a diverging integration
        runaway = not abs(buf[0]) < 10.0 * max(pv.v_open, 1.0)
        if status == kernels.STATUS_SOLVER and not runaway:
            raise SolverError(f"PV current solve failed at t={t_fail:.6g} s")
        name = next((n for n, x in zip(STATE_NAMES, buf[:3]) if not math.isfinite(x)),
                    "v_in")
        raise InstabilityError(name, t_fail)
    new = PlantState(v_in=float(buf[0]), i_l=float(buf[1]), v_out=float(buf[2]),
                     t=state.t + n_steps * params.dt, duty=float(buf[3]))
    rows = out[:nrec] if out is not None else np.empty((0, 7))
    return HoldResult(new, float(buf[4]), float(mean_p), rows)


def plant_step(state: PlantState, params: ConverterParams, duty: float,
               pv: PVSource) -> PlantState:
    """Advance the plant by one ``dt`` at constant duty."""
    if not params.d_min <= duty <= params.d_max:
        raise ValueError(f"duty {duty} outside [{params.d_min}, {params.d_max}]")
    return hold(replace(state, duty=duty), params, pv, duty, 1).state


def measure(state: PlantState, pv: PVSource):
    """PV-side ``(v, i, p)`` at the plant's input voltage."""
    v = state.v_in
    i = pv.current(v)
    return v, i, v * i


def equilibrium(params: ConverterParams, pv: PVSource, duty: float):
    """Static operating point for a fixed duty: the PV sees ``r_load (1-D)^2``.

    Returns ``(v_in, i_pv, p_pv)``; used as the static objective of
    duty-space searches and as an analytic check on the integrator.
    """
    r_in = params.r_load * (1.0 - duty) ** 2
    lo, hi = 0.0, pv.v_open
    # i_pv(v) - v / r_in is strictly decreasing in v
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if pv.current(mid) - mid / r_in > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10:
            break
    v = 0.5 * (lo + hi)
    i = pv.current(v)
    return v, i, v * i
