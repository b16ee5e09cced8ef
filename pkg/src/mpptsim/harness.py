"""Closed-loop scenario engine.

A scenario wires a PV string, the averaged boost plant and one controller.
Each controller sample instant applies a candidate, holds it for the
settle window, reports the mean PV power over the last 20% of that window
as the objective value, then keeps holding until the next sample instant.
Shading is piecewise constant; a shading change starts a fresh controller.
"""
from __future__ import annotations

import csv
import functools
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ann
from .converter import ConverterParams, PlantState, PVSource, equilibrium, hold
from .errors import ConfigError, MpptSimError
from .mppt import (CsParams, IterationLog, PoParams, PsoParams, Stopper, check_zone,
                   track_cs, track_po, track_pso)
from .pvmodel import ShadingPattern, default_module, find_gmpp, string_curve

log = logging.getLogger(__name__)

CONTROLLERS = ("po", "pso", "cs", "hybrid")
# decision variable each controller searches by default
DEFAULT_SPACE = {"po": "duty", "pso": "duty", "cs": "voltage", "hybrid": "voltage"}
# (sample period, settle window, total time) per decision space. Either way
# a new operating point is only reached once the output capacitor has
# charged or drained to the matching load voltage. With a regulated voltage
# reference that takes up to ~50 ms across the search window; a fixed duty
# leaves the input side undamped by the regulator and needs ~0.25 s.
DEFAULT_TIMING = {"voltage": (0.05, 0.05, 6.0), "duty": (0.3, 0.25, 15.0)}
TRACE_COLUMNS = ("t", "v_in", "i_pv", "p_pv", "v_out", "i_out", "p_out", "duty")


def quiet_pso(base: PsoParams | None = None, **changes) -> PsoParams:
    """PsoParams without the low-inertia warning.

    The benchmark inertia 0.3 is deliberate; the warning is kept for
    values a user types in, not for defaults and derived copies.
    """
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", "inertia weight", UserWarning)
        return PsoParams(**changes) if base is None else replace(base, **changes)


@dataclass(frozen=True)
class StopRule:
    rel_tol: float = 1e-3
    patience: int = 10
    max_iter: int = 100
    spread_tol: float = 0.0

    def make(self) -> Stopper:
        return Stopper(self.rel_tol, self.patience, self.max_iter, self.spread_tol)


@dataclass(frozen=True)
class Scenario:
    """One closed-loop experiment.

    ``schedule`` is a tuple of ``(start_time, ShadingPattern)`` pairs; the
    first starts at 0 and every start is a multiple of ``sample_period``.
    ``voltage_window`` bounds voltage-space searches as fractions of the
    string open-circuit voltage, further limited to what the converter can
    regulate. ``duty_window`` bounds duty-space searches; near the top duty
    the PV sits at a few volts and the plant drains too slowly for a reading
    within the settle window. Sample period and settle window default per decision space
    (see ``DEFAULT_TIMING``).
    """

    schedule: tuple
    specs: tuple = ()
    controller: str = "cs"
    converter: ConverterParams = field(default_factory=ConverterParams)
    pso: PsoParams = field(default_factory=lambda: quiet_pso())
    cs: CsParams = field(default_factory=CsParams)
    po: PoParams = field(default_factory=PoParams)
    stop: StopRule = field(default_factory=StopRule)
    decision_space: str | None = None
    voltage_window: tuple = (0.05, 1.0)
    duty_window: tuple = (0.05, 0.8)
    po_start: float = 0.9
    hybrid_step: float = 0.5
    total_time: float | None = None
    sample_period: float | None = None
    settle: float | None = None
    seed: int = 0
    band: float = 0.02
    k_p: float = 0.0
    r_damp: float = 1.1
    v_bypass: float = 0.0
    record_every: int = 10
    model: object = field(default=None, compare=False, repr=False)
    name: str = "scenario"

    def __post_init__(self):
        if not self.specs:
            n = len(self.schedule[0][1]) if self.schedule else 3
            object.__setattr__(self, "specs", (default_module(),) * n)
        object.__setattr__(self, "specs", tuple(self.specs))
        object.__setattr__(self, "schedule",
                           tuple((float(t), p) for t, p in self.schedule))
        if self.controller in CONTROLLERS and self.decision_space in (None, "duty", "voltage"):
            period, settle, total = DEFAULT_TIMING[self.space]
            if self.total_time is None:
                object.__setattr__(self, "total_time", total)
            if self.sample_period is None:
                object.__setattr__(self, "sample_period", period)
            if self.settle is None:
                object.__setattr__(self, "settle", min(settle, self.sample_period))
        self.validate()

    @property
    def space(self) -> str:
        return self.decision_space or DEFAULT_SPACE[self.controller]

    @property
    def n_sample(self) -> int:
        return round(self.sample_period / self.converter.dt)

    @property
    def n_settle(self) -> int:
        return round(self.settle / self.converter.dt)

    def validate(self):
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"unknown controller {self.controller!r}; "
                              f"valid: {', '.join(CONTROLLERS)}")
        if self.decision_space not in (None, "duty", "voltage"):
            raise ConfigError("decision_space must be 'duty' or 'voltage'")
        if self.controller == "hybrid" and self.space != "voltage":
            raise ConfigError("hybrid controller searches the voltage reference")
        dt = self.converter.dt
        if self.sample_period < 10 * dt * (1 - 1e-9):
            raise ConfigError("sample_period must be at least 10 dt")
        if not 0.0 < self.settle <= self.sample_period:
            raise ConfigError("settle window must lie in (0, sample_period]")
        if not self.total_time > self.settle:
            raise ConfigError("total_time must exceed the settle window")
        if not 0.0 < self.band <= 0.2:
            raise ConfigError("band must lie in (0, 0.2]")
        if self.record_every < 1:
            raise ConfigError("record_every must be positive")
        for n in (self.n_settle, self.n_sample - self.n_settle):
            if n % self.record_every:
                raise ConfigError("settle and sample windows must be whole multiples "
                                  "of record_every steps")
        if not self.schedule or self.schedule[0][0] != 0.0:
            raise ConfigError("shading schedule must start at t = 0")
        starts = [t for t, _ in self.schedule]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("shading schedule times must be increasing")
        for t, p in self.schedule:
            k = t / self.sample_period
            if abs(k - round(k)) > 1e-9:
                raise ConfigError(f"shading change at t={t} is not on a sample instant")
            if len(p) != len(self.specs):
                raise ConfigError(f"pattern at t={t} has {len(p)} irradiances for "
                                  f"{len(self.specs)} modules")
            if t >= self.total_time:
                raise ConfigError(f"shading change at t={t} is after total_time")
        lo, hi = self.voltage_window
        if not 0.0 <= lo < hi <= 1.0:
            raise ConfigError("voltage_window must satisfy 0 <= lo < hi <= 1")
        lo, hi = self.duty_window
        if not self.converter.d_min <= lo < hi <= self.converter.d_max:
            raise ConfigError("duty_window must lie inside the converter duty limits "
                              f"[{self.converter.d_min}, {self.converter.d_max}]")

    def segments(self):
        """``(t_start, t_end, pattern)`` for each constant-shading interval."""
        out = []
        for k, (t, p) in enumerate(self.schedule):
            t_end = self.schedule[k + 1][0] if k + 1 < len(self.schedule) else self.total_time
            out.append((t, t_end, p))
        return out


@dataclass
class SimTrace:
    t: np.ndarray
    v_in: np.ndarray
    i_pv: np.ndarray
    p_pv: np.ndarray
    v_out: np.ndarray
    i_out: np.ndarray
    p_out: np.ndarray
    duty: np.ndarray

    @classmethod
    def from_rows(cls, t, rows):
        rows = np.asarray(rows, dtype=float).reshape(-1, 7)
        return cls(np.asarray(t, dtype=float), *(rows[:, k].copy() for k in range(7)))

    def __len__(self):
        return len(self.t)

    def window(self, t0, t1=math.inf) -> "SimTrace":
        m = (self.t >= t0) & (self.t <= t1)
        return SimTrace(*(getattr(self, c)[m] for c in TRACE_COLUMNS))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            cols = [getattr(self, c) for c in TRACE_COLUMNS]
            for row in zip(*cols):
                w.writerow([f"{x:.9g}" for x in row])


@dataclass
class MetricsReport:
    final_power: float
    gmpp_power: float
    efficiency: float
    convergence_time: float | None
    ripple: float
    converged: bool
    controller: str = ""
    seed: int = 0
    gmpp_voltage: float = math.nan
    final_voltage: float = math.nan
    best_power: float = math.nan
    decision: float = math.nan
    zone: tuple | None = None

    def to_dict(self):
        d = asdict(self)
        d["zone"] = list(self.zone) if self.zone is not None else None
        return d

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def convergence_time(trace: SimTrace, gmpp: float, band: float = 0.02):
    """Earliest time after which ``p_pv`` never leaves ``band * gmpp`` of ``gmpp``.

    Returns None when the last sample is outside the band.
    """
    if not 0.0 < band <= 0.2:
        raise ValueError("band must lie in (0, 0.2]")
    if len(trace) == 0:
        return None
    outside = np.abs(trace.p_pv - gmpp) > band * gmpp
    if not outside.any():
        return float(trace.t[0])
    last = int(np.nonzero(outside)[0][-1])
    if last == len(trace) - 1:
        return None
    return float(trace.t[last + 1])


def tracking_efficiency(trace: SimTrace, gmpp) -> float:
    """Trapezoidal energy ratio against the oracle; ``gmpp`` may vary per sample."""
    g = np.broadcast_to(np.asarray(gmpp, dtype=float), trace.t.shape)
    if np.any(g <= 0.0):
        raise ValueError("gmpp must be positive")
    if len(trace) < 2:
        return float(trace.p_pv[0] / g[0]) if len(trace) else math.nan
    return float(np.trapezoid(trace.p_pv, trace.t) / np.trapezoid(g, trace.t))


def ripple(trace: SimTrace) -> float:
    """Peak-to-peak PV power over its mean."""
    if len(trace) == 0:
        return math.nan
    m = float(np.mean(trace.p_pv))
    return float(np.ptp(trace.p_pv) / m) if m > 0.0 else 0.0


@functools.lru_cache(maxsize=8)
def default_zone_model(specs: tuple, seed: int = 0) -> ann.Mlp:
    """Zone network trained on the standard 5x5x5 irradiance grid."""
    patterns = ann.irradiance_grid(n_modules=len(specs))
    data = ann.generate_zone_dataset(list(specs), patterns)
    v_scale = string_curve(list(specs), ShadingPattern((1000.0,) * len(specs))).v_oc
    return ann.train(ann.Mlp.init((len(specs), 10, 2), seed=seed, v_scale=v_scale), data)


class _Loop:
    """Plant plus trace recorder; evaluates candidates on the live plant."""

    def __init__(self, sc: Scenario, backend=None):
        self.sc = sc
        self.backend = backend
        self.state = PlantState()
        self.i_pv = None
        self.pv = None
        self.t_rows = [0.0]
        self.rows = [np.zeros((1, 7))]
        self.rows[0][0, 6] = self.state.duty
        self.step_count = 0

    def set_source(self, pv: PVSource):
        self.pv = pv
        self.i_pv = pv.current(self.state.v_in)
        if self.step_count == 0:
            self.rows[0][0, 1] = self.i_pv

    def _hold(self, command, n_steps, avg_start):
        sc = self.sc
        res = hold(self.state, sc.converter, self.pv, command, n_steps,
                   regulate=sc.space == "voltage", k_p=sc.k_p, r_damp=sc.r_damp,
                   avg_start=avg_start, record_every=sc.record_every, i_pv=self.i_pv,
                   backend=self.backend)
        k0 = self.step_count
        steps = k0 + sc.record_every * np.arange(1, len(res.rows) + 1)
        self.t_rows.extend((steps * sc.converter.dt).tolist())
        self.rows.append(res.rows)
        self.step_count += n_steps
        self.state, self.i_pv = res.state, res.i_pv
        return res.mean_power

    def evaluate(self, command: float) -> float:
        sc = self.sc
        n_settle = sc.n_settle
        avg_start = n_settle - max(1, math.ceil(0.2 * n_settle))
        p = self._hold(command, n_settle, avg_start)
        rest = sc.n_sample - n_settle
        if rest > 0:
            self._hold(command, rest, rest)
        return p

    def trace(self) -> SimTrace:
        return SimTrace.from_rows(self.t_rows, np.vstack(self.rows))


def regulable_range(params: ConverterParams, pv: PVSource):
    """PV voltages the converter can hold in steady state: the equilibria at
    ``d_max`` and ``d_min``. References outside never settle and would feed
    transient power readings to the search.
    """
    return equilibrium(params, pv, params.d_max)[0], equilibrium(params, pv, params.d_min)[0]


def _best_logged(ilog, first):
    """Best candidate logged since row ``first``; covers budgets shorter than one population."""
    rows = ilog.rows[first:]
    if not rows:
        return math.nan, math.nan
    best = max(rows, key=lambda r: r[2])
    return best[1], best[2]


def _run_segment(sc: Scenario, loop: _Loop, pattern, budget, rng, ilog):
    """Drive one constant-shading interval; returns (decision, best power, zone)."""
    pv = PVSource(sc.specs, pattern, sc.v_bypass)
    loop.set_source(pv)
    curve = string_curve(sc.specs, pattern, v_bypass=sc.v_bypass)
    v_oc = curve.v_oc
    ev = loop.evaluate
    zone = None
    if sc.space == "voltage":
        v_lo, v_hi = regulable_range(sc.converter, pv)
        v_lo = max(v_lo, sc.voltage_window[0] * v_oc)
        v_hi = min(v_hi, sc.voltage_window[1] * v_oc)
    else:
        v_lo, v_hi = sc.duty_window
    first = len(ilog.rows)
    if sc.controller == "pso":
        params = quiet_pso(sc.pso, bounds=(v_lo, v_hi))
        state, _ = track_pso(params, ev, budget, rng, sc.stop.make(), ilog)
        if state is None:
            return _best_logged(ilog, first) + (zone,)
        return state.g_best_pos, state.g_best_pow, zone
    if sc.controller == "cs":
        params = replace(sc.cs, bounds=(v_lo, v_hi))
        state, _ = track_cs(params, ev, budget, rng, sc.stop.make(), ilog)
        if state is None:
            return _best_logged(ilog, first) + (zone,)
        return state.best_pos, state.best_pow, zone
    if sc.controller == "po":
        if sc.space == "voltage":
            params = replace(sc.po, bounds=(v_lo, v_hi))
            start = sc.po_start * v_oc if sc.po_start <= 1.0 else sc.po_start
            direction = 1
        else:
            params = sc.po
            start = sc.po_start
            # larger duty means lower PV voltage; climb towards higher voltage first
            direction = -1
        x, lg = track_po(params, ev, budget, start, direction, ilog)
        return x, max(r[2] for r in lg.rows) if lg.rows else math.nan, zone
    # hybrid: P&O on the voltage reference inside the predicted zone
    model = sc.model if sc.model is not None else default_zone_model(sc.specs)
    zone = ann.predict_zone(model, pattern.irradiances, v_max_limit=v_oc)
    zone = check_zone(zone, (0.0, v_oc))
    params = PoParams(step=sc.hybrid_step, bounds=zone)
    x, lg = track_po(params, ev, budget, 0.5 * (zone[0] + zone[1]), 1, ilog)
    return x, max(r[2] for r in lg.rows) if lg.rows else math.nan, zone


def run(sc: Scenario, backend: str | None = None, iteration_log: IterationLog | None = None):
    """Simulate ``sc``; returns ``(SimTrace, MetricsReport)``.

    Identical scenarios (including seed) give bit-identical results.
    """
    rng = np.random.default_rng(sc.seed)
    loop = _Loop(sc, backend)
    ilog = iteration_log if iteration_log is not None else IterationLog()
    oracle = []
    decision = best = math.nan
    zone = None
    for t0, t1, pattern in sc.segments():
        budget = round((t1 - t0) / sc.sample_period)
        decision, best, zone = _run_segment(sc, loop, pattern, budget, rng, ilog)
        curve = string_curve(sc.specs, pattern, v_bypass=sc.v_bypass)
        oracle.append((t0, t1, find_gmpp(curve)))
    tr = loop.trace()
    # tail that does not fill a whole sample period is held at the last decision
    t_last = sc.segments()[-1][0]
    v_g, p_g = oracle[-1][2]
    g_series = np.empty_like(tr.t)
    for t0, _, (_, p) in oracle:
        g_series[tr.t >= t0] = p
    final = tr.window(tr.t[-1] - sc.sample_period + 1e-12)
    final_power = float(np.mean(final.p_pv))
    t_conv = convergence_time(tr.window(t_last), p_g, sc.band)
    converged = t_conv is not None and abs(final_power - p_g) <= sc.band * p_g
    report = MetricsReport(
        final_power=final_power, gmpp_power=float(p_g),
        efficiency=tracking_efficiency(tr, g_series),
        convergence_time=t_conv, ripple=ripple(final), converged=bool(converged),
        controller=sc.controller, seed=sc.seed, gmpp_voltage=float(v_g),
        final_voltage=float(np.mean(final.v_in)), best_power=float(best),
        decision=float(decision), zone=zone)
    return tr, report


# ---------------------------------------------------------------------------
# batches


@dataclass
class BatchRow:
    scenario: str
    controller: str
    seed: int
    report: MetricsReport | None = None
    error: str = ""

    @property
    def ok(self):
        return self.report is not None


def _run_one(sc: Scenario, backend=None) -> BatchRow:
    try:
        _, rep = run(sc, backend)
        return BatchRow(sc.name, sc.controller, sc.seed, rep)
    except MpptSimError as exc:
        return BatchRow(sc.name, sc.controller, sc.seed, None, f"{type(exc).__name__}: {exc}")


def run_batch(scenarios, seeds, workers: int = 1, backend=None):
    """All (scenario, seed) runs, ordered by scenario then seed.

    Failures are captured per row instead of aborting the batch.
    """
    jobs = [replace(sc, seed=int(s)) for sc in scenarios for s in seeds]
    # networks are trained once in the parent so workers do not retrain
    nets = {}
    for k, j in enumerate(jobs):
        if j.controller == "hybrid" and j.model is None:
            if j.specs not in nets:
                nets[j.specs] = default_zone_model(j.specs)
            jobs[k] = replace(j, model=nets[j.specs])
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_one, jobs, [backend] * len(jobs)))
    else:
        rows = [_run_one(j, backend) for j in jobs]
    return rows


SUMMARY_COLUMNS = ("scenario", "controller", "seed", "status", "final_power",
                   "gmpp_power", "efficiency", "convergence_time", "ripple",
                   "converged", "error")


def write_summary(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            if r.ok:
                m = r.report
                tc = "" if m.convergence_time is None else f"{m.convergence_time:.6g}"
                w.writerow([r.scenario, r.controller, r.seed, "ok",
                            f"{m.final_power:.6f}", f"{m.gmpp_power:.6f}",
                            f"{m.efficiency:.6f}", tc, f"{m.ripple:.6f}",
                            str(m.converged).lower(), ""])
            else:
                w.writerow([r.scenario, r.controller, r.seed, "failed",
                            "", "", "", "", "", "", r.error])


def _time_or_inf(rep):
    if rep is None or rep.convergence_time is None:
        return math.inf
    return rep.convergence_time


def paired_stats(rows):
    """Per-seed comparisons between controllers run on the same seeds.

    Returns a list of ``(statistic, wins, total)``; a run that never
    converged counts as infinitely slow, and ties count as losses.
    """
    by = {}
    for r in rows:
        by.setdefault(r.controller, {})[r.seed] = r.report
    out = []

    def faster(a, b):
        if a not in by or b not in by:
            return
        seeds = sorted(set(by[a]) & set(by[b]))
        wins = sum(_time_or_inf(by[a][s]) < _time_or_inf(by[b][s]) for s in seeds)
        out.append((f"{a}_faster_than_{b}", wins, len(seeds)))

    faster("cs", "pso")
    faster("hybrid", "cs")
    if all(c in by for c in ("hybrid", "cs", "pso")):
        seeds = sorted(set(by["hybrid"]) & set(by["cs"]) & set(by["pso"]))
        wins = sum(_time_or_inf(by["hybrid"][s]) < _time_or_inf(by["cs"][s])
                   < _time_or_inf(by["pso"][s]) for s in seeds)
        out.append(("hybrid_cs_pso_ordering", wins, len(seeds)))
    if "cs" in by and "pso" in by:
        seeds = sorted(set(by["cs"]) & set(by["pso"]))
        wins = sum((by["cs"][s] is not None and by["pso"][s] is not None
                    and by["cs"][s].efficiency > by["pso"][s].efficiency) for s in seeds)
        out.append(("cs_more_efficient_than_pso", wins, len(seeds)))
    for c in sorted(by):
        reps = by[c]
        hits = sum(r is not None and r.converged for r in reps.values())
        out.append((f"{c}_converged_to_global", hits, len(reps)))
    return out


def write_stats(stats, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["statistic", "wins", "total", "rate"])
        for name, wins, total in stats:
            w.writerow([name, wins, total, f"{wins / total:.4f}" if total else ""])


# ---------------------------------------------------------------------------
# standard scenarios

PSC_PATTERN = (600.0, 800.0, 1000.0)


def psc_scenario(controller: str = "cs", seed: int = 0, **kw) -> Scenario:
    """Three-module string at 600/800/1000 W/m2, 25 degC."""
    kw.setdefault("name", f"psc-{controller}")
    return Scenario(schedule=((0.0, ShadingPattern(PSC_PATTERN)),),
                    controller=controller, seed=seed, **kw)
