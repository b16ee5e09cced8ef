"""MPPT controllers: perturb and observe, particle swarm, cuckoo search, hybrid.

All controllers act on one scalar decision (a duty cycle or a PV voltage
reference). Population methods are written as pure transition functions
that call an ``evaluate(decision) -> power`` callback once per candidate;
in closed loop that callback holds the candidate on the plant and reports
the measured power.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigError

Evaluate = Callable[[float], float]


@dataclass(frozen=True)
class Measurement:
    v: float
    i: float
    p: float
    t: float = 0.0


def _check_bounds(bounds):
    lo, hi = float(bounds[0]), float(bounds[1])
    if not hi >= lo:
        raise ValueError(f"empty decision interval {bounds}")
    return lo, hi


def _initial_positions(n, bounds, init, rng):
    lo, hi = bounds
    if init == "equispaced":
        return lo + (np.arange(n) + 0.5) * (hi - lo) / n
    if init == "random":
        return rng.uniform(lo, hi, n)
    raise ValueError(f"unknown initial placement {init!r}")


@dataclass(frozen=True)
class PsoParams:
    n: int = 3
    w: float = 0.3
    alpha1: float = 1.2
    alpha2: float = 1.2
    bounds: tuple = (0.05, 0.95)
    init: str = "equispaced"
    # one (r1, r2) pair per iteration shared by the swarm, or one per particle
    random_draw: str = "iteration"

    def __post_init__(self):
        object.__setattr__(self, "bounds", _check_bounds(self.bounds))
        if self.random_draw not in ("iteration", "particle"):
            raise ValueError("random_draw must be 'iteration' or 'particle'")
        if self.n < 2:
            raise ValueError("PSO needs at least two particles")
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ValueError("acceleration constants must be positive")
        if self.alpha1 + self.alpha2 > 4.0:
            raise ValueError(
                f"alpha1 + alpha2 = {self.alpha1 + self.alpha2} exceeds 4; "
                "velocities would diverge")
        if not 0.0 < self.w < 1.0:
            raise ValueError("inertia weight must lie in (0, 1)")
        if not 0.4 <= self.w <= 0.9:
            warnings.warn(f"inertia weight {self.w} outside the usual 0.4-0.9 range",
                          stacklevel=3)


@dataclass(frozen=True)
class SwarmState:
    positions: np.ndarray
    velocities: np.ndarray
    p_best_pos: np.ndarray
    p_best_pow: np.ndarray
    g_best_pos: float
    g_best_pow: float
    iteration: int = 0


@dataclass(frozen=True)
class CsParams:
    n: int = 4
    k_levy: float = 0.8
    beta: float = 1.5
    gamma0: float = 1.0
    p_abandon: float = 0.0
    bounds: tuple = (0.0, 1.0)
    init: str = "equispaced"

    def __post_init__(self):
        object.__setattr__(self, "bounds", _check_bounds(self.bounds))
        if not 1.0 < self.beta <= 2.0:
            raise ValueError("beta must lie in (1, 2]")
        if not self.k_levy > 0.0:
            raise ValueError("Levy multiplier must be positive")
        if not 0.0 <= self.p_abandon < 1.0:
            raise ValueError("p_abandon must lie in [0, 1)")
        if self.n < 2:
            raise ValueError("cuckoo search needs at least two nests")


@dataclass(frozen=True)
class NestState:
    positions: np.ndarray
    powers: np.ndarray
    best_pos: float
    best_pow: float
    iteration: int = 0


@dataclass(frozen=True)
class PoParams:
    step: float = 0.005
    bounds: tuple = (0.05, 0.95)

    def __post_init__(self):
        object.__setattr__(self, "bounds", _check_bounds(self.bounds))
        if not self.step > 0.0:
            raise ValueError("perturbation step must be positive")


def sigma_u(beta: float) -> float:
    """Standard deviation of the Mantegna numerator for Levy exponent ``beta``."""
    if not 1.0 < beta <= 2.0:
        raise ValueError("beta must lie in (1, 2]")
    num = math.gamma(1.0 + beta) * math.sin(math.pi * beta / 2.0)
    den = math.gamma((1.0 + beta) / 2.0) * beta * 2.0 ** ((beta - 1.0) / 2.0)
    return (num / den) ** (1.0 / beta)


def levy_draw(rng: np.random.Generator, beta: float) -> tuple[float, float]:
    """One ``(u, v)`` pair; ``v`` is redrawn while ``|v| < 1e-12``."""
    u = rng.normal(0.0, sigma_u(beta))
    v = rng.normal(0.0, 1.0)
    while abs(v) < 1e-12:
        v = rng.normal(0.0, 1.0)
    return u, v


def levy_step(rng: np.random.Generator, params: CsParams, x_best: float,
              x_i: float) -> float:
    """Heavy-tailed increment ``K * u / |v|**(1/beta) * (x_best - x_i)``."""
    u, v = levy_draw(rng, params.beta)
    return params.gamma0 * params.k_levy * u / abs(v) ** (1.0 / params.beta) * (x_best - x_i)


def cs_init(params: CsParams, evaluate: Evaluate, rng: np.random.Generator) -> NestState:
    pos = _initial_positions(params.n, params.bounds, params.init, rng)
    pw = np.array([evaluate(float(x)) for x in pos])
    k = int(np.argmax(pw))
    return NestState(pos, pw, float(pos[k]), float(pw[k]), 0)


def cs_iterate(state: NestState, params: CsParams, evaluate: Evaluate,
               rng: np.random.Generator) -> NestState:
    """One generation: Levy move of every nest toward the incumbent, greedy keep."""
    lo, hi = params.bounds
    pos = state.positions.copy()
    pw = state.powers.copy()
    x_best = state.best_pos
    for i in range(params.n):
        cand = min(max(pos[i] + levy_step(rng, params, x_best, pos[i]), lo), hi)
        p_new = evaluate(float(cand))
        if p_new >= pw[i]:
            pos[i] = cand
            pw[i] = p_new
    if params.p_abandon > 0.0 and rng.random() < params.p_abandon:
        worst = int(np.argmin(pw))
        pos[worst] = rng.uniform(lo, hi)
        pw[worst] = evaluate(float(pos[worst]))
    best_pos, best_pow = state.best_pos, state.best_pow
    k = int(np.argmax(pw))
    if pw[k] >= best_pow:
        best_pos, best_pow = float(pos[k]), float(pw[k])
    return NestState(pos, pw, best_pos, best_pow, state.iteration + 1)


def pso_init(params: PsoParams, evaluate: Evaluate, rng: np.random.Generator) -> SwarmState:
    pos = _initial_positions(params.n, params.bounds, params.init, rng)
    pw = np.array([evaluate(float(x)) for x in pos])
    k = int(np.argmax(pw))
    return SwarmState(pos, np.zeros(params.n), pos.copy(), pw,
                      float(pos[k]), float(pw[k]), 0)


def pso_iterate(state: SwarmState, params: PsoParams, evaluate: Evaluate,
                rng: np.random.Generator) -> SwarmState:
    """Velocity/position update of every particle followed by best bookkeeping."""
    lo, hi = params.bounds
    pos = state.positions.copy()
    vel = state.velocities.copy()
    pb_pos = state.p_best_pos.copy()
    pb_pow = state.p_best_pow.copy()
    g_pos, g_pow = state.g_best_pos, state.g_best_pow
    r1, r2 = rng.random(2)
    for i in range(params.n):
        if params.random_draw == "particle" and i > 0:
            r1, r2 = rng.random(2)
        vel[i] = (params.w * vel[i] + r1 * params.alpha1 * (pb_pos[i] - pos[i])
                  + r2 * params.alpha2 * (g_pos - pos[i]))
        x = pos[i] + vel[i]
        if x < lo or x > hi:
            x = min(max(x, lo), hi)
            vel[i] = 0.0
        pos[i] = x
        p_new = evaluate(float(x))
        if p_new > pb_pow[i]:
            pb_pos[i] = x
            pb_pow[i] = p_new
    k = int(np.argmax(pb_pow))
    if pb_pow[k] > g_pow:
        g_pos, g_pow = float(pb_pos[k]), float(pb_pow[k])
    return SwarmState(pos, vel, pb_pos, pb_pow, g_pos, g_pow, state.iteration + 1)


def po_step(prev: Measurement, curr: Measurement, direction: int,
            params: PoParams, decision: float) -> tuple[float, int]:
    """Classic hill climb: keep direction while power does not drop."""
    if curr.p - prev.p < 0.0:
        direction = -direction
    lo, hi = params.bounds
    return min(max(decision + direction * params.step, lo), hi), direction


def hybrid_step(zone: tuple, prev: Measurement, curr: Measurement, direction: int,
                params: PoParams, v_ref: float) -> tuple[float, int]:
    """P&O on the voltage reference, confined to the predicted zone."""
    v_min, v_max = zone
    return po_step(prev, curr, direction, replace(params, bounds=(v_min, v_max)), v_ref)


def check_zone(zone, v_range) -> tuple[float, float]:
    v_min, v_max = float(zone[0]), float(zone[1])
    lo, hi = v_range
    if v_min > v_max or v_min < lo or v_max > hi:
        raise ConfigError(f"zone [{v_min:.2f}, {v_max:.2f}] V outside string range "
                          f"[{lo:.2f}, {hi:.2f}] V")
    return v_min, v_max


# ---------------------------------------------------------------------------
# closed-loop drivers


class BudgetExhausted(Exception):
    """Raised by a budgeted evaluator once its evaluation count is used up."""


@dataclass
class Stopper:
    """Stop when the incumbent stalls or the population has collapsed.

    Stall: relative improvement below ``rel_tol`` for ``patience``
    consecutive iterations. Collapse: every member within ``spread_tol``
    (fraction of the decision range) of the incumbent.
    """

    rel_tol: float = 1e-3
    patience: int = 10
    max_iter: int = 100
    spread_tol: float = 0.0
    _stall: int = 0
    _last: float = -math.inf

    def update(self, incumbent: float, positions, best_pos, bounds, iteration) -> bool:
        if self._last > 0 and incumbent - self._last < self.rel_tol * abs(self._last):
            self._stall += 1
        else:
            self._stall = 0
        self._last = max(self._last, incumbent)
        if self._stall >= self.patience or iteration >= self.max_iter:
            return True
        if self.spread_tol > 0.0:
            width = bounds[1] - bounds[0]
            spread = float(np.max(np.abs(np.asarray(positions) - best_pos)))
            if spread <= self.spread_tol * width:
                return True
        return False


@dataclass
class IterationLog:
    rows: list = field(default_factory=list)

    def add(self, iteration, candidate, power, incumbent):
        self.rows.append((iteration, candidate, power, incumbent))

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "candidate", "power_W", "incumbent_W"])
            for r in self.rows:
                w.writerow([r[0], f"{r[1]:.6f}", f"{r[2]:.6f}", f"{r[3]:.6f}"])


class _Logged:
    """Evaluator wrapper: budget enforcement plus per-candidate logging."""

    def __init__(self, evaluate, budget, log):
        self.evaluate = evaluate
        self.left = budget
        self.log = log
        self.iteration = 0
        self.incumbent = -math.inf

    def __call__(self, x):
        if self.left <= 0:
            raise BudgetExhausted
        self.left -= 1
        p = self.evaluate(x)
        self.incumbent = max(self.incumbent, p)
        self.log.add(self.iteration, x, p, self.incumbent)
        return p


def _hold_best(ev: _Logged, x):
    while ev.left > 0:
        ev(x)


def track_pso(params: PsoParams, evaluate: Evaluate, budget: int,
              rng: np.random.Generator, stopper: Stopper | None = None,
              log: IterationLog | None = None):
    """Run PSO for ``budget`` evaluations, then hold the global best."""
    log = log if log is not None else IterationLog()
    stopper = stopper or Stopper()
    ev = _Logged(evaluate, budget, log)
    state = None
    try:
        state = pso_init(params, ev, rng)
        while True:
            ev.iteration += 1
            state = pso_iterate(state, params, ev, rng)
            if stopper.update(state.g_best_pow, state.positions, state.g_best_pos,
                              params.bounds, state.iteration):
                break
        _hold_best(ev, state.g_best_pos)
    except BudgetExhausted:
        pass
    return state, log


def track_cs(params: CsParams, evaluate: Evaluate, budget: int,
             rng: np.random.Generator, stopper: Stopper | None = None,
             log: IterationLog | None = None):
    """Run cuckoo search for ``budget`` evaluations, then hold the best nest."""
    log = log if log is not None else IterationLog()
    stopper = stopper or Stopper()
    ev = _Logged(evaluate, budget, log)
    state = None
    try:
        state = cs_init(params, ev, rng)
        while True:
            ev.iteration += 1
            state = cs_iterate(state, params, ev, rng)
            if stopper.update(state.best_pow, state.positions, state.best_pos,
                              params.bounds, state.iteration):
                break
        _hold_best(ev, state.best_pos)
    except BudgetExhausted:
        pass
    return state, log


def track_po(params: PoParams, evaluate: Evaluate, budget: int, start: float,
             direction: int = 1, log: IterationLog | None = None):
    """Perturb and observe from ``start`` for ``budget`` evaluations.

    Returns the final decision and the log.
    """
    log = log if log is not None else IterationLog()
    lo, hi = params.bounds
    x = min(max(start, lo), hi)
    p_prev = None
    for k in range(budget):
        p = evaluate(x)
        log.add(k, x, p, max(p, log.rows[-1][3]) if log.rows else p)
        if p_prev is not None:
            x, direction = po_step(Measurement(0, 0, p_prev), Measurement(0, 0, p),
                                   direction, params, x)
        else:
            x = min(max(x + direction * params.step, lo), hi)
        p_prev = p
    return x, log
