"""Plain-text scenario files.

INI-style key/value sections, ``;`` or ``#`` comments. Every section and
key is optional; unknown ones are rejected so typos do not go unnoticed.

    [module]          ; datasheet values, calibrated on load
    v_oc = 32.9
    i_sc = 8.21
    v_mp = 26.3
    i_mp = 7.61
    n_cells = 54
    k_i = 0.00318
    k_v = -0.123
    ideality = 1.3
    r_series = 0.23   ; optional, forces the value and skips calibration
    r_shunt = 600     ; optional, as above

    [string]
    modules = 3
    irradiance = 600 800 1000      ; W/m2, one per module
    temperature = 298.15           ; K
    v_bypass = 0.0                 ; bypass diode forward drop, V

    [shading]         ; optional piecewise-constant schedule, overrides irradiance
    0.0 = 600 800 1000
    1.0 = 1000 1000 1000

    [converter]
    c_in = 800e-6
    c_out = 850e-6
    inductance = 5e-4
    r_load = 50
    dt = 1e-5
    d_min = 0.05
    d_max = 0.95

    [sim]
    controller = cs                ; po | pso | cs | hybrid
    total_time = 6.0
    sample_period = 0.05           ; default depends on the decision space
    settle = 0.05
    seed = 0
    band = 0.02
    decision_space = voltage       ; duty | voltage
    voltage_window = 0.05 1        ; fractions of open-circuit voltage
    duty_window = 0.05 0.8         ; duty-space search bounds
    k_p = 0
    r_damp = 1.1
    record_every = 10
    po_start = 0.9
    hybrid_step = 0.5
    model = zone.mlp               ; hybrid network file, relative to this file

    [pso]   n, w, alpha1, alpha2, init, random_draw
    [cs]    n, k_levy, beta, gamma0, p_abandon, init
    [po]    step
    [stop]  rel_tol, patience, max_iter, spread_tol

    [ann]             ; train-ann only
    levels = 200 400 600 800 1000
    half_width = 0.15
    epochs = 60000
    learning_rate = 0.3
    momentum = 0.9
    seed = 0
    holdout = 0.2
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace

from .converter import ConverterParams
from .errors import CalibrationError, ConfigError
from .harness import CONTROLLERS, Scenario, StopRule, quiet_pso
from .mppt import CsParams, PoParams, PsoParams
from .pvmodel import KC200GT_DATASHEET, ModuleSpec, ShadingPattern, calibrate_module

FLOAT, INT, STR, FLOATS = "float", "int", "str", "floats"

SCHEMA = {
    "module": {"v_oc": FLOAT, "i_sc": FLOAT, "v_mp": FLOAT, "i_mp": FLOAT,
               "n_cells": INT, "k_i": FLOAT, "k_v": FLOAT, "ideality": FLOAT,
               "r_series": FLOAT, "r_shunt": FLOAT},
    "string": {"modules": INT, "irradiance": FLOATS, "temperature": FLOAT,
               "v_bypass": FLOAT},
    "converter": {"c_in": FLOAT, "c_out": FLOAT, "inductance": FLOAT, "r_load": FLOAT,
                  "dt": FLOAT, "d_min": FLOAT, "d_max": FLOAT},
    "sim": {"controller": STR, "total_time": FLOAT, "sample_period": FLOAT,
            "settle": FLOAT, "seed": INT, "band": FLOAT, "decision_space": STR,
            "voltage_window": FLOATS, "duty_window": FLOATS, "k_p": FLOAT, "r_damp": FLOAT,
            "record_every": INT, "po_start": FLOAT, "hybrid_step": FLOAT,
            "model": STR, "name": STR},
    "pso": {"n": INT, "w": FLOAT, "alpha1": FLOAT, "alpha2": FLOAT, "init": STR,
            "random_draw": STR},
    "cs": {"n": INT, "k_levy": FLOAT, "beta": FLOAT, "gamma0": FLOAT,
           "p_abandon": FLOAT, "init": STR},
    "po": {"step": FLOAT},
    "stop": {"rel_tol": FLOAT, "patience": INT, "max_iter": INT, "spread_tol": FLOAT},
    "ann": {"levels": FLOATS, "half_width": FLOAT, "epochs": INT,
            "learning_rate": FLOAT, "momentum": FLOAT, "seed": INT, "holdout": FLOAT},
}


@dataclass
class ParsedFile:
    path: str
    values: dict = field(default_factory=dict)
    schedule: list = field(default_factory=list)
    lines: dict = field(default_factory=dict)

    def get(self, section, key, default=None):
        return self.values.get(section, {}).get(key, default)

    def section(self, name):
        return dict(self.values.get(name, {}))

    def where(self, section, key=None):
        line = self.lines.get((section, key))
        return f"{self.path}:{line}" if line else self.path


def _locate(text):
    """Line numbers of section headers and keys."""
    lines, section = {}, None
    for n, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if not s or s[0] in ";#":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            lines[(section, None)] = n
        elif section is not None:
            for sep in "=:":
                if sep in s:
                    lines[(section, s.split(sep, 1)[0].strip().lower())] = n
                    break
    return lines


def _convert(kind, raw, where, key):
    try:
        if kind == FLOAT:
            return float(raw)
        if kind == INT:
            return int(raw)
        if kind == FLOATS:
            return tuple(float(x) for x in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: {key} = {raw!r} is not a valid {kind}") from None


def parse_text(text: str, path: str = "<string>") -> ParsedFile:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"),
                                   comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    pf = ParsedFile(path, lines=_locate(text))
    for sec in cp.sections():
        if sec == "shading":
            for key, raw in cp.items(sec):
                where = pf.where(sec, key)
                t = _convert(FLOAT, key, where, "time")
                pf.schedule.append((t, _convert(FLOATS, raw, where, key), where))
            pf.schedule.sort(key=lambda x: x[0])
            continue
        if sec not in SCHEMA:
            raise ConfigError(f"{pf.where(sec)}: unknown section [{sec}]; "
                              f"valid: {', '.join(sorted([*SCHEMA, 'shading']))}")
        vals = {}
        for key, raw in cp.items(sec):
            where = pf.where(sec, key)
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{where}: unknown key {key!r} in [{sec}]")
            vals[key] = _convert(SCHEMA[sec][key], raw, where, key)
        pf.values[sec] = vals
    return pf


def parse_file(path) -> ParsedFile:
    with open(path) as fh:
        text = fh.read()
    pf = parse_text(text, str(path))
    model = pf.get("sim", "model")
    if model and not os.path.isabs(model):
        pf.values["sim"]["model"] = os.path.join(os.path.dirname(os.path.abspath(path)), model)
    return pf


def _guard(pf, section, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{pf.where(section)}: [{section}] {exc}") from None


def module_spec(pf: ParsedFile) -> ModuleSpec:
    m = pf.section("module")
    ds = dict(KC200GT_DATASHEET)
    for k in ("v_oc", "i_sc", "v_mp", "i_mp", "n_cells", "k_i", "k_v"):
        if k in m:
            ds[k] = m[k]
    try:
        return _guard(pf, "module", calibrate_module, ds, m.get("ideality", 1.3),
                      m.get("r_series"), m.get("r_shunt"))
    except CalibrationError as exc:
        # an infeasible datasheet is a configuration problem, not a numerical one
        raise ConfigError(f"{pf.where('module')}: [module] {exc}") from None


def string_specs(pf: ParsedFile):
    spec = module_spec(pf)
    n = pf.get("string", "modules")
    g = pf.get("string", "irradiance")
    if n is None:
        n = len(g) if g else len(pf.schedule[0][1]) if pf.schedule else 3
    if n < 1:
        raise ConfigError(f"{pf.where('string', 'modules')}: string needs at least one module")
    return (spec,) * n


def schedule(pf: ParsedFile, n_modules: int):
    t_k = pf.get("string", "temperature", 298.15)
    entries = pf.schedule or [(0.0, pf.get("string", "irradiance", (1000.0,) * n_modules),
                               pf.where("string", "irradiance"))]
    out = []
    for t, g, where in entries:
        if len(g) != n_modules:
            raise ConfigError(f"{where}: {len(g)} irradiances for {n_modules} modules")
        try:
            out.append((t, ShadingPattern(g, t_k)))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    return tuple(out)


def scenario(pf: ParsedFile, controller: str | None = None, seed: int | None = None,
             model=None) -> Scenario:
    specs = string_specs(pf)
    sim = pf.section("sim")
    if controller is not None:
        sim["controller"] = controller
    if seed is not None:
        sim["seed"] = seed
    ctrl = sim.get("controller", "cs")
    if ctrl not in CONTROLLERS:
        raise ConfigError(f"{pf.where('sim', 'controller')}: unknown controller {ctrl!r}; "
                          f"valid: {', '.join(CONTROLLERS)}")
    conv = _guard(pf, "converter", ConverterParams, **pf.section("converter"))
    pso_kw = pf.section("pso")
    # only an explicitly configured inertia earns the range warning
    pso = _guard(pf, "pso", PsoParams if "w" in pso_kw else quiet_pso, **pso_kw)
    cs = _guard(pf, "cs", CsParams, **pf.section("cs"))
    po = _guard(pf, "po", PoParams, **pf.section("po"))
    stop = _guard(pf, "stop", StopRule, **pf.section("stop"))
    sim.pop("model", None)
    if model is None and ctrl == "hybrid" and pf.get("sim", "model"):
        from .ann import Mlp
        try:
            model = Mlp.load(pf.get("sim", "model"))
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"{pf.where('sim', 'model')}: cannot load network: {exc}") from None
    sim.setdefault("name", os.path.splitext(os.path.basename(pf.path))[0])
    return _guard(pf, "sim", Scenario, schedule=schedule(pf, len(specs)), specs=specs,
                  converter=conv, pso=pso, cs=cs, po=po, stop=stop, model=model,
                  v_bypass=pf.get("string", "v_bypass", 0.0), **sim)


def load_scenario(path, **kw) -> Scenario:
    return scenario(parse_file(path), **kw)


def with_seed(sc: Scenario, seed: int) -> Scenario:
    return replace(sc, seed=seed)
