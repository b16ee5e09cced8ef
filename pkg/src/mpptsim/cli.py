"""Command-line front end: ``mpptsim {curve,run,batch,train-ann}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure
(solver, instability, divergence, failed batch rows), 4 filesystem error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__, ann, config, harness
from .errors import ConfigError, MpptSimError
from .mppt import IterationLog
from .pvmodel import ShadingPattern, find_gmpp, string_curve

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_FILESYSTEM = 4

log = logging.getLogger("mpptsim")


class NumericalFailure(MpptSimError):
    pass


def parse_seeds(text: str):
    """``"0-99"``, ``"1,5,7"`` or a mix such as ``"0-4,10"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                if lo < 0 or hi < lo:
                    raise ValueError
                seeds.extend(range(lo, hi + 1))
            else:
                seeds.append(int(part))
                if seeds[-1] < 0:
                    raise ValueError
        except ValueError:
            raise ConfigError(f"bad seed list element {part!r}") from None
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def _parsed(args):
    if args.scenario:
        return config.parse_file(args.scenario)
    return config.parse_text("[string]\nirradiance = 600 800 1000\n[sim]\nname = psc\n",
                             "<default>")


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")
    return path


def cmd_curve(args):
    pf = _parsed(args)
    specs = config.string_specs(pf)
    sched = config.schedule(pf, len(specs))
    pattern = sched[0][1]
    if args.irradiance:
        pattern = ShadingPattern(args.irradiance, pattern.temperature)
        if len(pattern) != len(specs):
            specs = (specs[0],) * len(pattern)
    out = _outdir(args.out)
    curve = string_curve(specs, pattern, args.samples,
                         v_bypass=pf.get("string", "v_bypass", 0.0))
    v_g, p_g = find_gmpp(curve)
    curve.to_csv(os.path.join(out, "curve.csv"))
    peaks = [{"voltage_V": float(v), "power_W": float(p),
              "global": bool(abs(p - p_g) <= 1e-9 * p_g)} for v, p in curve.peaks]
    summary = {"irradiances": list(pattern.irradiances),
               "temperature_K": pattern.temperature,
               "peak_count": len(peaks), "peaks": peaks,
               "gmpp_voltage_V": float(v_g), "gmpp_power_W": float(p_g),
               "v_oc_V": curve.v_oc}
    with open(os.path.join(out, "peaks.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"{len(peaks)} peak(s); GMPP {p_g:.2f} W at {v_g:.2f} V")
    for p in peaks:
        tag = "  (global)" if p["global"] else ""
        print(f"  {p['voltage_V']:8.3f} V  {p['power_W']:9.3f} W{tag}")
    return EXIT_OK


def _load_model(path):
    if not path:
        return None
    try:
        return ann.Mlp.load(path)
    except OSError:
        raise
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed network file ({exc})") from None


def cmd_run(args):
    pf = _parsed(args)
    sc = config.scenario(pf, controller=args.controller, seed=args.seed,
                         model=_load_model(args.model))
    if args.total_time is not None:
        sc = replace(sc, total_time=args.total_time)
    out = _outdir(args.out)
    ilog = IterationLog()
    t0 = time.perf_counter()
    tr, rep = harness.run(sc, backend=args.backend, iteration_log=ilog)
    log.info("simulated %.3g s in %.2f s wall", sc.total_time, time.perf_counter() - t0)
    tr.to_csv(os.path.join(out, "trace.csv"))
    rep.to_json(os.path.join(out, "metrics.json"))
    ilog.to_csv(os.path.join(out, "iterations.csv"))
    tc = "never" if rep.convergence_time is None else f"{rep.convergence_time:.4f} s"
    print(f"{sc.controller}: final {rep.final_power:.2f} W of {rep.gmpp_power:.2f} W, "
          f"converged {tc}, efficiency {rep.efficiency:.4f}")
    if rep.zone is not None:
        print(f"  zone [{rep.zone[0]:.2f}, {rep.zone[1]:.2f}] V, "
              f"final voltage {rep.final_voltage:.2f} V")
    return EXIT_OK


def cmd_batch(args):
    seeds = parse_seeds(args.seeds)
    controllers = args.controller.split(",") if args.controller else None
    if controllers:
        bad = [c for c in controllers if c not in harness.CONTROLLERS]
        if bad:
            raise ConfigError(f"unknown controller(s) {', '.join(bad)}; "
                              f"valid: {', '.join(harness.CONTROLLERS)}")
    model = _load_model(args.model)
    scenarios = []
    for path in args.scenario or [None]:
        pf = config.parse_file(path) if path else _parsed(args)
        group = [config.scenario(pf, controller=c, model=model)
                 for c in controllers or [pf.get("sim", "controller", "cs")]]
        horizon = args.total_time or pf.get("sim", "total_time")
        if horizon is None:
            # paired statistics compare runs over one common horizon
            horizon = max(sc.total_time for sc in group)
        scenarios.extend(replace(sc, total_time=horizon) for sc in group)
    out = _outdir(args.out)
    rows = harness.run_batch(scenarios, seeds, workers=args.workers, backend=args.backend)
    harness.write_summary(rows, os.path.join(out, "summary.csv"))
    stats = harness.paired_stats(rows)
    harness.write_stats(stats, os.path.join(out, "stats.csv"))
    for name, wins, total in stats:
        print(f"{name}: {wins}/{total}")
    failed = [r for r in rows if not r.ok]
    for r in failed:
        log.error("%s/%s seed %d failed: %s", r.scenario, r.controller, r.seed, r.error)
    if failed:
        raise NumericalFailure(f"{len(failed)} of {len(rows)} runs failed")
    return EXIT_OK


def cmd_train_ann(args):
    pf = _parsed(args)
    specs = config.string_specs(pf)
    a = pf.section("ann")
    if args.epochs is not None:
        a["epochs"] = args.epochs
    if args.seed is not None:
        a["seed"] = args.seed
    levels = a.get("levels", (200.0, 400.0, 600.0, 800.0, 1000.0))
    temp = pf.get("string", "temperature", 298.15)
    holdout = a.get("holdout", 0.2)
    if not 0.0 <= holdout < 1.0:
        raise ConfigError("[ann] holdout must lie in [0, 1)")
    epochs = a.get("epochs", 60000)
    if epochs < 0:
        raise ConfigError("[ann] epochs must be non-negative")
    seed = a.get("seed", 0)
    try:
        patterns = ann.irradiance_grid(levels, len(specs), temp)
    except ValueError as exc:
        raise ConfigError(f"[ann] {exc}") from None
    out = _outdir(args.out)
    data = ann.generate_zone_dataset(list(specs), patterns, a.get("half_width", 0.15))
    order = np.random.default_rng(seed).permutation(len(data))
    n_hold = int(round(holdout * len(data)))
    held = [data[k] for k in sorted(order[:n_hold])]
    train_set = [data[k] for k in sorted(order[n_hold:])]
    v_scale = string_curve(list(specs), ShadingPattern((1000.0,) * len(specs), temp)).v_oc
    net = ann.Mlp.init((len(specs), 10, 2), seed=seed, v_scale=v_scale)
    trained = epochs > 0
    if trained:
        net = ann.train(net, train_set, epochs, a.get("learning_rate", 0.3),
                        a.get("momentum", 0.9))
    model_path = os.path.join(out, "zone.mlp")
    net.save(model_path)
    with open(os.path.join(out, "dataset.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*(f"g{k + 1}" for k in range(len(specs))), "v_min", "v_max",
                    "v_gmpp", "split"])
        held_ids = set(order[:n_hold].tolist())
        for k, s in enumerate(data):
            w.writerow([*s.irradiances, f"{s.v_min:.6f}", f"{s.v_max:.6f}",
                        f"{s.v_gmpp:.6f}", "holdout" if k in held_ids else "train"])

    def within_5v(samples):
        if not samples:
            return None
        pred = net.predict_raw([s.irradiances for s in samples])
        lab = np.array([(s.v_min, s.v_max) for s in samples])
        return float(np.mean(np.max(np.abs(pred - lab), axis=1) < 5.0))

    report = {
        "trained": trained,
        "epochs": epochs,
        "samples": len(data),
        "train_samples": len(train_set),
        "holdout_samples": len(held),
        "train_mse": ann.mse(net, train_set),
        "holdout_mse": ann.mse(net, held) if held else None,
        "holdout_within_5V": within_5v(held),
        "train_within_5V": within_5v(train_set),
        "containment_rate": ann.containment_rate(net, data),
        "model": os.path.basename(model_path),
    }
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    if not trained:
        print("untrained network written (epochs = 0)")
    print(f"containment {report['containment_rate']:.3f}, held-out within 5 V "
          f"{report['holdout_within_5V']}, train MSE {report['train_mse']:.3g}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="mpptsim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("curve", help="I-V/P-V curve and peak summary")
    c.add_argument("--scenario", help="scenario/module file")
    c.add_argument("--out", required=True)
    c.add_argument("--samples", type=int, default=2000)
    c.add_argument("--irradiance", type=float, nargs="+", help="override the pattern")
    c.set_defaults(func=cmd_curve)

    r = sub.add_parser("run", help="one closed-loop simulation")
    r.add_argument("--scenario")
    r.add_argument("--out", required=True)
    r.add_argument("--controller", choices=harness.CONTROLLERS)
    r.add_argument("--seed", type=int)
    r.add_argument("--model", help="zone network for the hybrid controller")
    r.add_argument("--total-time", type=float)
    r.add_argument("--backend", choices=("cython", "python"))
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("batch", help="scenario x seed grid with paired statistics")
    b.add_argument("--scenario", action="append", help="repeatable")
    b.add_argument("--out", required=True)
    b.add_argument("--seeds", required=True, help="e.g. 0-99 or 1,2,3")
    b.add_argument("--controller", help="comma-separated, e.g. cs,pso,hybrid")
    b.add_argument("--model")
    b.add_argument("--total-time", type=float)
    b.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    b.add_argument("--backend", choices=("cython", "python"))
    b.set_defaults(func=cmd_batch)

    t = sub.add_parser("train-ann", help="train the zone-prediction network")
    t.add_argument("--scenario")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train_ann)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.ERROR if args.quiet else (logging.DEBUG if args.verbose > 1 else
                                              logging.INFO if args.verbose else logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"mpptsim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MpptSimError as exc:
        print(f"mpptsim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"mpptsim: filesystem error: {exc}", file=sys.stderr)
        return EXIT_FILESYSTEM


if __name__ == "__main__":
    sys.exit(main())
