"""Command-line front end: run | sweep | mc | solve-timing | plot.

Exit codes: 0 success, 2 config/usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

from .config import (
    ConfigError,
    RunConfig,
    build_initial_state,
    build_integrator,
    build_observables,
    build_protocol,
    build_trap,
    load_config,
    motion_kwargs,
    _PROTO_FIELDS,
    _SHARED_FIELDS,
)
from .lindblad import NumericsError
from .noise import MotionError, montecarlo
from .plotting import plot_mc, plot_series
from .protocols import TWO_PI, run, solve_mixing_timing
from .results import (
    fmt,
    read_csv_columns,
    summary_payload,
    write_mc_csv,
    write_mc_mean_csv,
    write_series_csv,
    write_summary_json,
    write_sweep_csv,
)


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "record", None) is not None:
        cfg = replace(cfg, output=replace(cfg.output, record=args.record))
    return cfg


def _out_path(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _single_run(cfg: RunConfig):
    p = build_protocol(cfg)
    rho0 = build_initial_state(cfg, p.basis)
    obs = build_observables(cfg, p.basis)
    return run(p, rho0, obs, record=cfg.output.record,
               cfg=build_integrator(cfg),
               propagator=cfg.integrator.propagator)


def cmd_run(args) -> int:
    cfg = _load(args)
    result = _single_run(cfg)
    base = cfg.output.basename
    csv_path = _out_path(args, f"{base}.csv")
    write_series_csv(csv_path, result)
    write_summary_json(_out_path(args, f"{base}.json"), cfg, result,
                       extra={"csv": os.path.basename(csv_path)})
    finals = "  ".join(f"{n}={result.final(n):.6f}" for n in result.observables)
    print(f"{result.protocol_name}: {finals}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    name = cfg.protocol.name
    numeric = [f for f in _SHARED_FIELDS + _PROTO_FIELDS[name]
               if f not in ("gaussian", "timing", "timing_labels", "n_atoms",
                            "cycles")]
    if args.param not in numeric:
        raise ConfigError(
            f"--param {args.param!r} is not a numeric parameter of "
            f"{name!r} (choose from {', '.join(numeric)})"
        )
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from exc
    if not values:
        raise ConfigError("--values: empty list")

    def one(v: float):
        c = replace(cfg, protocol=replace(cfg.protocol, **{args.param: v}))
        return v, _single_run(c)

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        runs = list(pool.map(one, values))

    base = cfg.output.basename
    csv_path = _out_path(args, f"{base}_sweep.csv")
    write_sweep_csv(csv_path, args.param, runs)
    payload = summary_payload(cfg, {
        "sweep_param": args.param,
        "sweep_values": values,
        "final": {fmt(v): {n: r.final(n) for n in r.observables}
                  for v, r in runs},
        "csv": os.path.basename(csv_path),
    })
    with open(_out_path(args, f"{base}_sweep.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for v, r in runs:
        first = next(iter(r.observables))
        print(f"{args.param}={fmt(v)}: {first}={r.final(first):.6f}")
    return 0


def cmd_mc(args) -> int:
    cfg = _load(args)
    if cfg.noise is None:
        raise ConfigError("mc needs a noise block in the config")
    noise = cfg.noise
    if args.trajectories is not None:
        noise = replace(noise, trajectories=args.trajectories)
    if args.temperature is not None:
        try:
            temps = [float(v) for v in args.temperature.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"--temperature: {exc}") from exc
        if not temps:
            raise ConfigError("--temperature: empty list")
    else:
        temps = [noise.temperature]

    p = build_protocol(cfg)
    rho0 = build_initial_state(cfg, p.basis)
    obs = build_observables(cfg, p.basis)
    observable = obs[f"P_{cfg.observable_names()[0]}"]
    trap = build_trap(noise)
    geometry = motion_kwargs(noise)

    runs = []
    for t_uk in temps:
        mc = montecarlo(p, rho0, observable, t_uk * 1e-6, trap,
                        noise.trajectories, cfg.seed,
                        cfg=build_integrator(cfg),
                        threads=max(1, args.threads), **geometry)
        runs.append((t_uk, mc))
        print(f"T={fmt(t_uk)} uK: mean={mc.mean_final:.6f} "
              f"std={mc.std_final:.6f} valid={mc.n_valid}/{mc.n_traj}")

    base = cfg.output.basename
    csv_path = _out_path(args, f"{base}_mc.csv")
    write_mc_csv(csv_path, runs)
    write_mc_mean_csv(_out_path(args, f"{base}_mc_mean.csv"), runs)
    payload = summary_payload(cfg, {
        "temperatures_uK": temps,
        "trajectories": noise.trajectories,
        "mean_final": {fmt(t): mc.mean_final for t, mc in runs},
        "csv": os.path.basename(csv_path),
    })
    with open(_out_path(args, f"{base}_mc.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_solve_timing(args) -> int:
    if args.omega <= 0:
        raise ConfigError("--omega must be positive (2pi*MHz)")
    sol = solve_mixing_timing(TWO_PI * args.omega)
    print(json.dumps({
        "omega_a_mhz": args.omega,
        "delta_mhz": sol.delta / TWO_PI,
        "t_us": sol.t,
        "k": sol.k, "l": sol.l, "j": sol.j,
        "residuals": list(sol.residuals),
    }, indent=2, sort_keys=True))
    return 0


def cmd_plot(args) -> int:
    try:
        columns = read_csv_columns(args.in_path)
        if args.panel == "mc":
            plot_mc(columns, args.out, title=args.title)
        else:
            plot_series(columns, args.out, title=args.title)
    except (ValueError, IndexError, OSError) as exc:
        raise ConfigError(f"{args.in_path}: {exc}") from exc
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="rydsim",
        description="Pulsed dissipative entanglement protocols on "
                    "Rydberg-blockaded atoms: run configs, sweeps, "
                    "thermal Monte Carlo, timing solver, SVG plots.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp, threads=False):
        sp.add_argument("--config", required=True, help="JSON config path")
        sp.add_argument("--out-dir", default=".", help="output directory")
        sp.add_argument("--seed", type=int, help="override config seed")
        sp.add_argument("--record", choices=("cycle", "segment"),
                        help="override record resolution")
        if threads:
            sp.add_argument("--threads", type=int, default=1,
                            help="parallel workers")

    sp = sub.add_parser("run", help="single protocol run")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="re-run over a parameter grid")
    common(sp, threads=True)
    sp.add_argument("--param", required=True, help="protocol field to sweep")
    sp.add_argument("--values", required=True,
                    help="comma-separated values (2pi*MHz / us)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("mc", help="thermal-motion Monte Carlo")
    common(sp, threads=True)
    sp.add_argument("--trajectories", type=int, help="override config count")
    sp.add_argument("--temperature",
                    help="comma-separated temperatures in uK")
    sp.set_defaults(func=cmd_mc)

    sp = sub.add_parser("solve-timing", help="mixing-pulse timing solution")
    sp.add_argument("--omega", type=float, required=True,
                    help="drive Rabi in 2pi*MHz")
    sp.set_defaults(func=cmd_solve_timing)

    sp = sub.add_parser("plot", help="render a result CSV to SVG")
    sp.add_argument("--in", dest="in_path", required=True, help="CSV path")
    sp.add_argument("--out", required=True, help="SVG path")
    sp.add_argument("--panel", choices=("series", "mc"), default="series")
    sp.add_argument("--title", default="population")
    sp.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, MotionError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
