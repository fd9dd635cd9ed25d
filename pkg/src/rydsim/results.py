"""Flat-file result writers: CSV for series, JSON for metadata.

Every float is written with 12 significant digits, every CSV starts with a
header row, and nothing here embeds timestamps, so identical (config, seed)
pairs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math

from . import __version__
from .config import RunConfig, config_hash, resolved_dict
from .noise import MonteCarloResult
from .protocols import RunResult


def fmt(x: float) -> str:
    """12-significant-digit decimal form; empty for NaN."""
    if isinstance(x, float) and math.isnan(x):
        return ""
    return f"{x:.12g}"


def write_series_csv(path: str, result: RunResult) -> None:
    """One row per record: time, cycle, segment label, observables, trace."""
    names = list(result.observables)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_us", "cycle", "label"] + names + ["trace_error"])
        for i in range(len(result.times)):
            row = [fmt(result.times[i]), result.cycle_index[i], result.labels[i]]
            row += [fmt(result.observables[n][i]) for n in names]
            row.append(fmt(result.trace_errors[i]))
            w.writerow(row)


def write_sweep_csv(path: str, param: str, runs: list[tuple[float, RunResult]]) -> None:
    """Concatenated series keyed by the swept parameter's value."""
    if not runs:
        raise ValueError("no runs to write")
    names = list(runs[0][1].observables)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([param, "time_us", "cycle", "label"] + names + ["trace_error"])
        for value, result in runs:
            for i in range(len(result.times)):
                row = [fmt(value), fmt(result.times[i]),
                       result.cycle_index[i], result.labels[i]]
                row += [fmt(result.observables[n][i]) for n in names]
                row.append(fmt(result.trace_errors[i]))
                w.writerow(row)


def write_mc_csv(path: str, runs: list[tuple[float, MonteCarloResult]]) -> None:
    """Per-trajectory final populations; failed trajectories leave the
    value empty and carry the failure text."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["temperature_uK", "trajectory", "final_population", "error"])
        for temp, mc in runs:
            errors = dict(mc.failures)
            for k, final in enumerate(mc.finals):
                w.writerow([fmt(temp), k, fmt(final), errors.get(k, "")])


def write_mc_mean_csv(path: str, runs: list[tuple[float, MonteCarloResult]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["temperature_uK", "mean_final", "std_final", "n_valid", "n_traj"])
        for temp, mc in runs:
            w.writerow([fmt(temp), fmt(mc.mean_final), fmt(mc.std_final),
                        mc.n_valid, mc.n_traj])


def summary_payload(cfg: RunConfig, extra: dict | None = None) -> dict:
    """Common metadata block: the exact config, its hash, versions, seed."""
    payload = {
        "config": resolved_dict(cfg),
        "config_sha256": config_hash(cfg),
        "rydsim_version": __version__,
        "seed": cfg.seed,
    }
    if extra:
        payload.update(extra)
    return payload


def write_summary_json(path: str, cfg: RunConfig, result: RunResult,
                       extra: dict | None = None) -> None:
    payload = summary_payload(cfg, {
        "protocol": result.protocol_name,
        "backend": result.backend,
        "routes": list(result.routes),
        "final": {n: result.final(n) for n in result.observables},
        "trace_error_max": max(result.trace_errors) if result.trace_errors else 0.0,
    })
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_csv_columns(path: str) -> dict[str, list[str]]:
    """Header-keyed raw columns (strings; callers convert)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    return {name: [row[i] for row in body] for i, name in enumerate(header)}
