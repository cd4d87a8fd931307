"""Command-line orchestration.

Subcommands: ``greens`` (build the Green's-function cache), ``shuttle``
(single run), ``sweep`` (Cartesian parameter sweeps with resume),
``levels`` (instantaneous eigenlevel diagram) and ``compare``
(projection vs split-operator benchmark). Exit codes: 0 success,
1 runtime failure, 2 usage or config error. ``SHUTTLESIM_CACHE``
overrides the Green's cache directory.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed

import numpy as np

from . import analysis, evolution, scenario as scn, storage
from .electrostatics import compute_greens
from .storage import ConfigError, ScenarioConfig, load_config


def _add_common(p):
    p.add_argument("--config", metavar="PATH", default=None,
                   help="scenario TOML file (defaults apply when omitted)")
    p.add_argument("--out", metavar="DIR", default=None,
                   help="output directory (default: outputs.directory)")
    p.add_argument("--seed", type=int, default=None,
                   help="override evolver.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shuttlesim",
        description="Conveyor-belt electron shuttling simulator for SiMOS "
                    "quantum-dot devices.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("greens", help="precompute gate/defect Green's functions")
    _add_common(p)

    p = sub.add_parser("shuttle", help="run one shuttle and write a result table")
    _add_common(p)
    p.add_argument("--evolver", choices=("split", "projection"), default=None)
    p.add_argument("--snapshot-times", default="",
                   help="comma-separated times in ps for wavefunction snapshots")

    p = sub.add_parser("sweep", help="run the configured parameter sweep")
    _add_common(p)
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("levels", help="tabulate instantaneous eigenenergies")
    _add_common(p)
    p.add_argument("--levels", type=int, default=10)
    p.add_argument("--samples", type=int, default=64)

    p = sub.add_parser("compare", help="benchmark projection vs split-operator")
    _add_common(p)
    p.add_argument("--tolerance", type=float, default=5e-3,
                   help="max allowed population deviation")
    return parser


def _load(args) -> ScenarioConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_value("evolver.seed", args.seed)
    return config


def _out_dir(args, config) -> str:
    out = args.out if args.out else config["outputs.directory"]
    os.makedirs(out, exist_ok=True)
    return out


def cmd_greens(args) -> int:
    config = _load(args)
    cache = storage.default_cache_dir(config)
    gi = scn.greens_inputs(config)
    cached = storage.greens_cache_lookup(gi.content_hash, cache)
    if cached is not None:
        print(f"cache hit {gi.content_hash[:16]}: 0 solves "
              f"({len(cached.gate_ids)} gates, {len(cached.defect_sites)} "
              f"defects cached)")
        return 0
    gset = compute_greens(gi.layout, gi.quantum, gi.defect_sites, gi.solver,
                          gi.pad_y, gi.pad_z, cache_dir=cache,
                          progress=lambda s: print(s, flush=True))
    n = len(gset.gate_ids) + len(gset.defect_sites)
    print(f"{n} Green's solves ({len(gset.gate_ids)} electrodes, "
          f"{len(gset.defect_sites)} defects) cached under "
          f"{os.path.join(cache, gset.content_hash[:16])}...")
    return 0


def cmd_shuttle(args) -> int:
    config = _load(args)
    if args.evolver is not None:
        config = config.with_value("evolver.kind", args.evolver)
    out = _out_dir(args, config)
    cache = storage.default_cache_dir(config)
    s = scn.build_scenario(config, cache_dir=cache,
                           progress=lambda m: print(m, file=sys.stderr))
    snap_times = [float(v) for v in args.snapshot_times.split(",") if v.strip()]
    snaps = config["outputs.snapshot_times"] + snap_times

    def snapshot(t, psi):
        storage.write_field(os.path.join(out, f"psi_t{t:012.4f}.qsf"), psi)

    result = evolution.run_shuttle(
        s, evolver=config["evolver.kind"], checkpoint_dir=out,
        snapshot_times=snaps, snapshot_cb=snapshot if snaps else None,
        progress=lambda m: print(m, file=sys.stderr, flush=True))
    storage.write_result_csv(os.path.join(out, "result.csv"), result)
    print(f"final fidelity F={result.final_fidelity:.6f} "
          f"(1-F={1 - result.final_fidelity:.3e}), "
          f"P_L={result.final_loss:.3e}, "
          f"max leaked norm={result.max_leaked:.3e}")
    return 0


def _sweep_points(config: ScenarioConfig):
    axes = config["sweep.axes"]
    keys = sorted(axes.keys())
    values = [axes[k] for k in keys]
    points = list(itertools.product(*values)) if keys else [()]
    return keys, points


def _sweep_worker(payload):
    idx, base_data, assignments, out_dir, cache = payload
    config = storage.config_from_dict(base_data)
    for key, value in assignments:
        config = config.with_value(key, value)
    config = config.with_value("evolver.seed", config["evolver.seed"] ^ idx)
    point_dir = os.path.join(out_dir, f"point_{idx:04d}")
    os.makedirs(point_dir, exist_ok=True)
    s = scn.build_scenario(config, cache_dir=cache)
    result = evolution.run_shuttle(s, evolver=config["evolver.kind"])
    storage.write_result_csv(os.path.join(point_dir, "result.csv"), result)
    return idx, result.final_fidelity, result.final_loss, result.max_leaked


def cmd_sweep(args) -> int:
    config = _load(args)
    out = _out_dir(args, config)
    cache = storage.default_cache_dir(config)
    workers = args.workers if args.workers else config["sweep.workers"]
    keys, points = _sweep_points(config)
    print(f"sweep over {keys or '(no axes)'}: {len(points)} points")

    summary_path = os.path.join(out, "summary.csv")
    done = {}
    if os.path.exists(summary_path):
        with open(summary_path) as f:
            for row in csv.DictReader(f):
                if not row.get("error"):
                    done[int(row["point"])] = row
    header = ["point"] + keys + ["F_final", "P_L_final", "max_leaked", "error"]
    new_file = not os.path.exists(summary_path)
    failures = 0

    # greens are shared by all points that use the same geometry; build the
    # base set up-front so workers start from a warm cache
    try:
        scn_inputs = scn.greens_inputs(config)
        compute_greens(scn_inputs.layout, scn_inputs.quantum,
                       scn_inputs.defect_sites, scn_inputs.solver,
                       scn_inputs.pad_y, scn_inputs.pad_z, cache_dir=cache)
    except ConfigError:
        raise
    except Exception as exc:  # geometry axes may change it per point
        print(f"note: base Green's precompute skipped ({exc})", file=sys.stderr)

    with open(summary_path, "a", newline="") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(header)
            f.flush()
        payloads = []
        for idx, point in enumerate(points):
            if idx in done:
                continue
            assignments = list(zip(keys, point))
            payloads.append((idx, config.data, assignments, out, cache))
        if workers <= 1:
            for idx, row, err in map(_sweep_worker_safe, payloads):
                failures += _write_row(writer, f, idx, points[idx], row, err)
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futs = {pool.submit(_sweep_worker_safe, p): p[0]
                        for p in payloads}
                for fut in as_completed(futs):
                    idx, row, err = fut.result()
                    failures += _write_row(writer, f, idx, points[idx], row, err)
    print(f"sweep complete: {len(payloads) - failures} ran, "
          f"{len(done)} skipped (already finalized), {failures} failed")
    return 1 if failures else 0


def _sweep_worker_safe(payload):
    idx = payload[0]
    try:
        idx, fid, loss, leak = _sweep_worker(payload)
        return idx, (fid, loss, leak), None
    except Exception as exc:
        return idx, None, f"{type(exc).__name__}: {exc}"


def _write_row(writer, f, idx, point, row, err):
    values = [str(idx)] + [storage._fmt(v) if isinstance(v, float) else str(v)
                           for v in point]
    if err is None:
        fid, loss, leak = row
        values += [storage._fmt(fid), storage._fmt(loss), storage._fmt(leak), ""]
        failed = 0
    else:
        values += ["", "", "", err]
        failed = 1
    writer.writerow(values)
    f.flush()
    return failed


def cmd_levels(args) -> int:
    config = _load(args)
    out = _out_dir(args, config)
    cache = storage.default_cache_dir(config)
    s = scn.build_scenario(config, cache_dir=cache)
    times, energies = analysis.level_diagram(
        s, n_levels=args.levels, n_samples=args.samples,
        progress=lambda m: print(m, file=sys.stderr, flush=True))
    path = os.path.join(out, "levels.csv")
    lines = [f"# levels={args.levels}",
             ",".join(["t_ps"] + [f"e{i}_meV" for i in range(args.levels)])]
    for t, row in zip(times, energies):
        lines.append(",".join(storage._fmt(v) for v in [t, *row]))
    storage._atomic_write(path, ("\n".join(lines) + "\n").encode())
    print(f"wrote {path} ({len(times)} samples x {args.levels} levels)")
    return 0


def cmd_compare(args) -> int:
    config = _load(args)
    cache = storage.default_cache_dir(config)
    s = scn.build_scenario(config, cache_dir=cache)
    report = evolution.compare_evolvers(s)
    print(json.dumps({
        "max_population_dev": report.max_population_dev,
        "rms_population_dev": report.rms_population_dev,
        "projection_wall_s": report.projection_wall_s,
        "split_wall_s": report.split_wall_s,
        "wall_ratio_split_over_projection": report.wall_ratio,
    }, indent=1))
    if report.max_population_dev > args.tolerance:
        print(f"FAIL: deviation {report.max_population_dev:.3e} exceeds "
              f"tolerance {args.tolerance:.3e}", file=sys.stderr)
        return 1
    return 0


_COMMANDS = {
    "greens": cmd_greens,
    "shuttle": cmd_shuttle,
    "sweep": cmd_sweep,
    "levels": cmd_levels,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure contract: exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
