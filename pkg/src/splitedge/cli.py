"""Command line entry point: ``splitedge {train,latency,plan,plot,sweep}``.

Exit codes: 0 ok, 1 runtime error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import sys
from pathlib import Path

from .config import RunConfig, load_config_file
from .errors import ConfigError, SplitEdgeError
from .experiment import (LATENCY_COLUMNS, csv_text, latency_table, plan_run, prepare, read_csv, run_training,
                         training_files, write_outputs)
from . import plotting

SWEEP_COLUMNS = ["run", "protocol", "clients", "seed", "final_accuracy", "total_latency_s", "total_bytes", "dir"]


def _load(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config_file(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig | None) -> Path:
    if args.out:
        return Path(args.out)
    return Path(cfg.output.dir if cfg else "plots")


def cmd_train(args) -> int:
    cfg = _load(args)
    result = run_training(cfg, prepare(cfg))
    paths = write_outputs(_out_dir(args, cfg), training_files(result))
    s = result.summary
    print(f"{s['run']}: {s['rounds']} rounds, accuracy {s['final_accuracy']:.4f}, "
          f"latency {s['total_latency_s']:.4g}s, {s['total_bytes']} bytes")
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_latency(args) -> int:
    cfg = _load(args)
    rows = latency_table(cfg)
    out = _out_dir(args, cfg)
    paths = write_outputs(out, {"latency.csv": csv_text(rows, LATENCY_COLUMNS)})
    paths.append(plotting.plot_latency_vs_size(rows, out / "latency_vs_size.png"))
    largest = max(r["dataset_size"] for r in rows)
    for r in rows:
        if r["dataset_size"] == largest:
            print(f"{r['architecture']:>16}: cuts ({r['cut1']}, {r['cut2']}) total {r['total_latency_s']:.6g}s")
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_plan(args) -> int:
    cfg = _load(args)
    doc, rows, columns = plan_run(cfg)
    paths = write_outputs(_out_dir(args, cfg), {
        "plan.json": json.dumps(doc, indent=2, sort_keys=True) + "\n",
        "plan_report.csv": csv_text(rows, columns),
    })
    print(f"planner {doc['planner']}: " + ", ".join(f"{s['node']}[{s['start']},{s['stop']})"
                                                   for s in doc["plan"]["segments"]))
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_plot(args) -> int:
    if not args.trace:
        raise ConfigError("plot needs at least one --trace CSV")
    traces = {}
    for path in args.trace:
        rows = read_csv(path)
        if not rows:
            raise ValueError(f"trace {path} has no rows")
        name = str(rows[0]["run"])
        if name in traces:
            name = f"{name} ({Path(path).parent.name})"
        traces[name] = rows
    out = _out_dir(args, None)
    paths = [plotting.plot_accuracy(traces, out / "accuracy.png"),
             plotting.plot_latency_bars(traces, out / "latency_bars.png")]
    if len({r[0]["clients"] for r in traces.values()}) > 1:
        paths.append(plotting.plot_bytes_vs_clients(traces, out / "bytes_vs_clients.png"))
    for p in paths:
        print(f"wrote {p}")
    return 0


def sweep_cells(cfg: RunConfig) -> list[RunConfig]:
    sw = cfg.sweep
    protocols = sw.protocols or [cfg.protocol.kind]
    clients = sw.clients or [cfg.dataset.clients]
    seeds = sw.seeds or [cfg.seed]
    phis = sw.epsl_phi or [cfg.protocol.epsl_phi]
    cells, seen = [], set()
    for kind, M, seed, phi in itertools.product(protocols, clients, seeds, phis):
        phi = phi if kind == "epsl" else cfg.protocol.epsl_phi
        if (kind, M, seed, phi) in seen:
            continue
        seen.add((kind, M, seed, phi))
        cell = dataclasses.replace(cfg, protocol=dataclasses.replace(cfg.protocol, kind=kind, epsl_phi=phi),
                                   dataset=dataclasses.replace(cfg.dataset, clients=int(M)),
                                   output=dataclasses.replace(cfg.output, label=None))
        cells.append(cell.with_seed(seed))
    return cells


def cmd_sweep(args) -> int:
    cfg = _load(args)
    cells = sweep_cells(cfg)
    prepared = [prepare(c) for c in cells]      # validate every cell before running any
    out = _out_dir(args, cfg)
    summaries, traces, files = [], {}, {}
    for cell, prep in zip(cells, prepared):
        result = run_training(cell, prep)
        name = f"{cell.label}_M{cell.dataset.clients}_s{cell.seed}"
        for fname, content in training_files(result).items():
            files[f"{name}/{fname}"] = content
        summaries.append(dict(result.summary, dir=name))
        traces[name] = result.rows
        print(f"{name}: accuracy {result.summary['final_accuracy']:.4f}")
    files["sweep.csv"] = csv_text(summaries, SWEEP_COLUMNS)
    write_outputs(out, files)
    plotting.plot_accuracy(traces, out / "accuracy.png")
    plotting.plot_latency_bars(traces, out / "latency_bars.png")
    if len({c.dataset.clients for c in cells}) > 1:
        plotting.plot_bytes_vs_clients(traces, out / "bytes_vs_clients.png")
    print(f"wrote {len(cells)} runs under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitedge", description="Split learning simulator for edge networks.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "run the configured protocol and write trace.csv, messages.csv, summary.json",
        "latency": "compare user-edge-cloud, user-edge and user-cloud latency over dataset sizes",
        "plan": "run the configured planner and write plan.json plus a report",
        "plot": "render figures from one or more trace.csv files",
        "sweep": "train every (protocol, clients, seed) cell of the sweep section",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (default: output.dir)")
        if name == "plot":
            p.add_argument("--trace", nargs="+", help="trace.csv files")
    return parser


COMMANDS = {"train": cmd_train, "latency": cmd_latency, "plan": cmd_plan, "plot": cmd_plot, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SplitEdgeError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
