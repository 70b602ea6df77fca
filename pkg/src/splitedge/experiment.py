"""Experiment orchestration: build a run from a config, execute it, persist it."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as datasets
from .compression import CompressionSpec, payload_bytes
from .config import RunConfig, line_of
from .errors import ConfigError, InfeasibleError, ShapeError
from .network import (Allocation, LinkSpec, NodeSpec, Topology, comm_volume, default_topology,
                      round_latency)
from .nn import ModelProfile, accuracy, build_profile, cnn_profile, init_segment, mlp_profile, split_segment
from .planning import (SplitPlan, allocate_minmax, chain_nodes, chain3_topology, hierarchical_step_latency,
                       plan_hierarchical, route_multihop, select_split_layer, workloads_for_cut)
from .protocols import ClientState, local_epoch, run_round
from .records import SERVER, client_node, n_batches, batch_order

TRACE_SCHEMA = 1
PHASES = ("client_fwd_up", "server", "down_client_bwd", "sync", "head_fwd_up", "server_fwd",
          "tail", "server_bwd", "down_head_bwd", "async")
TRACE_COLUMNS = (
    ["round", "run", "protocol", "clients", "steps", "train_loss", "eval_accuracy", "latency_s"]
    + [f"t_{p}" for p in PHASES]
    + ["bytes_activation_up", "bytes_activation_down", "bytes_grad_up", "bytes_grad_down",
       "bytes_label", "bytes_model", "bytes_meta", "bytes_total",
       "server_bwd_cycles", "server_backward_passes", "staleness_max", "staleness_mean"]
)
MESSAGE_COLUMNS = ["round", "src", "dst", "kind", "messages", "bytes", "meta_bytes"]
LATENCY_COLUMNS = ["dataset_size", "architecture", "cut1", "cut2", "steps_per_round", "step_latency_s",
                   "round_latency_s", "rounds_to_target", "total_latency_s", "smashed_bytes_per_round",
                   "t_client_up", "t_edge_fwd", "t_edge_cloud", "t_cloud", "t_cloud_edge", "t_edge_bwd",
                   "t_client_down"]


def _config_error(cfg: RunConfig, msg: str, key: tuple) -> ConfigError:
    return ConfigError(msg, line_of(cfg.lines, key), cfg.source)


# --------------------------------------------------------------------------- building blocks

def shrinking_profile(dim: int, hidden: int, classes: int) -> ModelProfile:
    """Wide early layers feeding a narrow waist, then heavy narrow-input layers."""
    return build_profile((dim,), [
        {"kind": "dense", "units": 16 * hidden},
        {"kind": "relu"},
        {"kind": "dense", "units": max(2, hidden // 2)},
        {"kind": "dense", "units": 64 * hidden},
        {"kind": "relu"},
        {"kind": "dense", "units": 64 * hidden},
        {"kind": "relu"},
        {"kind": "softmax-head", "units": classes},
    ])


def make_profile(cfg: RunConfig) -> ModelProfile:
    m, d = cfg.model, cfg.dataset
    try:
        if m.preset == "mlp":
            return mlp_profile(d.dim, m.hidden, d.classes)
        if m.preset == "cnn":
            return cnn_profile(m.side, m.channels, d.classes)
        if m.preset == "shrinking":
            return shrinking_profile(d.dim, m.hidden, d.classes)
        prof = build_profile(tuple(m.input_shape or (d.dim,)), m.layers)
    except (ShapeError, ValueError, TypeError) as exc:
        raise _config_error(cfg, f"model: {exc}", ("model", "layers")) from None
    if int(np.prod(prof.input_shape)) != d.dim:
        raise _config_error(cfg, f"model input {prof.input_shape} does not hold dataset.dim={d.dim} values",
                            ("model", "input_shape"))
    if prof.cut_size(prof.L) != d.classes:
        raise _config_error(cfg, f"model emits {prof.cut_size(prof.L)} logits but dataset has {d.classes} classes",
                            ("model", "layers"))
    return prof


def make_topology(cfg: RunConfig) -> Topology:
    t, M = cfg.topology, cfg.dataset.clients
    try:
        if t.preset == "explicit":
            nodes = [NodeSpec(**n) for n in t.nodes]
            links = [LinkSpec(**link) for link in (t.links or [])]
            return Topology.build(nodes, links, t.total_hz, t.spectral_efficiency)
        if t.preset == "chain3":
            topo = chain3_topology(M, cfg.seed, t.total_hz, t.server_rate, t.cloud_rate, t.edge_cloud_ratio)
        else:
            topo = default_topology(M, cfg.seed, t.total_hz, t.server_rate)
        nodes = dict(topo.nodes)
        if t.client_rates is not None:
            for m, rate in enumerate(t.client_rates):
                nodes[client_node(m)] = NodeSpec(client_node(m), "client", float(rate))
        return Topology.build(nodes.values(), topo.links.values(), t.total_hz, t.spectral_efficiency)
    except (ValueError, TypeError) as exc:
        raise _config_error(cfg, f"topology: {exc}", ("topology",)) from None


def make_dataset(cfg: RunConfig):
    d = cfg.dataset
    if d.kind == "moons":
        x, y = datasets.make_two_moons(d.n, d.noise, cfg.seed)
    else:
        x, y = datasets.make_blobs(d.n, d.classes, d.dim, d.noise, cfg.seed, d.separation)
    return datasets.train_test_split(x, y, d.test_fraction, cfg.seed)


def make_shards(cfg: RunConfig, x, y):
    d = cfg.dataset
    B = cfg.protocol.batch_size
    try:
        if d.beta is None:
            parts = datasets.partition_iid(len(x), d.clients, cfg.seed)
        else:
            parts = datasets.partition_dirichlet(y, d.clients, d.beta, cfg.seed, d.min_size or B)
    except ValueError as exc:
        raise _config_error(cfg, f"dataset: {exc}", ("dataset",)) from None
    for m, idx in enumerate(parts):
        if len(idx) < B:
            raise _config_error(cfg, f"client {m} holds {len(idx)} samples, fewer than one batch of {B}",
                                ("protocol", "batch_size"))
    return [(x[idx], y[idx]) for idx in parts]


def load_plan_file(cfg: RunConfig) -> dict:
    try:
        doc = json.loads(Path(cfg.plan.file).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise _config_error(cfg, f"cannot read plan file {cfg.plan.file}: {exc}", ("plan", "file")) from None
    if doc.get("planner") != "split":
        raise _config_error(cfg, f"plan file from the {doc.get('planner')!r} planner cannot drive training",
                            ("plan", "file"))
    return doc


def make_allocation(cfg: RunConfig, profile, topo, spec, plan_doc=None) -> Allocation:
    a = cfg.allocation
    clients = topo.client_ids
    if plan_doc is not None and plan_doc.get("allocation"):
        pa = plan_doc["allocation"]
        alloc = Allocation(pa["uplink_hz"], pa["downlink_hz"], pa["server_share"])
    elif a.mode == "explicit":
        alloc = Allocation({k: float(v) for k, v in a.uplink_hz.items()},
                           {k: float(v) for k, v in a.downlink_hz.items()},
                           {k: float(v) for k, v in a.server_share.items()})
    elif a.mode == "minmax":
        if topo.total_bandwidth_hz is None:
            raise _config_error(cfg, "minmax allocation needs topology.total_hz", ("allocation", "mode"))
        wl = workloads_for_cut(profile, cfg.protocol.cut, topo, cfg.protocol.batch_size, clients, spec)
        alloc = allocate_minmax(wl, topo.total_bandwidth_hz, topo.rate(SERVER), topo.spectral_efficiency).allocation
    else:
        alloc = Allocation.static_equal(topo, clients)
    missing = [c for c in clients
               if c not in alloc.uplink_hz or c not in alloc.downlink_hz or c not in alloc.server_share]
    if missing:
        raise _config_error(cfg, f"allocation misses clients {missing}", ("allocation",))
    try:
        alloc.check(topo)
    except InfeasibleError as exc:
        raise _config_error(cfg, f"allocation: {exc}", ("allocation",)) from None
    return alloc


@dataclass
class Prepared:
    cfg: RunConfig
    profile: ModelProfile
    topology: Topology
    allocation: Allocation
    spec: CompressionSpec
    clients: list
    server: object
    test: tuple
    shards: dict


def prepare(cfg: RunConfig) -> Prepared:
    """Build every object a run needs; raises ConfigError before any work happens."""
    profile = make_profile(cfg)
    plan_doc = load_plan_file(cfg) if cfg.plan.file else None
    if plan_doc is not None:
        cfg = dataclasses.replace(cfg, protocol=dataclasses.replace(cfg.protocol, cut=int(plan_doc["cut"])))
        if plan_doc["plan"]["L"] != profile.L:
            raise _config_error(cfg, f"plan is for L={plan_doc['plan']['L']} layers, model has {profile.L}",
                                ("plan", "file"))
    proto = cfg.protocol
    try:
        proto.validate(profile.L, cfg.dataset.clients)
    except ConfigError as exc:
        msg = str(exc)
        field = next((f for f in ("cut2", "cut", "async_quorum") if f in msg), None)
        raise _config_error(cfg, msg, ("protocol", field) if field else ("protocol",)) from None
    topo = make_topology(cfg)
    if SERVER not in topo.nodes:
        raise _config_error(cfg, f"topology needs a node named {SERVER!r}", ("topology",))
    missing = [client_node(m) for m in range(cfg.dataset.clients) if client_node(m) not in topo.nodes]
    if missing:
        raise _config_error(cfg, f"topology lacks client nodes {missing}", ("topology",))
    spec = cfg.compression
    alloc = make_allocation(cfg, profile, topo, spec, plan_doc)
    (xtr, ytr), (xte, yte) = make_dataset(cfg)
    shape = profile.input_shape
    xtr = xtr.reshape((-1,) + shape)
    xte = xte.reshape((-1,) + shape)
    shards = make_shards(cfg, xtr, ytr)

    L = profile.L
    full = init_segment(profile, 0, L, cfg.seed)
    if proto.kind == "fedavg":
        client_segs, server = (full,), full
    elif proto.kind == "ushaped":
        head, rest = split_segment(full, proto.cut)
        mid, tail = split_segment(rest, proto.cut2)
        client_segs, server = (head, tail), mid
    else:
        head, server = split_segment(full, proto.cut)
        client_segs = (head,)
    clients = [ClientState(m, x, y, client_segs, proto.batch_size, client_seed(cfg.seed, m))
               for m, (x, y) in enumerate(shards)]
    return Prepared(cfg, profile, topo, alloc, spec, clients, server, (xte, yte),
                    {m: len(x) for m, (x, _) in enumerate(shards)})


def client_seed(seed: int, m: int) -> int:
    return int(seed) * 1_000_003 + m


def evaluate(prep_kind: str, clients, server, x, y) -> float:
    if prep_kind == "fedavg":
        return accuracy([server], x, y)
    accs = []
    for c in clients:
        segs = [c.segments[0], server, c.segments[1]] if prep_kind == "ushaped" else [c.seg, server]
        accs.append(accuracy(segs, x, y))
    return float(np.mean(accs))


# --------------------------------------------------------------------------- training

@dataclass
class RunResult:
    rows: list
    messages: list
    summary: dict
    clients: list
    server: object
    traces: list


def _trace_row(label, M, trace, lat) -> dict:
    row = {"round": trace.round, "run": label, "protocol": trace.protocol, "clients": M, "steps": lat.steps,
           "train_loss": trace.train_loss, "eval_accuracy": trace.eval_accuracy, "latency_s": lat.total}
    for p in PHASES:
        row[f"t_{p}"] = lat.phases.get(p, 0.0)
    b = Counter()
    for msg in trace.messages:
        up = msg.src.startswith("client")
        if msg.kind in ("activation", "grad"):
            b[f"bytes_{msg.kind}_{'up' if up else 'down'}"] += msg.bytes
        elif msg.kind == "label":
            b["bytes_label"] += msg.bytes
        else:
            b["bytes_model"] += msg.bytes
        b["bytes_meta"] += msg.meta_bytes
    for k in ("bytes_activation_up", "bytes_activation_down", "bytes_grad_up", "bytes_grad_down",
              "bytes_label", "bytes_model", "bytes_meta"):
        row[k] = b[k]
    row["bytes_total"] = trace.total_bytes(include_meta=True)
    row["server_bwd_cycles"] = trace.server_bwd_cycles
    row["server_backward_passes"] = trace.server_backward_passes
    stale = [s for v in trace.staleness.values() for s in v]
    row["staleness_max"] = max(stale) if stale else 0
    row["staleness_mean"] = float(np.mean(stale)) if stale else 0.0
    return row


def run_training(cfg: RunConfig, prep: Prepared | None = None) -> RunResult:
    prep = prep or prepare(cfg)
    cfg = prep.cfg
    proto = cfg.protocol
    clients, server = prep.clients, prep.server
    xte, yte = prep.test
    rows, messages, traces = [], [], []
    for r in range(proto.rounds):
        clients, server, trace = run_round(proto, clients, server, r, prep.spec, prep.topology, prep.allocation)
        trace.eval_accuracy = evaluate(proto.kind, clients, server, xte, yte)
        trace.latency = round_latency(proto, prep.profile, prep.topology, prep.allocation, prep.shards, prep.spec, r)
        traces.append(trace)
        rows.append(_trace_row(cfg.label, len(clients), trace, trace.latency))
        grouped: dict = {}
        for msg in trace.messages:
            g = grouped.setdefault((msg.src, msg.dst, msg.kind), [0, 0, 0])
            g[0] += 1
            g[1] += msg.bytes
            g[2] += msg.meta_bytes
        for (src, dst, kind), (n, nb, meta) in sorted(grouped.items()):
            messages.append({"round": r, "src": src, "dst": dst, "kind": kind, "messages": n,
                             "bytes": nb, "meta_bytes": meta})
    summary = {
        "schema": TRACE_SCHEMA,
        "run": cfg.label,
        "protocol": proto.kind,
        "seed": cfg.seed,
        "clients": len(clients),
        "cut": proto.cut,
        "rounds": proto.rounds,
        "final_accuracy": rows[-1]["eval_accuracy"] if rows else float("nan"),
        "total_latency_s": float(sum(r["latency_s"] for r in rows)),
        "total_bytes": int(sum(r["bytes_total"] for r in rows)),
    }
    return RunResult(rows, messages, summary, clients, server, traces)


def centralized_accuracy(cfg: RunConfig) -> float:
    """Plain SGD on the pooled training shards, same epochs, batch size and step size."""
    prep = prepare(cfg)
    x = np.concatenate([c.x for c in prep.clients])
    y = np.concatenate([c.y for c in prep.clients])
    seg = init_segment(prep.profile, 0, prep.profile.L, cfg.seed)
    B = cfg.protocol.batch_size
    for r in range(cfg.protocol.rounds):
        batches = ((x[i], y[i]) for i in batch_order(len(x), B, cfg.seed, r))
        seg, _ = local_epoch(seg, batches, cfg.protocol.lr)
    return accuracy([seg], *prep.test)


# --------------------------------------------------------------------------- persistence

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def csv_text(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row[k]) for k in columns})
    return buf.getvalue()


def write_outputs(out_dir, files: dict) -> list[Path]:
    """Write all files at once, after every computation has succeeded."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, content in files.items():
        p = out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, bytes):
            p.write_bytes(content)
        else:
            p.write_text(content, encoding="utf-8")
        paths.append(p)
    return paths


def training_files(result: RunResult) -> dict:
    return {
        "trace.csv": csv_text(result.rows, TRACE_COLUMNS),
        "messages.csv": csv_text(result.messages, MESSAGE_COLUMNS),
        "summary.json": json.dumps(result.summary, indent=2, sort_keys=True) + "\n",
    }


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k, v in row.items():
            try:
                row[k] = int(v)
            except (TypeError, ValueError):
                try:
                    row[k] = float(v)
                except (TypeError, ValueError):
                    pass
    return rows


# --------------------------------------------------------------------------- latency across architectures

def rounds_to_target(cfg: RunConfig) -> int:
    lat = cfg.latency
    if lat.trace is None:
        if lat.rounds_to_target is None:
            raise _config_error(cfg, "latency needs rounds_to_target or a trace with accuracy_target", ("latency",))
        return int(lat.rounds_to_target)
    if lat.accuracy_target is None:
        raise _config_error(cfg, "latency.trace needs latency.accuracy_target", ("latency", "trace"))
    try:
        rows = read_csv(lat.trace)
    except OSError as exc:
        raise _config_error(cfg, f"cannot read trace: {exc}", ("latency", "trace")) from None
    for row in rows:
        if row["eval_accuracy"] >= lat.accuracy_target:
            return int(row["round"]) + 1
    raise InfeasibleError(f"trace {lat.trace} never reaches accuracy {lat.accuracy_target}")


def _smashed_bytes(profile, c1, c2, B, spec) -> int:
    """Activation + gradient bytes per client and step across the used cuts."""
    def hop(cut):
        v, meta = payload_bytes((B,) + profile.cut_shape(cut), spec)
        return (v + meta) * (2 if cut > 0 else 1)
    return hop(c1) + (hop(c2) if c2 < profile.L else 0)


def latency_table(cfg: RunConfig) -> list[dict]:
    profile = make_profile(cfg)
    topo = make_topology(cfg)
    try:
        clients, edge, cloud = chain_nodes(topo)
    except ValueError as exc:
        raise _config_error(cfg, str(exc), ("topology",)) from None
    rtt = rounds_to_target(cfg)
    B = cfg.protocol.batch_size
    spec = cfg.compression
    h = plan_hierarchical(profile, topo, B, spec)
    archs = [("user-edge-cloud", (h.cut1, h.cut2)), ("user-edge", h.user_edge[:2]), ("user-cloud", h.user_cloud[:2])]
    M = len(clients)
    rows = []
    for size in cfg.latency.dataset_sizes:
        steps = n_batches(size // M, B)
        for name, (c1, c2) in archs:
            step, parts = hierarchical_step_latency(profile, topo, c1, c2, B, spec)
            row = {"dataset_size": size, "architecture": name, "cut1": c1, "cut2": c2,
                   "steps_per_round": steps, "step_latency_s": step, "round_latency_s": steps * step,
                   "rounds_to_target": rtt, "total_latency_s": rtt * steps * step,
                   "smashed_bytes_per_round": steps * M * _smashed_bytes(profile, c1, c2, B, spec)}
            for k, v in parts.items():
                row[f"t_{k}"] = v
            rows.append(row)
    return rows


# --------------------------------------------------------------------------- planning

def plan_run(cfg: RunConfig) -> tuple[dict, list[dict], list[str]]:
    """Run the configured planner. Returns (plan document, report rows, report columns)."""
    profile = make_profile(cfg)
    topo = make_topology(cfg)
    B = cfg.protocol.batch_size
    spec = cfg.compression
    L = profile.L
    planner = cfg.plan.planner
    if planner == "split":
        if topo.total_bandwidth_hz is None or SERVER not in topo.nodes:
            raise _config_error(cfg, "split planning needs a shared spectrum pool and a 'server' node",
                                ("topology",))
        choice = select_split_layer(profile, topo, B, None, spec)
        plan = SplitPlan([("client", 0, choice.cut), (SERVER, choice.cut, L)], L)
        proto = dataclasses.replace(cfg.protocol, cut=choice.cut)
        (xtr, ytr), _ = make_dataset(cfg)
        shards = {m: len(x) for m, (x, _) in enumerate(make_shards(cfg, xtr, ytr))}
        pred = None
        if proto.kind not in ("fedavg", "ushaped"):
            lat = round_latency(proto, profile, topo, choice.allocation, shards, spec, 0)
            vol = comm_volume(proto, profile, shards, spec, 0, include_meta=True, topology=topo,
                              allocation=choice.allocation)
            pred = {"round_latency_s": lat.total, "phases": lat.phases,
                    "bytes_per_round": int(sum(vol.values())),
                    "bytes_by_link": [{"src": s, "dst": d, "kind": k, "bytes": int(v)}
                                      for (s, d, k), v in sorted(vol.items())]}
        doc = {"planner": "split", "cut": choice.cut, "plan": plan.to_dict(),
               "step_latency_s": choice.T, "protocol": proto.kind,
               "allocation": {"uplink_hz": choice.allocation.uplink_hz,
                              "downlink_hz": choice.allocation.downlink_hz,
                              "server_share": choice.allocation.server_share},
               "predicted": pred}
        rows = [{"cut": c, "step_latency_s": t, "chosen": int(c == choice.cut)} for c, t in sorted(choice.per_cut.items())]
        return doc, rows, ["cut", "step_latency_s", "chosen"]
    if planner == "hierarchical":
        try:
            clients, edge, cloud = chain_nodes(topo)
        except ValueError as exc:
            raise _config_error(cfg, str(exc), ("topology",)) from None
        h = plan_hierarchical(profile, topo, B, spec)
        plan = h.plan("client", edge, cloud, L)
        doc = {"planner": "hierarchical", "cut1": h.cut1, "cut2": h.cut2, "plan": plan.to_dict(),
               "step_latency_s": h.step_latency, "breakdown": h.breakdown,
               "user_edge": list(h.user_edge), "user_cloud": list(h.user_cloud)}
        rows = [{"cut1": a, "cut2": b, "step_latency_s": t, "chosen": int((a, b) == (h.cut1, h.cut2))}
                for (a, b), t in sorted(h.table.items())]
        return doc, rows, ["cut1", "cut2", "step_latency_s", "chosen"]
    for node in [cfg.plan.source, *cfg.plan.destinations]:
        if node not in topo.nodes:
            raise _config_error(cfg, f"unknown node {node!r} in plan section", ("plan",))
    route = route_multihop(profile, topo, cfg.plan.source, cfg.plan.destinations, B)
    doc = {"planner": "multihop", "path": route.path, "cost_s": route.cost, "plan": route.plan.to_dict()}
    rows = [{"node": n, "start": a, "stop": b} for n, a, b in route.plan.segments]
    return doc, rows, ["node", "start", "stop"]
