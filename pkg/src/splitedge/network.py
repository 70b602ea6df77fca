"""Edge topology and the cycles/bytes -> seconds cost model.

Rounds are lock-step: every participating client finishes a phase before any
client enters the next one, so a round's latency is a sum of per-phase maxima.
Because uplink and downlink phases never overlap in time, each direction may
use the whole shared spectrum pool.
"""

from __future__ import annotations

import heapq
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .compression import CompressionSpec, payload_bytes
from .errors import InfeasibleError
from .nn import ModelProfile, bytes_of
from .records import (BROADCAST, FED, SERVER, ProtocolConfig, client_node, epsl_group,
                      label_bytes, n_batches, vanilla_visit_order)

TIERS = ("client", "edge", "fed", "cloud")
FIG_TOTAL_HZ = 70e6
FIG_SERVER_RATE = 7e9
FIG_CLOUD_RATE = 20e9
FIG_CLIENT_RATE = (0.1e9, 0.5e9)
DEFAULT_MEMORY = 1 << 40


@dataclass(frozen=True)
class NodeSpec:
    id: str
    tier: str
    compute_rate: float
    memory_bytes: int = DEFAULT_MEMORY

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ValueError(f"node {self.id}: tier must be one of {TIERS}")
        if not self.compute_rate > 0:
            raise ValueError(f"node {self.id}: compute_rate must be > 0")
        if not self.memory_bytes > 0:
            raise ValueError(f"node {self.id}: memory_bytes must be > 0")


@dataclass(frozen=True)
class LinkSpec:
    src: str
    dst: str
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"link {self.src}->{self.dst}: rate must be > 0")


@dataclass
class Topology:
    nodes: dict
    links: dict = field(default_factory=dict)
    total_bandwidth_hz: float | None = None
    spectral_efficiency: float = 1.0

    @classmethod
    def build(cls, nodes, links=(), total_bandwidth_hz=None, spectral_efficiency=1.0):
        node_map = {}
        for n in nodes:
            if n.id in node_map:
                raise ValueError(f"duplicate node id {n.id!r}")
            node_map[n.id] = n
        link_map = {}
        for link in links:
            for end in (link.src, link.dst):
                if end not in node_map:
                    raise ValueError(f"link {link.src}->{link.dst} references unknown node {end!r}")
            link_map[(link.src, link.dst)] = link
        if total_bandwidth_hz is not None and not total_bandwidth_hz > 0:
            raise ValueError("total_bandwidth_hz must be > 0")
        if not spectral_efficiency > 0:
            raise ValueError("spectral_efficiency must be > 0")
        return cls(node_map, link_map, total_bandwidth_hz, spectral_efficiency)

    def tier(self, tier: str) -> list[str]:
        return [n.id for n in self.nodes.values() if n.tier == tier]

    @property
    def client_ids(self) -> list[str]:
        return self.tier("client")

    def rate(self, node: str) -> float:
        return self.nodes[node].compute_rate

    def has_link(self, src, dst) -> bool:
        return (src, dst) in self.links

    def link_rate(self, src: str, dst: str, alloc: "Allocation | None" = None) -> float:
        """bits/s from ``src`` to ``dst``: an explicit link, else the client's spectrum share."""
        if (src, dst) in self.links:
            return self.links[(src, dst)].rate
        if self.total_bandwidth_hz is None:
            raise KeyError(f"no link {src}->{dst} and no shared spectrum pool")
        eff = self.spectral_efficiency
        src_client = src in self.nodes and self.nodes[src].tier == "client"
        dst_client = dst in self.nodes and self.nodes[dst].tier == "client"
        if src_client and not dst_client:
            hz = alloc.uplink_hz[src] if alloc else self.total_bandwidth_hz
            return hz * eff
        if dst_client and not src_client:
            hz = alloc.downlink_hz[dst] if alloc else self.total_bandwidth_hz
            return hz * eff
        raise KeyError(f"no link {src}->{dst}")

    def graph(self):
        import networkx as nx
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        for (s, d), link in self.links.items():
            g.add_edge(s, d, rate=link.rate)
        return g


@dataclass
class Allocation:
    """Per-client spectrum (Hz, each direction) and server compute fraction."""
    uplink_hz: dict
    downlink_hz: dict
    server_share: dict

    @classmethod
    def static_equal(cls, topology: Topology, clients=None) -> "Allocation":
        clients = list(clients if clients is not None else topology.client_ids)
        m = len(clients)
        pool = topology.total_bandwidth_hz or 0.0
        return cls({c: pool / m for c in clients}, {c: pool / m for c in clients},
                   {c: 1.0 / m for c in clients})

    def check(self, topology: Topology, tol: float = 1e-9) -> None:
        for name, d in (("uplink_hz", self.uplink_hz), ("downlink_hz", self.downlink_hz),
                        ("server_share", self.server_share)):
            for c, v in d.items():
                if not v >= 0 or math.isnan(v):
                    raise InfeasibleError(f"{name}[{c}] is negative or NaN")
        pool = topology.total_bandwidth_hz
        if pool is not None and math.isfinite(pool):
            for name, d in (("uplink_hz", self.uplink_hz), ("downlink_hz", self.downlink_hz)):
                if sum(d.values()) > pool * (1 + tol):
                    raise InfeasibleError(f"{name} sums to {sum(d.values()):.6g} Hz > pool {pool:.6g} Hz")
        if sum(self.server_share.values()) > 1 + tol:
            raise InfeasibleError(f"server shares sum to {sum(self.server_share.values()):.6g} > 1")


def phase_latency(work: float, rate: float, unit: str = "cycles") -> float:
    """Seconds to process ``work`` cycles (or move ``work`` bytes) at ``rate``."""
    if not rate > 0:
        raise ValueError("resource rate must be > 0")
    if work == 0:
        return 0.0
    if unit == "cycles":
        return work / rate
    if unit == "bytes":
        return work * 8.0 / rate
    raise ValueError(f"unit must be 'cycles' or 'bytes', got {unit!r}")


def _xfer(nbytes: float, rate: float) -> float:
    if nbytes == 0:
        return 0.0
    return phase_latency(nbytes, rate, "bytes")


def _compute(cycles: float, rate: float) -> float:
    if cycles == 0:
        return 0.0
    return phase_latency(cycles, rate, "cycles")


def default_topology(M: int, seed: int = 0, total_hz: float = FIG_TOTAL_HZ,
                     server_rate: float = FIG_SERVER_RATE, fed: bool = True) -> Topology:
    """M clients with compute drawn from U[0.1, 0.5] Gcycles/s, one edge server."""
    rng = np.random.default_rng([int(seed), 0xC11E])
    lo, hi = FIG_CLIENT_RATE
    nodes = [NodeSpec(client_node(m), "client", float(rng.uniform(lo, hi))) for m in range(M)]
    nodes.append(NodeSpec(SERVER, "edge", server_rate))
    if fed:
        nodes.append(NodeSpec(FED, "fed", server_rate))
    return Topology.build(nodes, (), total_hz, 1.0)


def memory_required(profile: ModelProfile, start: int, stop: int, batch: int, bits: int = 32) -> int:
    """Resident parameter bytes plus the activation cache kept for backward."""
    return bytes_of(profile.param_count(start, stop), bits) + bytes_of(batch * profile.cache_values(start, stop), 32)


# --------------------------------------------------------------------------- step loads

@dataclass(frozen=True)
class StepLoad:
    """One client's work for one global batch step of a two-segment SL protocol."""
    client_fwd: float
    up_bytes: int
    server_fwd: float
    server_bwd: float
    down_bytes: int
    client_bwd: float


def sl_step_load(profile: ModelProfile, cut: int, batch: int, spec: CompressionSpec | None = None,
                 with_labels: bool = True) -> StepLoad:
    spec = spec or CompressionSpec()
    shape = (batch,) + profile.cut_shape(cut)
    v, meta = payload_bytes(shape, spec)
    up = v + meta + (label_bytes(batch) if with_labels else 0)
    down = 0 if cut == 0 else v + meta
    L = profile.L
    return StepLoad(batch * profile.fwd_cycles(0, cut), up,
                    batch * profile.fwd_cycles(cut, L), batch * profile.bwd_cycles(cut, L),
                    down, batch * profile.bwd_cycles(0, cut))


@dataclass
class LatencyBreakdown:
    total: float
    phases: dict
    per_client: dict
    steps: int = 0

    def as_row(self) -> dict:
        row = {"latency_s": self.total}
        row.update({f"t_{k}": v for k, v in self.phases.items()})
        return row


def _shards_to_ids(shards) -> dict:
    return {int(k): int(v) for k, v in shards.items()}


def round_latency(cfg: ProtocolConfig, profile: ModelProfile, topology: Topology,
                  allocation: Allocation | None, shards: dict, spec: CompressionSpec | None = None,
                  round_index: int = 0) -> LatencyBreakdown:
    """Latency of one training round under the lock-step phase model.

    ``shards`` maps client index -> local sample count; the client node for
    index m is ``client{m}``.
    """
    spec = spec or CompressionSpec()
    shards = _shards_to_ids(shards)
    if allocation is None:
        allocation = Allocation.static_equal(topology, [client_node(m) for m in sorted(shards)])
    allocation.check(topology)
    kind = cfg.kind
    if kind == "fedavg":
        return _fedavg_latency(cfg, profile, topology, allocation, shards, spec)
    if kind == "vanilla_sl":
        return _vanilla_latency(cfg, profile, topology, shards, spec, round_index)
    if kind == "ushaped":
        return _ushaped_latency(cfg, profile, topology, allocation, shards, spec)
    if kind == "async_psl":
        return _async_latency(cfg, profile, topology, allocation, shards, spec)
    return _parallel_latency(cfg, profile, topology, allocation, shards, spec, round_index)


def _parallel_latency(cfg, profile, topo, alloc, shards, spec, round_index):
    B = cfg.batch_size
    F = topo.rate(SERVER)
    load = sl_step_load(profile, cfg.cut, B, spec)
    ids = sorted(shards)
    nb = {m: n_batches(shards[m], B) for m in ids}
    phi = cfg.epsl_phi if cfg.kind == "epsl" else 0.0
    phases = {"client_fwd_up": 0.0, "server": 0.0, "down_client_bwd": 0.0, "sync": 0.0}
    per = {m: {"client_fwd_up": 0.0, "server": 0.0, "down_client_bwd": 0.0, "sync": 0.0} for m in ids}
    steps = max(nb.values(), default=0)
    for s in range(steps):
        part = [m for m in ids if nb[m] > s]
        group = set(epsl_group(part, phi, cfg.seed, round_index)) if phi > 0 else set()
        up, srv, down = {}, {}, {}
        for m in part:
            c = client_node(m)
            f = topo.rate(c)
            up[m] = _compute(load.client_fwd, f) + _xfer(load.up_bytes, topo.link_rate(c, SERVER, alloc))
            share = alloc.server_share[c]
            if m in group:
                srv[m] = _compute(load.server_fwd, share * F)
            else:
                srv[m] = _compute(load.server_fwd + load.server_bwd, share * F)
            if m not in group:
                down[m] = _xfer(load.down_bytes, topo.link_rate(SERVER, c, alloc)) + _compute(load.client_bwd, f)
        if group:
            gshare = sum(alloc.server_share[client_node(m)] for m in group)
            g_fwd_done = max(srv[m] for m in group)
            g_bwd = _compute(load.server_bwd, gshare * F)
            bcast = _xfer(load.down_bytes, _broadcast_rate(topo, alloc, group))
            for m in group:
                srv[m] = g_fwd_done + g_bwd
                down[m] = bcast + _compute(load.client_bwd, topo.rate(client_node(m)))
        phases["client_fwd_up"] += max(up.values())
        phases["server"] += max(srv.values())
        phases["down_client_bwd"] += max(down.values())
        for m in part:
            per[m]["client_fwd_up"] += up[m]
            per[m]["server"] += srv[m]
            per[m]["down_client_bwd"] += down[m]
    if cfg.kind == "sfl" and (round_index + 1) % cfg.sfl_avg_period == 0:
        t = _model_sync_time(profile, cfg.cut, topo, alloc, ids, spec, FED)
        phases["sync"] += t["total"]
        for m in ids:
            per[m]["sync"] = t[m]
    return _finish(phases, per, steps)


def _broadcast_rate(topo, alloc, group) -> float:
    nodes = [client_node(m) for m in group]
    if all(topo.has_link(SERVER, c) for c in nodes):
        return min(topo.link_rate(SERVER, c) for c in nodes)
    return sum(alloc.downlink_hz[c] for c in nodes) * topo.spectral_efficiency


def _model_sync_time(profile, cut, topo, alloc, ids, spec, hub):
    bits = spec.weight_bits_for("client")
    v = bytes_of(profile.param_count(0, cut), bits)
    meta = 8 * sum(1 for layer in profile.layers[:cut] for _ in layer.param_shapes) if bits < 32 else 0
    up = {m: _xfer(v + meta, topo.link_rate(client_node(m), hub, alloc)) for m in ids}
    down = {m: _xfer(v + meta, topo.link_rate(hub, client_node(m), alloc)) for m in ids}
    out = {m: up[m] + down[m] for m in ids}
    out["total"] = max(up.values()) + max(down.values())
    return out


def _finish(phases, per, steps) -> LatencyBreakdown:
    for d in per.values():
        d["path"] = sum(v for k, v in d.items() if k != "path")
    return LatencyBreakdown(sum(phases.values()), phases, per, steps)


def _fedavg_latency(cfg, profile, topo, alloc, shards, spec):
    B = cfg.batch_size
    ids = sorted(shards)
    L = profile.L
    bits = spec.weight_bits_for("client")
    v = bytes_of(profile.param_count(), bits)
    meta = 8 * sum(len(layer.param_shapes) for layer in profile.layers) if bits < 32 else 0
    per = {}
    local, down = {}, {}
    for m in ids:
        c = client_node(m)
        cycles = n_batches(shards[m], B) * B * (profile.fwd_cycles(0, L) + profile.bwd_cycles(0, L))
        local[m] = _compute(cycles, topo.rate(c)) + _xfer(v + meta, topo.link_rate(c, SERVER, alloc))
        down[m] = _xfer(v + meta, topo.link_rate(SERVER, c, alloc))
        per[m] = {"client_fwd_up": local[m], "server": 0.0, "down_client_bwd": down[m], "sync": 0.0}
    phases = {"client_fwd_up": max(local.values()), "server": 0.0,
              "down_client_bwd": max(down.values()), "sync": 0.0}
    return _finish(phases, per, 1)


def _vanilla_latency(cfg, profile, topo, shards, spec, round_index):
    """Sequential SL: the active client gets the whole pool and the whole server."""
    B = cfg.batch_size
    F = topo.rate(SERVER)
    load = sl_step_load(profile, cfg.cut, B, spec)
    order = vanilla_visit_order(shards, cfg.seed)
    phases = {"client_fwd_up": 0.0, "server": 0.0, "down_client_bwd": 0.0, "sync": 0.0}
    per = {m: {"client_fwd_up": 0.0, "server": 0.0, "down_client_bwd": 0.0, "sync": 0.0} for m in shards}
    bits = spec.weight_bits_for("client")
    relay = bytes_of(profile.param_count(0, cfg.cut), bits)
    relay += 8 * sum(len(layer.param_shapes) for layer in profile.layers[:cfg.cut]) if bits < 32 else 0
    steps = 0
    for k, m in enumerate(order):
        c = client_node(m)
        f = topo.rate(c)
        if k > 0 or (round_index > 0 and len(order) > 1):
            prev = client_node(order[k - 1])
            t = _xfer(relay, topo.link_rate(prev, SERVER)) + _xfer(relay, topo.link_rate(SERVER, c))
            phases["sync"] += t
            per[m]["sync"] += t
        nb = n_batches(shards[m], B)
        steps += nb
        up = _compute(load.client_fwd, f) + _xfer(load.up_bytes, topo.link_rate(c, SERVER))
        srv = _compute(load.server_fwd + load.server_bwd, F)
        down = _xfer(load.down_bytes, topo.link_rate(SERVER, c)) + _compute(load.client_bwd, f)
        for key, val in (("client_fwd_up", up), ("server", srv), ("down_client_bwd", down)):
            phases[key] += nb * val
            per[m][key] += nb * val
    return _finish(phases, per, steps)


def ushaped_step_loads(profile, cut, cut2, batch, spec):
    shape1 = (batch,) + profile.cut_shape(cut)
    shape2 = (batch,) + profile.cut_shape(cut2)
    b1 = sum(payload_bytes(shape1, spec))
    b2 = sum(payload_bytes(shape2, spec))
    L = profile.L
    return {
        "head_fwd": batch * profile.fwd_cycles(0, cut),
        "up1": b1,
        "mid_fwd": batch * profile.fwd_cycles(cut, cut2),
        "down1": b2,
        "tail": batch * (profile.fwd_cycles(cut2, L) + profile.bwd_cycles(cut2, L)),
        "up2": b2,
        "mid_bwd": batch * profile.bwd_cycles(cut, cut2),
        "down2": b1,
        "head_bwd": batch * profile.bwd_cycles(0, cut),
    }


def _ushaped_latency(cfg, profile, topo, alloc, shards, spec):
    B = cfg.batch_size
    F = topo.rate(SERVER)
    ld = ushaped_step_loads(profile, cfg.cut, cfg.cut2, B, spec)
    ids = sorted(shards)
    nb = {m: n_batches(shards[m], B) for m in ids}
    names = ("head_fwd_up", "server_fwd", "tail", "server_bwd", "down_head_bwd")
    phases = {k: 0.0 for k in names}
    per = {m: {k: 0.0 for k in names} for m in ids}
    steps = max(nb.values(), default=0)
    for s in range(steps):
        part = [m for m in ids if nb[m] > s]
        times = {}
        for m in part:
            c = client_node(m)
            f = topo.rate(c)
            up = topo.link_rate(c, SERVER, alloc)
            dn = topo.link_rate(SERVER, c, alloc)
            sF = alloc.server_share[c] * F
            times[m] = {
                "head_fwd_up": _compute(ld["head_fwd"], f) + _xfer(ld["up1"], up),
                "server_fwd": _compute(ld["mid_fwd"], sF),
                "tail": _xfer(ld["down1"], dn) + _compute(ld["tail"], f) + _xfer(ld["up2"], up),
                "server_bwd": _compute(ld["mid_bwd"], sF),
                "down_head_bwd": _xfer(ld["down2"], dn) + _compute(ld["head_bwd"], f),
            }
        for k in names:
            phases[k] += max(times[m][k] for m in part)
            for m in part:
                per[m][k] += times[m][k]
    return _finish(phases, per, steps)


# --------------------------------------------------------------------------- async

def async_client_times(cfg, profile, topo, alloc, ids, spec) -> tuple[dict, dict]:
    """(dispatch->arrival, flush->client-done) seconds per client index."""
    load = sl_step_load(profile, cfg.cut, cfg.batch_size, spec)
    F = topo.rate(SERVER)
    a, r = {}, {}
    for m in ids:
        c = client_node(m)
        f = topo.rate(c)
        a[m] = _compute(load.client_fwd, f) + _xfer(load.up_bytes, topo.link_rate(c, SERVER, alloc))
        r[m] = (_compute(load.server_fwd + load.server_bwd, alloc.server_share[c] * F)
                + _xfer(load.down_bytes, topo.link_rate(SERVER, c, alloc))
                + _compute(load.client_bwd, f))
    return a, r


@dataclass(frozen=True)
class AsyncEvent:
    kind: str          # dispatch | arrive | flush | return
    time: float
    clients: tuple
    version: int


def async_timeline(arrive_after: dict, return_after: dict, budget: int, quorum: int) -> list[AsyncEvent]:
    """Event order for one asynchronous PSL round.

    Clients dispatch a batch, arrive at the server ``arrive_after[m]`` later and
    wait in the pending buffer. Whenever ``quorum`` contributions are pending
    (or no further contribution can arrive) the server applies them as one
    update; each flushed client gets its gradient back ``return_after[m]`` later
    and immediately dispatches again while the round's dispatch budget lasts.
    Ties in time resolve arrivals before returns, then by client id.
    """
    ids = sorted(arrive_after)
    events: list[AsyncEvent] = []
    heap: list = []
    version = 0
    dispatched = 0
    in_flight = 0
    returning = 0
    pending: list = []

    def dispatch(m, t):
        nonlocal dispatched, in_flight
        if dispatched >= budget:
            return
        dispatched += 1
        in_flight += 1
        events.append(AsyncEvent("dispatch", t, (m,), version))
        heapq.heappush(heap, (t + arrive_after[m], 0, m))

    def maybe_flush(t):
        nonlocal version, pending, returning
        if not pending:
            return
        potential = in_flight + min(returning, budget - dispatched)
        if len(pending) >= quorum or potential == 0:
            batch = tuple(sorted(pending))
            events.append(AsyncEvent("flush", t, batch, version))
            version += 1
            for m in batch:
                returning += 1
                heapq.heappush(heap, (t + return_after[m], 1, m))
            pending = []

    for m in ids:
        dispatch(m, 0.0)
    while heap:
        t, prio, m = heapq.heappop(heap)
        if prio == 0:
            in_flight -= 1
            events.append(AsyncEvent("arrive", t, (m,), version))
            pending.append(m)
        else:
            returning -= 1
            events.append(AsyncEvent("return", t, (m,), version))
            dispatch(m, t)
        maybe_flush(t)
    return events


def _async_latency(cfg, profile, topo, alloc, shards, spec):
    ids = sorted(shards)
    a, r = async_client_times(cfg, profile, topo, alloc, ids, spec)
    budget = sum(n_batches(shards[m], cfg.batch_size) for m in ids)
    events = async_timeline(a, r, budget, cfg.quorum(len(ids)))
    end = max((e.time for e in events), default=0.0)
    per = {m: {"busy": 0.0} for m in ids}
    for e in events:
        if e.kind == "dispatch":
            per[e.clients[0]]["busy"] += a[e.clients[0]] + r[e.clients[0]]
    return _finish({"async": end}, per, budget)


# --------------------------------------------------------------------------- volumes

def comm_volume(cfg: ProtocolConfig, profile: ModelProfile, shards: dict,
                spec: CompressionSpec | None = None, round_index: int = 0,
                include_meta: bool = False, topology: Topology | None = None,
                allocation: Allocation | None = None) -> Counter:
    """Closed-form bytes per (src, dst, payload kind) for one round.

    ``shards`` maps client index -> sample count; M = len(shards). Async PSL
    needs ``topology`` because its per-client message counts follow the event
    schedule.
    """
    spec = spec or CompressionSpec()
    shards = _shards_to_ids(shards)
    ids = sorted(shards)
    B = cfg.batch_size
    out: Counter = Counter()

    def add(src, dst, kind, value, meta, count=1):
        out[(src, dst, kind)] += count * (value + (meta if include_meta else 0))

    if cfg.kind == "fedavg":
        bits = spec.weight_bits_for("client")
        v = bytes_of(profile.param_count(), bits)
        meta = 8 * sum(len(layer.param_shapes) for layer in profile.layers) if bits < 32 else 0
        for m in ids:
            add(client_node(m), SERVER, "client_model", v, meta)
            add(SERVER, client_node(m), "server_model", v, meta)
        return out

    if cfg.kind == "ushaped":
        v1, m1 = payload_bytes((B,) + profile.cut_shape(cfg.cut), spec)
        v2, m2 = payload_bytes((B,) + profile.cut_shape(cfg.cut2), spec)
        for m in ids:
            nb = n_batches(shards[m], B)
            c = client_node(m)
            add(c, SERVER, "activation", v1, m1, nb)
            add(SERVER, c, "activation", v2, m2, nb)
            add(c, SERVER, "grad", v2, m2, nb)
            add(SERVER, c, "grad", v1, m1, nb)
        return out

    va, ma = payload_bytes((B,) + profile.cut_shape(cfg.cut), spec)
    lab = label_bytes(B)
    counts = {m: n_batches(shards[m], B) for m in ids}
    if cfg.kind == "async_psl":
        if topology is None:
            raise ValueError("async_psl volumes need a topology")
        alloc = allocation or Allocation.static_equal(topology, [client_node(m) for m in ids])
        a, r = async_client_times(cfg, profile, topology, alloc, ids, spec)
        events = async_timeline(a, r, sum(counts.values()), cfg.quorum(len(ids)))
        counts = Counter(e.clients[0] for e in events if e.kind == "dispatch")
    for m in ids:
        c = client_node(m)
        add(c, SERVER, "activation", va, ma, counts[m])
        add(c, SERVER, "label", lab, 0, counts[m])

    if cfg.kind == "epsl" and cfg.epsl_phi > 0 and cfg.cut > 0:
        for s in range(max(counts.values(), default=0)):
            part = [m for m in ids if counts[m] > s]
            group = set(epsl_group(part, cfg.epsl_phi, cfg.seed, round_index))
            if group:
                add(SERVER, BROADCAST, "grad", va, ma)
            for m in part:
                if m not in group:
                    add(SERVER, client_node(m), "grad", va, ma)
    elif cfg.cut > 0:
        for m in ids:
            add(SERVER, client_node(m), "grad", va, ma, counts[m])

    bits = spec.weight_bits_for("client")
    cv = bytes_of(profile.param_count(0, cfg.cut), bits)
    cmeta = 8 * sum(len(layer.param_shapes) for layer in profile.layers[:cfg.cut]) if bits < 32 else 0
    if cfg.kind == "vanilla_sl":
        order = vanilla_visit_order(ids, cfg.seed)
        hops = list(zip(order, order[1:]))
        if round_index > 0 and len(order) > 1:
            hops.insert(0, (order[-1], order[0]))
        for src, dst in hops:
            add(client_node(src), client_node(dst), "client_model", cv, cmeta)
    if cfg.kind == "sfl" and (round_index + 1) % cfg.sfl_avg_period == 0:
        for m in ids:
            add(client_node(m), FED, "client_model", cv, cmeta)
            add(FED, client_node(m), "client_model", cv, cmeta)
    return out
