"""Planners: resource allocation, split selection, client selection, routing.

Latency figures here are per global batch step under the lock-step model of
:mod:`splitedge.network`; multiply by the number of steps for a round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from .compression import CompressionSpec, payload_bytes
from .errors import InfeasibleError
from .network import Allocation, Topology, memory_required, sl_step_load
from .nn import ModelProfile, bytes_of
from .records import SERVER, label_bytes


@dataclass
class SplitPlan:
    """Contiguous layer ranges ``[start, stop)`` assigned to nodes, in data-flow order."""
    segments: list
    L: int

    def __post_init__(self):
        self.segments = [(str(n), int(a), int(b)) for n, a, b in self.segments]
        pos = 0
        for node, a, b in self.segments:
            if a != pos or b < a:
                raise ValueError(f"segment {node}:[{a},{b}) breaks the contiguous cover of 0..{self.L}")
            pos = b
        if pos != self.L:
            raise ValueError(f"plan covers layers up to {pos}, model has {self.L}")

    @property
    def cuts(self) -> list[int]:
        return [b for _, _, b in self.segments[:-1]]

    @property
    def path(self) -> list[str]:
        return [n for n, _, _ in self.segments]

    def to_dict(self) -> dict:
        return {"L": self.L, "segments": [{"node": n, "start": a, "stop": b} for n, a, b in self.segments]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls([(s["node"], s["start"], s["stop"]) for s in d["segments"]], int(d["L"]))


# --------------------------------------------------------------------------- min-max allocation

@dataclass(frozen=True)
class ClientWorkload:
    """One client's per-step work: local compute (s) around two transfers and server cycles."""
    node: str
    pre_local: float       # seconds before the uplink (client forward)
    up_bits: float
    server_cycles: float
    down_bits: float
    post_local: float      # seconds after the downlink (client backward)


def workloads_for_cut(profile: ModelProfile, cut: int, topology: Topology, batch: int,
                      clients: Sequence[str] | None = None, spec=None) -> list[ClientWorkload]:
    load = sl_step_load(profile, cut, batch, spec)
    out = []
    for c in clients if clients is not None else topology.client_ids:
        f = topology.rate(c)
        out.append(ClientWorkload(c, load.client_fwd / f, 8.0 * load.up_bytes,
                                  load.server_fwd + load.server_bwd, 8.0 * load.down_bytes,
                                  load.client_bwd / f))
    return out


@dataclass
class MinMaxResult:
    allocation: Allocation
    T: float
    phase_T: dict
    client_T: dict


def _phase_requirement(T, local, work, scale):
    if work == 0:
        return 0.0 if T >= local else math.inf
    if T <= local:
        return math.inf
    return work / (scale * (T - local))


def _minmax_phase(locals_, works, pool, scale, rel_tol):
    """Smallest T with sum_m work_m / (scale * (T - local_m)) <= pool, and the shares."""
    n = len(works)
    lo = max(locals_, default=0.0)
    if all(w == 0 for w in works):
        return lo, [0.0] * n
    if math.isinf(pool):
        return lo, [math.inf if w > 0 else 0.0 for w in works]
    # equal split is feasible, so its time bounds the optimum
    hi = max(l + (w / (scale * pool / n) if w else 0.0) for l, w in zip(locals_, works))

    def need(T):
        return sum(_phase_requirement(T, l, w, scale) for l, w in zip(locals_, works))

    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if need(mid) <= pool:
            hi = mid
        else:
            lo = mid
    shares = [_phase_requirement(hi, l, w, scale) for l, w in zip(locals_, works)]
    total = sum(shares)
    if total > pool:          # guard against rounding at the boundary
        shares = [s * pool / total for s in shares]
    return hi, shares


def allocate_minmax(workloads: Sequence[ClientWorkload], total_hz: float, server_rate: float,
                    spectral_efficiency: float = 1.0, deadline: float | None = None,
                    rel_tol: float = 1e-9) -> MinMaxResult:
    """Minimise the lock-step step time max(up) + max(server) + max(down).

    Phases never overlap, so each is an independent min-max problem: bisection
    on the phase target T, with each client's minimal share at T in closed form.
    """
    if not total_hz > 0 or not server_rate > 0:
        raise ValueError("pools must be > 0")
    nodes = [w.node for w in workloads]
    t_up, up = _minmax_phase([w.pre_local for w in workloads], [w.up_bits for w in workloads],
                             total_hz, spectral_efficiency, rel_tol)
    t_srv, srv = _minmax_phase([0.0] * len(workloads), [w.server_cycles for w in workloads],
                               1.0, server_rate, rel_tol)
    t_down, down = _minmax_phase([w.post_local for w in workloads], [w.down_bits for w in workloads],
                                 total_hz, spectral_efficiency, rel_tol)
    alloc = Allocation(dict(zip(nodes, up)), dict(zip(nodes, down)), dict(zip(nodes, srv)))
    T = t_up + t_srv + t_down
    client_T = {w.node: client_step_time(w, alloc, server_rate, spectral_efficiency) for w in workloads}
    if deadline is not None and T > deadline:
        solo = {w.node: client_step_time(w, Allocation({w.node: total_hz}, {w.node: total_hz}, {w.node: 1.0}),
                                         server_rate, spectral_efficiency) for w in workloads}
        worst = max(solo, key=lambda k: (solo[k], k))
        raise InfeasibleError(
            f"no allocation meets the {deadline:.6g}s deadline (best {T:.6g}s); bottleneck client "
            f"{worst} needs {solo[worst]:.6g}s even with the full pools")
    return MinMaxResult(alloc, T, {"up": t_up, "server": t_srv, "down": t_down}, client_T)


def client_step_time(w: ClientWorkload, alloc: Allocation, server_rate: float, eff: float = 1.0) -> float:
    def div(work, rate):
        if work == 0:
            return 0.0
        return work / rate if rate > 0 else math.inf
    return (w.pre_local + div(w.up_bits, alloc.uplink_hz[w.node] * eff)
            + div(w.server_cycles, alloc.server_share[w.node] * server_rate)
            + div(w.down_bits, alloc.downlink_hz[w.node] * eff) + w.post_local)


def lockstep_step_time(workloads: Sequence[ClientWorkload], alloc: Allocation, server_rate: float,
                       eff: float = 1.0) -> float:
    """max(up) + max(server) + max(down) for a given allocation."""
    def div(work, rate):
        if work == 0:
            return 0.0
        return work / rate if rate > 0 else math.inf
    up = max(w.pre_local + div(w.up_bits, alloc.uplink_hz[w.node] * eff) for w in workloads)
    srv = max(div(w.server_cycles, alloc.server_share[w.node] * server_rate) for w in workloads)
    down = max(div(w.down_bits, alloc.downlink_hz[w.node] * eff) + w.post_local for w in workloads)
    return up + srv + down


# --------------------------------------------------------------------------- split layer

@dataclass
class SplitChoice:
    cut: int
    allocation: Allocation
    T: float
    per_cut: dict


def select_split_layer(profile: ModelProfile, topology: Topology, batch: int = 32,
                       clients: Sequence[str] | None = None, spec=None,
                       server: str = SERVER) -> SplitChoice:
    """Try every cut 0..L with a min-max allocation; the fastest wins, ties to the smaller cut."""
    pool = topology.total_bandwidth_hz
    if pool is None:
        raise ValueError("split selection needs a shared spectrum pool")
    F = topology.rate(server)
    best, per_cut, errors = None, {}, []
    for cut in range(profile.L + 1):
        wl = workloads_for_cut(profile, cut, topology, batch, clients, spec)
        try:
            res = allocate_minmax(wl, pool, F, topology.spectral_efficiency)
        except InfeasibleError as exc:
            errors.append(str(exc))
            continue
        per_cut[cut] = res.T
        if best is None or res.T < best[1].T:
            best = (cut, res)
    if best is None:
        raise InfeasibleError("every cut is infeasible: " + "; ".join(errors))
    return SplitChoice(best[0], best[1].allocation, best[1].T, per_cut)


# --------------------------------------------------------------------------- client selection

@dataclass(frozen=True)
class Candidate:
    id: int
    latency: float
    histogram: tuple


@dataclass
class SelectionConfig:
    deadline: float
    alpha: float
    candidates: list
    global_histogram: tuple | None = None

    def __post_init__(self):
        if not self.deadline > 0:
            raise ValueError("deadline must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.candidates:
            raise ValueError("candidate set is empty")


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in bits (0 for identical, 1 for disjoint support)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / b[mask])))

    return max(0.0, 0.5 * kl(p, m) + 0.5 * kl(q, m))


def selection_score(selected: Sequence[Candidate], cfg: SelectionConfig, global_hist, n_total: int) -> float:
    if not selected:
        return 0.0
    pooled = np.sum([np.asarray(c.histogram, dtype=np.float64) for c in selected], axis=0)
    diversity = 0.0 if pooled.sum() == 0 else 1.0 - js_divergence(pooled, global_hist)
    return cfg.alpha * len(selected) / n_total + (1.0 - cfg.alpha) * diversity


def _global_hist(cfg: SelectionConfig):
    if cfg.global_histogram is not None:
        return np.asarray(cfg.global_histogram, dtype=np.float64)
    return np.sum([np.asarray(c.histogram, dtype=np.float64) for c in cfg.candidates], axis=0)


def select_clients(cfg: SelectionConfig) -> list[int]:
    """Greedy count/diversity selection among deadline-feasible candidates.

    Adds the candidate with the largest score gain while the gain is positive;
    equal gains go to the lower id.
    """
    g = _global_hist(cfg)
    n_total = len(cfg.candidates)
    pool = sorted((c for c in cfg.candidates if c.latency <= cfg.deadline), key=lambda c: c.id)
    chosen: list[Candidate] = []
    current = 0.0
    while pool:
        best = None
        for c in pool:
            s = selection_score(chosen + [c], cfg, g, n_total)
            if best is None or s > best[0]:
                best = (s, c)
        if best[0] <= current:
            break
        current = best[0]
        chosen.append(best[1])
        pool.remove(best[1])
    return sorted(c.id for c in chosen)


def select_clients_exhaustive(cfg: SelectionConfig) -> tuple[list[int], float]:
    g = _global_hist(cfg)
    n_total = len(cfg.candidates)
    feasible = [c for c in cfg.candidates if c.latency <= cfg.deadline]
    best = ([], 0.0)
    for k in range(1, len(feasible) + 1):
        for subset in combinations(feasible, k):
            s = selection_score(subset, cfg, g, n_total)
            if s > best[1]:
                best = (sorted(c.id for c in subset), s)
    return best


# --------------------------------------------------------------------------- hierarchical

@dataclass
class HierarchicalPlan:
    cut1: int
    cut2: int
    step_latency: float
    table: dict                       # (cut1, cut2) -> step latency
    user_edge: tuple                  # (cut1, cut2, latency) best plan with cut2 == L
    user_cloud: tuple                 # best plan with cut1 == cut2 < L
    breakdown: dict = field(default_factory=dict)

    def plan(self, client: str, edge: str, cloud: str, L: int) -> SplitPlan:
        return SplitPlan([(client, 0, self.cut1), (edge, self.cut1, self.cut2), (cloud, self.cut2, L)], L)


def chain_nodes(topology: Topology) -> tuple[list[str], str, str]:
    clients = topology.client_ids
    edges = topology.tier("edge")
    clouds = topology.tier("cloud")
    if not clients or not edges or not clouds:
        raise ValueError("hierarchical planning needs client, edge and cloud tiers")
    return clients, edges[0], clouds[0]


def hierarchical_step_latency(profile: ModelProfile, topology: Topology, cut1: int, cut2: int,
                              batch: int, spec=None) -> tuple[float, dict]:
    """Lock-step step latency for client [0,cut1) -> edge [cut1,cut2) -> cloud [cut2,L).

    Client access links share the spectrum pool under a min-max allocation; the
    edge and cloud process all clients' work serially at their full rate; the
    edge-cloud link carries every client's payload back to back.
    """
    clients, edge, cloud = chain_nodes(topology)
    L = profile.L
    M = len(clients)
    cloud_used = cut2 < L
    load = sl_step_load(profile, cut1, batch, spec)
    wl = [ClientWorkload(c, load.client_fwd / topology.rate(c), 8.0 * load.up_bytes, 0.0,
                         8.0 * load.down_bytes, load.client_bwd / topology.rate(c)) for c in clients]
    access = allocate_minmax(wl, topology.total_bandwidth_hz, topology.rate(edge),
                             topology.spectral_efficiency)
    Fe, Fc = topology.rate(edge), topology.rate(cloud)
    parts = {
        "client_up": access.phase_T["up"],
        "edge_fwd": M * batch * profile.fwd_cycles(cut1, cut2) / Fe,
        "edge_cloud": 0.0,
        "cloud": 0.0,
        "cloud_edge": 0.0,
        "edge_bwd": M * batch * profile.bwd_cycles(cut1, cut2) / Fe,
        "client_down": access.phase_T["down"],
    }
    if cloud_used:
        v, meta = payload_bytes((batch,) + profile.cut_shape(cut2), spec or CompressionSpec())
        up_bytes = M * (v + meta + label_bytes(batch))
        down_bytes = M * (v + meta) if cut2 > 0 else 0
        parts["edge_cloud"] = up_bytes * 8.0 / topology.link_rate(edge, cloud)
        parts["cloud"] = M * batch * (profile.fwd_cycles(cut2, L) + profile.bwd_cycles(cut2, L)) / Fc
        parts["cloud_edge"] = down_bytes * 8.0 / _reverse_rate(topology, edge, cloud)
    return sum(parts.values()), parts


def _reverse_rate(topology, a, b):
    return topology.link_rate(b, a) if topology.has_link(b, a) else topology.link_rate(a, b)


def plan_hierarchical(profile: ModelProfile, topology: Topology, batch: int = 32, spec=None,
                      tie_rel: float = 1e-12) -> HierarchicalPlan:
    """Enumerate all 0 <= cut1 <= cut2 <= L; fastest wins.

    Near-ties (relative ``tie_rel``) prefer a degenerate two-tier plan, then the
    smaller (cut1, cut2).
    """
    L = profile.L
    table, parts = {}, {}
    for c1 in range(L + 1):
        for c2 in range(c1, L + 1):
            table[(c1, c2)], parts[(c1, c2)] = hierarchical_step_latency(profile, topology, c1, c2, batch, spec)

    def degenerate(k):
        return k[1] == L or k[0] == k[1]

    best_t = min(table.values())
    near = [k for k, t in table.items() if t <= best_t * (1 + tie_rel)]
    near.sort(key=lambda k: (not degenerate(k), table[k], k))
    c1, c2 = near[0]
    ue = min(((k, t) for k, t in table.items() if k[1] == L), key=lambda kt: (kt[1], kt[0]))
    uc = min(((k, t) for k, t in table.items() if k[0] == k[1] and k[1] < L), key=lambda kt: (kt[1], kt[0]))
    return HierarchicalPlan(c1, c2, table[(c1, c2)], table, (*ue[0], ue[1]), (*uc[0], uc[1]), parts[(c1, c2)])


def chain3_topology(M: int = 5, seed: int = 0, total_hz: float = 70e6, edge_rate: float = 7e9,
                  cloud_rate: float = 20e9, ratio: float = 1 / 20) -> Topology:
    """User-edge-cloud chain: client compute U[0.1,0.5] Gcycles/s, edge-cloud = access/ratio."""
    from .network import FIG_CLIENT_RATE, LinkSpec, NodeSpec
    rng = np.random.default_rng([int(seed), 0xC11E])
    lo, hi = FIG_CLIENT_RATE
    nodes = [NodeSpec(f"client{m}", "client", float(rng.uniform(lo, hi))) for m in range(M)]
    nodes += [NodeSpec(SERVER, "edge", edge_rate), NodeSpec("cloud", "cloud", cloud_rate)]
    ec = total_hz * 1.0 * ratio
    links = [LinkSpec(SERVER, "cloud", ec), LinkSpec("cloud", SERVER, ec)]
    return Topology.build(nodes, links, total_hz, 1.0)


# --------------------------------------------------------------------------- multi-hop routing

@dataclass
class RoutePlan:
    plan: SplitPlan
    cost: float
    memo: dict

    @property
    def path(self) -> list[str]:
        return self.plan.path


def hop_compute(profile: ModelProfile, topology: Topology, node: str, a: int, b: int, batch: int) -> float:
    if a == b:
        return 0.0
    return batch * (profile.fwd_cycles(a, b) + profile.bwd_cycles(a, b)) / topology.rate(node)


def hop_transfer(profile: ModelProfile, topology: Topology, src: str, dst: str, cut: int, batch: int) -> float:
    """Activation (+labels) forward over src->dst and, past the input, its gradient back."""
    act = bytes_of(batch * profile.cut_size(cut), 32)
    fwd = (act + label_bytes(batch)) * 8.0 / topology.link_rate(src, dst)
    if cut == 0:
        return fwd
    back = topology.link_rate(dst, src) if topology.has_link(dst, src) else topology.link_rate(src, dst)
    return fwd + act * 8.0 / back


def fits(profile: ModelProfile, topology: Topology, node: str, a: int, b: int, batch: int) -> bool:
    if a == b:
        return True
    return memory_required(profile, a, b, batch) <= topology.nodes[node].memory_bytes


def route_multihop(profile: ModelProfile, topology: Topology, source: str, destinations,
                   batch: int = 1) -> RoutePlan:
    """Jointly choose a loop-free route and the layer range each hop computes.

    Forward DP over states (node, layers done, nodes visited): the activation at
    a cut sits at a node, which computes some contiguous layers (memory
    permitting) and forwards the result along a link. Costs are forward+backward
    compute plus both-direction transfers. Ties go to the lexicographically
    smallest path, then the smallest cut vector.
    """
    dests = set(destinations)
    L = profile.L
    adj = {v: sorted(d for (s, d) in topology.links if s == v) for v in topology.nodes}
    if source not in topology.nodes:
        raise ValueError(f"unknown source {source!r}")
    # arrived[(v, cut, visited)] = (cost, path, cuts) with v about to compute from ``cut``
    start = (source, 0, frozenset([source]))
    frontier = {start: (0.0, (source,), ())}
    memo: dict = {}
    best = None
    for _ in range(len(topology.nodes)):
        computed = {}
        for (v, cut, vis), (cost, path, cuts) in frontier.items():
            for b in range(cut, L + 1):
                if not fits(profile, topology, v, cut, b, batch):
                    break
                key = (v, b, vis)
                cand = (cost + hop_compute(profile, topology, v, cut, b, batch), path, cuts + (b,))
                if key not in computed or cand < computed[key]:
                    computed[key] = cand
        memo.update(computed)
        nxt = {}
        for (v, b, vis), (cost, path, cuts) in computed.items():
            if b == L and v in dests:
                cand = (cost, path, cuts)
                if best is None or cand < best:
                    best = cand
            for u in adj[v]:
                if u in vis:
                    continue
                key = (u, b, vis | {u})
                cand = (cost + hop_transfer(profile, topology, v, u, b, batch), path + (u,), cuts)
                if key not in nxt or cand < nxt[key]:
                    nxt[key] = cand
        frontier = nxt
        if not frontier:
            break
    if best is None:
        raise InfeasibleError(_routing_failure(profile, topology, source, dests, batch))
    cost, path, cuts = best
    bounds = (0,) + cuts
    segs = [(n, bounds[i], bounds[i + 1]) for i, n in enumerate(path)]
    return RoutePlan(SplitPlan(segs, L), cost, memo)


def _routing_failure(profile, topology, source, dests, batch) -> str:
    biggest = max(topology.nodes.values(), key=lambda n: (n.memory_bytes, n.id))
    for i in range(profile.L):
        need = memory_required(profile, i, i + 1, batch)
        if need > biggest.memory_bytes:
            return (f"layer {i} ({profile.layers[i].kind}) needs {need} bytes but the largest node "
                    f"memory is {biggest.memory_bytes} bytes ({biggest.id})")
    import networkx as nx
    g = topology.graph()
    if not any(nx.has_path(g, source, d) for d in dests if d in g):
        return f"no route from {source} to any of {sorted(dests)}"
    return (f"no loop-free route from {source} to {sorted(dests)} can host all {profile.L} layers "
            f"within node memory limits (tightest: {biggest.id} with {biggest.memory_bytes} bytes)")


def route_exhaustive(profile: ModelProfile, topology: Topology, source: str, destinations,
                     batch: int = 1) -> tuple[float, tuple, tuple] | None:
    """Brute force over every simple path and every cut vector along it."""
    import networkx as nx
    from itertools import combinations_with_replacement
    g = topology.graph()
    L = profile.L
    paths = []
    for d in sorted(set(destinations)):
        if d == source:
            paths.append([source])
        else:
            paths.extend(nx.all_simple_paths(g, source, d))
    best = None
    for path in paths:
        k = len(path) - 1
        for inner in combinations_with_replacement(range(L + 1), k):
            bounds = (0,) + inner + (L,)
            if not all(fits(profile, topology, path[i], bounds[i], bounds[i + 1], batch) for i in range(k + 1)):
                continue
            cost = 0.0
            for i in range(k + 1):
                cost = cost + hop_compute(profile, topology, path[i], bounds[i], bounds[i + 1], batch)
                if i < k:
                    cost = cost + hop_transfer(profile, topology, path[i], path[i + 1], bounds[i + 1], batch)
            cand = (cost, tuple(path), bounds[1:])
            if best is None or cand < best:
                best = cand
    return best
