"""Round engines for FedAvg and the split-learning family.

Every engine is a deterministic state transition: it takes client states and the
server-side segment, runs one round, and returns the new states plus a
:class:`RoundTrace` of every payload that crossed a node boundary. All
cross-client reductions run in ascending client-id order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .compression import CompressionSpec, compress_payload, model_payload_bytes, quantize_weights_step
from .errors import ConfigError, ShapeError
from .network import Allocation, Topology, async_client_times, async_timeline
from .nn import (ActivationCache, SegmentState, backward_segment, forward_segment, loss_grad,
                 sgd_step, weighted_mean)
from .records import (BROADCAST, FED, SERVER, ProtocolConfig, RoundTrace, batch_order, client_node,
                      epsl_group, label_bytes, n_batches, vanilla_visit_order, LABEL_BITS)


@dataclass
class ClientState:
    id: int
    x: np.ndarray
    y: np.ndarray
    segments: tuple
    batch_size: int
    seed: int
    cursor: tuple = (0, 0)   # (epoch, batch position) for the async engine

    def __post_init__(self):
        if len(self.x) == 0 or len(self.x) != len(self.y):
            raise ValueError(f"client {self.id}: shard must be non-empty with one label per sample")
        if not 1 <= self.batch_size <= len(self.x):
            raise ValueError(f"client {self.id}: batch_size must lie in [1, {len(self.x)}]")
        self.segments = tuple(self.segments)

    @property
    def seg(self) -> SegmentState:
        return self.segments[0]

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def node(self) -> str:
        return client_node(self.id)

    def batches(self, round_index: int):
        for idx in batch_order(self.n, self.batch_size, self.seed, round_index):
            yield self.x[idx], self.y[idx]


class RoundResult(NamedTuple):
    clients: list
    server: SegmentState
    trace: RoundTrace


def _update(seg: SegmentState, grads, lr: float, bits: int) -> SegmentState:
    return quantize_weights_step(sgd_step(seg, grads, lr), bits)


def _send(trace: RoundTrace, src: str, dst: str, kind: str, t: np.ndarray,
          spec: CompressionSpec, phase: str) -> np.ndarray:
    p = compress_payload(t, spec)
    trace.log(src, dst, kind, p.value_bytes, phase, p.meta_bytes, p.shape, p.bits)
    return p.tensor


def _send_labels(trace: RoundTrace, src: str, y: np.ndarray, phase: str) -> None:
    trace.log(src, SERVER, "label", label_bytes(len(y)), phase, 0, (len(y),), LABEL_BITS)


def _send_model(trace: RoundTrace, src: str, dst: str, kind: str, seg: SegmentState, bits: int, phase: str):
    v, meta = model_payload_bytes(seg, bits)
    trace.log(src, dst, kind, v, phase, meta, (seg.param_count(),), bits)


def _mean_arrays(xs: Sequence[np.ndarray]) -> np.ndarray:
    acc = xs[0]
    for x in xs[1:]:
        acc = acc + x
    return acc / len(xs)


def _check_clients(clients) -> list:
    clients = sorted(clients, key=lambda c: c.id)
    ids = [c.id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError("client ids must be unique")
    return clients


def average_segments(segs: Sequence[SegmentState], weights: Sequence[float]) -> SegmentState:
    """Sample-weighted elementwise average of same-shaped segments."""
    ranges = {s.layer_range for s in segs}
    if len(ranges) != 1:
        raise ShapeError(f"cannot average segments over different layer ranges {sorted(ranges)}")
    params = weighted_mean([s.params for s in segs], weights)
    return replace(segs[0], params=tuple(params), version=max(s.version for s in segs) + 1)


# --------------------------------------------------------------------------- FedAvg

def local_epoch(seg: SegmentState, batches, lr: float, bits: int = 32):
    """Minibatch SGD over ``batches`` on a full model; returns (seg, losses)."""
    losses = []
    for xb, yb in batches:
        out, cache = forward_segment(seg, xb)
        loss, g = loss_grad(out, yb)
        _, grads = backward_segment(seg, cache, g)
        seg = _update(seg, grads, lr, bits)
        losses.append((loss, len(yb)))
    return seg, losses


def run_round_fedavg(clients: Sequence[ClientState], global_model: SegmentState, cfg: ProtocolConfig,
                     round_index: int = 0, spec: CompressionSpec | None = None) -> RoundResult:
    spec = spec or CompressionSpec()
    clients = _check_clients(clients)
    full = (0, global_model.profile.L)
    if global_model.layer_range != full:
        raise ShapeError("FedAvg needs the full model on the server")
    for c in clients:
        if c.seg.layer_range != full:
            raise ShapeError(f"client {c.id} does not hold the full model")
    bits = spec.weight_bits_for("client")
    trace = RoundTrace(round_index, "fedavg")
    new_clients, locals_, losses = [], [], []
    for c in clients:
        seg, ls = local_epoch(global_model, c.batches(round_index), cfg.lr, bits)
        losses += ls
        locals_.append(seg)
        new_clients.append(replace(c, segments=(seg,)))
        _send_model(trace, c.node, SERVER, "client_model", seg, bits, "upload")
    merged = average_segments(locals_, [c.n for c in clients])
    merged = quantize_weights_step(merged, bits)
    for c in new_clients:
        _send_model(trace, SERVER, c.node, "server_model", merged, bits, "download")
    new_clients = [replace(c, segments=(merged,)) for c in new_clients]
    trace.train_loss = _mean_loss(losses)
    trace.participation = {c.id: n_batches(c.n, c.batch_size) for c in clients}
    return RoundResult(new_clients, merged, trace)


def _mean_loss(losses) -> float:
    if not losses:
        return float("nan")
    total = sum(n for _, n in losses)
    return float(sum(loss * n for loss, n in losses) / total)


# --------------------------------------------------------------------------- vanilla SL

def run_round_vanilla_sl(clients: Sequence[ClientState], server: SegmentState, cfg: ProtocolConfig,
                         round_index: int = 0, spec: CompressionSpec | None = None) -> RoundResult:
    """Sequential SL: one client at a time, client-side weights relayed via the server."""
    spec = spec or CompressionSpec()
    clients = {c.id: c for c in _check_clients(clients)}
    cbits, sbits = spec.weight_bits_for("client"), spec.weight_bits_for("server")
    trace = RoundTrace(round_index, "vanilla_sl")
    order = vanilla_visit_order(clients, cfg.seed)
    losses = []
    prev = order[-1] if (round_index > 0 and len(order) > 1) else None
    for m in order:
        c = clients[m]
        if prev is not None:
            # opaque blob: the server forwards it without reading it
            held = clients[prev].seg
            _send_model(trace, client_node(prev), c.node, "client_model", held, cbits, "relay")
            c = replace(c, segments=(held,))
        seg = c.seg
        for xb, yb in c.batches(round_index):
            h, ccache = forward_segment(seg, xb)
            h_srv = _send(trace, c.node, SERVER, "activation", h, spec, "forward")
            _send_labels(trace, c.node, yb, "forward")
            out, scache = forward_segment(server, h_srv)
            loss, g = loss_grad(out, yb)
            gcut, sgrads = backward_segment(server, scache, g)
            trace.server_fwd_cycles += len(yb) * server.profile.fwd_cycles(*server.layer_range)
            trace.server_bwd_cycles += len(yb) * server.profile.bwd_cycles(*server.layer_range)
            trace.server_backward_passes += 1
            server = _update(server, sgrads, cfg.lr, sbits)
            if not seg.empty:
                gcut = _send(trace, SERVER, c.node, "grad", gcut, spec, "backward")
            _, cgrads = backward_segment(seg, ccache, gcut)
            seg = _update(seg, cgrads, cfg.lr, cbits)
            losses.append((loss, len(yb)))
        clients[m] = replace(c, segments=(seg,))
        trace.participation[m] = n_batches(c.n, c.batch_size)
        prev = m
    trace.train_loss = _mean_loss(losses)
    return RoundResult([clients[k] for k in sorted(clients)], server, trace)


# --------------------------------------------------------------------------- PSL / SFL / EPSL

def _parallel_round(clients, server, cfg, round_index, spec, phi, protocol):
    clients = _check_clients(clients)
    cbits, sbits = spec.weight_bits_for("client"), spec.weight_bits_for("server")
    trace = RoundTrace(round_index, protocol)
    prof = server.profile
    s_fwd = prof.fwd_cycles(*server.layer_range)
    s_bwd = prof.bwd_cycles(*server.layer_range)
    orders = {c.id: batch_order(c.n, c.batch_size, c.seed, round_index) for c in clients}
    segs = {c.id: c.seg for c in clients}
    steps = max(len(o) for o in orders.values())
    losses = []
    for s in range(steps):
        part = [c for c in clients if len(orders[c.id]) > s]
        group = set(epsl_group([c.id for c in part], phi, cfg.seed, round_index)) if phi > 0 else set()
        fwd = {}
        for c in part:
            idx = orders[c.id][s]
            xb, yb = c.x[idx], c.y[idx]
            h, ccache = forward_segment(segs[c.id], xb)
            h_srv = _send(trace, c.node, SERVER, "activation", h, spec, "forward")
            _send_labels(trace, c.node, yb, "forward")
            out, scache = forward_segment(server, h_srv)
            loss, g = loss_grad(out, yb)
            trace.server_fwd_cycles += len(yb) * s_fwd
            losses.append((loss, len(yb)))
            fwd[c.id] = (ccache, scache, g, len(yb))

        contributions, weights, cut_grads = [], [], {}
        if group:
            members = sorted(group)
            sizes = {fwd[m][3] for m in members}
            if len(sizes) != 1:
                raise ConfigError(f"EPSL aggregated clients need equal batch sizes, got {sorted(sizes)}")
            g_mean = _mean_arrays([fwd[m][2] for m in members])
            caches = [fwd[m][1] for m in members]
            agg = ActivationCache(caches[0].layer_range, caches[0].version,
                                  [_mean_arrays([cc.inputs[j] for cc in caches]) for j in range(len(caches[0].inputs))],
                                  caches[0].out_shape)
            gcut, sgrads = backward_segment(server, agg, g_mean)
            trace.server_bwd_cycles += fwd[members[0]][3] * s_bwd
            trace.server_backward_passes += 1
            contributions.append(sgrads)
            weights.append(sum(fwd[m][3] for m in members))
            if not segs[members[0]].empty:
                gcut = _send(trace, SERVER, BROADCAST, "grad", gcut, spec, "backward")
            for m in members:
                cut_grads[m] = gcut
        for c in part:
            if c.id in group:
                continue
            ccache, scache, g, n = fwd[c.id]
            gcut, sgrads = backward_segment(server, scache, g)
            trace.server_bwd_cycles += n * s_bwd
            trace.server_backward_passes += 1
            contributions.append(sgrads)
            weights.append(n)
            if not segs[c.id].empty:
                gcut = _send(trace, SERVER, c.node, "grad", gcut, spec, "backward")
            cut_grads[c.id] = gcut

        server = _update(server, weighted_mean(contributions, weights), cfg.lr, sbits)
        for c in part:
            _, cgrads = backward_segment(segs[c.id], fwd[c.id][0], cut_grads[c.id])
            segs[c.id] = _update(segs[c.id], cgrads, cfg.lr, cbits)

    new_clients = [replace(c, segments=(segs[c.id],)) for c in clients]
    trace.train_loss = _mean_loss(losses)
    trace.participation = {c.id: len(orders[c.id]) for c in clients}
    return new_clients, server, trace


def run_round_psl(clients: Sequence[ClientState], server: SegmentState, cfg: ProtocolConfig,
                  round_index: int = 0, spec: CompressionSpec | None = None) -> RoundResult:
    """Parallel SL: per global step the shared server model takes the sample-weighted
    mean of the per-client server gradients; client models are never averaged."""
    return RoundResult(*_parallel_round(clients, server, cfg, round_index, spec or CompressionSpec(), 0.0, "psl"))


def run_round_epsl(clients: Sequence[ClientState], server: SegmentState, cfg: ProtocolConfig,
                   round_index: int = 0, spec: CompressionSpec | None = None) -> RoundResult:
    """PSL where a ceil(phi*M) group shares one server backward pass.

    The group's last-layer gradients and cached server activations are averaged,
    back-propagated once, and the resulting cut-layer gradient is broadcast to
    every group member. Other clients get exact individual gradients.
    """
    return RoundResult(*_parallel_round(clients, server, cfg, round_index, spec or CompressionSpec(),
                                        cfg.epsl_phi, "epsl"))


def run_round_sfl(clients: Sequence[ClientState], server: SegmentState, cfg: ProtocolConfig,
                  round_index: int = 0, spec: CompressionSpec | None = None) -> RoundResult:
    """PSL plus client-model averaging on the fed server every ``sfl_avg_period`` rounds."""
    if cfg.sfl_avg_period < 1:
        raise ConfigError("sfl_avg_period must be >= 1")
    spec = spec or CompressionSpec()
    clients, server, trace = _parallel_round(clients, server, cfg, round_index, spec, 0.0, "sfl")
    trace.protocol = "sfl"
    if (round_index + 1) % cfg.sfl_avg_period == 0:
        bits = spec.weight_bits_for("client")
        for c in clients:
            _send_model(trace, c.node, FED, "client_model", c.seg, bits, "sync")
        merged = quantize_weights_step(average_segments([c.seg for c in clients], [c.n for c in clients]), bits)
        for c in clients:
            _send_model(trace, FED, c.node, "client_model", merged, bits, "sync")
        clients = [replace(c, segments=(merged,)) for c in clients]
    return RoundResult(clients, server, trace)


# --------------------------------------------------------------------------- U-shaped

def run_round_ushaped(clients: Sequence[ClientState], server: SegmentState, cfg: ProtocolConfig,
                      round_index: int = 0, spec: CompressionSpec | None = None) -> RoundResult:
    """Three-segment SL: head and label-bearing tail stay on the client."""
    spec = spec or CompressionSpec()
    clients = _check_clients(clients)
    L = server.profile.L
    cut, cut2 = server.layer_range
    if not 0 < cut < cut2 < L:
        raise ConfigError(f"ushaped needs 0 < cut < cut2 < {L}, got {cut}, {cut2}")
    for c in clients:
        if len(c.segments) != 2 or c.segments[0].layer_range != (0, cut) or c.segments[1].layer_range != (cut2, L):
            raise ShapeError(f"client {c.id} must hold head [0,{cut}) and tail [{cut2},{L})")
    cbits, sbits = spec.weight_bits_for("client"), spec.weight_bits_for("server")
    trace = RoundTrace(round_index, "ushaped")
    prof = server.profile
    orders = {c.id: batch_order(c.n, c.batch_size, c.seed, round_index) for c in clients}
    heads = {c.id: c.segments[0] for c in clients}
    tails = {c.id: c.segments[1] for c in clients}
    steps = max(len(o) for o in orders.values())
    losses = []
    for s in range(steps):
        part = [c for c in clients if len(orders[c.id]) > s]
        contributions, weights, state = [], [], {}
        for c in part:
            idx = orders[c.id][s]
            xb, yb = c.x[idx], c.y[idx]
            h1, hcache = forward_segment(heads[c.id], xb)
            h1 = _send(trace, c.node, SERVER, "activation", h1, spec, "forward")
            h2, mcache = forward_segment(server, h1)
            h2 = _send(trace, SERVER, c.node, "activation", h2, spec, "forward")
            out, tcache = forward_segment(tails[c.id], h2)
            loss, g = loss_grad(out, yb)
            g2, tgrads = backward_segment(tails[c.id], tcache, g)
            g2 = _send(trace, c.node, SERVER, "grad", g2, spec, "backward")
            g1, mgrads = backward_segment(server, mcache, g2)
            g1 = _send(trace, SERVER, c.node, "grad", g1, spec, "backward")
            trace.server_fwd_cycles += len(yb) * prof.fwd_cycles(cut, cut2)
            trace.server_bwd_cycles += len(yb) * prof.bwd_cycles(cut, cut2)
            trace.server_backward_passes += 1
            contributions.append(mgrads)
            weights.append(len(yb))
            state[c.id] = (hcache, g1, tgrads)
            losses.append((loss, len(yb)))
        server = _update(server, weighted_mean(contributions, weights), cfg.lr, sbits)
        for c in part:
            hcache, g1, tgrads = state[c.id]
            _, hgrads = backward_segment(heads[c.id], hcache, g1)
            heads[c.id] = _update(heads[c.id], hgrads, cfg.lr, cbits)
            tails[c.id] = _update(tails[c.id], tgrads, cfg.lr, cbits)
    new_clients = [replace(c, segments=(heads[c.id], tails[c.id])) for c in clients]
    trace.train_loss = _mean_loss(losses)
    trace.participation = {c.id: len(orders[c.id]) for c in clients}
    return RoundResult(new_clients, server, trace)


# --------------------------------------------------------------------------- async PSL

def _next_batch(c: ClientState):
    epoch, pos = c.cursor
    order = batch_order(c.n, c.batch_size, c.seed, epoch)
    idx = order[pos]
    pos += 1
    if pos == len(order):
        epoch, pos = epoch + 1, 0
    return c.x[idx], c.y[idx], (epoch, pos)


def run_async_psl(clients: Sequence[ClientState], server: SegmentState, cfg: ProtocolConfig,
                  topology: Topology, allocation: Allocation | None = None,
                  round_index: int = 0, spec: CompressionSpec | None = None) -> RoundResult:
    """Asynchronous PSL driven by simulated completion times.

    The server applies an update as soon as ``async_quorum`` contributions are
    pending. Each contribution is stamped with its staleness: the number of
    server updates between the client's dispatch and the update that applies
    it. A round spends the same number of client batches as a PSL round.
    """
    spec = spec or CompressionSpec()
    clients = {c.id: c for c in _check_clients(clients)}
    M = len(clients)
    K = cfg.quorum(M)
    if not 1 <= K <= M:
        raise ConfigError(f"async_quorum must lie in [1, {M}], got {K}")
    ids = sorted(clients)
    alloc = allocation or Allocation.static_equal(topology, [client_node(m) for m in ids])
    prof = server.profile
    cfg = replace(cfg, cut=server.layer_range[0])
    a, r = async_client_times(cfg, prof, topology, alloc, ids, spec)
    budget = sum(n_batches(c.n, c.batch_size) for c in clients.values())
    events = async_timeline(a, r, budget, K)

    cbits, sbits = spec.weight_bits_for("client"), spec.weight_bits_for("server")
    trace = RoundTrace(round_index, "async_psl")
    trace.staleness = {m: [] for m in ids}
    trace.participation = {m: 0 for m in ids}
    s_fwd = prof.fwd_cycles(*server.layer_range)
    s_bwd = prof.bwd_cycles(*server.layer_range)
    inflight, pending, returned = {}, {}, {}
    losses = []
    for e in events:
        if e.kind == "dispatch":
            m = e.clients[0]
            c = clients[m]
            xb, yb, cursor = _next_batch(c)
            clients[m] = replace(c, cursor=cursor)
            h, ccache = forward_segment(c.seg, xb)
            h_srv = _send(trace, c.node, SERVER, "activation", h, spec, "forward")
            _send_labels(trace, c.node, yb, "forward")
            inflight[m] = (h_srv, yb, ccache, e.version)
            trace.participation[m] += 1
        elif e.kind == "arrive":
            m = e.clients[0]
            h_srv, yb, ccache, v0 = inflight.pop(m)
            out, scache = forward_segment(server, h_srv)
            loss, g = loss_grad(out, yb)
            gcut, sgrads = backward_segment(server, scache, g)
            trace.server_fwd_cycles += len(yb) * s_fwd
            trace.server_bwd_cycles += len(yb) * s_bwd
            trace.server_backward_passes += 1
            losses.append((loss, len(yb)))
            pending[m] = (sgrads, gcut, len(yb), v0, ccache)
        elif e.kind == "flush":
            contributions, weights = [], []
            for m in e.clients:
                sgrads, gcut, n, v0, ccache = pending.pop(m)
                stale = e.version - v0
                trace.staleness[m].append(stale)
                if cfg.async_max_staleness is None or stale <= cfg.async_max_staleness:
                    contributions.append(sgrads)
                    weights.append(n)
                returned[m] = (gcut, ccache)
            if contributions:
                server = _update(server, weighted_mean(contributions, weights), cfg.lr, sbits)
        else:  # return
            m = e.clients[0]
            c = clients[m]
            gcut, ccache = returned.pop(m)
            if not c.seg.empty:
                gcut = _send(trace, SERVER, c.node, "grad", gcut, spec, "backward")
            _, cgrads = backward_segment(c.seg, ccache, gcut)
            clients[m] = replace(c, segments=(_update(c.seg, cgrads, cfg.lr, cbits),))
    trace.train_loss = _mean_loss(losses)
    return RoundResult([clients[m] for m in ids], server, trace)


# --------------------------------------------------------------------------- helpers

def train_centralized(seg: SegmentState, batches, lr: float) -> SegmentState:
    """Plain minibatch SGD on the unsplit model (reference trajectory)."""
    seg, _ = local_epoch(seg, batches, lr)
    return seg


def make_clients(shards, segments_for, batch_size: int, seeds=None) -> list[ClientState]:
    """``shards`` is a list of (x, y); ``segments_for(m)`` builds client m's segments."""
    out = []
    for m, (x, y) in enumerate(shards):
        seed = m if seeds is None else seeds[m]
        out.append(ClientState(m, x, y, tuple(segments_for(m)), batch_size, seed))
    return out


def run_round(cfg: ProtocolConfig, clients, server, round_index: int = 0, spec=None,
              topology: Topology | None = None, allocation: Allocation | None = None) -> RoundResult:
    kind = cfg.kind
    if kind == "fedavg":
        return run_round_fedavg(clients, server, cfg, round_index, spec)
    if kind == "vanilla_sl":
        return run_round_vanilla_sl(clients, server, cfg, round_index, spec)
    if kind == "psl":
        return run_round_psl(clients, server, cfg, round_index, spec)
    if kind == "sfl":
        return run_round_sfl(clients, server, cfg, round_index, spec)
    if kind == "epsl":
        return run_round_epsl(clients, server, cfg, round_index, spec)
    if kind == "ushaped":
        return run_round_ushaped(clients, server, cfg, round_index, spec)
    if kind == "async_psl":
        if topology is None:
            raise ConfigError("async_psl needs a topology")
        return run_async_psl(clients, server, cfg, topology, allocation, round_index, spec)
    raise ConfigError(f"unknown protocol {kind!r}")
