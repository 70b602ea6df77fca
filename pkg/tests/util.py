"""Shared builders for the test suites."""

import math

import networkx as nx
import numpy as np

from splitedge.data import make_blobs, partition_iid
from splitedge.network import LinkSpec, NodeSpec, Topology
from splitedge.nn import (ModelProfile, backward_segment, build_profile, forward_segment, init_segment,
                          join_segments, make_layer, split_segment)
from splitedge.planning import ClientWorkload
from splitedge.protocols import ClientState


def blob_data(n=240, dim=4, classes=3, seed=0):
    return make_blobs(n, classes, dim, noise=1.0, seed=seed)


def same(a, b) -> bool:
    """Bit-identical parameters."""
    if a.layer_range != b.layer_range:
        return False
    return all(np.array_equal(p[k], q[k]) for p, q in zip(a.params, b.params) for k in p)


def build_clients(kind, profile, shards, batch, cut=None, cut2=None, seed=7, client_seeds=None):
    """Client states plus the server-side segment for a protocol family."""
    full = init_segment(profile, 0, profile.L, seed)
    if kind == "fedavg":
        segs, server = (full,), full
    elif kind == "ushaped":
        head, rest = split_segment(full, cut)
        mid, tail = split_segment(rest, cut2)
        segs, server = (head, tail), mid
    else:
        head, server = split_segment(full, cut)
        segs = (head,)
    seeds = client_seeds or list(range(len(shards)))
    clients = [ClientState(m, x, y, segs, batch, seeds[m]) for m, (x, y) in enumerate(shards)]
    return clients, server, full


def iid_shards(x, y, M, seed=0):
    return [(x[i], y[i]) for i in partition_iid(len(x), M, seed)]


def joined(client, server, kind):
    if kind == "fedavg":
        return server
    if kind == "ushaped":
        return join_segments(client.segments[0], server, client.segments[1])
    return join_segments(client.seg, server)


def random_workloads(rng, M=3):
    return [ClientWorkload(f"client{i}", rng.uniform(0.01, 0.2), rng.uniform(1e6, 5e7), rng.uniform(1e8, 5e9),
                           rng.uniform(1e6, 5e7), rng.uniform(0.01, 0.2)) for i in range(M)]


def grid_phase(locals_, works, pool, scale, points=200):
    """Brute-force min-max over a share grid for three clients."""
    g = np.arange(1, points) / points
    best = math.inf
    for a in g:
        for b in g:
            c = 1.0 - a - b
            if c <= 0:
                continue
            t = max(lo + (w / (s * pool * scale) if w else 0.0) for lo, w, s in zip(locals_, works, (a, b, c)))
            best = min(best, t)
    return best


def grid_step_time(wl, pool, server_rate, points=200):
    return (grid_phase([w.pre_local for w in wl], [w.up_bits for w in wl], pool, 1.0, points)
            + grid_phase([0.0] * len(wl), [w.server_cycles for w in wl], 1.0, server_rate, points)
            + grid_phase([w.post_local for w in wl], [w.down_bits for w in wl], pool, 1.0, points))


def random_route_instance(rng):
    """Connected mesh of 2..5 nodes with per-node memory, plus a random dense profile (L <= 8)."""
    n = int(rng.integers(2, 6))
    while True:
        g = nx.gnp_random_graph(n, 0.6, seed=int(rng.integers(1 << 30)))
        if nx.is_connected(g):
            break
    L = int(rng.integers(2, 9))
    defs = [{"kind": "dense", "units": int(rng.integers(2, 40))} for _ in range(L - 1)]
    defs.append({"kind": "softmax-head", "units": 3})
    profile = build_profile((int(rng.integers(4, 40)),), defs)
    nodes = [NodeSpec(f"n{i}", "edge", float(rng.uniform(1e8, 5e9)), int(rng.uniform(2e3, 4e4))) for i in range(n)]
    links = []
    for a, b in g.edges:
        links.append(LinkSpec(f"n{a}", f"n{b}", float(rng.uniform(1e5, 1e7))))
        links.append(LinkSpec(f"n{b}", f"n{a}", float(rng.uniform(1e5, 1e7))))
    return profile, Topology.build(nodes, links), "n0", {f"n{n - 1}"}


# --------------------------------------------------------------------------- finite differences

def single_layer_segment(kind, in_shape, units=None, seed=0):
    # a profile needs two layers; pad with a relu/flatten that we never run
    layer = make_layer(kind, in_shape, units)
    tail = make_layer("flatten" if len(layer.out_shape) > 1 else "relu", layer.out_shape)
    prof = ModelProfile((layer, tail))
    return init_segment(prof, 0, 1, seed)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def gradient_error(kind, shape, units, seed):
    """Max relative error (input and params) of one layer's backward pass vs central differences."""
    seg = single_layer_segment(kind, shape, units, seed=seed)
    rng = np.random.default_rng([seed, 99])
    x = rng.normal(size=(3,) + tuple(shape))
    if kind == "relu":
        # keep inputs away from the kink so differences are well defined
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
    out, cache = forward_segment(seg, x)
    r = rng.normal(size=out.shape)

    def f():
        return float(np.sum(forward_segment(seg, x)[0] * r))

    gx, grads = backward_segment(seg, cache, r)
    errs = [rel_err(gx, numeric_grad(f, x))]
    for name, p in seg.params[0].items():
        errs.append(rel_err(grads[0][name], numeric_grad(f, p)))
    return max(errs)
