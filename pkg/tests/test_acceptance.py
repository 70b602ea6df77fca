"""The twelve acceptance criteria, one test each (``test_cNN_*``).

``conftest.py`` prints a PASS/FAIL line per criterion at the end of the run.
"""

import dataclasses
import time

import numpy as np
import pytest

import splitedge.protocols as protocols
from splitedge.compression import CompressionSpec, Payload
from splitedge.config import load_config, load_config_file
from splitedge.errors import InfeasibleError
from splitedge.experiment import centralized_accuracy, latency_table, run_training
from splitedge.network import NodeSpec, Topology, default_topology
from splitedge.nn import LAYER_KINDS, mlp_profile
from splitedge.planning import allocate_minmax, route_exhaustive, route_multihop
from splitedge.protocols import run_async_psl, run_round, train_centralized
from splitedge.records import SERVER, ProtocolConfig

from test_harness import CONFIGS
from util import (blob_data, build_clients, gradient_error, grid_step_time, iid_shards, joined,
                  random_route_instance, random_workloads, same)

PROF = mlp_profile(6, 10, 3)
SEEDS = (0, 1, 2)


def run(cfg, clients, server, rounds, spec=None, topo=None, alloc=None):
    traces = []
    for r in range(rounds):
        clients, server, t = run_round(cfg, clients, server, r, spec, topo, alloc)
        traces.append(t)
    return clients, server, traces


def accuracy_config(seed: int, **protocol):
    cfg = load_config(
        f"seed: {seed}\n"
        "protocol: {kind: psl, cut: 2, rounds: 10, batch_size: 32, lr: 0.1}\n"
        "model: {preset: mlp, hidden: 32}\n"
        "dataset: {n: 10000, classes: 10, dim: 10, clients: 5, separation: 1.5}\n")
    return dataclasses.replace(cfg, protocol=dataclasses.replace(cfg.protocol, **protocol))


# --------------------------------------------------------------------------- 1

def single_client_variants(L):
    for cut in range(L + 1):
        yield ProtocolConfig(kind="vanilla_sl", cut=cut, batch_size=8)
        yield ProtocolConfig(kind="psl", cut=cut, batch_size=8)
        yield ProtocolConfig(kind="sfl", cut=cut, sfl_avg_period=1, batch_size=8)
        for phi in (0.0, 0.5, 1.0):
            yield ProtocolConfig(kind="epsl", cut=cut, epsl_phi=phi, batch_size=8)
    for c1 in range(1, L):
        for c2 in range(c1 + 1, L):
            yield ProtocolConfig(kind="ushaped", cut=c1, cut2=c2, batch_size=8)


def test_c01_single_client_collapse():
    t0 = time.perf_counter()
    x, y = blob_data(60, dim=6)
    checked = 0
    for cfg in single_client_variants(PROF.L):
        clients, server, full = build_clients(cfg.kind, PROF, [(x, y)], 8, cfg.cut, cfg.cut2, seed=3)
        ref = full
        for r in range(3):
            ref = train_centralized(ref, clients[0].batches(r), cfg.lr)
            clients, server, _ = run_round(cfg, clients, server, r)
            assert same(joined(clients[0], server, cfg.kind), ref), (cfg, r)
        checked += 1
    assert checked == 5 * 6 + 3
    assert time.perf_counter() - t0 < 60


# --------------------------------------------------------------------------- 2

def test_c02_epsl_phi_zero_is_psl():
    x, y = blob_data(5 * 64, dim=6)
    shards = iid_shards(x, y, 5)
    c1, s1, _ = build_clients("psl", PROF, shards, 16, cut=2)
    c2, s2 = c1, s1
    for r in range(50):
        c1, s1, t1 = run_round(ProtocolConfig(kind="psl", cut=2, batch_size=16), c1, s1, r)
        c2, s2, t2 = run_round(ProtocolConfig(kind="epsl", cut=2, epsl_phi=0.0, batch_size=16), c2, s2, r)
        assert t1.total_bytes() == t2.total_bytes()
        assert t1.bytes_by_link() == t2.bytes_by_link()
    assert same(s1, s2)
    assert all(same(a.seg, b.seg) for a, b in zip(c1, c2))


# --------------------------------------------------------------------------- 3

def test_c03_epsl_server_load_constant_in_clients():
    per = {}
    for M in (1, 2, 4, 8, 16):
        x, y = blob_data(32 * M, dim=6, seed=M)
        shards = [(x[32 * m:32 * (m + 1)], y[32 * m:32 * (m + 1)]) for m in range(M)]
        row = {}
        for kind, phi in (("psl", 0.0), ("epsl", 1.0)):
            clients, server, _ = build_clients(kind, PROF, shards, 16, cut=2)
            cfg = ProtocolConfig(kind=kind, cut=2, epsl_phi=phi, batch_size=16)
            _, _, trace = run_round(cfg, clients, server, 0)
            row[kind] = (trace.server_bwd_cycles, trace.bytes_where("grad", to_server=False))
        per[M] = row
    for M, row in per.items():
        assert row["epsl"] == per[1]["epsl"]
        assert row["psl"][0] == M * per[1]["psl"][0]
        assert row["psl"][1] == M * per[1]["psl"][1]


# --------------------------------------------------------------------------- 4

def test_c04_epsl_accuracy_close_to_psl_and_centralized():
    t0 = time.perf_counter()
    for seed in SEEDS:
        psl = run_training(accuracy_config(seed)).summary["final_accuracy"]
        epsl = run_training(accuracy_config(seed, kind="epsl", epsl_phi=1.0)).summary["final_accuracy"]
        central = centralized_accuracy(accuracy_config(seed))
        print(f"seed {seed}: psl {psl:.4f} epsl {epsl:.4f} centralized {central:.4f}")
        assert abs(epsl - psl) <= 0.02
        assert abs(psl - central) <= 0.05 and abs(epsl - central) <= 0.05
    assert time.perf_counter() - t0 < 300


# --------------------------------------------------------------------------- 5

def test_c05_sfl_at_last_layer_is_fedavg():
    x, y = blob_data(192, dim=6)
    shards = [(x[:48], y[:48]), (x[48:112], y[48:112]), (x[112:], y[112:])]
    L = PROF.L
    fc, g, _ = build_clients("fedavg", PROF, shards, 16)
    sc, s, _ = build_clients("sfl", PROF, shards, 16, cut=L)
    for r in range(20):
        fc, g, _ = run_round(ProtocolConfig(kind="fedavg", cut=L, batch_size=16), fc, g, r)
        sc, s, _ = run_round(ProtocolConfig(kind="sfl", cut=L, sfl_avg_period=1, batch_size=16), sc, s, r)
        assert s.empty
        for c in sc:
            assert same(c.seg, g), r


# --------------------------------------------------------------------------- 6

def test_c06_hierarchical_ordering():
    rows = latency_table(load_config_file(CONFIGS / "hierarchical.yaml"))
    by = {}
    for r in rows:
        by.setdefault(r["dataset_size"], {})[r["architecture"]] = r["total_latency_s"]
    sizes = sorted(by)
    big = by[sizes[-1]]
    assert big["user-edge-cloud"] <= big["user-edge"]
    assert big["user-edge-cloud"] <= big["user-cloud"]
    gaps = [min(by[s]["user-edge"], by[s]["user-cloud"]) - by[s]["user-edge-cloud"] for s in sizes]
    assert all(a < b for a, b in zip(gaps, gaps[1:]))


# --------------------------------------------------------------------------- 7

def test_c07_allocator_oracle_and_monotonicity():
    rng = np.random.default_rng(7)
    for _ in range(20):
        wl = random_workloads(rng, 3)
        res = allocate_minmax(wl, 70e6, 7e9)
        grid = grid_step_time(wl, 70e6, 7e9, points=200)
        assert abs(res.T - grid) <= 0.01 * grid
    for _ in range(100):
        wl = random_workloads(rng, int(rng.integers(1, 6)))
        W, F = rng.uniform(1e6, 1e8), rng.uniform(1e9, 1e10)
        gw, gf = rng.uniform(1.0, 4.0, size=2)
        assert allocate_minmax(wl, W * gw, F * gf).T <= allocate_minmax(wl, W, F).T * (1 + 1e-8)


# --------------------------------------------------------------------------- 8

def test_c08_routing_matches_exhaustive():
    rng = np.random.default_rng(8)
    feasible = 0
    for _ in range(20):
        prof, topo, src, dests = random_route_instance(rng)
        ex = route_exhaustive(prof, topo, src, dests, 4)
        if ex is None:
            with pytest.raises(InfeasibleError):
                route_multihop(prof, topo, src, dests, 4)
            continue
        r = route_multihop(prof, topo, src, dests, 4)
        assert (r.cost, tuple(r.path), tuple(r.plan.cuts) + (prof.L,)) == ex
        feasible += 1
    assert feasible >= 10


# --------------------------------------------------------------------------- 9

def random_layer_case(kind, rng):
    if kind in ("dense", "softmax-head"):
        return (int(rng.integers(1, 8)),), int(rng.integers(1, 6))
    if kind == "relu":
        return tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, 4)))), None
    if kind == "flatten":
        return tuple(int(v) for v in rng.integers(1, 4, size=3)), None
    return (int(rng.integers(1, 3)), int(rng.integers(3, 6)), int(rng.integers(3, 6))), int(rng.integers(1, 4))


def test_c09_gradient_checks():
    rng = np.random.default_rng(9)
    for kind in LAYER_KINDS:
        for i in range(10):
            shape, units = random_layer_case(kind, rng)
            assert gradient_error(kind, shape, units, 100 + i) < 1e-5, (kind, shape, units)


# --------------------------------------------------------------------------- 10

def test_c10_ushaped_labels_stay_home():
    cfg = load_config_file(CONFIGS / "smoke.yaml")
    cfg = dataclasses.replace(cfg, protocol=dataclasses.replace(cfg.protocol, kind="ushaped", cut=1, cut2=3))
    result = run_training(cfg)
    msgs = [m for t in result.traces for m in t.messages]
    assert msgs
    assert not [m for m in msgs if m.kind == "label" and not m.dst.startswith("client")]


# --------------------------------------------------------------------------- 11

def test_c11_async_psl():
    x, y = blob_data(4 * 48, dim=6)
    shards = iid_shards(x, y, 4)
    topo = default_topology(4, 2)
    c1, s1, _ = build_clients("psl", PROF, shards, 16, cut=2)
    c2, s2 = c1, s1
    for r in range(4):
        c1, s1, _ = run_round(ProtocolConfig(kind="psl", cut=2, batch_size=16), c1, s1, r)
        c2, s2, _ = run_async_psl(c2, s2, ProtocolConfig(kind="async_psl", cut=2, batch_size=16), topo, None, r)
    assert same(s1, s2) and all(same(a.seg, b.seg) for a, b in zip(c1, c2))

    rates = [4e8, 1.5e8, 1e8, 3e8]
    nodes = [NodeSpec(f"client{m}", "client", f) for m, f in enumerate(rates)] + [NodeSpec(SERVER, "edge", 7e9)]
    hetero = Topology.build(nodes, (), 70e6)
    clients, server, _ = build_clients("async_psl", PROF, shards, 16, cut=2)
    _, _, trace = run_async_psl(clients, server, ProtocolConfig(kind="async_psl", cut=2, async_quorum=1,
                                                                 batch_size=16), hetero, None, 0)
    assert max(max(v) for v in trace.staleness.values() if v) > 0
    fastest, slowest = int(np.argmax(rates)), int(np.argmin(rates))
    assert trace.participation[fastest] >= trace.participation[slowest]


# --------------------------------------------------------------------------- 12

def _raw(t, spec):
    return Payload(t, t.size * 4, 0, t.shape, 32)


def test_c12_compression_identity_and_eight_bit(monkeypatch):
    x, y = blob_data(3 * 48, dim=6)
    shards = iid_shards(x, y, 3)
    variants = [ProtocolConfig(kind="fedavg", cut=PROF.L, batch_size=16),
                ProtocolConfig(kind="vanilla_sl", cut=2, batch_size=16),
                ProtocolConfig(kind="psl", cut=2, batch_size=16),
                ProtocolConfig(kind="sfl", cut=2, batch_size=16),
                ProtocolConfig(kind="epsl", cut=2, epsl_phi=0.5, batch_size=16),
                ProtocolConfig(kind="ushaped", cut=1, cut2=3, batch_size=16),
                ProtocolConfig(kind="async_psl", cut=2, async_quorum=2, batch_size=16)]
    topo = default_topology(3, 0)
    finals = {}
    for cfg in variants:
        clients, server, _ = build_clients(cfg.kind, PROF, shards, 16, cfg.cut, cfg.cut2)
        finals[cfg.kind] = run(cfg, clients, server, 3, CompressionSpec(), topo)
    with monkeypatch.context() as mp:
        mp.setattr(protocols, "compress_payload", _raw)
        for cfg in variants:
            clients, server, _ = build_clients(cfg.kind, PROF, shards, 16, cfg.cut, cfg.cut2)
            c, s, traces = run(cfg, clients, server, 3, None, topo)
            fc, fs, ftraces = finals[cfg.kind]
            assert same(s, fs), cfg.kind
            assert all(same(p, q) for a, b in zip(c, fc) for p, q in zip(a.segments, b.segments)), cfg.kind
            assert [t.messages for t in traces] == [t.messages for t in ftraces]

    # 8-bit activations: smashed bytes shrink exactly fourfold
    clients, server, _ = build_clients("psl", PROF, shards, 16, cut=2)
    t32 = run_round(ProtocolConfig(kind="psl", cut=2, batch_size=16), clients, server, 0).trace
    t8 = run_round(ProtocolConfig(kind="psl", cut=2, batch_size=16), clients, server, 0,
                   CompressionSpec(activation_bits=8)).trace
    for kind in ("activation", "grad"):
        assert t32.bytes_where(kind) == 4 * t8.bytes_where(kind)

    for seed in SEEDS:
        full = run_training(accuracy_config(seed)).summary["final_accuracy"]
        q = dataclasses.replace(accuracy_config(seed), compression=CompressionSpec(activation_bits=8))
        q8 = run_training(q).summary["final_accuracy"]
        print(f"seed {seed}: 32-bit {full:.4f} 8-bit {q8:.4f}")
        assert abs(full - q8) <= 0.03
