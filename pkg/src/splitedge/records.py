"""Protocol configuration and the per-round records engines emit."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

PROTOCOLS = ("fedavg", "vanilla_sl", "sfl", "psl", "epsl", "ushaped", "async_psl")
PAYLOAD_KINDS = ("activation", "grad", "client_model", "server_model", "label")
LABEL_BITS = 32
SERVER = "server"
FED = "fed"
BROADCAST = "broadcast"


def client_node(cid: int) -> str:
    return f"client{cid}"


@dataclass(frozen=True)
class ProtocolConfig:
    kind: str = "psl"
    cut: int = 1
    cut2: int | None = None
    epsl_phi: float = 0.0
    sfl_avg_period: int = 1
    async_quorum: int | None = None
    async_max_staleness: int | None = None
    lr: float = 0.1
    rounds: int = 5
    batch_size: int = 32
    seed: int = 0

    def validate(self, L: int, M: int | None = None) -> "ProtocolConfig":
        if self.kind not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.kind!r}; expected one of {PROTOCOLS}")
        if not 0 <= self.cut <= L:
            raise ConfigError(f"cut must lie in 0..{L}, got {self.cut}")
        if self.kind == "ushaped":
            if self.cut2 is None or not 0 < self.cut < self.cut2 < L:
                raise ConfigError(f"ushaped needs 0 < cut < cut2 < {L}, got cut={self.cut} cut2={self.cut2}")
        if not 0.0 <= self.epsl_phi <= 1.0:
            raise ConfigError("epsl_phi must lie in [0, 1]")
        if self.sfl_avg_period < 1:
            raise ConfigError("sfl_avg_period must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.rounds < 0 or self.batch_size < 1:
            raise ConfigError("rounds must be >= 0 and batch_size >= 1")
        if self.kind == "async_psl" and M is not None:
            k = self.quorum(M)
            if not 1 <= k <= M:
                raise ConfigError(f"async_quorum must lie in [1, {M}], got {k}")
        return self

    def quorum(self, M: int) -> int:
        return M if self.async_quorum is None else int(self.async_quorum)


@dataclass(frozen=True)
class Message:
    src: str
    dst: str
    kind: str
    bytes: int
    round: int
    phase: str
    meta_bytes: int = 0
    shape: tuple = ()
    bits: int = 32


@dataclass
class RoundTrace:
    round: int
    protocol: str
    messages: list = field(default_factory=list)
    train_loss: float = float("nan")
    eval_accuracy: float = float("nan")
    server_fwd_cycles: float = 0.0
    server_bwd_cycles: float = 0.0
    server_backward_passes: int = 0
    staleness: dict = field(default_factory=dict)
    participation: dict = field(default_factory=dict)
    latency: object = None

    def log(self, src, dst, kind, nbytes, phase, meta_bytes=0, shape=(), bits=32):
        if kind not in PAYLOAD_KINDS:
            raise ValueError(f"unknown payload kind {kind!r}")
        self.messages.append(Message(src, dst, kind, int(nbytes), self.round, phase,
                                     int(meta_bytes), tuple(shape), int(bits)))

    def bytes_by_link(self, include_meta: bool = False) -> Counter:
        out = Counter()
        for m in self.messages:
            out[(m.src, m.dst, m.kind)] += m.bytes + (m.meta_bytes if include_meta else 0)
        return out

    def total_bytes(self, include_meta: bool = True) -> int:
        return sum(m.bytes + (m.meta_bytes if include_meta else 0) for m in self.messages)

    def bytes_where(self, kind: str | None = None, to_server: bool | None = None) -> int:
        total = 0
        for m in self.messages:
            if kind is not None and m.kind != kind:
                continue
            if to_server is not None and m.src.startswith("client") != to_server:
                continue
            total += m.bytes
        return total


def label_bytes(batch: int) -> int:
    return -(-batch * LABEL_BITS // 8)


def n_batches(shard_size: int, batch_size: int) -> int:
    return shard_size // batch_size


def batch_order(shard_size: int, batch_size: int, seed: int, round_index: int) -> list[np.ndarray]:
    """Index batches for one epoch (drop-last), reshuffled per (seed, round)."""
    perm = np.random.default_rng([int(seed), int(round_index), 0x5EED]).permutation(shard_size)
    nb = n_batches(shard_size, batch_size)
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(nb)]


def epsl_group(participants, phi: float, seed: int, round_index: int) -> list:
    """Clients whose backward is served by the aggregated gradient at this step.

    A seeded shuffle fixes a per-round order; the first ceil(phi * |P|) clients of
    that order form the group. Returned in ascending id order.
    """
    participants = sorted(participants)
    size = math.ceil(phi * len(participants) - 1e-12)
    if size == 0:
        return []
    order = np.random.default_rng([int(seed), int(round_index), 0xE951]).permutation(len(participants))
    chosen = [participants[i] for i in order[:size]]
    return sorted(chosen)


def vanilla_visit_order(client_ids, seed: int) -> list:
    ids = sorted(client_ids)
    perm = np.random.default_rng([int(seed), 0x0DE5]).permutation(len(ids))
    return [ids[i] for i in perm]
