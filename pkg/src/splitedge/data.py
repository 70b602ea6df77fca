"""Synthetic datasets and client partitioning."""

from __future__ import annotations

import numpy as np


def make_blobs(n: int, classes: int, dim: int, noise: float = 1.0, seed: int = 0,
               separation: float = 3.0):
    """Isotropic Gaussian clusters, one per class, with balanced labels."""
    rng = np.random.default_rng([int(seed), 0xB10B])
    centers = rng.normal(0.0, separation, size=(classes, dim))
    y = np.arange(n) % classes
    rng.shuffle(y)
    x = centers[y] + rng.normal(0.0, noise, size=(n, dim))
    return x, y.astype(np.int64)


def make_two_moons(n: int, noise: float = 0.1, seed: int = 0):
    rng = np.random.default_rng([int(seed), 0x300E])
    n_a = n // 2
    n_b = n - n_a
    t_a = np.linspace(0, np.pi, n_a)
    t_b = np.linspace(0, np.pi, n_b)
    a = np.stack([np.cos(t_a), np.sin(t_a)], axis=1)
    b = np.stack([1 - np.cos(t_b), 0.5 - np.sin(t_b)], axis=1)
    x = np.concatenate([a, b]) + rng.normal(0.0, noise, size=(n, 2))
    y = np.concatenate([np.zeros(n_a, dtype=np.int64), np.ones(n_b, dtype=np.int64)])
    perm = rng.permutation(n)
    return x[perm], y[perm]


def train_test_split(x, y, test_fraction: float, seed: int = 0):
    n = len(x)
    perm = np.random.default_rng([int(seed), 0x7E57]).permutation(n)
    n_test = int(round(n * test_fraction))
    te, tr = perm[:n_test], perm[n_test:]
    return (x[tr], y[tr]), (x[te], y[te])


def partition_iid(n: int, clients: int, seed: int = 0) -> list[np.ndarray]:
    """Equal-size random shards; the remainder is dropped so shards match."""
    perm = np.random.default_rng([int(seed), 0x11D]).permutation(n)
    size = n // clients
    return [np.sort(perm[m * size:(m + 1) * size]) for m in range(clients)]


def partition_dirichlet(y: np.ndarray, clients: int, beta: float, seed: int = 0,
                        min_size: int = 1) -> list[np.ndarray]:
    """Label-skewed shards: each class is split across clients by Dirichlet(beta) weights.

    Redraws (deterministically) until every client holds at least ``min_size``
    samples.
    """
    rng = np.random.default_rng([int(seed), 0xD141])
    classes = np.unique(y)
    for _ in range(1000):
        shards = [[] for _ in range(clients)]
        for k in classes:
            idx = np.flatnonzero(y == k)
            rng.shuffle(idx)
            w = rng.dirichlet(np.full(clients, beta))
            bounds = (np.cumsum(w) * len(idx)).astype(int)[:-1]
            for m, part in enumerate(np.split(idx, bounds)):
                shards[m].extend(part.tolist())
        if min(len(s) for s in shards) >= min_size:
            return [np.sort(np.array(s, dtype=np.int64)) for s in shards]
    raise ValueError(f"could not give every client {min_size} samples with beta={beta}")


def label_histogram(y: np.ndarray, classes: int) -> np.ndarray:
    return np.bincount(y, minlength=classes).astype(np.float64)
