"""Small synthetic graph + field fixtures shared by the loss/optim/acceptance tests."""
import numpy as np

from dynsplat import quat
from dynsplat.graph import MotionGraph, edge_weights
from dynsplat.uncertainty import UncertaintyField
from oracles import rotmat


def random_field(rng, N, T, lo=0.2, hi=3.0):
    R = np.stack([rotmat(rng.normal(size=4)) for _ in range(T)])
    return UncertaintyField(rng.uniform(lo, hi, (N, T)), np.ones((N, T), np.int8), R)


def tiny_graph(rng, N=10, T=5, n_keys=5, k=2):
    """Keys 0..n_keys-1 on a ring (k neighbours each); every non-key anchors to a random key."""
    keys = np.arange(n_keys)
    nonkeys = np.arange(n_keys, N)
    key_edges = {}
    for i in keys:
        nb = np.array([(i + d) % n_keys for d in range(1, k + 1)])
        key_edges[int(i)] = (nb, rng.dirichlet(np.ones(k)))
    anchors = {int(i): int(rng.integers(n_keys)) for i in nonkeys}
    nonkey_edges = {}
    for i, j in anchors.items():
        nb = np.concatenate([[j], key_edges[j][0]])
        nonkey_edges[i] = (nb, rng.dirichlet(np.ones(len(nb))))
    return MotionGraph(keys, nonkeys, key_edges, anchors, nonkey_edges, {int(i): 0 for i in keys})


def random_state(rng, N=10, T=5, jitter=0.1):
    base = rng.normal(size=(N, 1, 3))
    P = base + np.cumsum(rng.normal(scale=jitter, size=(N, T, 3)), 1)
    Q = quat.normalize(quat.random_unit(rng, (N, 1)) + rng.normal(scale=0.2, size=(N, T, 4)))
    return P, Q


def rigid_motion(rng, P0, Q0, T):
    """Apply a random rigid motion per frame to a static configuration [N, 3] / [N, 4]."""
    N = len(P0)
    P = np.zeros((N, T, 3))
    Q = np.zeros((N, T, 4))
    for t in range(T):
        g = quat.random_unit(rng) if t else quat.identity()
        tr = rng.normal(size=3) if t else np.zeros(3)
        P[:, t] = quat.rotate(np.broadcast_to(g, (N, 4)), P0) + tr
        Q[:, t] = quat.mul(np.broadcast_to(g, (N, 4)), Q0)
    return P, Q


__all__ = ["random_field", "tiny_graph", "random_state", "rigid_motion", "edge_weights"]
