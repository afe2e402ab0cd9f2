"""Uncertainty-encoded spatio-temporal motion graph.

Key nodes are confident Gaussians picked one per voxel per frame and kept when
they stay confident long enough; they are linked by an uncertainty-aware kNN.
Every other Gaussian attaches to the key node that stays closest over the
sequence and inherits that node's neighborhood.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GraphError(RuntimeError):
    pass


@dataclass
class GraphConfig:
    key_fraction: float = 0.02
    voxel_divisor: float = 32.0  # voxel size = scene bbox diagonal / divisor
    min_period: int = 5
    k: int = 8
    metric: str = "literal"  # "literal": ||x||_M with M = U_i + U_j; "inverse": M = (U_i + U_j)^-1
    period_mode: str = "total"  # "total" count of confident frames or "longest" contiguous run
    threshold_mode: str = "calibrated"  # "quantile" or "calibrated" (see select_threshold)

    def validate(self):
        if not 0 < self.key_fraction < 1:
            raise ValueError("key_fraction must lie in (0, 1)")
        if self.voxel_divisor <= 0 or self.min_period < 1 or self.k < 1:
            raise ValueError("voxel_divisor, min_period and k must be positive")
        if self.metric not in ("literal", "inverse"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.period_mode not in ("total", "longest"):
            raise ValueError(f"unknown period mode {self.period_mode!r}")
        if self.threshold_mode not in ("quantile", "calibrated"):
            raise ValueError(f"unknown threshold mode {self.threshold_mode!r}")


@dataclass
class MotionGraph:
    keys: np.ndarray  # [K] sorted Gaussian indices
    nonkeys: np.ndarray  # [N - K]
    key_edges: dict  # key i -> (neighbor indices [k], weights [k])
    anchors: dict  # non-key i -> key j
    nonkey_edges: dict  # non-key i -> (indices [k + 1] with anchor first, weights)
    t_hat: dict  # key i -> best frame
    periods: dict = field(default_factory=dict)  # candidate -> significant period
    params: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.keys) + len(self.nonkeys)

    def edges_of(self, i):
        i = int(i)
        return self.key_edges[i] if i in self.key_edges else self.nonkey_edges[i]

    def edge_arrays(self, nodes):
        """Flattened (src, dst, w) arrays over the edge sets of `nodes`."""
        src, dst, w = [], [], []
        for i in nodes:
            nb, wt = self.edges_of(i)
            src.extend([int(i)] * len(nb))
            dst.extend(int(j) for j in nb)
            w.extend(float(x) for x in wt)
        return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), np.array(w, dtype=float)

    def to_dict(self):
        def enc(d):
            return {str(i): [[int(j), float(w)] for j, w in zip(nb, wt)] for i, (nb, wt) in sorted(d.items())}
        return {
            "key": [int(i) for i in self.keys],
            "edges": enc(self.key_edges),
            "nonkey_edges": enc(self.nonkey_edges),
            "anchors": {str(i): int(j) for i, j in sorted(self.anchors.items())},
            "t_hat": {str(i): int(t) for i, t in sorted(self.t_hat.items())},
            "periods": {str(i): int(p) for i, p in sorted(self.periods.items())},
            "params": self.params,
        }

    @classmethod
    def from_dict(cls, d, n):
        def dec(e):
            return {int(i): (np.array([j for j, _ in v], dtype=np.int64), np.array([w for _, w in v], dtype=float))
                    for i, v in e.items()}
        keys = np.array(sorted(d["key"]), dtype=np.int64)
        nonkeys = np.setdiff1d(np.arange(n), keys)
        return cls(keys, nonkeys, dec(d["edges"]), {int(i): int(j) for i, j in d["anchors"].items()},
                   dec(d["nonkey_edges"]), {int(i): int(t) for i, t in d["t_hat"].items()},
                   {int(i): int(p) for i, p in d.get("periods", {}).items()}, d.get("params", {}))


# ---------------------------------------------------------------------------
# key selection

def uncertainty_quantile(u, phi, fraction):
    """u-value at the `fraction` quantile of all finite (u < phi) entries."""
    vals = np.sort(u[u < phi])
    if vals.size == 0:
        return 0.0
    return float(np.quantile(vals, fraction))


def select_key_candidates(positions, u, voxel_size, eta_u):
    """One confident Gaussian per occupied voxel per frame.

    :param positions: [N, T, 3]
    :param u: [N, T] scalar uncertainty
    :return: (sorted candidate indices, {candidate: [frames where it was picked]})
    """
    if voxel_size <= 0:
        raise ValueError("voxel size must be positive")
    N, T, _ = positions.shape
    origin = positions.reshape(-1, 3).min(0)
    picked = {}
    for t in range(T):
        low = np.nonzero(u[:, t] < eta_u)[0]
        if low.size == 0:
            continue
        vox = np.floor((positions[low, t] - origin) / voxel_size).astype(np.int64)
        # sort by voxel, then lowest u, then lowest index; first of each voxel wins
        order = np.lexsort((low, u[low, t], vox[:, 2], vox[:, 1], vox[:, 0]))
        v = vox[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = np.any(v[1:] != v[:-1], axis=1)
        for i in low[order[first]]:
            picked.setdefault(int(i), []).append(t)
    return np.array(sorted(picked), dtype=np.int64), picked


def significant_period(u_series, eta_u, mode="total"):
    below = np.asarray(u_series) < eta_u
    if mode == "total":
        return int(below.sum())
    best = run = 0
    for b in below:
        run = run + 1 if b else 0
        best = max(best, run)
    return best


def finalize_key_set(candidates, u, eta_u, min_period=5, mode="total"):
    """Keep candidates confident for at least `min_period` frames.

    :return: (keys, nonkeys, t_hat dict, periods dict)
    """
    N = u.shape[0]
    periods = {int(i): significant_period(u[i], eta_u, mode) for i in candidates}
    keys = np.array(sorted(i for i, p in periods.items() if p >= min_period), dtype=np.int64)
    if keys.size == 0:
        raise GraphError("no key node survives the significant-period filter; "
                         "use a larger voxel size or a higher uncertainty threshold")
    nonkeys = np.setdiff1d(np.arange(N), keys)
    t_hat = {int(i): int(np.argmin(u[i])) for i in keys}  # argmin returns the lowest frame on ties
    return keys, nonkeys, t_hat, periods


def select_threshold(positions, u, phi, config: GraphConfig, voxel_size):
    """Uncertainty threshold eta_u.

    "quantile": the key-fraction quantile of all finite u values.
    "calibrated": the smallest finite u-value threshold whose key set reaches
    round(key_fraction * N) nodes.  The key count grows monotonically with the
    threshold, so a bisection over the sorted distinct u values finds it.
    """
    q = uncertainty_quantile(u, phi, config.key_fraction)
    if config.threshold_mode == "quantile":
        return q
    N = u.shape[0]
    target = max(int(round(config.key_fraction * N)), 1)
    vals = np.unique(u[u < phi])
    if vals.size == 0:
        return q

    def count(k):
        eta = np.nextafter(vals[k], np.inf)
        cand, _ = select_key_candidates(positions, u, voxel_size, eta)
        return sum(significant_period(u[i], eta, config.period_mode) >= config.min_period for i in cand)

    lo, hi = 0, vals.size - 1
    if count(hi) < target:
        return float(np.nextafter(vals[hi], np.inf))
    while lo < hi:
        mid = (lo + hi) // 2
        if count(mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    return float(np.nextafter(vals[lo], np.inf))


# ---------------------------------------------------------------------------
# edges

def mahalanobis_distance(x, y, M):
    """sqrt((x - y)^T M (x - y)).  M is used as given (not inverted)."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    M = np.asarray(M, dtype=float)
    q = np.einsum("...i,...ij,...j->...", d, M, d)
    if np.any(q < -1e-12 * max(1.0, float(np.abs(M).max()))):
        raise FloatingPointError("metric matrix is not positive definite")
    return np.sqrt(np.maximum(q, 0.0))


def _metric(Ua, Ub, kind):
    M = Ua + Ub
    return M if kind == "literal" else np.linalg.inv(M)


def edge_weights(dists):
    """Normalized kernel weights exp(-d^2 / 2 s^2), s = median distance."""
    d = np.asarray(dists, dtype=float)
    if d.size == 0:
        raise ValueError("empty neighbor set")
    s = float(np.median(d))
    if s <= 0:
        w = np.ones_like(d)
    else:
        w = np.exp(-d ** 2 / (2.0 * s * s))
    return w / w.sum()


def knn_order(dists, ids, k):
    """Indices of the k smallest (distance, id) pairs."""
    order = np.lexsort((ids, dists))
    return order[:k]


def build_key_edges(keys, positions, U, t_hat, k, metric="literal"):
    """UA-kNN over key nodes, evaluated at each node's best frame.

    :param U: [N, T, 3, 3] world-frame uncertainty matrices
    :return: {i: (neighbors [k], weights [k])}
    """
    keys = np.asarray(keys, dtype=np.int64)
    if len(keys) <= k:
        raise GraphError(f"need more than k={k} key nodes, got {len(keys)}; reduce k or enlarge the key set")
    edges = {}
    for i in keys:
        t = t_hat[int(i)]
        others = keys[keys != i]
        M = _metric(U[i, t][None], U[others, t], metric)
        d = mahalanobis_distance(positions[i, t][None], positions[others, t], M)
        sel = knn_order(d, others, k)
        nb = others[sel]
        eu = np.linalg.norm(positions[nb, t] - positions[i, t], axis=-1)
        edges[int(i)] = (nb, edge_weights(eu))
    return edges


def attach_non_key(nonkeys, keys, positions, U, metric="literal"):
    """Anchor of each non-key node: the key node with the smallest summed-over-time distance."""
    keys = np.asarray(keys, dtype=np.int64)
    anchors = {}
    if len(nonkeys) == 0:
        return anchors
    nonkeys = np.asarray(nonkeys, dtype=np.int64)
    total = np.zeros((len(nonkeys), len(keys)))
    for c, l in enumerate(keys):
        M = _metric(U[nonkeys], U[l][None], metric)  # [Nn, T, 3, 3]
        d = mahalanobis_distance(positions[nonkeys], positions[l][None], M)  # [Nn, T]
        total[:, c] = d.sum(1)
    for r, i in enumerate(nonkeys):
        anchors[int(i)] = int(keys[knn_order(total[r], keys, 1)[0]])
    return anchors


def nonkey_edge_sets(anchors, key_edges, positions):
    """Inherited neighborhoods {anchor} U E_anchor with weights at the node's reference
    frame (the frame of smallest summed Euclidean distance to the set)."""
    out = {}
    for i, j in anchors.items():
        nb = np.concatenate([[j], key_edges[j][0]]) if j in key_edges else np.array([j])
        d = np.linalg.norm(positions[nb] - positions[i][None], axis=-1)  # [m, T]
        t_ref = int(np.argmin(d.sum(0)))
        out[int(i)] = (nb.astype(np.int64), edge_weights(d[:, t_ref]))
    return out


def build_graph(positions, field, config: GraphConfig = None, voxel_size=None) -> MotionGraph:
    """Full graph construction from trajectories [N, T, 3] and an UncertaintyField."""
    config = config or GraphConfig()
    config.validate()
    u = field.u
    if voxel_size is None:
        p = positions.reshape(-1, 3)
        voxel_size = float(np.linalg.norm(p.max(0) - p.min(0))) / config.voxel_divisor
    eta_u = select_threshold(positions, u, field.phi, config, voxel_size)
    cand, _ = select_key_candidates(positions, u, voxel_size, eta_u)
    keys, nonkeys, t_hat, periods = finalize_key_set(cand, u, eta_u, config.min_period, config.period_mode)
    U = field.matrices()
    key_edges = build_key_edges(keys, positions, U, t_hat, config.k, config.metric)
    anchors = attach_non_key(nonkeys, keys, positions, U, config.metric)
    nk_edges = nonkey_edge_sets(anchors, key_edges, positions)
    params = {"k": config.k, "voxel": voxel_size, "key_fraction": config.key_fraction,
              "min_period": config.min_period, "eta_u": eta_u, "metric": config.metric,
              "period_mode": config.period_mode, "threshold_mode": config.threshold_mode}
    return MotionGraph(keys, nonkeys, key_edges, anchors, nk_edges, t_hat, periods, params)


def knn_graph(positions, k, frame=0):
    """Plain Euclidean kNN over all Gaussians at one frame (the uniform, graph-free baseline
    neighborhood).  Returns {i: (neighbors, weights)}."""
    p = positions[:, frame]
    N = len(p)
    k = min(k, N - 1)
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)
    ids = np.arange(N)
    out = {}
    for i in range(N):
        di = d[i].copy()
        di[i] = np.inf
        sel = knn_order(di, ids, k)
        out[i] = (ids[sel], edge_weights(di[sel]))
    return out
