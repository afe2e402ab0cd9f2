"""Differentiable objectives (torch, float64).

Geometry terms take position / rotation tensors [N, T, 3] / [N, T, 4] and a
list of frames (the current batch).  Terms indexed by t only sum over those
frames; difference terms need the frames t - 1 / t - Delta / t + 1 as well and
skip frames where those fall outside [0, T).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch

from . import quat
from .deform import blend_targets

DTYPE = torch.float64


@dataclass
class LossWeights:
    iso: float = 1.0
    rigid: float = 1.0
    rot: float = 0.01
    vel: float = 0.01
    acc: float = 0.01
    delta: int = 1
    rgb_l1: float = 0.8
    rgb_ssim: float = 0.2
    eps_n: float = 1e-12
    nonkey_all_nodes: bool = False  # sum the non-key anchor/DQB terms over every node

    def validate(self):
        vals = [self.iso, self.rigid, self.rot, self.vel, self.acc, self.rgb_l1, self.rgb_ssim, self.eps_n]
        if min(vals) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")


@dataclass
class LossReport:
    terms: dict = field(default_factory=dict)  # name -> value
    weights: dict = field(default_factory=dict)  # name -> multiplier in the total
    iteration: int = 0

    @property
    def total(self):
        return float(sum(self.weights[k] * v for k, v in self.terms.items()))

    def names(self):
        return list(self.terms)

    def row(self):
        return [self.iteration] + [self.terms[k] for k in self.terms] + [self.total]

    @staticmethod
    def to_csv(reports):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if reports:
            w.writerow(["iteration"] + reports[0].names() + ["total"])
            for r in reports:
                w.writerow([r.iteration] + [repr(float(r.terms[k])) for k in r.names()] + [repr(r.total)])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# primitives

# squared residuals below this are round-off (|d| < 1e-12) and count as exact zeros, so an
# exact fixed point has exactly zero gradient rather than noise amplified by 1 / sqrt(eps)
ROUNDOFF_SQ = 1e-24


def smooth_norm_sq(q, eps):
    """sqrt(q + eps) - sqrt(eps) for a non-negative quadratic form q (exactly 0 at q = 0)."""
    q = torch.where(q > ROUNDOFF_SQ, q, torch.zeros_like(q))
    return torch.sqrt(q + eps) - eps ** 0.5


def smooth_abs(x, eps):
    return smooth_norm_sq(x * x, eps)


def smooth_l2(x, eps):
    return smooth_norm_sq((x * x).sum(-1), eps)


def rel_rotation(qa, qb):
    """qa * qb^-1 aligned to w >= 0."""
    return quat.positive_hemisphere(quat.mul(quat.normalize(qa), quat.conj(quat.normalize(qb))))


_ID = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE)


def _as_t(x, dtype=DTYPE):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def _frames(frames, T):
    return sorted(set(int(t) for t in (range(T) if frames is None else frames)))


# ---------------------------------------------------------------------------
# anchor terms

def mahalanobis_anchor(P, target, Minv, nodes, frames, eps, gathered=False):
    """sum_{i in nodes, t in frames} ||P_it - target_it||_{Minv}.

    :param target: full [N, T, 3], or [len(nodes), len(frames), 3] when `gathered`
    """
    nodes = _as_t(nodes, torch.long)
    fr = torch.as_tensor(frames, dtype=torch.long)
    if len(nodes) == 0 or len(fr) == 0:
        return P.sum() * 0.0
    d = P[:, fr][nodes] - (target if gathered else target[:, fr][nodes])
    M = Minv[:, fr][nodes]
    q = torch.einsum("...i,...ij,...j->...", d, M, d)
    return smooth_norm_sq(q, eps).sum()


# ---------------------------------------------------------------------------
# motion-locality terms over an edge list (src i, dst j, weight w)

def _norm_count(src):
    return max(len(src), 1)


def iso_loss(P, src, dst, w, frames, n=0, eps=1e-12):
    """(1/|E|) sum_t sum_(i,j) w_ij | |p_jn - p_in| - |p_jt - p_it| |."""
    src, dst, w = _as_t(src, torch.long), _as_t(dst, torch.long), _as_t(w)
    fr = torch.as_tensor(frames, dtype=torch.long)
    if len(src) == 0 or len(fr) == 0:
        return P.sum() * 0.0
    d0 = smooth_l2(P[dst, n] - P[src, n], eps)  # [E]
    dt = smooth_l2(P[:, fr][dst] - P[:, fr][src], eps)  # [E, F]
    return (w[:, None] * smooth_abs(d0[:, None] - dt, eps)).sum() / _norm_count(src)


def _lagged(frames, lag, T):
    fr = [t for t in frames if 0 <= t - lag < T]
    return torch.as_tensor(fr, dtype=torch.long), torch.as_tensor([t - lag for t in fr], dtype=torch.long)


def rigid_loss(P, Q, src, dst, w, frames, delta=1, eps=1e-12):
    """(1/|E|) sum w_ij | p_j,t-D - T_i,t-D T_i,t^-1 p_j,t |."""
    src, dst, w = _as_t(src, torch.long), _as_t(dst, torch.long), _as_t(w)
    ft, fp = _lagged(frames, delta, P.shape[1])
    if len(src) == 0 or len(ft) == 0:
        return P.sum() * 0.0
    qi_t, qi_p = Q[:, ft][src], Q[:, fp][src]
    R = quat.mul(quat.normalize(qi_p), quat.conj(quat.normalize(qi_t)))
    pred = quat.rotate(R, P[:, ft][dst] - P[:, ft][src]) + P[:, fp][src]
    res = smooth_l2(P[:, fp][dst] - pred, eps)
    return (w[:, None] * res).sum() / _norm_count(src)


def rot_loss(Q, src, dst, w, frames, delta=1, eps=1e-12):
    """(1/|E|) sum w_ij | rel(q_j) - rel(q_i) |, rel(q) = q_t q_{t-D}^-1 aligned to w >= 0."""
    src, dst, w = _as_t(src, torch.long), _as_t(dst, torch.long), _as_t(w)
    ft, fp = _lagged(frames, delta, Q.shape[1])
    if len(src) == 0 or len(ft) == 0:
        return Q.sum() * 0.0
    rj = rel_rotation(Q[:, ft][dst], Q[:, fp][dst])
    ri = rel_rotation(Q[:, ft][src], Q[:, fp][src])
    return (w[:, None] * smooth_l2(rj - ri, eps)).sum() / _norm_count(src)


def vel_terms(P, Q, nodes, frames, eps=1e-12):
    """(position, rotation) parts of the velocity loss, each averaged over nodes."""
    nodes = _as_t(nodes, torch.long)
    ft, fp = _lagged(frames, 1, P.shape[1])
    if len(nodes) == 0 or len(ft) == 0:
        z = P.sum() * 0.0
        return z, z
    pos = smooth_abs(P[:, fp][nodes] - P[:, ft][nodes], eps).sum() / len(nodes)
    rel = rel_rotation(Q[:, fp][nodes], Q[:, ft][nodes])
    rot = smooth_abs(rel - _ID, eps).sum() / len(nodes)
    return pos, rot


def acc_terms(P, Q, nodes, frames, eps=1e-12):
    """Second differences at every batch frame t with t - 1, t + 1 in range."""
    nodes = _as_t(nodes, torch.long)
    T = P.shape[1]
    fr = [t for t in frames if 0 < t < T - 1]
    if len(nodes) == 0 or not fr:
        z = P.sum() * 0.0
        return z, z
    c = torch.as_tensor(fr, dtype=torch.long)
    Pm, P0, P1 = P[:, c - 1][nodes], P[:, c][nodes], P[:, c + 1][nodes]
    Qm, Q0, Q1 = Q[:, c - 1][nodes], Q[:, c][nodes], Q[:, c + 1][nodes]
    pos = smooth_abs(P1 - 2.0 * P0 + Pm, eps).sum() / len(nodes)
    step_next = rel_rotation(Q1, Q0)
    step_prev = rel_rotation(Q0, Qm)
    jerk = quat.positive_hemisphere(quat.mul(step_next, quat.conj(step_prev)))
    rot = smooth_abs(jerk - _ID, eps).sum() / len(nodes)
    return pos, rot


def vel_loss(P, Q, nodes, frames, eps=1e-12):
    a, b = vel_terms(P, Q, nodes, frames, eps)
    return a + b


def acc_loss(P, Q, nodes, frames, eps=1e-12):
    a, b = acc_terms(P, Q, nodes, frames, eps)
    return a + b


def motion_terms(P, Q, edges, nodes, frames, lw: LossWeights, n=0):
    """Unweighted motion terms keyed by name, plus their lambda weights."""
    src, dst, w = edges
    terms = {
        "iso": iso_loss(P, src, dst, w, frames, n, lw.eps_n),
        "rigid": rigid_loss(P, Q, src, dst, w, frames, lw.delta, lw.eps_n),
        "rot": rot_loss(Q, src, dst, w, frames, lw.delta, lw.eps_n),
        "vel": vel_loss(P, Q, nodes, frames, lw.eps_n),
        "acc": acc_loss(P, Q, nodes, frames, lw.eps_n),
    }
    lam = {"iso": lw.iso, "rigid": lw.rigid, "rot": lw.rot, "vel": lw.vel, "acc": lw.acc}
    return terms, lam


def motion_loss(P, Q, edges, nodes, frames, lw: LossWeights, n=0):
    terms, lam = motion_terms(P, Q, edges, nodes, frames, lw, n)
    return sum(lam[k] * v for k, v in terms.items())


# ---------------------------------------------------------------------------
# perception

def _gauss_window(size=11, sigma=1.5):
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2.0
    g = torch.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


_BLUR_CACHE = {}


def blur_matrix(n, g):
    """[n, n] matrix applying the 1D window g with replicate padding."""
    key = (n, tuple(g.tolist()))
    if key not in _BLUR_CACHE:
        r = len(g) // 2
        B = np.zeros((n, n))
        for i in range(n):
            for k, gk in enumerate(g.tolist()):
                B[i, min(max(i + k - r, 0), n - 1)] += gk
        _BLUR_CACHE[key] = torch.as_tensor(B, dtype=DTYPE)
    return _BLUR_CACHE[key]


def _blur(x, g):
    """Separable blur of [..., H, W] with replicate padding (same size out)."""
    H, W = x.shape[-2:]
    return blur_matrix(H, g) @ x @ blur_matrix(W, g).T


def ssim_map(a, b, size=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Per-pixel SSIM of [..., H, W, C] tensors in [0, 1], as [-1, H, W] (one slice per image channel)."""
    g = _gauss_window(size, sigma).to(a.dtype)
    H, W, C = a.shape[-3:]
    x = a.reshape(-1, H, W, C).permute(0, 3, 1, 2).reshape(-1, H, W)
    y = b.reshape(-1, H, W, C).permute(0, 3, 1, 2).reshape(-1, H, W)
    mx, my = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mx * mx
    syy = _blur(y * y, g) - my * my
    sxy = _blur(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim_t(a, b, **kw):
    """Mean SSIM of two [H, W, C] tensors (averaged over images for stacked input)."""
    return ssim_map(a, b, **kw).mean()


def perception_terms(rendered, truth):
    """(mean l1, 1 - SSIM); stacked [B, H, W, C] input averages over the B images."""
    l1 = (rendered - truth).abs().mean()
    return l1, 1.0 - ssim_t(rendered, truth)


def perception_loss(rendered, truth, lw: LossWeights = None):
    lw = lw or LossWeights()
    rendered, truth = _as_t(rendered), _as_t(truth)
    l1, dssim = perception_terms(rendered, truth)
    return lw.rgb_l1 * l1 + lw.rgb_ssim * dssim


def perception_grad(rendered, truth, lw: LossWeights = None):
    """(loss, dL/drendered) for numpy images."""
    r = torch.tensor(np.asarray(rendered), dtype=DTYPE, requires_grad=True)
    loss = perception_loss(r, torch.as_tensor(np.asarray(truth), dtype=DTYPE), lw)
    loss.backward()
    return float(loss), r.grad.numpy()


# ---------------------------------------------------------------------------
# graph-structured objective

@dataclass
class GraphTerms:
    """Static tensors derived from a MotionGraph and an UncertaintyField."""
    keys: torch.Tensor
    nonkeys: torch.Tensor
    key_edges: tuple
    nonkey_edges: tuple
    dqb_nodes: np.ndarray
    dqb_neighbors: np.ndarray
    dqb_weights: torch.Tensor
    Minv: torch.Tensor  # [N, T, 3, 3]
    p_o: torch.Tensor  # [N, T, 3]
    n: int = 0

    @classmethod
    def build(cls, graph, field, snapshot_positions, canonical=0):
        ke = graph.edge_arrays(graph.keys)
        ne = graph.edge_arrays(graph.nonkeys)
        nodes = np.array(sorted(graph.nonkey_edges), dtype=np.int64)
        if len(nodes):
            nb = np.stack([graph.nonkey_edges[int(i)][0] for i in nodes])
            wt = np.stack([graph.nonkey_edges[int(i)][1] for i in nodes])
        else:
            nb, wt = np.zeros((0, 1), np.int64), np.zeros((0, 1))
        t = lambda e: (torch.as_tensor(e[0]), torch.as_tensor(e[1]), torch.as_tensor(e[2], dtype=DTYPE))
        return cls(torch.as_tensor(graph.keys), torch.as_tensor(graph.nonkeys), t(ke), t(ne), nodes, nb,
                   torch.as_tensor(wt, dtype=DTYPE), torch.as_tensor(field.inverse_matrices(), dtype=DTYPE),
                   torch.tensor(np.array(snapshot_positions), dtype=DTYPE), canonical)


def key_terms(P, Q, g: GraphTerms, frames, lw: LossWeights):
    terms, lam = motion_terms(P, Q, g.key_edges, g.keys, frames, lw, g.n)
    out = {"key_anchor": (1.0, mahalanobis_anchor(P, g.p_o, g.Minv, g.keys, frames, lw.eps_n))}
    out.update({f"key_{k}": (lam[k], v) for k, v in terms.items()})
    return out


def key_loss(P, Q, g, frames, lw):
    return sum(m * v for m, v in key_terms(P, Q, g, frames, lw).values())


def dqb_positions(P, Q, g: GraphTerms, frames):
    """DQB targets [M, F, 3] for g.dqb_nodes at the given frames, from the current state."""
    p, _ = blend_targets(P, Q, g.dqb_nodes, g.dqb_neighbors, g.dqb_weights, frames, g.n)
    return p


def nonkey_terms(P, Q, g: GraphTerms, frames, lw: LossWeights):
    frames = list(frames)
    anchor_nodes = torch.arange(P.shape[0]) if lw.nonkey_all_nodes else g.nonkeys
    out = {"nonkey_anchor": (1.0, mahalanobis_anchor(P, g.p_o, g.Minv, anchor_nodes, frames, lw.eps_n))}
    if len(g.dqb_nodes) and frames:
        target = dqb_positions(P, Q, g, frames)
        out["nonkey_dqb"] = (1.0, mahalanobis_anchor(P, target, g.Minv, g.dqb_nodes, frames, lw.eps_n,
                                                              gathered=True))
    else:
        out["nonkey_dqb"] = (1.0, P.sum() * 0.0)
    terms, lam = motion_terms(P, Q, g.nonkey_edges, g.nonkeys, frames, lw, g.n)
    out.update({f"nonkey_{k}": (lam[k], v) for k, v in terms.items()})
    return out


def nonkey_loss(P, Q, g, frames, lw):
    return sum(m * v for m, v in nonkey_terms(P, Q, g, frames, lw).values())


def total_terms(P, Q, g: GraphTerms, frames, lw: LossWeights, rgb_terms=None):
    """All named (multiplier, tensor) terms of the total objective.

    rgb_terms: optional {"rgb_l1": value, "rgb_ssim": value} already averaged over the batch.
    """
    out = {}
    if rgb_terms is not None:
        out["rgb_l1"] = (lw.rgb_l1, rgb_terms["rgb_l1"])
        out["rgb_ssim"] = (lw.rgb_ssim, rgb_terms["rgb_ssim"])
    out.update(key_terms(P, Q, g, frames, lw))
    out.update(nonkey_terms(P, Q, g, frames, lw))
    return out


def report_of(terms, iteration=0) -> LossReport:
    return LossReport({k: float(v.detach()) for k, (m, v) in terms.items()},
                      {k: float(m) for k, (m, v) in terms.items()}, iteration)


def total_loss(P, Q, g, frames, lw, rgb_terms=None, iteration=0):
    """(scalar tensor, LossReport)."""
    terms = total_terms(P, Q, g, frames, lw, rgb_terms)
    total = sum(m * v for m, v in terms.values())
    return total, report_of(terms, iteration)
