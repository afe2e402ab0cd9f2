"""Rigid transforms, dual quaternions and dual-quaternion blending.

The batched helpers (`*_batch`) work on numpy arrays or torch tensors so the
blend can sit inside the differentiable non-key loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import quat


class DegenerateBlend(ArithmeticError):
    pass


DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class RigidTransform:
    """x -> R(rotation) x + translation."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float)
        object.__setattr__(self, "rotation", q / np.linalg.norm(q))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls(quat.identity(), np.zeros(3))

    def apply(self, x):
        return quat.rotate(self.rotation, np.asarray(x, dtype=float)) + self.translation

    def compose(self, other):
        """self after other."""
        return RigidTransform(quat.mul(self.rotation, other.rotation), self.apply(other.translation))

    def inverse(self):
        qi = quat.conj(self.rotation)
        return RigidTransform(qi, -quat.rotate(qi, self.translation))

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = quat.to_matrix(self.rotation)
        M[:3, 3] = self.translation
        return M

    def allclose(self, other, atol=1e-9):
        same_q = np.allclose(self.rotation, other.rotation, atol=atol) or np.allclose(self.rotation, -other.rotation, atol=atol)
        return same_q and np.allclose(self.translation, other.translation, atol=atol)


@dataclass(frozen=True)
class DualQuaternion:
    real: np.ndarray
    dual: np.ndarray

    def normalized(self):
        n = np.linalg.norm(self.real)
        r, d = self.real / n, self.dual / n
        return DualQuaternion(r, d - np.dot(r, d) * r)

    def as_array(self):
        return np.concatenate([self.real, self.dual])


def _pure(t):
    ns = quat._ns(t)
    zero = ns.zeros_like(t[..., :1])
    return ns.cat([zero, t], -1) if ns is torch else np.concatenate([zero, t], -1)


def node_transform(positions, rotations, n, t) -> RigidTransform:
    """Motion of a node from frame n to frame t, rotating about its frame-n position.

    :param positions: [T, 3] node trajectory
    :param rotations: [T, 4]
    """
    q, tr = node_transform_batch(np.asarray(positions), np.asarray(rotations), n, t)
    return RigidTransform(q, tr)


def node_transform_batch(positions, rotations, n, t):
    """Batched node transforms.  positions [..., T, 3], rotations [..., T, 4];
    n and t are ints or index arrays over the T axis.  Returns (q, translation)."""
    pn, pt = positions[..., n, :], positions[..., t, :]
    qn, qt = rotations[..., n, :], rotations[..., t, :]
    if np.ndim(t) > 0:
        pn, qn = pn[..., None, :], qn[..., None, :]
    qn = quat.normalize(qn)
    qt = quat.normalize(qt)
    q = quat.mul(qt, quat.conj(qn))
    return q, pt - quat.rotate(q, pn)


def to_dual_quaternion(T: RigidTransform) -> DualQuaternion:
    r, d = to_dq_batch(T.rotation, T.translation)
    return DualQuaternion(r, d)


def from_dual_quaternion(dq: DualQuaternion) -> RigidTransform:
    q, t = from_dq_batch(*_normalize_dq(np.asarray(dq.real, float), np.asarray(dq.dual, float)))
    return RigidTransform(q, t)


def to_dq_batch(q, t):
    return q, 0.5 * quat.mul(_pure(t), q)


def from_dq_batch(qr, qd):
    return qr, 2.0 * quat.mul(qd, quat.conj(qr))[..., 1:]


def _normalize_dq(qr, qd):
    n = quat.norm(qr)
    if isinstance(n, torch.Tensor):
        if bool((n < DEGENERATE_NORM).any()):
            raise DegenerateBlend("blended rotation has vanishing norm (antipodal inputs)")
    elif np.any(n < DEGENERATE_NORM):
        raise DegenerateBlend("blended rotation has vanishing norm (antipodal inputs)")
    r = qr / n[..., None]
    d = qd / n[..., None]
    d = d - (r * d).sum(-1)[..., None] * r  # enforce <r, d> = 0
    return r, d


def dqb_batch(q, t, w):
    """Blend m rigid transforms per item.

    :param q: [..., m, 4] rotations; t: [..., m, 3] translations; w: [..., m] weights
    :return: (q_blend [..., 4], t_blend [..., 3])
    Element 0 of each set is the hemisphere reference.
    """
    qr, qd = to_dq_batch(q, t)
    dots = (qr * qr[..., :1, :]).sum(-1)
    ns = quat._ns(q)
    sign = ns.where(dots < 0, -1.0, 1.0)
    if ns is torch:
        sign = sign.to(q.dtype)
    ws = (w * sign)[..., None]
    br = (ws * qr).sum(-2)
    bd = (ws * qd).sum(-2)
    return from_dq_batch(*_normalize_dq(br, bd))


def dqb(weighted) -> RigidTransform:
    """DQB over [(w_j, T_j), ...]."""
    if not weighted:
        raise ValueError("empty blend set")
    w = np.array([float(a) for a, _ in weighted])
    if np.any(w < 0):
        raise ValueError("blend weights must be non-negative")
    q = np.stack([T.rotation for _, T in weighted])
    t = np.stack([T.translation for _, T in weighted])
    qb, tb = dqb_batch(q, t, w)
    return RigidTransform(qb, tb)


def interpolate_non_key(p_canon, q_canon, transforms, weights):
    """(p, q) of a non-key node from its neighbors' transforms at one frame.

    :param transforms: list of RigidTransform (anchor first)
    """
    Tb = dqb(list(zip(weights, transforms)))
    return Tb.apply(p_canon), quat.normalize(quat.mul(Tb.rotation, np.asarray(q_canon, float)))


def blend_targets(positions, rotations, nodes, neighbors, weights, frames, n=0):
    """DQB positions/rotations for many nodes and frames at once.

    :param positions: [N, T, 3], rotations [N, T, 4] (numpy or torch, current state)
    :param nodes: [M] non-key indices; neighbors [M, m] (anchor first); weights [M, m]
    :param frames: [F] frame indices
    :return: p [M, F, 3], q [M, F, 4]
    """
    frames = list(frames)
    sel = [n] + frames  # gather the needed frames first; index 0 is the canonical one
    nb_p = positions[:, sel][neighbors]  # [M, m, 1 + F, 3]
    nb_q = rotations[:, sel][neighbors]
    qj, tj = node_transform_batch(nb_p, nb_q, 0, list(range(1, len(sel))))  # [M, m, F, *]
    qj = qj.transpose(1, 2) if isinstance(qj, torch.Tensor) else np.swapaxes(qj, 1, 2)
    tj = tj.transpose(1, 2) if isinstance(tj, torch.Tensor) else np.swapaxes(tj, 1, 2)
    wb = weights[:, None, :]
    qb, tb = dqb_batch(qj, tj, wb)  # [M, F, *]
    pc = positions[nodes, n][:, None, :]
    qc = rotations[nodes, n][:, None, :]
    p = quat.rotate(qb, pc) + tb
    return p, quat.normalize(quat.mul(qb, qc))
