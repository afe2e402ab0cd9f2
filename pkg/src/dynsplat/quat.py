"""Quaternion helpers, (w, x, y, z) convention.

Every function works on numpy arrays and on torch tensors alike so the same
code serves geometry construction (numpy) and the differentiable losses (torch).
"""
import numpy as np
import torch


def _ns(x):
    return torch if isinstance(x, torch.Tensor) else np


def _stack(xs, axis=-1):
    return _ns(xs[0]).stack(xs, axis)


def identity(shape=()):
    q = np.zeros(tuple(shape) + (4,))
    q[..., 0] = 1.0
    return q


def norm(q):
    return _ns(q).sqrt((q * q).sum(-1))


def normalize(q):
    return q / norm(q)[..., None]


def conj(q):
    return _stack([q[..., 0], -q[..., 1], -q[..., 2], -q[..., 3]])


def inverse(q):
    return conj(q) / (q * q).sum(-1)[..., None]


def mul(a, b):
    """Hamilton product a*b, broadcasting over leading dims."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return _stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def to_matrix(q):
    """Rotation matrix of a quaternion; q is normalized first.  [..., 4] -> [..., 3, 3]"""
    q = normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        _stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)]),
        _stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)]),
        _stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]),
    ]
    return _stack(rows, -2)


def rotate(q, v):
    """Rotate vectors v [..., 3] by unit quaternions q [..., 4]."""
    w = q[..., :1]
    u = q[..., 1:]
    ns = _ns(q)
    if ns is np:
        uv = np.cross(u, v)
        uuv = np.cross(u, uv)
    else:
        u, v = torch.broadcast_tensors(u, v)
        w = w.expand(u.shape[:-1] + (1,))
        uv = torch.linalg.cross(u, v)
        uuv = torch.linalg.cross(u, uv)
    return v + 2.0 * (w * uv + uuv)


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def from_matrix(R):
    """Unit quaternion (w >= 0) of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.array(q)
        q /= np.linalg.norm(q)
        out[n] = q if q[0] >= 0 else -q
    return out.reshape(R.shape[:-2] + (4,))


def positive_hemisphere(q):
    """Flip quaternions so that w >= 0 (same rotation)."""
    ns = _ns(q)
    sign = ns.where(q[..., :1] < 0, -1.0, 1.0)
    if ns is torch:
        sign = sign.to(q.dtype)
    return q * sign


def random_unit(rng, shape=()):
    q = rng.normal(size=tuple(shape) + (4,))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)
