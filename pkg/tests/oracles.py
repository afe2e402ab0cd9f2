"""Independent reference implementations used as test oracles.

Nothing here imports the package's numerical code, so agreement between the two
is evidence rather than tautology.
"""
import numpy as np


def central_difference(f, x, h=1e-5):
    x = np.array(x, dtype=float)
    g = np.empty(x.size)
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = h
        g[k] = (f((x.ravel() + e).reshape(x.shape)) - f((x.ravel() - e).reshape(x.shape))) / (2 * h)
    return g.reshape(x.shape)


def rel_error(a, n, floor=1e-3):
    a, n = np.ravel(a), np.ravel(n)
    scale = max(np.abs(a).max(initial=0), np.abs(n).max(initial=0))
    if scale == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float((np.abs(a - n) / den).max())


def qmul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                     w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                     w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2])


def rotmat(q):
    """Rotation matrix from a (w, x, y, z) quaternion, written out by hand."""
    w, x, y, z = np.asarray(q, float) / np.linalg.norm(q)
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                     [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                     [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])


def axis_angle(axis, angle):
    a = np.asarray(axis, float) / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * a])


def quaternion_average(qs, ws):
    """Hemisphere-aligned normalized weighted sum (exact for coaxial rotations)."""
    ref = qs[0]
    acc = sum(w * (q if np.dot(q, ref) >= 0 else -q) for q, w in zip(qs, ws))
    return acc / np.linalg.norm(acc)


def same_rotation(a, b):
    return min(np.abs(a - b).max(), np.abs(a + b).max())


def brute_knn(keys, positions, U, t_hat, k, inverse=False):
    """All-pairs k nearest neighbors under sqrt(d^T (U_i + U_j) d), ties by index."""
    out = {}
    for i in keys:
        t = t_hat[i]
        cand = []
        for j in keys:
            if j == i:
                continue
            M = U[i, t] + U[j, t]
            if inverse:
                M = np.linalg.inv(M)
            d = positions[i, t] - positions[j, t]
            cand.append((float(np.sqrt(d @ M @ d)), int(j)))
        cand.sort()
        out[int(i)] = [j for _, j in cand[:k]]
    return out


def euclid_knn(points, k):
    out = {}
    for i in range(len(points)):
        d = sorted((float(np.linalg.norm(points[i] - points[j])), j) for j in range(len(points)) if j != i)
        out[i] = [j for _, j in d[:k]]
    return out


def sampled_projection_covariance(mean3, cov3, fx, fy, n=200000, seed=0):
    """Project samples of a camera-frame 3D Gaussian with a pinhole and fit a 2D covariance."""
    rng = np.random.default_rng(seed)
    x = rng.multivariate_normal(mean3, cov3, size=n)
    uv = np.stack([fx * x[:, 0] / x[:, 2], fy * x[:, 1] / x[:, 2]], 1)
    return np.cov(uv.T)
