"""CPU forward splatting with per-Gaussian blend-weight records.

Pixels are composited front to back in a single per-frame depth order
(sort key: view depth, then Gaussian index).  Pixel h of column x and row y
has its center at image coordinates (x, y).
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from . import quat
from .scene import Camera, DynamicGaussians, FrameGaussians, GaussianState, ShapeError

EPS_W = 1e-4  # coverage threshold defining which pixels a Gaussian covers
MAX_WEIGHT = 0.999
COV_FLOOR = 0.3  # px^2, eigenvalue floor of projected covariances
NEAR = 0.01
BACKGROUND = 0.5


@dataclass
class Splat2D:
    mean: np.ndarray  # [2] pixels
    covariance: np.ndarray  # [2, 2] pixels^2
    depth: float
    opacity: float
    color: np.ndarray
    index: int


def _project(frame: FrameGaussians, camera: Camera):
    """Vectorized EWA projection.  Returns means [N,2], cov2d [N,2,2], depth [N]."""
    xc = camera.to_camera(frame.positions)
    z = xc[:, 2]
    zs = np.where(z > NEAR, z, 1.0)
    mean = np.stack([camera.fx * xc[:, 0] / zs + camera.cx, camera.fy * xc[:, 1] / zs + camera.cy], -1)
    J = np.zeros((len(z), 2, 3))
    J[:, 0, 0] = camera.fx / zs
    J[:, 0, 2] = -camera.fx * xc[:, 0] / zs ** 2
    J[:, 1, 1] = camera.fy / zs
    J[:, 1, 2] = -camera.fy * xc[:, 1] / zs ** 2
    R = quat.to_matrix(frame.rotations)
    M = J @ camera.R_wc.T @ R * frame.scales[:, None, :]  # J W R S
    cov = M @ np.swapaxes(M, 1, 2)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    # eigenvalue floor
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    mid = 0.5 * (a + c)
    rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    l1, l2 = mid + rad, mid - rad
    if np.any(l2 < COV_FLOOR):
        w, V = np.linalg.eigh(cov)
        w = np.maximum(w, COV_FLOOR)
        cov = (V * w[:, None, :]) @ np.swapaxes(V, 1, 2)
        l1 = np.maximum(l1, COV_FLOOR)
    return mean, cov, z, l1


def _visible_mask(mean, z, lmax, camera, nsigma=3.0):
    r = nsigma * np.sqrt(lmax)
    return ((z > NEAR) & (mean[:, 0] + r >= -0.5) & (mean[:, 0] - r <= camera.width - 0.5)
            & (mean[:, 1] + r >= -0.5) & (mean[:, 1] - r <= camera.height - 0.5))


def project_gaussian(state: GaussianState, camera: Camera):
    """Project one Gaussian; returns a Splat2D or None when culled."""
    fr = FrameGaussians.from_states([state])
    mean, cov, z, lmax = _project(fr, camera)
    if not _visible_mask(mean, z, lmax, camera)[0]:
        return None
    return Splat2D(mean[0], cov[0], float(z[0]), state.alpha, state.c.copy(), 0)


@numba.njit(cache=True)
def _forward_kernel(mx, my, ia, ib, ic, opac, colors, x0, x1, y0, y1, W, H, bg,
                    image, trans, wsum, e_splat, e_pix, e_g, e_G, e_T):
    n_ent = 0
    for s in range(mx.shape[0]):
        a, b, c, op = ia[s], ib[s], ic[s], opac[s]
        for y in range(y0[s], y1[s]):
            dy = y - my[s]
            for x in range(x0[s], x1[s]):
                dx = x - mx[s]
                G = np.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
                g = op * G
                if g > 0.999:
                    g = 0.999
                h = y * W + x
                T = trans[h]
                v = T * g
                image[h, 0] += v * colors[s, 0]
                image[h, 1] += v * colors[s, 1]
                image[h, 2] += v * colors[s, 2]
                wsum[h] += v
                trans[h] = T * (1.0 - g)
                e_splat[n_ent] = s
                e_pix[n_ent] = h
                e_g[n_ent] = g
                e_G[n_ent] = G
                e_T[n_ent] = T
                n_ent += 1
    for h in range(W * H):
        for k in range(3):
            image[h, k] += trans[h] * bg[k]
    return n_ent


@numba.njit(cache=True)
def _backward_kernel(e_splat, e_pix, e_g, e_G, e_T, n_ent, opac, colors, trans, bg, dimg,
                     grad_c, grad_a):
    npix = trans.shape[0]
    behind = np.empty((npix, 3))
    for h in range(npix):
        for k in range(3):
            behind[h, k] = trans[h] * bg[k]
    for e in range(n_ent - 1, -1, -1):
        s = e_splat[e]
        h = e_pix[e]
        g = e_g[e]
        T = e_T[e]
        v = T * g
        dg = 0.0
        for k in range(3):
            grad_c[s, k] += v * dimg[h, k]
            dg += (T * colors[s, k] - behind[h, k] / (1.0 - g)) * dimg[h, k]
        if opac[s] * e_G[e] < 0.999:
            grad_a[s] += e_G[e] * dg
        for k in range(3):
            behind[h, k] += v * colors[s, k]


class WeightRecord:
    """Per-frame blend weights: for each Gaussian, the covered pixels h with
    transmittance T_i^h and blend weight v_i^h = T_i^h * g_i(h) above EPS_W."""

    def __init__(self, frame, n_gaussians, gauss, pixel, transmittance, weight):
        self.frame = frame
        self.n_gaussians = n_gaussians
        self.gauss = gauss  # [E] original Gaussian index, grouped per Gaussian
        self.pixel = pixel
        self.transmittance = transmittance
        self.weight = weight

    def __len__(self):
        return len(self.gauss)

    def entries(self, i):
        m = self.gauss == i
        return self.pixel[m], self.transmittance[m], self.weight[m]

    def covered(self):
        """Indices of Gaussians with at least one covered pixel."""
        return np.unique(self.gauss)

    def sum_sq_weights(self):
        return np.bincount(self.gauss, weights=self.weight ** 2, minlength=self.n_gaussians)

    def as_dict(self):
        """{i: [(h, T, v), ...]} view, mainly for inspection and tests."""
        out = {}
        for i, h, T, v in zip(self.gauss, self.pixel, self.transmittance, self.weight):
            out.setdefault(int(i), []).append((int(h), float(T), float(v)))
        return out


@dataclass
class Raster:
    """Full compositing state of one frame (all evaluated entries, not only recorded ones)."""
    image: np.ndarray  # [H, W, 3]
    residual_transmittance: np.ndarray  # [H, W]
    weight_sum: np.ndarray  # [H, W]
    record: WeightRecord
    order: np.ndarray  # sorted splat -> original Gaussian index
    _entries: tuple
    _opac: np.ndarray
    _colors: np.ndarray
    _bg: np.ndarray

    def backward(self, dimage, n_gaussians):
        """Exact gradients of a scalar w.r.t. colors [N,3] and opacities [N] given dL/dimage."""
        H, W = self.residual_transmittance.shape
        grad_c = np.zeros((len(self.order), 3))
        grad_a = np.zeros(len(self.order))
        e_splat, e_pix, e_g, e_G, e_T, n_ent = self._entries
        _backward_kernel(e_splat, e_pix, e_g, e_G, e_T, n_ent, self._opac, self._colors,
                         self.residual_transmittance.reshape(-1), self._bg,
                         np.ascontiguousarray(dimage, dtype=np.float64).reshape(-1, 3), grad_c, grad_a)
        gc = np.zeros((n_gaussians, 3))
        ga = np.zeros(n_gaussians)
        gc[self.order] = grad_c
        ga[self.order] = grad_a
        return gc, ga


def _window_sigma(eps_w):
    # beyond this many sigmas a fully opaque splat contributes less than eps_w
    return float(np.sqrt(2.0 * np.log(1.0 / eps_w)))


def rasterize(frame: FrameGaussians, camera: Camera, visible=None, background=BACKGROUND,
              eps_w=EPS_W, t=0) -> Raster:
    N = len(frame)
    W, H = camera.width, camera.height
    bg = np.broadcast_to(np.asarray(background, dtype=float), (3,)).copy()
    if N:
        mean, cov, z, lmax = _project(frame, camera)
        keep = _visible_mask(mean, z, lmax, camera)
        if visible is not None:
            keep &= np.asarray(visible, dtype=bool)
    else:
        keep = np.zeros(0, dtype=bool)
    idx = np.nonzero(keep)[0]
    if len(idx):
        order = idx[np.lexsort((idx, z[idx]))]
        m, cv = mean[order], cov[order]
        det = cv[:, 0, 0] * cv[:, 1, 1] - cv[:, 0, 1] ** 2
        ia, ib, ic = cv[:, 1, 1] / det, -cv[:, 0, 1] / det, cv[:, 0, 0] / det
        r = _window_sigma(eps_w) * np.sqrt(lmax[order])
        x0 = np.clip(np.ceil(m[:, 0] - r), 0, W).astype(np.int64)
        x1 = np.clip(np.floor(m[:, 0] + r) + 1, 0, W).astype(np.int64)
        y0 = np.clip(np.ceil(m[:, 1] - r), 0, H).astype(np.int64)
        y1 = np.clip(np.floor(m[:, 1] + r) + 1, 0, H).astype(np.int64)
        x1, y1 = np.maximum(x1, x0), np.maximum(y1, y0)
        cap = int(((x1 - x0) * (y1 - y0)).sum())
        opac = np.ascontiguousarray(frame.opacities[order], dtype=np.float64)
        colors = np.ascontiguousarray(frame.colors[order], dtype=np.float64)
    else:
        order = np.zeros(0, dtype=np.int64)
        m = np.zeros((0, 2))
        ia = ib = ic = np.zeros(0)
        x0 = x1 = y0 = y1 = np.zeros(0, dtype=np.int64)
        cap = 0
        opac = np.zeros(0)
        colors = np.zeros((0, 3))

    image = np.zeros((H * W, 3))
    trans = np.ones(H * W)
    wsum = np.zeros(H * W)
    e_splat = np.empty(cap, dtype=np.int64)
    e_pix = np.empty(cap, dtype=np.int64)
    e_g, e_G, e_T = np.empty(cap), np.empty(cap), np.empty(cap)
    n_ent = _forward_kernel(np.ascontiguousarray(m[:, 0]), np.ascontiguousarray(m[:, 1]),
                            ia, ib, ic, opac, colors, x0, x1, y0, y1, W, H, bg,
                            image, trans, wsum, e_splat, e_pix, e_g, e_G, e_T)
    v = e_T[:n_ent] * e_g[:n_ent]
    rec_mask = v > eps_w
    record = WeightRecord(t, N, order[e_splat[:n_ent][rec_mask]], e_pix[:n_ent][rec_mask],
                          e_T[:n_ent][rec_mask], v[rec_mask])
    return Raster(image.reshape(H, W, 3), trans.reshape(H, W), wsum.reshape(H, W), record, order,
                  (e_splat, e_pix, e_g, e_G, e_T, n_ent), opac, colors, bg)


def _as_frame(states) -> FrameGaussians:
    if isinstance(states, FrameGaussians):
        return states
    return FrameGaussians.from_states(list(states))


def render_frame(states, camera: Camera, visible=None, background=BACKGROUND, eps_w=EPS_W, t=0):
    """Render one frame.  `states` is a FrameGaussians or a sequence of GaussianState.

    Returns (image [H, W, 3], WeightRecord).
    """
    r = rasterize(_as_frame(states), camera, visible, background, eps_w, t)
    return r.image, r.record


def render_sequence(model: DynamicGaussians, cameras, visibility=None, background=BACKGROUND,
                    eps_w=EPS_W):
    """Render every frame of a model with its per-frame camera.

    :param visibility: optional [N, T] bool mask (occlusion schedule)
    :return: (list of images, list of WeightRecords)
    """
    if len(cameras) != model.T:
        raise ShapeError(f"got {len(cameras)} cameras for {model.T} frames")
    images, records = [], []
    for t, cam in enumerate(cameras):
        vis = None if visibility is None else visibility[:, t]
        img, rec = render_frame(model.frame(t), cam, vis, background, eps_w, t)
        images.append(img)
        records.append(rec)
    return images, records


def to_uint8(image):
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image, comment=None):
    """Binary 8-bit PPM; `comment` goes into a header comment line."""
    img = to_uint8(image)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n")
        if comment:
            f.write(b"# " + comment.encode("ascii") + b"\n")
        f.write(b"%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+255\s", data)
    if m is None:
        raise ValueError("not an 8-bit binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    pix = np.frombuffer(data[m.end(): m.end() + w * h * 3], dtype=np.uint8)
    return pix.reshape(h, w, 3).astype(float) / 255.0


def write_png(path, image, comment=None):
    from PIL import Image as PILImage
    from PIL.PngImagePlugin import PngInfo
    info = PngInfo()
    if comment:
        info.add_text("Comment", comment)
    PILImage.fromarray(to_uint8(image)).save(path, pnginfo=info)
