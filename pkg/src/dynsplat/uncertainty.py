"""Per-Gaussian, per-frame uncertainty from blend weights and convergence tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import ShapeError


@dataclass
class UncertaintyConfig:
    eta_c: float = 0.05  # l1 RGB error threshold for pixel convergence
    phi: float = 1e6  # uncertainty of unconverged / unobserved Gaussians
    r: tuple = (1.0, 1.0, 4.0)  # camera-frame axis factors (x, y, depth)
    eps_w: float = 1e-4
    convergence_fraction: float | None = None  # None: product over covered pixels

    def validate(self):
        if self.eta_c <= 0 or self.phi <= 0 or min(self.r) <= 0 or self.eps_w <= 0:
            raise ValueError("uncertainty parameters must be positive")


class NoCoverage(Exception):
    """Raised when a Gaussian covers no pixel, so its variance is undefined."""


def scalar_variance(weights) -> float:
    """Closed-form color variance (sum_h v_h^2)^-1 of a Gaussian's blend weights."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        raise NoCoverage("no covered pixels")
    return 1.0 / float(np.dot(w, w))


def pixel_convergence(rendered, truth, eta_c) -> np.ndarray:
    """Per-pixel indicator: 1 where the l1 RGB error is strictly below eta_c."""
    rendered, truth = np.asarray(rendered), np.asarray(truth)
    if rendered.shape != truth.shape:
        raise ShapeError(f"image shapes differ: {rendered.shape} vs {truth.shape}")
    return (np.abs(rendered - truth).sum(-1) < eta_c).astype(np.int8)


def gaussian_indicator(record, pixel_map, fraction=None) -> np.ndarray:
    """I_i for every Gaussian of a frame: product of the pixel indicators over covered
    pixels (or, with `fraction`, whether at least that share of them converged).
    Gaussians covering nothing get 0."""
    flat = np.asarray(pixel_map).reshape(-1)
    n = record.n_gaussians
    covered = np.bincount(record.gauss, minlength=n)
    bad = np.bincount(record.gauss, weights=(flat[record.pixel] == 0).astype(float), minlength=n)
    if fraction is None:
        ok = bad == 0
    else:
        ok = (covered - bad) >= fraction * covered
    return (ok & (covered > 0)).astype(np.int8)


def scalar_uncertainty(sigma2, indicator, phi):
    """u = I * sigma2 + (1 - I) * phi; sigma2 may be None / inf for no coverage."""
    if sigma2 is None or not np.isfinite(sigma2) or indicator == 0:
        return float(phi)
    return float(sigma2)


def anisotropic_uncertainty(u, R_wc, r) -> np.ndarray:
    """World-frame uncertainty R_wc diag(r * u) R_wc^T.  u may be an array; broadcasts."""
    u = np.asarray(u, dtype=float)
    R = np.asarray(R_wc, dtype=float)
    d = u[..., None] * np.asarray(r, dtype=float)
    return (R * d[..., None, :]) @ np.swapaxes(R, -1, -2)


def anisotropic_inverse(u, R_wc, r) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    R = np.asarray(R_wc, dtype=float)
    d = 1.0 / (u[..., None] * np.asarray(r, dtype=float))
    return (R * d[..., None, :]) @ np.swapaxes(R, -1, -2)


@dataclass
class UncertaintyField:
    u: np.ndarray  # [N, T]
    I: np.ndarray  # [N, T] in {0, 1}
    R_wc: np.ndarray  # [T, 3, 3] input camera rotations
    eta_c: float = 0.05
    phi: float = 1e6
    r: tuple = (1.0, 1.0, 4.0)

    @property
    def n(self):
        return self.u.shape[0]

    @property
    def T(self):
        return self.u.shape[1]

    def matrices(self) -> np.ndarray:
        """U_{i,t} for all Gaussians and frames: [N, T, 3, 3]."""
        return anisotropic_uncertainty(self.u, self.R_wc[None], self.r)

    def inverse_matrices(self) -> np.ndarray:
        return anisotropic_inverse(self.u, self.R_wc[None], self.r)

    def to_dict(self):
        return {"N": int(self.n), "T": int(self.T), "u": self.u.tolist(), "I": self.I.astype(int).tolist(),
                "r": list(self.r), "eta_c": self.eta_c, "phi": self.phi}

    @classmethod
    def from_dict(cls, d, cameras):
        """U is derived data; it is rebuilt from u and the input cameras."""
        R = np.stack([c.R_wc for c in cameras])
        u = np.array(d["u"], dtype=float).reshape(d["N"], d["T"])
        I = np.array(d["I"], dtype=np.int8).reshape(d["N"], d["T"])
        if R.shape[0] != d["T"]:
            raise ShapeError("camera count does not match the field's frame count")
        return cls(u, I, R, d["eta_c"], d["phi"], tuple(d["r"]))


def field_from_records(records, rendered, truth, cameras, config: UncertaintyConfig) -> UncertaintyField:
    """Assemble the field from per-frame WeightRecords and rendered/true images."""
    if not (len(records) == len(rendered) == len(truth) == len(cameras)):
        raise ShapeError("records, images and cameras must cover the same frames")
    T = len(records)
    N = records[0].n_gaussians if T else 0
    u = np.full((N, T), float(config.phi))
    I = np.zeros((N, T), dtype=np.int8)
    for t, rec in enumerate(records):
        pix = pixel_convergence(rendered[t], truth[t], config.eta_c)
        ind = gaussian_indicator(rec, pix, config.convergence_fraction)
        ssq = rec.sum_sq_weights()
        # phi must stay the maximum: weak coverage with sum v^2 < 1/phi maps to phi as well
        good = (ind == 1) & (ssq > 1.0 / config.phi)
        u[good, t] = 1.0 / ssq[good]
        I[:, t] = ind
    R = np.stack([c.R_wc for c in cameras])
    return UncertaintyField(u, I, R, config.eta_c, config.phi, tuple(config.r))


def estimate_field(model, scene, config: UncertaintyConfig = None, truth_images=None) -> UncertaintyField:
    """Render `model` through the scene's input cameras (occlusion applied) and estimate
    the uncertainty field against ground-truth renders of the scene."""
    from .renderer import render_sequence
    config = config or UncertaintyConfig()
    vis = scene.visibility()
    if truth_images is None:
        truth_images, _ = render_sequence(scene.gaussians, scene.input_cameras, vis, eps_w=config.eps_w)
    rendered, records = render_sequence(model, scene.input_cameras, vis, eps_w=config.eps_w)
    return field_from_records(records, rendered, truth_images, scene.input_cameras, config)
