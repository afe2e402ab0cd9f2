"""Image and trajectory metrics, and the held-out view-range breakdown."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .losses import ssim_t, DTYPE
from .scene import ConfigError, ShapeError

BUCKETS = ((0.0, 60.0), (60.0, 120.0), (120.0, 180.0))


def _pair(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """10 log10(1 / MSE); math.inf on an exact match."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def ssim(a, b):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03, range 1)."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return float(ssim_t(torch.as_tensor(a, dtype=DTYPE), torch.as_tensor(b, dtype=DTYPE)))


def _query(pred, truth, query):
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeError(f"trajectory shapes differ: {pred.shape} vs {truth.shape}")
    err = np.linalg.norm(pred - truth, axis=-1)
    if query is not None:
        err = err[np.asarray(query, dtype=bool)]
    return err


def epe(pred, truth, query=None):
    """Mean end-point error over the queried (i, t) entries (boolean mask [N, T])."""
    err = _query(pred, truth, query)
    return float(err.mean()) if err.size else math.nan


def pck(pred, truth, threshold, query=None, relative_to=None):
    """Fraction of queried points within `threshold`.

    With `relative_to` set, threshold is a fraction of that length (e.g. 0.05 of
    the bounding-box diagonal); otherwise it is in world units.
    """
    err = _query(pred, truth, query)
    thr = threshold * relative_to if relative_to is not None else threshold
    return float((err <= thr).mean()) if err.size else math.nan


def bucket_of(offset_deg):
    """Right-closed angular bucket (lo, hi] of an offset, folded into [0, 180]."""
    off = abs(float(offset_deg)) % 360.0
    off = min(off, 360.0 - off)
    for lo, hi in BUCKETS:
        if lo < off <= hi:
            return lo, hi
    return None  # offset 0: on the input trajectory


def bucket_name(b):
    return f"({b[0]:g},{b[1]:g}]"


@dataclass
class MetricReport:
    views: list = field(default_factory=list)  # dicts: frame, offset_deg, bucket, psnr, ssim
    buckets: dict = field(default_factory=dict)  # name -> {n, psnr, ssim}
    tracking: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "frame", "offset_deg", "bucket", "psnr", "ssim", "n"])
        for v in self.views:
            w.writerow(["view", v["frame"], repr(v["offset_deg"]), v["bucket"], repr(v["psnr"]), repr(v["ssim"]), 1])
        for name, b in self.buckets.items():
            w.writerow(["bucket", "", "", name, repr(b["psnr"]), repr(b["ssim"]), b["n"]])
        return buf.getvalue()

    def to_json(self):
        def clean(x):
            if isinstance(x, float) and math.isinf(x):
                return "inf" if x > 0 else "-inf"
            if isinstance(x, float) and math.isnan(x):
                return "nan"
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, list):
                return [clean(v) for v in x]
            return x
        return json.dumps(clean({"buckets": self.buckets, "tracking": self.tracking, "meta": self.meta,
                                 "views": self.views}), indent=1, sort_keys=True)


def _mean_psnr(vals):
    # the mean is infinite if any view matched exactly
    return math.inf if any(math.isinf(v) for v in vals) else float(np.mean(vals))


def view_range_eval(model, scene, pck_fraction=0.05, pck_abs=None) -> MetricReport:
    """Render each held-out camera with all Gaussians visible, compare with the ground
    truth render, and aggregate per angular bucket.  Tracking metrics compare the
    model's trajectories with the scene's."""
    from .renderer import render_frame
    if not scene.eval_views:
        raise ConfigError("scene has no held-out cameras")
    rep = MetricReport()
    per = {bucket_name(b): [] for b in BUCKETS}
    for ev in scene.eval_views:
        b = bucket_of(ev.offset_deg)
        name = bucket_name(b) if b else "on-trajectory"
        img, _ = render_frame(model.frame(ev.frame), ev.camera)
        ref, _ = render_frame(scene.gaussians.frame(ev.frame), ev.camera)
        v = {"frame": int(ev.frame), "offset_deg": float(ev.offset_deg), "bucket": name,
             "psnr": psnr(img, ref), "ssim": ssim(img, ref)}
        rep.views.append(v)
        per.setdefault(name, []).append(v)
    for name, vs in per.items():
        rep.buckets[name] = {"n": len(vs),
                             "psnr": _mean_psnr([v["psnr"] for v in vs]) if vs else math.nan,
                             "ssim": float(np.mean([v["ssim"] for v in vs])) if vs else math.nan}
    gt = scene.gaussians.positions
    occ = scene.occluded_mask()
    diag = scene.bbox_diagonal()
    rep.tracking = {
        "epe": epe(model.positions, gt),
        "pck_rel": pck(model.positions, gt, pck_fraction, relative_to=diag),
        "pck_rel_fraction": pck_fraction,
        "epe_occluded": epe(model.positions, gt, occ) if occ.any() else math.nan,
        "pck_rel_occluded": pck(model.positions, gt, pck_fraction, occ, relative_to=diag) if occ.any() else math.nan,
    }
    if pck_abs is not None:
        rep.tracking["pck_abs"] = pck(model.positions, gt, pck_abs)
        rep.tracking["pck_abs_threshold"] = pck_abs
    return rep
