"""Pretraining, drift simulation and the graph-regularized optimization loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .losses import (DTYPE, LossWeights, GraphTerms, motion_terms, perception_terms,
                     total_terms, report_of)
from .renderer import rasterize, render_sequence
from .scene import DynamicGaussians, SyntheticScene

GROUPS = ("positions", "rotations", "colors", "opacities")
GEOMETRY = ("positions", "rotations")


class Divergence(FloatingPointError):
    """Raised when a loss term or its gradient stops being finite."""


@dataclass
class ScheduleConfig:
    iterations: int = 1600
    batch: int = 8
    head: float = 0.1  # leading fraction of geometry-only steps
    tail: float = 0.2  # trailing fraction of geometry-only steps
    lr_positions: float = 1.6e-3
    lr_rotations: float = 1e-3
    lr_colors: float = 2.5e-2
    lr_opacities: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    photometric_positions: bool = False  # finite-difference image gradients for positions
    fd_step: float = 1e-4
    fd_max_gaussians: int = 200
    seed: int = 0

    def validate(self):
        if self.iterations < 0 or self.batch < 1:
            raise ValueError("iterations must be >= 0 and batch >= 1")
        if not (0 <= self.head and 0 <= self.tail and self.head + self.tail <= 1):
            raise ValueError("phase fractions must lie in [0, 1] and sum to at most 1")

    def lr(self):
        return {"positions": self.lr_positions, "rotations": self.lr_rotations,
                "colors": self.lr_colors, "opacities": self.lr_opacities}

    def active_groups(self, it):
        """Parameter groups updated at iteration `it`."""
        lo = int(math.floor(self.head * self.iterations))
        hi = self.iterations - int(math.floor(self.tail * self.iterations))
        return GROUPS if lo <= it < hi else GEOMETRY


@dataclass
class OptimizerState:
    lr: dict
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)  # per-group step count

    @property
    def step(self):
        return max(self.t.values(), default=0)

    def to_dict(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "t": self.t, "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["lr"], d["beta1"], d["beta2"], d["eps"],
                   {k: np.array(v) for k, v in d["m"].items()}, {k: np.array(v) for k, v in d["v"].items()},
                   {k: int(v) for k, v in d["t"].items()})


def adam_step(state: OptimizerState, group, params, grad):
    """One adaptive-moment update of `params` (returns the new array).

    Rotations are renormalized to unit quaternions afterwards.
    """
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {params.shape}")
    m = state.m.get(group, np.zeros_like(params))
    v = state.v.get(group, np.zeros_like(params))
    t = state.t.get(group, 0) + 1
    m = state.beta1 * m + (1 - state.beta1) * grad
    v = state.beta2 * v + (1 - state.beta2) * grad * grad
    mhat = m / (1 - state.beta1 ** t)
    vhat = v / (1 - state.beta2 ** t)
    out = params - state.lr[group] * mhat / (np.sqrt(vhat) + state.eps)
    if group == "rotations":
        # rows that did not move keep their exact bits
        moved = np.any(out != params, axis=-1, keepdims=True)
        out = np.where(moved, out / np.linalg.norm(out, axis=-1, keepdims=True), params)
    state.m[group], state.v[group], state.t[group] = m, v, t
    return out


def fd_gradient(closure, x, step=1e-5):
    """Central-difference gradient of a scalar closure at array x."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        fp = closure(x)
        flat[k] = old - step
        fm = closure(x)
        flat[k] = old
        gf[k] = (fp - fm) / (2 * step)
    return g


# ---------------------------------------------------------------------------
# snapshots

@dataclass(frozen=True)
class PretrainedSnapshot:
    model: DynamicGaussians
    provenance: str  # "vanilla-optimized" | "drift-simulated" | "ground-truth"

    def __post_init__(self):
        m = self.model.copy()
        for a in (m.positions, m.rotations, m.scales, m.opacities, m.colors):
            a.setflags(write=False)
        object.__setattr__(self, "model", m)

    @property
    def positions(self):
        return self.model.positions

    @property
    def rotations(self):
        return self.model.rotations

    def to_dict(self):
        return {"provenance": self.provenance, "canonical_frame": self.model.canonical_frame,
                "gaussians": self.model.to_records()}

    @classmethod
    def from_dict(cls, d):
        return cls(DynamicGaussians.from_records(d["gaussians"], d.get("canonical_frame", 0)), d["provenance"])


@dataclass
class DriftConfig:
    sigma: float = 0.01  # per-frame random-walk step inside occlusion intervals
    global_noise: float = 1e-3
    seed: int = 0


def simulate_pretrained_drift(scene: SyntheticScene, drift: DriftConfig = None):
    """Ground truth plus random-walk drift inside each occlusion interval and small
    global noise.  Returns (model, snapshot)."""
    drift = drift or DriftConfig()
    rng = np.random.default_rng(drift.seed)
    model = scene.gaussians.copy()
    N, T = model.n, model.T
    walk = np.zeros((N, T, 3))
    for i in range(N):
        for s, e in scene.occlusion[i]:
            steps = rng.normal(scale=drift.sigma, size=(e - s, 3))
            walk[i, s:e] = np.cumsum(steps, axis=0)
    model.positions = model.positions + walk + rng.normal(scale=drift.global_noise, size=(N, T, 3))
    return model, PretrainedSnapshot(model, "drift-simulated")


@dataclass
class PretrainConfig:
    iterations: int = 300
    position_noise: float = 0.005
    color_noise: float = 0.05
    opacity_noise: float = 0.05
    k: int = 8
    seed: int = 0


def perturbed_ground_truth(scene, cfg: PretrainConfig):
    rng = np.random.default_rng(cfg.seed)
    m = scene.gaussians.copy()
    N, T = m.n, m.T
    m.positions = m.positions + rng.normal(scale=cfg.position_noise, size=(N, T, 3))
    m.colors = np.clip(m.colors + rng.normal(scale=cfg.color_noise, size=(N, 3)), 0, 1)
    m.opacities = np.clip(m.opacities + rng.normal(scale=cfg.opacity_noise, size=N), 0.01, 0.99)
    return m


def pretrain_vanilla(scene, cfg: PretrainConfig = None, schedule: ScheduleConfig = None, lw=None,
                     truth_images=None):
    """Noisy ground truth refined with perception + uniform motion losses.

    Returns (model, snapshot, loss history)."""
    cfg = cfg or PretrainConfig()
    schedule = schedule or ScheduleConfig(iterations=cfg.iterations, seed=cfg.seed)
    model = perturbed_ground_truth(scene, cfg)
    model, hist = optimize_vanilla(model, scene, schedule, lw, cfg.k, truth_images)
    return model, PretrainedSnapshot(model, "vanilla-optimized"), hist


# ---------------------------------------------------------------------------
# the loop

def ground_truth_images(scene):
    images, _ = render_sequence(scene.gaussians, scene.input_cameras, scene.visibility())
    return images


def _photometric(model, scene, truth, vis, frames, lw, need_grad, fd_positions, fd_step):
    """Batch-averaged perception terms and (color, opacity, position) gradients."""
    N = model.n
    gc, ga = np.zeros((N, 3)), np.zeros(N)
    gp = np.zeros_like(model.positions) if fd_positions else None
    rasters = [rasterize(model.frame(t), scene.input_cameras[t], vis[:, t], t=t) for t in frames]
    img = torch.tensor(np.stack([r.image for r in rasters]), dtype=DTYPE, requires_grad=need_grad)
    l1, dssim = perception_terms(img, torch.as_tensor(np.stack([truth[t] for t in frames]), dtype=DTYPE))
    if need_grad:
        (lw.rgb_l1 * l1 + lw.rgb_ssim * dssim).backward()
        for r, d, t in zip(rasters, img.grad.numpy(), frames):
            if np.array_equal(r.image, truth[t]):
                continue  # exact match: the true gradient is zero, skip the round-off
            c, a = r.backward(d, N)
            gc += c
            ga += a
    if fd_positions:
        for t in frames:
            gp[:, t] = _fd_image_positions(model, scene.input_cameras[t], vis[:, t], truth[t], t, lw,
                                           fd_step) / len(frames)
    return {"rgb_l1": float(l1.detach()), "rgb_ssim": float(dssim.detach())}, gc, ga, gp


def _fd_image_positions(model, cam, vis, truth, t, lw, h):
    tt = torch.as_tensor(truth, dtype=DTYPE)

    def f(P):
        fr = model.frame(t)
        fr.positions = P
        img = torch.as_tensor(rasterize(fr, cam, vis, t=t).image, dtype=DTYPE)
        l1, d = perception_terms(img, tt)
        return float(lw.rgb_l1 * l1 + lw.rgb_ssim * d)

    return fd_gradient(f, model.positions[:, t].copy(), h)


def _name_bad_term(P0, Q0, objective, frames):
    """Evaluate each term on its own and return the first with a non-finite value or gradient."""
    P = torch.tensor(P0, dtype=DTYPE, requires_grad=True)
    Q = torch.tensor(Q0, dtype=DTYPE, requires_grad=True)
    for name, (mult, val) in objective(P, Q, frames).items():
        if not torch.isfinite(val):
            return name
        if val.requires_grad:
            gp, gq = torch.autograd.grad(val, (P, Q), retain_graph=True, allow_unused=True)
            for g in (gp, gq):
                if g is not None and not torch.isfinite(g).all():
                    return name
    return "rgb"


def run_loop(model: DynamicGaussians, scene: SyntheticScene, objective, schedule: ScheduleConfig,
             lw: LossWeights, truth_images=None, callback=None, state: OptimizerState = None):
    """Shared optimization loop.

    objective(P, Q, frames) -> {name: (multiplier, tensor)} supplies the geometric terms;
    the perception term is added here.  Pass `state` to keep the optimizer moments.
    Returns (model, [LossReport]).
    """
    schedule.validate()
    model = model.copy()
    if schedule.iterations == 0:
        return model, []
    truth = truth_images if truth_images is not None else ground_truth_images(scene)
    vis = scene.visibility()
    T = model.T
    rng = np.random.default_rng(schedule.seed)
    if state is None:
        state = OptimizerState(schedule.lr(), schedule.beta1, schedule.beta2, schedule.eps)
    fd_pos = schedule.photometric_positions
    if fd_pos and model.n > schedule.fd_max_gaussians:
        raise ValueError(f"photometric position gradients are limited to {schedule.fd_max_gaussians} Gaussians")
    history = []
    for it in range(schedule.iterations):
        frames = sorted(int(t) for t in rng.choice(T, size=min(schedule.batch, T), replace=False))
        active = schedule.active_groups(it)
        P = torch.tensor(model.positions, dtype=DTYPE, requires_grad=True)
        Q = torch.tensor(model.rotations, dtype=DTYPE, requires_grad=True)
        terms = objective(P, Q, frames)
        need_photo = "colors" in active
        rgb, gc, ga, gp = _photometric(model, scene, truth, vis, frames, lw, need_photo,
                                       fd_pos and "positions" in active, schedule.fd_step)
        terms["rgb_l1"] = (lw.rgb_l1, torch.tensor(rgb["rgb_l1"], dtype=DTYPE))
        terms["rgb_ssim"] = (lw.rgb_ssim, torch.tensor(rgb["rgb_ssim"], dtype=DTYPE))
        geo = sum(m * v for k, (m, v) in terms.items() if not k.startswith("rgb"))
        if not torch.isfinite(geo):
            raise Divergence(f"iteration {it}: non-finite loss in term {_name_bad_term(model.positions, model.rotations, objective, frames)}")
        if geo.requires_grad:
            geo.backward()
        grads = {"positions": P.grad.numpy() if P.grad is not None else np.zeros_like(model.positions),
                 "rotations": Q.grad.numpy() if Q.grad is not None else np.zeros_like(model.rotations),
                 "colors": gc, "opacities": ga}
        if gp is not None:
            grads["positions"] = grads["positions"] + gp
        for g in active:
            if not np.isfinite(grads[g]).all():
                bad = _name_bad_term(model.positions, model.rotations, objective, frames)
                raise Divergence(f"iteration {it}: non-finite gradient for {g} from term {bad}")
        rep = report_of(terms, it)
        history.append(rep)
        if not math.isfinite(rep.total):
            raise Divergence(f"iteration {it}: non-finite total loss")
        for g in active:
            cur = getattr(model, g)
            setattr(model, g, adam_step(state, g, cur, grads[g]))
        model.colors = np.clip(model.colors, 0.0, 1.0)
        model.opacities = np.clip(model.opacities, 0.0, 1.0)
        if callback is not None:
            callback(it, model, rep)
    return model, history


def graph_objective(graph_terms: GraphTerms, lw: LossWeights):
    def objective(P, Q, frames):
        return total_terms(P, Q, graph_terms, frames, lw)
    return objective


def vanilla_objective(edges, nodes, lw: LossWeights, n=0):
    def objective(P, Q, frames):
        terms, lam = motion_terms(P, Q, edges, nodes, frames, lw, n)
        return {f"motion_{k}": (lam[k], v) for k, v in terms.items()}
    return objective


def knn_edges(positions, k, frame=0):
    from .graph import knn_graph
    g = knn_graph(positions, k, frame)
    src = np.concatenate([[i] * len(g[i][0]) for i in sorted(g)]).astype(np.int64)
    dst = np.concatenate([g[i][0] for i in sorted(g)]).astype(np.int64)
    w = np.concatenate([g[i][1] for i in sorted(g)])
    return torch.as_tensor(src), torch.as_tensor(dst), torch.as_tensor(w, dtype=DTYPE)


def optimize_vanilla(model, scene, schedule: ScheduleConfig = None, lw=None, k=8, truth_images=None,
                     state=None):
    """Baseline: perception + motion losses on a Euclidean kNN graph over all Gaussians,
    no anchors and no uncertainty."""
    schedule = schedule or ScheduleConfig()
    lw = lw or LossWeights()
    edges = knn_edges(model.positions, k, model.canonical_frame)
    obj = vanilla_objective(edges, torch.arange(model.n), lw, model.canonical_frame)
    return run_loop(model, scene, obj, schedule, lw, truth_images, state=state)


def optimize(model, snapshot: PretrainedSnapshot, field, graph, scene, schedule: ScheduleConfig = None,
             lw=None, truth_images=None, callback=None, state=None):
    """Uncertainty-aware optimization (anchors + DQB + graph motion losses + perception)."""
    schedule = schedule or ScheduleConfig()
    lw = lw or LossWeights()
    lw.validate()
    gt = GraphTerms.build(graph, field, snapshot.positions, model.canonical_frame)
    return run_loop(model, scene, graph_objective(gt, lw), schedule, lw, truth_images, callback, state)


# ---------------------------------------------------------------------------
# checkpoints

def checkpoint_dict(model: DynamicGaussians, meta=None):
    return {"canonical_frame": model.canonical_frame, "gaussians": model.to_records(), "meta": meta or {}}


def model_from_checkpoint(d):
    return DynamicGaussians.from_records(d["gaussians"], d.get("canonical_frame", 0))
