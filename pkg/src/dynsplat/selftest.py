"""Small oracle suite behind `dynsplat selftest`."""
from __future__ import annotations

import numpy as np
import torch

from . import quat
from .deform import RigidTransform, dqb, from_dual_quaternion, to_dual_quaternion
from .losses import DTYPE, LossWeights, iso_loss, perception_loss, rigid_loss, rot_loss, vel_loss, acc_loss
from .optim import fd_gradient
from .uncertainty import scalar_variance


def variance_monte_carlo(trials=10000, configs=5, seed=0):
    """Least-squares color estimates under unit noise vs the closed-form variance."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(configs):
        v = rng.uniform(0.05, 1.0, size=rng.integers(3, 30))
        c = rng.uniform()
        b = v[None] * c + rng.normal(size=(trials, len(v)))
        est = b @ v / np.dot(v, v)
        worst = max(worst, abs(est.var() / scalar_variance(v) - 1.0))
    return worst < 0.1, f"worst relative deviation {worst:.3f}"


def gradient_checks(seed=0, step=1e-5):
    rng = np.random.default_rng(seed)
    N, T = 6, 4
    P0 = rng.normal(size=(N, T, 3))
    Q0 = quat.random_unit(rng, (N, T))
    src = np.repeat(np.arange(N), 2)
    dst = (src + 1 + np.tile([0, 1], N)) % N
    w = rng.uniform(0.2, 1.0, size=len(src))
    frames = [1, 2, 3]
    fns = {
        "iso": lambda P, Q: iso_loss(P, src, dst, w, frames),
        "rigid": lambda P, Q: rigid_loss(P, Q, src, dst, w, frames),
        "rot": lambda P, Q: rot_loss(Q, src, dst, w, frames),
        "vel": lambda P, Q: vel_loss(P, Q, np.arange(N), frames),
        "acc": lambda P, Q: acc_loss(P, Q, np.arange(N), frames),
    }
    worst = 0.0
    for fn in fns.values():
        P = torch.tensor(P0, dtype=DTYPE, requires_grad=True)
        Q = torch.tensor(Q0, dtype=DTYPE, requires_grad=True)
        fn(P, Q).backward()
        for x0, g, which in ((P0, P.grad, 0), (Q0, Q.grad, 1)):
            def f(x):
                args = [torch.as_tensor(P0), torch.as_tensor(Q0)]
                args[which] = torch.as_tensor(x)
                return float(fn(*args))
            num = fd_gradient(f, x0, step)
            worst = max(worst, relative_error(np.zeros_like(x0) if g is None else g.numpy(), num))
    img = rng.uniform(size=(8, 8, 3))
    ref = rng.uniform(size=(8, 8, 3))
    x = torch.tensor(img, requires_grad=True)
    perception_loss(x, ref, LossWeights()).backward()
    num = fd_gradient(lambda y: float(perception_loss(y, ref, LossWeights())), img, step)
    worst = max(worst, relative_error(x.grad.numpy(), num))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def relative_error(analytic, numeric, floor=1e-3):
    """max_k |a_k - n_k| / max(|a_k|, |n_k|, floor * max|n|)."""
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    scale = max(float(np.abs(n).max()), float(np.abs(a).max()))
    if scale == 0.0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float((np.abs(a - n) / den).max())


def dqb_oracles(cases=200, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        T = RigidTransform(quat.random_unit(rng), rng.normal(size=3))
        back = from_dual_quaternion(to_dual_quaternion(T))
        worst = max(worst, _dist(back, T))
        worst = max(worst, _dist(dqb([(1.0, T)]), T))
        ang = rng.uniform(0, np.pi / 2, size=2)
        axis = rng.normal(size=3)
        Ts = [RigidTransform(quat.from_axis_angle(axis, a), np.zeros(3)) for a in ang]
        wa = rng.uniform()
        ref = quat.normalize(wa * Ts[0].rotation + (1 - wa) * Ts[1].rotation)
        got = dqb([(wa, Ts[0]), (1 - wa, Ts[1])]).rotation
        worst = max(worst, float(np.abs(quat.positive_hemisphere(got) - quat.positive_hemisphere(ref)).max()))
    return worst < 1e-9, f"max deviation {worst:.2e}"


def _dist(A, B):
    dq = min(np.abs(A.rotation - B.rotation).max(), np.abs(A.rotation + B.rotation).max())
    return float(max(dq, np.abs(A.translation - B.translation).max()))


def run_all():
    out = []
    for name, fn in (("variance-monte-carlo", variance_monte_carlo), ("gradient-checks", gradient_checks),
                     ("dqb-oracles", dqb_oracles)):
        ok, detail = fn()
        out.append((name, bool(ok), detail))
    return out
