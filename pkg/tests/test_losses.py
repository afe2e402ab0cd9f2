import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from dynsplat import quat
from dynsplat.losses import (DTYPE, GraphTerms, LossReport, LossWeights, acc_terms, iso_loss, key_terms,
                             mahalanobis_anchor, motion_loss, motion_terms, nonkey_terms, perception_loss,
                             perception_terms, rigid_loss, rot_loss, total_loss, vel_terms)
from dynsplat.deform import blend_targets
from dynsplat.uncertainty import UncertaintyField
from helpers import random_field, random_state, rigid_motion, tiny_graph
from oracles import axis_angle, central_difference, rel_error

seeds = st.integers(0, 2 ** 32 - 1)
EPS = 1e-12


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def edges(src, dst, w=None):
    w = np.ones(len(src)) if w is None else w
    return np.array(src), np.array(dst), np.array(w, dtype=float)


def static(rng, N=6, T=5):
    P = np.repeat(rng.normal(size=(N, 1, 3)), T, 1)
    Q = np.repeat(quat.random_unit(rng, (N, 1)), T, 1)
    return P, Q


ALL_FRAMES = list(range(5))


# -- anchor terms ------------------------------------------------------------

def single_key_setup(u1, delta):
    T = 3
    P0 = np.zeros((1, T, 3))
    P = P0.copy()
    P[0, 1, 0] = delta
    f = UncertaintyField(np.array([[1.0, u1, 1.0]]), np.ones((1, T), np.int8), np.stack([np.eye(3)] * T),
                         r=(1.0, 1.0, 1.0))
    return t(P), t(P0), t(f.inverse_matrices())


def test_anchor_zero_at_snapshot():
    P, P0, Minv = single_key_setup(1.0, 0.0)
    assert float(mahalanobis_anchor(P0, P0, Minv, [0], [0, 1, 2], EPS)) == 0.0


def test_anchor_single_displacement():
    d, u1 = 0.3, 0.5
    P, P0, Minv = single_key_setup(u1, d)
    val = float(mahalanobis_anchor(P, P0, Minv, [0], [0, 1, 2], EPS))
    assert val == pytest.approx(np.sqrt(d * d / u1 + EPS) - np.sqrt(EPS), abs=1e-15)
    P2, _, Minv2 = single_key_setup(2 * u1, d)
    val2 = float(mahalanobis_anchor(P2, P0, Minv2, [0], [0, 1, 2], EPS))
    assert val2 / val == pytest.approx(1 / np.sqrt(2), rel=1e-5)


@given(seeds)
def test_halving_uncertainty_scales_anchor_by_sqrt2(seed):
    r = np.random.default_rng(seed)
    f = random_field(r, 1, 1)
    P0 = np.zeros((1, 1, 3))
    P = r.normal(size=(1, 1, 3))
    a = float(mahalanobis_anchor(t(P), t(P0), t(f.inverse_matrices()), [0], [0], 0.0))
    f.u = f.u / 2
    b = float(mahalanobis_anchor(t(P), t(P0), t(f.inverse_matrices()), [0], [0], 0.0))
    assert b / a == pytest.approx(np.sqrt(2), rel=1e-12)


# -- motion terms -------------------------------------------------------------

def test_static_scene_all_motion_terms_zero(rng):
    P, Q = static(rng)
    e = edges([0, 1, 2, 3], [1, 2, 3, 4])
    terms, _ = motion_terms(t(P), t(Q), e, np.arange(6), ALL_FRAMES, LossWeights())
    assert all(abs(float(v)) < 1e-12 for v in terms.values())


@given(seeds)
def test_rigid_motion_iso_rigid_vanish(seed):
    r = np.random.default_rng(seed)
    P, Q = rigid_motion(r, r.normal(size=(8, 3)), quat.random_unit(r, (8,)), 5)
    src = np.repeat(np.arange(8), 2)
    dst = (src + np.tile([1, 3], 8)) % 8
    e = edges(src, dst, r.uniform(0.1, 1, 16))
    assert float(iso_loss(t(P), *e, ALL_FRAMES)) < 1e-9
    assert float(rigid_loss(t(P), t(Q), *e, ALL_FRAMES)) < 1e-6
    for delta in (2, 3):
        assert float(rigid_loss(t(P), t(Q), *e, ALL_FRAMES, delta=delta)) < 1e-6


def test_iso_stretched_edge():
    P = np.zeros((2, 2, 3))
    P[1, 0] = [1.0, 0, 0]
    P[1, 1] = [1.5, 0, 0]
    e = edges([0, 0, 1], [1, 1, 0])  # |E| = 3, each edge sees the 0.5 stretch once at t = 1
    val = float(iso_loss(t(P), *e, [1]))
    assert val == pytest.approx(3 * 0.5 / 3, abs=1e-5)
    val1 = float(iso_loss(t(P), *edges([0], [1]), [1]))
    assert val1 == pytest.approx(0.5, abs=1e-5)


def test_rigid_two_nodes_hand():
    v = np.array([0.2, -0.1, 0.05])
    T = 3
    P = np.zeros((2, T, 3))
    P[1] = np.array([1.0, 0, 0]) + np.arange(T)[:, None] * v
    Q = np.tile([1.0, 0, 0, 0], (2, T, 1))
    # edge 0 -> 1: static source, residual p_1,t-1 - p_1,t = -v at each of frames 1, 2
    a = float(rigid_loss(t(P), t(Q), *edges([0], [1]), [1, 2]))
    assert a == pytest.approx(2 * np.linalg.norm(v), abs=1e-5)
    # edge 1 -> 0: source translates by v, so T_1,t-1 T_1,t^-1 shifts by -v; residual +v
    b = float(rigid_loss(t(P), t(Q), *edges([1], [0]), [1, 2]))
    assert b == pytest.approx(2 * np.linalg.norm(v), abs=1e-5)
    # frame 0 has no predecessor and is skipped
    assert float(rigid_loss(t(P), t(Q), *edges([0], [1]), [0])) == 0.0


def test_rot_zero_and_ninety():
    T = 2
    Q = np.tile([1.0, 0, 0, 0], (2, T, 1))
    Q[1, 1] = axis_angle([0, 0, 1], np.pi / 2)
    val = float(rot_loss(t(Q), *edges([0], [1]), [1]))
    ref = np.linalg.norm(np.array([1, 0, 0, 0]) - np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]))
    assert val == pytest.approx(ref, abs=2e-6)  # sqrt(eps_n) smoothing offset


def test_rot_shared_history_zero(rng):
    P, Q = rigid_motion(rng, rng.normal(size=(5, 3)), quat.random_unit(rng, (5,)), 5)
    assert float(rot_loss(t(Q), *edges([0, 1, 2], [3, 4, 0]), ALL_FRAMES)) < 1e-5


def test_vel_constant_translation():
    T = 6
    v = np.array([0.1, -0.2, 0.05])
    P = (np.arange(T)[:, None] * v)[None]
    Q = np.tile([1.0, 0, 0, 0], (1, T, 1))
    pos, rot = vel_terms(t(P), t(Q), [0], range(T))
    # each of the 3 (T - 1) smoothed components is short by sqrt(eps_n)
    assert float(pos) == pytest.approx((T - 1) * np.abs(v).sum(), abs=3 * (T - 1) * 1.01e-6)
    assert float(rot) == 0.0


def test_vel_zero_for_constant_trajectory(rng):
    P, Q = static(rng)
    pos, rot = vel_terms(t(P), t(Q), np.arange(6), ALL_FRAMES)
    assert float(pos) == 0.0 and float(rot) < 1e-12


def test_vel_constant_rotation_rate_equal_per_step():
    T = 5
    Q = np.stack([axis_angle([0, 1, 0], 0.2 * k) for k in range(T)])[None]
    P = np.zeros((1, T, 3))
    per = [float(vel_terms(t(P), t(Q), [0], [k])[1]) for k in range(1, T)]
    assert per[0] > 0 and np.allclose(per, per[0], rtol=1e-9)


def test_acc_linear_zero_and_impulse():
    T = 6
    v = np.array([0.1, -0.2, 0.05])
    P = (np.arange(T)[:, None] * v)[None]
    Q = np.tile(axis_angle([1, 0, 0], 0.0), (1, T, 1))
    assert float(acc_terms(t(P), t(Q), [0], range(T))[0]) == 0.0
    dv = np.array([0.3, 0.0, -0.1])
    P2 = P.copy()
    P2[0, 4:] += dv * np.arange(1, 3)[:, None]  # velocity jumps by dv after frame 3
    assert float(acc_terms(t(P2), t(Q), [0], range(T))[0]) == pytest.approx(np.abs(dv).sum(), abs=1e-5)


def test_acc_constant_rotation_rate_zero():
    T = 5
    Q = np.stack([axis_angle([0, 1, 0], 0.2 * k) for k in range(T)])[None]
    assert float(acc_terms(t(np.zeros((1, T, 3))), t(Q), [0], range(T))[1]) < 1e-6


@given(seeds)
def test_rigid_motion_only_rotation_terms_nonzero(seed):
    r = np.random.default_rng(seed)
    P, Q = rigid_motion(r, r.normal(size=(6, 3)), quat.random_unit(r, (6,)), 5)
    e = edges([0, 1, 2, 3, 4, 5], [1, 2, 3, 4, 5, 0])
    terms, _ = motion_terms(t(P), t(Q), e, np.arange(6), ALL_FRAMES, LossWeights())
    assert float(terms["iso"]) < 1e-9 and float(terms["rigid"]) < 1e-6


@given(seeds)
def test_zero_lambdas(seed):
    r = np.random.default_rng(seed)
    P, Q = random_state(r)
    lw = LossWeights(iso=0, rigid=0, rot=0, vel=0, acc=0)
    assert float(motion_loss(t(P), t(Q), edges([0, 1], [2, 3]), np.arange(10), ALL_FRAMES, lw)) == 0.0


@given(seeds)
def test_all_terms_non_negative(seed):
    r = np.random.default_rng(seed)
    P, Q = random_state(r)
    g = GraphTerms.build(tiny_graph(r), random_field(r, 10, 5), P + r.normal(scale=0.05, size=P.shape))
    for name, (m, v) in {**key_terms(t(P), t(Q), g, ALL_FRAMES, LossWeights()),
                         **nonkey_terms(t(P), t(Q), g, ALL_FRAMES, LossWeights())}.items():
        assert float(v) >= 0, name
        assert m >= 0


# -- perception --------------------------------------------------------------

def test_perception_identical_zero(rng):
    a = rng.uniform(size=(12, 12, 3))
    assert abs(float(perception_loss(a, a))) < 1e-12


def test_perception_l1_term():
    l1, _ = perception_terms(t(np.ones((8, 8, 3))), t(np.zeros((8, 8, 3))))
    assert float(l1) == 1.0


def test_perception_gradient_fd(rng):
    a, b = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    x = t(a).requires_grad_(True)
    perception_loss(x, b).backward()
    num = central_difference(lambda y: float(perception_loss(y, b)), a)
    assert rel_error(x.grad.numpy(), num) < 1e-4


# -- graph-structured objective -----------------------------------------------

def test_nonkey_zero_at_fixed_point(rng):
    g = tiny_graph(rng)
    f = random_field(rng, 10, 5)
    P, Q = static(rng, 10, 5)
    G = GraphTerms.build(g, f, P)
    terms = nonkey_terms(t(P), t(Q), G, ALL_FRAMES, LossWeights())
    assert float(terms["nonkey_anchor"][1]) == 0.0
    assert float(terms["nonkey_dqb"][1]) < 1e-9


def test_nonkey_symmetric_between_targets(rng):
    g = tiny_graph(rng)
    T = 5
    f = random_field(rng, 10, T)
    f.u[:] = 1.0
    f.R_wc[:] = np.eye(3)
    P, Q = static(rng, 10, T)
    G = GraphTerms.build(g, f, P)
    i = int(g.nonkeys[0])
    target, _ = blend_targets(P, Q, np.array([i]), G.dqb_neighbors[:1], G.dqb_weights[:1].numpy(), [2])
    # move the snapshot by 2 delta, put the node half way
    delta = np.array([0.0, 0.1, 0.0])
    p_o = P.copy()
    p_o[i, 2] = target[0, 0] + 2 * delta
    Pm = P.copy()
    Pm[i, 2] = target[0, 0] + delta
    G = GraphTerms.build(g, f, p_o)
    a = float(mahalanobis_anchor(t(Pm), t(p_o), G.Minv, [i], [2], EPS))
    b = float(mahalanobis_anchor(t(Pm), t(target), G.Minv, [i], [2], EPS, gathered=True))
    assert a == pytest.approx(b, rel=1e-9)


@given(seeds)
def test_rigid_scene_dqb_term_vanishes(seed):
    r = np.random.default_rng(seed)
    P, Q = rigid_motion(r, r.normal(size=(10, 3)), quat.random_unit(r, (10,)), 5)
    G = GraphTerms.build(tiny_graph(r), random_field(r, 10, 5), P)
    assert float(nonkey_terms(t(P), t(Q), G, ALL_FRAMES, LossWeights())["nonkey_dqb"][1]) < 1e-5


@given(seeds)
def test_total_equals_resummed_report(seed):
    r = np.random.default_rng(seed)
    P, Q = random_state(r)
    G = GraphTerms.build(tiny_graph(r), random_field(r, 10, 5), P + r.normal(scale=0.05, size=P.shape))
    rgb = {"rgb_l1": t(0.3), "rgb_ssim": t(0.1)}
    total, rep = total_loss(t(P), t(Q), G, [1, 3, 4], LossWeights(), rgb)
    resum = sum(rep.weights[k] * v for k, v in rep.terms.items())
    assert float(total) == pytest.approx(resum, abs=1e-9)
    assert rep.total == pytest.approx(resum, abs=1e-9)
    zero = LossWeights(rgb_l1=0, rgb_ssim=0)
    total0, rep0 = total_loss(t(P), t(Q), G, [1, 3, 4], zero, rgb)
    key = sum(m * v for m, v in key_terms(t(P), t(Q), G, [1, 3, 4], zero).values())
    nonkey = sum(m * v for m, v in nonkey_terms(t(P), t(Q), G, [1, 3, 4], zero).values())
    assert float(total0) == pytest.approx(float(key + nonkey), abs=1e-12)


def test_total_near_zero_at_perfect_fixed_point(rng):
    P, Q = static(rng, 10, 5)
    G = GraphTerms.build(tiny_graph(rng), random_field(rng, 10, 5), P)
    total, rep = total_loss(t(P), t(Q), G, ALL_FRAMES, LossWeights(), {"rgb_l1": t(0.0), "rgb_ssim": t(0.0)})
    assert abs(float(total)) < 1e-8


def test_nonkey_all_nodes_flag(rng):
    P, Q = random_state(rng)
    p_o = P + rng.normal(scale=0.05, size=P.shape)
    G = GraphTerms.build(tiny_graph(rng), random_field(rng, 10, 5), p_o)
    a = float(nonkey_terms(t(P), t(Q), G, ALL_FRAMES, LossWeights())["nonkey_anchor"][1])
    b = float(nonkey_terms(t(P), t(Q), G, ALL_FRAMES, LossWeights(nonkey_all_nodes=True))["nonkey_anchor"][1])
    assert b > a


def test_report_csv():
    reps = [LossReport({"a": 1.0, "b": 2.0}, {"a": 1.0, "b": 0.5}, i) for i in range(2)]
    lines = LossReport.to_csv(reps).strip().split("\n")
    assert lines[0] == "iteration,a,b,total"
    assert lines[1] == "0,1.0,2.0,2.0"


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(iso=-1).validate()
    with pytest.raises(ValueError):
        LossWeights(delta=0).validate()
