import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from dynsplat import quat
from dynsplat.deform import (DegenerateBlend, DualQuaternion, RigidTransform, blend_targets, dqb,
                             from_dual_quaternion, interpolate_non_key, node_transform, to_dual_quaternion)
from oracles import axis_angle, qmul, quaternion_average, rotmat, same_rotation

seeds = st.integers(0, 2 ** 32 - 1)


def rand_T(r):
    return RigidTransform(r.normal(size=4), r.normal(size=3))


def close(A, B, tol=1e-9):
    return same_rotation(A.rotation, B.rotation) < tol and np.abs(A.translation - B.translation).max() < tol


def test_node_transform_identity_at_canonical():
    r = np.random.default_rng(0)
    p, q = r.normal(size=(4, 3)), quat.random_unit(r, (4,))
    assert close(node_transform(p, q, 2, 2), RigidTransform.identity())


def test_node_transform_pure_translation():
    p = np.array([[0.0, 0, 0], [1.0, 2, 3]])
    q = np.tile(axis_angle([1, 1, 0], 0.3), (2, 1))
    T = node_transform(p, q, 0, 1)
    x = np.array([4.0, -1, 2])
    assert np.allclose(T.apply(x), x + [1, 2, 3], atol=1e-12)


def test_node_transform_quarter_turn():
    p = np.zeros((2, 3))
    q = np.stack([[1.0, 0, 0, 0], axis_angle([0, 0, 1], np.pi / 2)])
    assert np.allclose(node_transform(p, q, 0, 1).apply([1.0, 0, 0]), [0, 1, 0], atol=1e-12)


@given(seeds)
def test_node_transform_maps_canonical_pose(seed):
    r = np.random.default_rng(seed)
    p, q = r.normal(size=(3, 3)), quat.random_unit(r, (3,))
    T = node_transform(p, q, 0, 2)
    assert np.allclose(T.apply(p[0]), p[2], atol=1e-12)
    assert same_rotation(quat.mul(T.rotation, q[0]), q[2]) < 1e-12


def test_identity_dual_quaternion():
    dq = to_dual_quaternion(RigidTransform.identity())
    assert np.allclose(dq.real, [1, 0, 0, 0]) and np.allclose(dq.dual, 0)


def test_pure_translation_dual_part():
    dq = to_dual_quaternion(RigidTransform([1, 0, 0, 0], [2.0, 0, 0]))
    assert np.allclose(dq.dual, [0, 1, 0, 0], atol=1e-15)


@given(seeds)
def test_dual_quaternion_round_trip(seed):
    T = rand_T(np.random.default_rng(seed))
    dq = to_dual_quaternion(T)
    assert abs(np.linalg.norm(dq.real) - 1) < 1e-12 and abs(dq.real @ dq.dual) < 1e-12
    assert close(from_dual_quaternion(dq), T)


@given(seeds)
def test_dual_quaternion_matches_hand_formula(seed):
    T = rand_T(np.random.default_rng(seed))
    ref = 0.5 * qmul(np.concatenate([[0.0], T.translation]), T.rotation)
    assert np.allclose(to_dual_quaternion(T).dual, ref, atol=1e-14)


@given(seeds)
def test_single_and_identical_inputs(seed):
    r = np.random.default_rng(seed)
    T = rand_T(r)
    assert close(dqb([(1.0, T)]), T)
    w = r.dirichlet(np.ones(4))
    assert close(dqb([(wi, T) for wi in w]), T)


def test_half_way_quarter_turn_is_eighth_turn():
    T0 = RigidTransform.identity()
    T1 = RigidTransform(axis_angle([0, 0, 1], np.pi / 2), np.zeros(3))
    B = dqb([(0.5, T0), (0.5, T1)])
    assert same_rotation(B.rotation, axis_angle([0, 0, 1], np.pi / 4)) < 1e-12
    assert np.allclose(B.translation, 0, atol=1e-15)


@given(seeds)
def test_coaxial_blend_matches_quaternion_average(seed):
    r = np.random.default_rng(seed)
    axis = r.normal(size=3)
    angs = r.uniform(-np.pi / 2, np.pi / 2, 3)
    w = r.dirichlet(np.ones(3))
    qs = [axis_angle(axis, a) for a in angs]
    B = dqb([(wi, RigidTransform(q, np.zeros(3))) for wi, q in zip(w, qs)])
    assert same_rotation(B.rotation, quaternion_average(qs, w)) < 1e-9
    # still about the same axis
    assert abs(abs(np.dot(B.rotation[1:] / np.linalg.norm(B.rotation[1:]), axis / np.linalg.norm(axis))) - 1) < 1e-9


@given(seeds)
def test_output_is_rigid(seed):
    r = np.random.default_rng(seed)
    B = dqb([(w, rand_T(r)) for w in r.dirichlet(np.ones(5))])
    R = rotmat(B.rotation)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12) and abs(np.linalg.det(R) - 1) < 1e-12
    assert abs(np.linalg.norm(B.rotation) - 1) < 1e-12


@given(seeds)
def test_duplication_invariance(seed):
    r = np.random.default_rng(seed)
    Ts = [rand_T(r) for _ in range(3)]
    w = r.dirichlet(np.ones(3))
    a = dqb(list(zip(w, Ts)))
    b = dqb([(w[0], Ts[0]), (w[1] / 2, Ts[1]), (w[1] / 2, Ts[1]), (w[2], Ts[2])])
    assert close(a, b)


@given(seeds)
def test_left_equivariance(seed):
    r = np.random.default_rng(seed)
    G = rand_T(r)
    Ts = [rand_T(r) for _ in range(4)]
    w = r.dirichlet(np.ones(4))
    a = G.compose(dqb(list(zip(w, Ts))))
    b = dqb([(wi, G.compose(T)) for wi, T in zip(w, Ts)])
    assert close(a, b)


def test_sign_flip_of_inputs_is_harmless():
    r = np.random.default_rng(5)
    Ts = [rand_T(r) for _ in range(3)]
    flipped = [Ts[0], RigidTransform(-Ts[1].rotation, Ts[1].translation), Ts[2]]
    w = [0.2, 0.3, 0.5]
    assert close(dqb(list(zip(w, Ts))), dqb(list(zip(w, flipped))))


def test_vanishing_blend_is_degenerate():
    # after alignment every real part has a non-negative dot with the first, so the blend
    # can only vanish when the weight does
    from dynsplat.deform import dqb_batch
    q = np.array([[1.0, 0, 0, 0], [-1.0, 0, 0, 0]])
    qb, _ = dqb_batch(q, np.zeros((2, 3)), np.array([0.5, 0.5]))
    assert same_rotation(qb, np.array([1.0, 0, 0, 0])) < 1e-15
    with pytest.raises(DegenerateBlend):
        dqb_batch(q, np.zeros((2, 3)), np.array([0.0, 0.0]))


def test_interpolate_static_anchors():
    p, q = np.array([0.3, -0.2, 1.0]), axis_angle([1, 2, 3], 0.4)
    I = RigidTransform.identity()
    pb, qb = interpolate_non_key(p, q, [I, I], [0.4, 0.6])
    assert np.allclose(pb, p, atol=1e-15) and same_rotation(qb, q) < 1e-15


def test_interpolate_single_translating_anchor():
    p, q = np.array([0.3, -0.2, 1.0]), axis_angle([1, 2, 3], 0.4)
    d = np.array([0.1, 0.5, -0.3])
    pb, qb = interpolate_non_key(p, q, [RigidTransform([1, 0, 0, 0], d)], [1.0])
    assert np.allclose(pb, p + d, atol=1e-14)


@given(seeds)
def test_rigid_scene_blend(seed):
    r = np.random.default_rng(seed)
    G = rand_T(r)
    N, T = 6, 3
    pos = r.normal(size=(N, 1, 3)).repeat(T, 1)
    rot = quat.random_unit(r, (N, 1)).repeat(T, 1)
    pos[:, 2] = G.apply(pos[:, 0])
    rot[:, 2] = quat.mul(G.rotation, rot[:, 2])
    # nodes 0..4 are anchors of node 5
    Ts = [node_transform(pos[j], rot[j], 0, 2) for j in range(5)]
    w = r.dirichlet(np.ones(5))
    pb, qb = interpolate_non_key(pos[5, 0], rot[5, 0], Ts, w)
    assert np.allclose(pb, G.apply(pos[5, 0]), atol=1e-6)
    assert same_rotation(qb, quat.mul(G.rotation, rot[5, 0])) < 1e-6


@given(seeds)
def test_blend_targets_matches_scalar_path(seed):
    r = np.random.default_rng(seed)
    N, T = 7, 5
    pos, rot = r.normal(size=(N, T, 3)), quat.random_unit(r, (N, T))
    nodes = np.array([5, 6])
    nb = np.array([[0, 1, 2], [3, 4, 0]])
    w = r.dirichlet(np.ones(3), size=2)
    frames = [1, 3, 4]
    p, q = blend_targets(pos, rot, nodes, nb, w, frames)
    for a, i in enumerate(nodes):
        for b, t in enumerate(frames):
            Ts = [node_transform(pos[j], rot[j], 0, t) for j in nb[a]]
            pr, qr = interpolate_non_key(pos[i, 0], rot[i, 0], Ts, w[a])
            assert np.allclose(p[a, b], pr, atol=1e-12)
            assert same_rotation(q[a, b], qr) < 1e-12
    pt, _ = blend_targets(torch.as_tensor(pos), torch.as_tensor(rot), nodes, torch.as_tensor(nb),
                          torch.as_tensor(w), frames)
    assert np.allclose(pt.numpy(), p, atol=1e-14)


def test_dual_quaternion_normalized():
    dq = DualQuaternion(np.array([2.0, 0, 0, 0]), np.array([0.1, 1.0, 0, 0])).normalized()
    assert abs(np.linalg.norm(dq.real) - 1) < 1e-12 and abs(dq.real @ dq.dual) < 1e-12


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        dqb([(-0.5, RigidTransform.identity()), (1.5, RigidTransform.identity())])
