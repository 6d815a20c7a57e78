import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from motionxfer.kinematics import (
    Bone,
    BoneFrame,
    BoneSequence,
    InvalidBoneError,
    SkinningModel,
    backward_warp,
    blend_transforms,
    bone_deltas,
    forward_warp,
    mahalanobis_distances,
    part_labels,
    skinning_weights,
)
from motionxfer.transforms import RigidTransform, axis_angle, blend_dual_quat, quat_to_matrix

seeds = st.integers(0, 2 ** 31 - 1)


def random_bone(rng, spread=1.0):
    R = Rotation.random(random_state=rng.integers(2 ** 31)).as_matrix()
    return Bone(rng.normal(0, spread, 3), R, rng.uniform(0.2, 1.5, 3))


def random_rigid(rng, shift=1.0):
    R = Rotation.random(random_state=rng.integers(2 ** 31)).as_matrix()
    return RigidTransform(R, rng.normal(0, shift, 3))


def unit_bone(center):
    return Bone(np.asarray(center, float), np.eye(3), np.ones(3))


# -- mahalanobis distances ----------------------------------------------------

def test_distance_zero_at_center():
    b = Bone([0.3, -1.0, 2.0], axis_angle([1, 1, 0], 0.7), [0.5, 1.0, 2.0])
    assert mahalanobis_distances(b.center, [b])[0] == pytest.approx(0.0, abs=1e-15)


def test_distance_unit_bone_reduces_to_euclidean():
    assert mahalanobis_distances([1.0, 0, 0], [unit_bone([0, 0, 0])])[0] == pytest.approx(1.0, rel=1e-15)


def test_distance_scaled_axis():
    b = Bone(np.zeros(3), np.eye(3), [2.0, 1.0, 1.0])
    assert mahalanobis_distances([2.0, 0, 0], [b])[0] == pytest.approx(1.0, rel=1e-15)


def test_distance_matches_quadratic_form():
    rng = np.random.default_rng(3)
    bones = [random_bone(rng) for _ in range(4)]
    x = rng.normal(size=(20, 3))
    d = mahalanobis_distances(x, bones)
    for j, b in enumerate(bones):
        S = b.orientation @ np.diag(b.scales ** 2) @ b.orientation.T
        Si = np.linalg.inv(S)
        want = np.einsum("ni,ij,nj->n", x - b.center, Si, x - b.center)
        np.testing.assert_allclose(d[:, j], want, rtol=1e-10)


@pytest.mark.parametrize("scales", [[0.0, 1, 1], [1, -1.0, 1]])
def test_degenerate_scale_rejected(scales):
    with pytest.raises(InvalidBoneError):
        mahalanobis_distances(np.zeros(3), [Bone(np.zeros(3), np.eye(3), scales)])


def test_non_orthonormal_orientation_rejected():
    with pytest.raises(InvalidBoneError):
        Bone(np.zeros(3), np.diag([1.0, 1.0, 1.1]), np.ones(3)).validate()


# -- skinning weights ---------------------------------------------------------

def test_single_bone_weight_is_one():
    model = SkinningModel([unit_bone([1, 2, 3])])
    assert skinning_weights([5.0, -1, 0], model)[0] == 1.0


def test_identical_bones_split_evenly():
    rng = np.random.default_rng(0)
    b = random_bone(rng)
    w = skinning_weights(rng.normal(size=3), SkinningModel([b, b]))
    np.testing.assert_allclose(w, [0.5, 0.5], rtol=0, atol=1e-15)


def test_two_bone_softmax_value():
    model = SkinningModel([unit_bone([1, 0, 0]), unit_bone([-1, 0, 0])])
    w = skinning_weights([0.5, 0, 0], model)
    e = np.exp([-0.25, -2.25])
    np.testing.assert_allclose(w, e / e.sum(), rtol=1e-14)
    np.testing.assert_allclose(w, [0.8808, 0.1192], atol=1e-4)


def test_logit_correction_shifts_weights():
    model = SkinningModel([unit_bone([1, 0, 0]), unit_bone([-1, 0, 0])],
                          delta_logits=lambda x: np.stack([np.zeros(x.shape[:-1]),
                                                           np.full(x.shape[:-1], 2.0)], -1))
    w = skinning_weights([0.5, 0, 0], model)
    e = np.exp([-0.25, -0.25])
    np.testing.assert_allclose(w, e / e.sum(), rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(1, 8))
def test_partition_of_unity(seed, B):
    rng = np.random.default_rng(seed)
    model = SkinningModel([random_bone(rng) for _ in range(B)])
    W = skinning_weights(rng.normal(0, 3, (200, 3)), model)
    assert np.all(W >= 0)
    assert np.max(np.abs(W.sum(axis=1) - 1.0)) <= 1e-12


def test_far_point_weights_stay_finite():
    model = SkinningModel([unit_bone([0, 0, 0]), unit_bone([1, 0, 0])])
    w = skinning_weights([1e4, 0, 0], model)
    assert np.all(np.isfinite(w)) and w[1] == pytest.approx(1.0)


# -- blending ---------------------------------------------------------------

def test_one_hot_blend_is_exact():
    rng = np.random.default_rng(1)
    joints = [random_rigid(rng) for _ in range(4)]
    frame = BoneFrame(joints)
    for b in range(4):
        w = np.zeros(4)
        w[b] = 1.0
        T = blend_transforms(w, frame)
        np.testing.assert_array_equal(T.rotation, joints[b].rotation)
        np.testing.assert_array_equal(T.translation, joints[b].translation)


def test_identical_joints_blend_to_that_joint():
    rng = np.random.default_rng(2)
    J = random_rigid(rng)
    T = blend_transforms(rng.dirichlet(np.ones(3)), BoneFrame([J, J, J]))
    np.testing.assert_allclose(T.rotation, J.rotation, atol=1e-12)
    np.testing.assert_allclose(T.translation, J.translation, atol=1e-12)


def test_pure_translations_blend_linearly():
    frame = BoneFrame([RigidTransform(np.eye(3), [1.0, 0, 0]), RigidTransform(np.eye(3), [0, 1.0, 0])])
    T = blend_transforms([0.5, 0.5], frame)
    np.testing.assert_allclose(T.translation, [0.5, 0.5, 0.0], atol=1e-15)
    np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-15)


def test_all_zero_weights_rejected():
    with pytest.raises(ValueError):
        blend_transforms([0.0, 0.0], BoneFrame.identity(2))


def test_blend_handles_antipodal_quaternions():
    R = axis_angle([0, 0, 1], 0.4)
    a = RigidTransform(R, [0.1, 0, 0])
    real, dual = a.to_dual_quat()
    flipped = RigidTransform.from_dual_quat(-real, -dual)
    T = blend_dual_quat(np.array([0.5, 0.5]), [a, flipped])
    np.testing.assert_allclose(T.rotation, R, atol=1e-12)
    np.testing.assert_allclose(T.translation, a.translation, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_blend_result_is_rigid(seed):
    rng = np.random.default_rng(seed)
    B = int(rng.integers(2, 6))
    T = blend_transforms(rng.dirichlet(np.ones(B)), BoneFrame([random_rigid(rng) for _ in range(B)]))
    R = T.rotation
    assert np.linalg.norm(R.T @ R - np.eye(3)) <= 1e-9
    assert np.linalg.det(R) > 0


# -- warps ------------------------------------------------------------------

def test_identity_frame_warps_are_identity():
    rng = np.random.default_rng(4)
    model = SkinningModel([random_bone(rng) for _ in range(3)])
    x = rng.normal(size=(10, 3))
    frame = BoneFrame.identity(3)
    np.testing.assert_allclose(forward_warp(x, model, frame), x, atol=1e-14)
    np.testing.assert_allclose(backward_warp(x, model, frame), x, atol=1e-14)


def test_single_bone_translation():
    model = SkinningModel([unit_bone([0, 0, 0])])
    frame = BoneFrame([RigidTransform(np.eye(3), [0, 0, 1.0])])
    np.testing.assert_allclose(forward_warp([0.3, 0.2, 0.1], model, frame), [0.3, 0.2, 1.1], atol=1e-15)


def test_two_bone_forward_matches_matrix_composition():
    rng = np.random.default_rng(5)
    model = SkinningModel([random_bone(rng), random_bone(rng)])
    frame = BoneFrame([random_rigid(rng, 0.2), random_rigid(rng, 0.2)], random_rigid(rng))
    x = rng.normal(size=3)
    w = skinning_weights(x, model)
    # independent dual-quaternion blend through quaternion algebra
    quats = []
    for j in frame.joints:
        q = Rotation.from_matrix(j.rotation).as_quat()[[3, 0, 1, 2]]
        quats.append(q)
    if quats[1] @ quats[0] < 0:
        quats[1] = -quats[1]
    qb = (w[0] * quats[0] + w[1] * quats[1])
    qb /= np.linalg.norm(qb)
    R = quat_to_matrix(qb)
    # translations blend through the dual part: t = 2 * dual * conj(real)
    real = np.array(quats)
    dual = []
    for q, j in zip(real, frame.joints):
        t = np.r_[0.0, j.translation]
        w0, v0 = t[0], t[1:]
        w1, v1 = q[0], q[1:]
        prod = np.r_[w0 * w1 - v0 @ v1, w0 * v1 + w1 * v0 + np.cross(v0, v1)]
        dual.append(0.5 * prod)
    rb = w[0] * real[0] + w[1] * real[1]
    db = w[0] * dual[0] + w[1] * dual[1]
    n = np.linalg.norm(rb)
    rb, db = rb / n, db / n
    conj = np.r_[rb[0], -rb[1:]]
    w0, v0 = db[0], db[1:]
    w1, v1 = conj[0], conj[1:]
    t = 2 * (w0 * v1 + w1 * v0 + np.cross(v0, v1))
    M = np.eye(4)
    M[:3, :3], M[:3, 3] = R, t
    want = frame.global_transform.as_matrix() @ M @ np.r_[x, 1.0]
    np.testing.assert_allclose(forward_warp(x, model, frame), want[:3], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_single_bone_round_trip(seed):
    rng = np.random.default_rng(seed)
    model = SkinningModel([random_bone(rng)])
    frame = BoneFrame([random_rigid(rng)], random_rigid(rng))
    x = rng.normal(size=(5, 3))
    y = forward_warp(x, model, frame)
    assert np.max(np.linalg.norm(backward_warp(y, model, frame) - x, axis=1)) <= 1e-9


def _fixed_point_inverse(y, model, frame, iters=200):
    x = backward_warp(y, model, frame)
    for _ in range(iters):
        x = x + (y - forward_warp(x, model, frame))
    return x


def test_multi_bone_backward_against_fixed_point_oracle():
    rng = np.random.default_rng(7)
    bones = [Bone([0, 0, 0], np.eye(3), [0.4, 0.4, 0.4]), Bone([1, 0, 0], np.eye(3), [0.4, 0.4, 0.4])]
    model = SkinningModel(bones)
    frame = BoneFrame([RigidTransform(), RigidTransform(axis_angle([0, 0, 1], 0.2), [0.05, 0, 0])])
    x = rng.uniform([-0.3, -0.3, -0.3], [1.3, 0.3, 0.3], (30, 3))
    y = forward_warp(x, model, frame)
    exact = _fixed_point_inverse(y, model, frame)
    # the oracle inverts the forward warp to round-off
    assert np.max(np.linalg.norm(forward_warp(exact, model, frame) - y, axis=1)) < 1e-10
    np.testing.assert_allclose(exact, x, atol=1e-9)
    # the one-shot backward warp is approximate for blended points; its error
    # stays a small fraction of the motion
    err = np.linalg.norm(backward_warp(y, model, frame) - exact, axis=1)
    motion = np.linalg.norm(y - x, axis=1)
    assert np.max(err) <= 0.25 * np.max(motion)
    far = (x[:, 0] < -0.1) | (x[:, 0] > 1.1)
    assert np.max(err[far]) < 0.1 * np.max(motion)


# -- labels and deltas ---------------------------------------------------------

def test_label_at_bone_center():
    model = SkinningModel([unit_bone([0, 0, 0]), unit_bone([10, 0, 0]), unit_bone([0, 10, 0])])
    np.testing.assert_array_equal(part_labels([[10, 0, 0], [0, 10, 0], [0, 0, 0]], model), [2, 3, 1])


def test_single_bone_labels_all_one():
    rng = np.random.default_rng(0)
    model = SkinningModel([random_bone(rng)])
    assert np.all(part_labels(rng.normal(size=(50, 3)), model) == 1)


def test_labels_match_brute_force():
    rng = np.random.default_rng(11)
    model = SkinningModel([random_bone(rng) for _ in range(5)])
    pts = rng.normal(0, 1.5, (100, 3))
    want = [1 + int(np.argmax(skinning_weights(p, model))) for p in pts]
    np.testing.assert_array_equal(part_labels(pts, model), want)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_labels_invariant_under_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    bones = [random_bone(rng) for _ in range(4)]
    G = random_rigid(rng, 2.0)
    pts = rng.normal(0, 1.5, (100, 3))
    moved = [Bone(G.apply(b.center), G.rotation @ b.orientation, b.scales) for b in bones]
    a = part_labels(pts, SkinningModel(bones))
    b = part_labels(G.apply(pts), SkinningModel(moved))
    # only near-ties may flip under round-off
    W = np.sort(skinning_weights(pts, SkinningModel(bones)), axis=1)
    clear = W[:, -1] - W[:, -2] > 1e-9
    np.testing.assert_array_equal(a[clear], b[clear])


def _seq(frames, bones=None):
    bones = bones or [unit_bone([0, 0, 0]), unit_bone([1, 0, 0])]
    return BoneSequence(bones, frames, 0.1)


def test_static_sequence_has_zero_deltas():
    seq = _seq([BoneFrame.identity(2)] * 3)
    np.testing.assert_array_equal(bone_deltas(seq, 0), np.zeros((2, 3)))
    np.testing.assert_array_equal(bone_deltas(seq, 1), np.zeros((2, 3)))


def test_uniform_translation_deltas():
    d = np.array([0.1, 0, 0])
    seq = _seq([BoneFrame([RigidTransform(np.eye(3), k * d)] * 2) for k in range(4)])
    for t in range(3):
        np.testing.assert_allclose(bone_deltas(seq, t), np.tile(d, (2, 1)), atol=1e-15)


def test_hinge_deltas_match_rotated_centres():
    hinge = np.array([0.0, 0.05, 0.0])
    lid = unit_bone([0.025, 0.25, 0.0])
    frames = []
    for ang in (0.0, np.deg2rad(30)):
        R = axis_angle([0, 0, 1], ang)
        frames.append(BoneFrame([RigidTransform(), RigidTransform(R, hinge - R @ hinge)]))
    seq = _seq(frames, [unit_bone([0.2, 0.025, 0]), lid])
    R = axis_angle([0, 0, 1], np.deg2rad(30))
    want = hinge + R @ (lid.center - hinge) - lid.center
    np.testing.assert_allclose(bone_deltas(seq, 0)[1], want, atol=1e-15)
    np.testing.assert_allclose(bone_deltas(seq, 0)[0], 0.0, atol=1e-15)


def test_delta_index_out_of_range():
    seq = _seq([BoneFrame.identity(2)] * 2)
    with pytest.raises(IndexError):
        bone_deltas(seq, 1)
    with pytest.raises(IndexError):
        bone_deltas(seq, -1)


def test_sequence_validation():
    with pytest.raises(ValueError):
        _seq([BoneFrame.identity(2)])
    with pytest.raises(ValueError):
        _seq([BoneFrame.identity(2), BoneFrame.identity(3)])
    with pytest.raises(ValueError):
        BoneSequence([unit_bone([0, 0, 0])], [BoneFrame.identity(1)] * 2, 0.0)
