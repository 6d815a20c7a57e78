import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from motionxfer.fileio import (
    HEADER_BYTES,
    FormatError,
    PointCloud,
    bone_sequence_to_doc,
    export_frames,
    parse_bone_sequence,
    parse_point_cloud,
    read_features,
    read_frames,
    read_matrix,
    write_bone_sequence,
    write_matrix,
    write_ply,
    write_point_cloud,
)
from motionxfer.kinematics import Bone, BoneFrame, BoneSequence
from motionxfer.mpm import ParticleState
from motionxfer.transforms import RigidTransform


def random_sequence(seed, B=3, T=4):
    rng = np.random.default_rng(seed)

    def rot():
        return Rotation.random(random_state=rng.integers(2 ** 31)).as_matrix()

    bones = [Bone(rng.normal(size=3), rot(), rng.uniform(0.1, 1.0, 3)) for _ in range(B)]
    frames = [BoneFrame([RigidTransform(rot(), rng.normal(size=3)) for _ in range(B)],
                        RigidTransform(rot(), rng.normal(size=3))) for _ in range(T)]
    return BoneSequence(bones, frames, 1.0 / 24)


# -- matrices and point clouds ---------------------------------------------------

def test_empty_file_is_empty_cloud(tmp_path):
    p = tmp_path / "empty.bin"
    p.write_bytes(b"")
    assert len(parse_point_cloud(p)) == 0


def test_empty_container_round_trip(tmp_path):
    p = tmp_path / "e.bin"
    write_point_cloud(p, PointCloud(np.zeros((0, 3))))
    assert len(parse_point_cloud(p)) == 0


def test_thousand_point_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(1000, 3)).astype(np.float32)
    mass = rng.uniform(size=1000).astype(np.float32)
    vol = rng.uniform(size=1000).astype(np.float32)
    lab = rng.integers(0, 5, 1000)
    p = tmp_path / "pts.bin"
    write_point_cloud(p, PointCloud(pos, mass, vol, lab))
    c = parse_point_cloud(p)
    assert c.positions.tobytes() == pos.tobytes()
    assert c.mass.tobytes() == mass.tobytes()
    assert c.volume.tobytes() == vol.tobytes()
    np.testing.assert_array_equal(c.labels, lab)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 40), st.sampled_from([3, 4, 5, 6]))
def test_matrix_round_trip_property(tmp_path_factory, seed, n, cols):
    a = np.random.default_rng(seed).normal(size=(n, cols)).astype(np.float32)
    p = tmp_path_factory.mktemp("m") / "a.bin"
    write_matrix(p, a)
    assert read_matrix(p).tobytes() == a.tobytes()


def test_truncated_payload_reports_offset(tmp_path):
    p = tmp_path / "t.bin"
    write_matrix(p, np.ones((10, 3)))
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(FormatError) as exc:
        parse_point_cloud(p)
    msg = str(exc.value)
    assert "count mismatch" in msg
    assert f"offset {HEADER_BYTES}" in msg
    assert f"offset {len(raw) - 8}" in msg


def test_short_header_is_malformed(tmp_path):
    p = tmp_path / "h.bin"
    p.write_bytes(b"\x01\x02\x03")
    with pytest.raises(FormatError, match="malformed header.*offset 0"):
        parse_point_cloud(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "m.bin"
    p.write_bytes(b"\0" * 24)
    with pytest.raises(FormatError, match="magic"):
        read_matrix(p)


def test_non_finite_value_located(tmp_path):
    a = np.zeros((4, 3), np.float32)
    a[2, 1] = np.nan
    p = tmp_path / "n.bin"
    write_matrix(p, a)
    with pytest.raises(FormatError, match=r"row 2, column 1 \(offset {}\)".format(HEADER_BYTES + 4 * 7)):
        parse_point_cloud(p)


def test_unsupported_column_count(tmp_path):
    p = tmp_path / "c.bin"
    write_matrix(p, np.zeros((2, 7)))
    with pytest.raises(FormatError, match="7 columns"):
        parse_point_cloud(p)


def test_binary_ply_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    pos = rng.normal(size=(50, 3)).astype(np.float32)
    p = tmp_path / "a.ply"
    write_ply(p, PointCloud(pos, labels=np.arange(50) % 3))
    c = parse_point_cloud(p)
    assert c.positions.tobytes() == pos.tobytes()
    np.testing.assert_array_equal(c.labels, np.arange(50) % 3)


def test_ascii_ply(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text("ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\n"
                 "property float y\nproperty float z\nend_header\n0 1 2\n3 4 5\n")
    np.testing.assert_array_equal(parse_point_cloud(p).positions, [[0, 1, 2], [3, 4, 5]])


def test_ascii_ply_count_mismatch_names_line(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\n"
                 "property float y\nproperty float z\nend_header\n0 1 2\n3 4 5\n")
    with pytest.raises(FormatError, match="count mismatch.*line"):
        parse_point_cloud(p)


def test_ply_non_finite_rejected(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n"
                 "property float y\nproperty float z\nend_header\n0 nan 2\n")
    with pytest.raises(FormatError, match="vertex 0"):
        parse_point_cloud(p)


def test_read_features_checks_rows(tmp_path):
    write_point_cloud(tmp_path / "v.bin", PointCloud(np.zeros((3, 3))))
    write_matrix(tmp_path / "d.bin", np.zeros((3, 4)))
    write_matrix(tmp_path / "g.bin", np.zeros((2, 2)))
    with pytest.raises((FormatError, ValueError)):
        read_features(tmp_path / "v.bin", tmp_path / "d.bin", tmp_path / "g.bin")


# -- bone sequences ---------------------------------------------------------------

def test_identity_two_frame_file(tmp_path):
    doc = {"format": "bone-sequence", "version": 1, "bone_count": 1, "frame_dt": 0.5,
           "bones": [{"center": [0, 0, 0], "orientation": [1, 0, 0, 0], "scales": [1, 1, 1]}],
           "frames": [{"global": {"rotation": [1, 0, 0, 0], "translation": [0, 0, 0]},
                       "joints": [{"rotation": [1, 0, 0, 0], "translation": [0, 0, 0]}]}] * 2}
    p = tmp_path / "b.json"
    p.write_text(json.dumps(doc))
    seq = parse_bone_sequence(p)
    assert seq.n_frames == 2 and seq.n_bones == 1 and seq.frame_dt == 0.5
    np.testing.assert_array_equal(seq.bone_centers(1), seq.bone_centers(0))


@pytest.mark.parametrize("seed", range(5))
def test_random_sequence_round_trip(tmp_path, seed):
    seq = random_sequence(seed)
    p = tmp_path / "s.json"
    write_bone_sequence(p, seq)
    back = parse_bone_sequence(p)
    for a, b in zip(seq.canonical_bones, back.canonical_bones):
        np.testing.assert_allclose(b.center, a.center, atol=1e-9)
        np.testing.assert_allclose(b.orientation, a.orientation, atol=1e-9)
        np.testing.assert_allclose(b.scales, a.scales, atol=1e-9)
    for fa, fb in zip(seq.frames, back.frames):
        np.testing.assert_allclose(fb.global_transform.as_matrix(), fa.global_transform.as_matrix(), atol=1e-9)
        for ja, jb in zip(fa.joints, fb.joints):
            np.testing.assert_allclose(jb.as_matrix(), ja.as_matrix(), atol=1e-9)


def _doc_with_quat(q):
    doc = bone_sequence_to_doc(random_sequence(0, B=2, T=2))
    doc["frames"][1]["joints"][1]["rotation"] = q
    return doc


def test_nearly_unit_quaternion_renormalised(tmp_path):
    p = tmp_path / "q.json"
    p.write_text(json.dumps(_doc_with_quat([1 + 5e-7, 0, 0, 0])))
    seq = parse_bone_sequence(p)
    np.testing.assert_allclose(seq.frames[1].joints[1].rotation, np.eye(3), atol=1e-15)


def test_non_unit_quaternion_rejected_with_location(tmp_path):
    p = tmp_path / "q.json"
    p.write_text(json.dumps(_doc_with_quat([1 + 1e-3, 0, 0, 0])))
    with pytest.raises(FormatError, match=r"frames\[1\]\.joints\[1\]\.rotation"):
        parse_bone_sequence(p)


def test_malformed_json_names_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"format": "bone-sequence",\n "bones": [}')
    with pytest.raises(FormatError, match="line 2"):
        parse_bone_sequence(p)


def test_wrong_joint_count(tmp_path):
    doc = bone_sequence_to_doc(random_sequence(1, B=2, T=2))
    doc["frames"][0]["joints"].pop()
    p = tmp_path / "j.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match=r"frames\[0\]\.joints"):
        parse_bone_sequence(p)


# -- frames ------------------------------------------------------------------

def frames(k, n=20, seed=0):
    rng = np.random.default_rng(seed)
    return [ParticleState.at_rest(rng.normal(size=(n, 3)), 1000.0, 1e-6) for _ in range(k)]


def test_three_frames_and_manifest(tmp_path):
    paths = export_frames(frames(3), tmp_path, 0.25)
    assert [p.name for p in paths] == ["frame_000.bin", "frame_001.bin", "frame_002.bin"]
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["count"] == 3 and man["frame_dt"] == 0.25


def test_reimport_bitwise(tmp_path):
    fr = frames(4)
    export_frames(fr, tmp_path)
    back, _ = read_frames(tmp_path)
    for a, b in zip(fr, back):
        assert b.positions.tobytes() == a.x.astype(np.float32).tobytes()
        assert b.mass.tobytes() == a.m.astype(np.float32).tobytes()


def test_empty_sequence_manifest(tmp_path):
    export_frames([], tmp_path)
    assert json.loads((tmp_path / "manifest.json").read_text())["count"] == 0


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_directory(tmp_path):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    try:
        with pytest.raises(OSError):
            export_frames(frames(1), d)
    finally:
        d.chmod(0o700)


def test_directory_blocked_by_file(tmp_path):
    f = tmp_path / "file"
    f.write_text("x")
    with pytest.raises(OSError, match="cannot create output directory"):
        export_frames(frames(1), f / "sub")
