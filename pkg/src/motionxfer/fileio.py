"""Binary matrix container, point clouds, bone sequences and frame export.

Matrix container layout (little-endian)::

    int64 magic | int64 rows | int64 cols | float32[rows * cols] row-major

Point clouds reuse the container; the column count selects the layout:
3 = xyz, 4 = xyz+label, 5 = xyz+mass+volume, 6 = xyz+mass+volume+label.
PLY files (ascii or binary_little_endian) are accepted on input too.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .kinematics import Bone, BoneFrame, BoneSequence
from .transforms import RigidTransform, matrix_to_quat, quat_to_matrix

MAGIC = int.from_bytes(b"MXFRMAT1", "little")
HEADER_BYTES = 24
QUAT_TOL = 1e-6

_LAYOUTS = {
    3: ("x", "y", "z"),
    4: ("x", "y", "z", "label"),
    5: ("x", "y", "z", "mass", "volume"),
    6: ("x", "y", "z", "mass", "volume", "label"),
}


class FormatError(ValueError):
    """Malformed input; the message names the offending location."""


# -- matrix container -------------------------------------------------------

def write_matrix(path, matrix) -> None:
    a = np.ascontiguousarray(np.asarray(matrix, dtype="<f4"))
    if a.ndim != 2:
        raise ValueError("matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(np.array([MAGIC, a.shape[0], a.shape[1]], dtype="<i8").tobytes())
        fh.write(a.tobytes())


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_BYTES:
        raise FormatError(f"{path}: malformed header, {len(raw)} bytes at offset 0 "
                          f"but the header needs {HEADER_BYTES}")
    magic, rows, cols = np.frombuffer(raw[:HEADER_BYTES], dtype="<i8")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic number at offset 0")
    if rows < 0 or cols < 0:
        raise FormatError(f"{path}: negative dimensions ({rows}, {cols}) at offset 8")
    need = int(rows) * int(cols) * 4
    have = len(raw) - HEADER_BYTES
    if have != need:
        raise FormatError(f"{path}: count mismatch, header declares {rows}x{cols} float32 "
                          f"({need} bytes) but payload at offset {HEADER_BYTES} holds {have} bytes "
                          f"(data ends at offset {len(raw)})")
    a = np.frombuffer(raw, dtype="<f4", offset=HEADER_BYTES).reshape(int(rows), int(cols))
    bad = ~np.isfinite(a)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        off = HEADER_BYTES + 4 * (int(r) * int(cols) + int(c))
        raise FormatError(f"{path}: non-finite value at row {r}, column {c} (offset {off})")
    return a.copy()


# -- point clouds -----------------------------------------------------------

@dataclass
class PointCloud:
    positions: np.ndarray
    mass: Optional[np.ndarray] = None
    volume: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.positions)

    def to_matrix(self) -> np.ndarray:
        cols = [np.asarray(self.positions, dtype=np.float32).reshape(-1, 3)]
        if (self.mass is None) != (self.volume is None):
            raise ValueError("mass and volume must be given together")
        if self.mass is not None:
            cols += [np.asarray(self.mass, dtype=np.float32)[:, None],
                     np.asarray(self.volume, dtype=np.float32)[:, None]]
        if self.labels is not None:
            cols.append(np.asarray(self.labels, dtype=np.float32)[:, None])
        return np.concatenate(cols, axis=1)

    @classmethod
    def from_columns(cls, table: dict, n: int) -> "PointCloud":
        pos = np.stack([table[k] for k in "xyz"], axis=1).astype(np.float32) if n else np.zeros((0, 3), np.float32)
        lab = table.get("label")
        return cls(pos, table.get("mass"), table.get("volume"),
                   None if lab is None else np.rint(lab).astype(np.int64))


def write_point_cloud(path, cloud: PointCloud, fmt: str = "bin") -> None:
    if fmt == "ply":
        return write_ply(path, cloud)
    write_matrix(path, cloud.to_matrix())


def parse_point_cloud(path) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(b"ply"):
        return _parse_ply(path, raw)
    if len(raw) == 0:
        return PointCloud(np.zeros((0, 3), np.float32))
    a = read_matrix(path)
    if a.shape[1] not in _LAYOUTS:
        raise FormatError(f"{path}: unsupported point layout with {a.shape[1]} columns at offset 16")
    names = _LAYOUTS[a.shape[1]]
    table = {k: a[:, i] for i, k in enumerate(names)}
    if "label" in table:
        lab = table["label"]
        if np.any(lab != np.rint(lab)):
            r = int(np.flatnonzero(lab != np.rint(lab))[0])
            raise FormatError(f"{path}: non-integer label in row {r}")
    return PointCloud.from_columns(table, len(a))


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply(path, raw: bytes) -> PointCloud:
    end = raw.find(b"end_header")
    if end < 0:
        raise FormatError(f"{path}: PLY header without end_header")
    nl = raw.find(b"\n", end)
    body_off = nl + 1
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt, n, props, element = None, None, [], None
    for lineno, line in enumerate(lines, 1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            element = tok[1] if len(tok) > 1 else None
            if element == "vertex":
                try:
                    n = int(tok[2])
                except (IndexError, ValueError):
                    raise FormatError(f"{path}: line {lineno}: bad vertex count") from None
            elif n is not None:
                raise FormatError(f"{path}: line {lineno}: only a vertex element is supported")
        elif tok[0] == "property":
            if element != "vertex":
                continue
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: line {lineno}: unsupported property {line.strip()!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise FormatError(f"{path}: line {lineno}: unexpected header keyword {tok[0]!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}")
    if n is None:
        raise FormatError(f"{path}: PLY header declares no vertex element")
    names = [p[0] for p in props]
    for k in "xyz":
        if k not in names:
            raise FormatError(f"{path}: PLY vertex element lacks property {k!r}")
    if fmt == "ascii":
        rows = raw[body_off:].decode("ascii").split("\n")
        rows = [r for r in rows if r.strip()]
        if len(rows) != n:
            raise FormatError(f"{path}: count mismatch, header declares {n} vertices but body has "
                              f"{len(rows)} lines (body starts at line {len(lines) + 2})")
        vals = np.zeros((n, len(props)))
        for i, r in enumerate(rows):
            tok = r.split()
            if len(tok) != len(props):
                raise FormatError(f"{path}: line {len(lines) + 2 + i}: expected {len(props)} values")
            try:
                vals[i] = [float(t) for t in tok]
            except ValueError:
                raise FormatError(f"{path}: line {len(lines) + 2 + i}: non-numeric value") from None
        table = {k: vals[:, j] for j, k in enumerate(names)}
    else:
        dtype = np.dtype([(k, "<" + t) for k, t in props])
        need = n * dtype.itemsize
        have = len(raw) - body_off
        if have != need:
            raise FormatError(f"{path}: count mismatch, {n} vertices need {need} bytes at offset "
                              f"{body_off} but {have} are present")
        rec = np.frombuffer(raw, dtype=dtype, count=n, offset=body_off)
        table = {k: rec[k].astype(np.float64 if rec[k].dtype == np.float64 else np.float32) for k in names}
    for k in "xyz":
        bad = ~np.isfinite(table[k])
        if bad.any():
            raise FormatError(f"{path}: non-finite coordinate in vertex {int(np.flatnonzero(bad)[0])}")
    return PointCloud.from_columns(table, n)


def write_ply(path, cloud: PointCloud) -> None:
    m = cloud.to_matrix()
    names = _LAYOUTS[m.shape[1]]
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(m)}"]
    head += [f"property float {k}" for k in names]
    head.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


# -- feature sets -----------------------------------------------------------

def read_features(vertices_path, diff_path, geo_path):
    from .correspondence import FeatureSet
    verts = parse_point_cloud(vertices_path).positions.astype(float)
    fs = FeatureSet(verts, read_matrix(diff_path).astype(float), read_matrix(geo_path).astype(float))
    try:
        fs.validate()
    except ValueError as exc:
        raise FormatError(f"{diff_path}/{geo_path}: {exc}") from None
    return fs


# -- bone sequences ---------------------------------------------------------

def _quat(q, where: str) -> np.ndarray:
    try:
        q = np.asarray(q, dtype=float).reshape(4)
    except (TypeError, ValueError):
        raise FormatError(f"{where}: expected a 4-component quaternion") from None
    n = np.linalg.norm(q)
    if not np.isfinite(n) or abs(n - 1.0) > QUAT_TOL:
        raise FormatError(f"{where}: quaternion norm {n:.9g} is not unit within {QUAT_TOL}")
    return q / n


def _vec(v, where: str) -> np.ndarray:
    try:
        v = np.asarray(v, dtype=float).reshape(3)
    except (TypeError, ValueError):
        raise FormatError(f"{where}: expected a 3-vector") from None
    if not np.all(np.isfinite(v)):
        raise FormatError(f"{where}: non-finite value")
    return v


def _transform_doc(t: RigidTransform) -> dict:
    return {"rotation": matrix_to_quat(t.rotation).tolist(), "translation": t.translation.tolist()}


def _transform(doc, where: str) -> RigidTransform:
    if not isinstance(doc, dict):
        raise FormatError(f"{where}: expected an object")
    R = quat_to_matrix(_quat(doc.get("rotation"), where + ".rotation"))
    return RigidTransform(R, _vec(doc.get("translation"), where + ".translation"))


def bone_sequence_to_doc(seq: BoneSequence) -> dict:
    return {
        "format": "bone-sequence",
        "version": 1,
        "bone_count": seq.n_bones,
        "frame_dt": seq.frame_dt,
        "bones": [{"center": b.center.tolist(), "orientation": matrix_to_quat(b.orientation).tolist(),
                   "scales": b.scales.tolist()} for b in seq.canonical_bones],
        "frames": [{"global": _transform_doc(f.global_transform),
                    "joints": [_transform_doc(j) for j in f.joints]} for f in seq.frames],
    }


def write_bone_sequence(path, seq: BoneSequence) -> None:
    Path(path).write_text(json.dumps(bone_sequence_to_doc(seq), indent=1))


def parse_bone_sequence(path) -> BoneSequence:
    """Read a JSON bone-sequence document.

    Quaternions are (w, x, y, z) and must be unit within 1e-6.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("format") != "bone-sequence":
        raise FormatError(f"{path}: not a bone-sequence document")
    B = doc.get("bone_count")
    bones_doc, frames_doc = doc.get("bones"), doc.get("frames")
    if not isinstance(bones_doc, list) or len(bones_doc) != B:
        raise FormatError(f"{path}: bones: expected {B} entries")
    if not isinstance(frames_doc, list):
        raise FormatError(f"{path}: frames: expected a list")
    bones = []
    for i, bd in enumerate(bones_doc):
        where = f"{path}: bones[{i}]"
        bone = Bone(_vec(bd.get("center"), where + ".center"),
                    quat_to_matrix(_quat(bd.get("orientation"), where + ".orientation")),
                    _vec(bd.get("scales"), where + ".scales"))
        try:
            bone.validate()
        except ValueError as exc:
            raise FormatError(f"{where}: {exc}") from None
        bones.append(bone)
    frames = []
    for t, fd in enumerate(frames_doc):
        where = f"{path}: frames[{t}]"
        joints_doc = fd.get("joints")
        if not isinstance(joints_doc, list) or len(joints_doc) != B:
            raise FormatError(f"{where}.joints: expected {B} transforms")
        joints = [_transform(j, f"{where}.joints[{b}]") for b, j in enumerate(joints_doc)]
        frames.append(BoneFrame(joints, _transform(fd.get("global"), where + ".global")))
    try:
        return BoneSequence(bones, frames, float(doc.get("frame_dt", 0)))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None


# -- frame export -----------------------------------------------------------

def export_frames(frames, out_dir, frame_dt: float = 1.0, fmt: str = "bin") -> list:
    """Write one point cloud per frame plus ``manifest.json``; returns the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    width = max(3, len(str(max(len(frames) - 1, 0))))
    paths = []
    for i, fr in enumerate(frames):
        p = out / f"frame_{i:0{width}d}.{fmt}"
        cloud = fr if isinstance(fr, PointCloud) else PointCloud(fr.x, fr.m, fr.V0)
        write_point_cloud(p, cloud, fmt=fmt)
        paths.append(p)
    manifest = {"count": len(frames), "frame_dt": frame_dt, "files": [p.name for p in paths]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return paths


def read_frames(out_dir) -> tuple[list, dict]:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    return [parse_point_cloud(out / f) for f in manifest["files"]], manifest
