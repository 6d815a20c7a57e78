"""Part transfer from a reference shape to a target shape by feature matching."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

UNASSIGNED = 0
BOX_DILATION = 0.05


class EmptyPartError(ValueError):
    pass


@dataclass
class FeatureSet:
    vertices: np.ndarray
    diff_features: np.ndarray
    geo_features: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        n = len(self.vertices)
        self.diff_features = np.asarray(self.diff_features, dtype=float).reshape(n, -1) if n else \
            np.asarray(self.diff_features, dtype=float)
        self.geo_features = np.asarray(self.geo_features, dtype=float).reshape(n, -1) if n else \
            np.asarray(self.geo_features, dtype=float)

    def validate(self):
        n = len(self.vertices)
        for name in ("diff_features", "geo_features"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows for {n} vertices")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")


@dataclass
class PartAssignment:
    """Per-vertex labels (0 = unassigned) with per-part geometry.

    ``part_boxes`` is (B, 2, 3) holding [min, max] corners; empty parts have
    NaN boxes and centroids.
    """

    labels: np.ndarray
    part_boxes: np.ndarray
    part_centroids: np.ndarray

    @property
    def n_parts(self) -> int:
        return len(self.part_centroids)

    def empty_parts(self) -> list:
        return [b + 1 for b in range(self.n_parts) if np.isnan(self.part_centroids[b, 0])]


def concat_features(fs: FeatureSet) -> np.ndarray:
    if fs.diff_features.shape[0] != fs.geo_features.shape[0]:
        raise ValueError("feature blocks have different row counts")
    return np.concatenate([fs.diff_features, fs.geo_features], axis=1)


def mean_part_features(features, labels, n_parts: int = None) -> np.ndarray:
    f = np.asarray(features, dtype=float)
    lab = np.asarray(labels, dtype=np.int64)
    B = int(lab.max()) if n_parts is None else n_parts
    out = np.empty((B, f.shape[1]))
    for b in range(1, B + 1):
        sel = lab == b
        if not np.any(sel):
            raise EmptyPartError(f"part {b} has no members")
        out[b - 1] = f[sel].mean(axis=0)
    return out


def match_parts(target_features, ref_part_means) -> np.ndarray:
    """Cosine-similarity argmax of each target row over the part means.

    Zero-norm target rows cannot be matched and come back unassigned.
    """
    f = np.asarray(target_features, dtype=float)
    means = np.asarray(ref_part_means, dtype=float)
    fn = np.linalg.norm(f, axis=1)
    mn = np.linalg.norm(means, axis=1)
    if np.any(mn == 0):
        raise ValueError("reference part mean with zero norm")
    zero = fn == 0
    if np.any(zero):
        log.warning("%d target rows have zero norm and stay unassigned", int(zero.sum()))
    sim = (f @ means.T) / (np.where(zero, 1.0, fn)[:, None] * mn[None, :])
    labels = np.argmax(sim, axis=1).astype(np.int64) + 1
    labels[zero] = UNASSIGNED
    return labels


def part_geometry(vertices, labels, n_parts: int):
    v = np.asarray(vertices, dtype=float)
    boxes = np.full((n_parts, 2, 3), np.nan)
    cents = np.full((n_parts, 3), np.nan)
    for b in range(1, n_parts + 1):
        pts = v[labels == b]
        if len(pts):
            boxes[b - 1, 0], boxes[b - 1, 1] = pts.min(axis=0), pts.max(axis=0)
            cents[b - 1] = pts.mean(axis=0)
    return boxes, cents


def remove_outliers(vertices, labels, k: float = 2.0, n_parts: int = None,
                    max_rounds: int = 100) -> PartAssignment:
    """Drop vertices farther than mean + k*std from their part centroid.

    The rule is re-applied to the survivors until nothing changes, which
    makes the operation idempotent.
    """
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    lab = np.asarray(labels, dtype=np.int64).copy()
    B = int(lab.max(initial=0)) if n_parts is None else n_parts
    for _ in range(max_rounds):
        changed = False
        for b in range(1, B + 1):
            sel = np.flatnonzero(lab == b)
            if len(sel) < 2:
                continue
            dist = np.linalg.norm(v[sel] - v[sel].mean(axis=0), axis=1)
            far = dist > dist.mean() + k * dist.std()
            if np.any(far):
                lab[sel[far]] = UNASSIGNED
                changed = True
        if not changed:
            break
    boxes, cents = part_geometry(v, lab, B)
    res = PartAssignment(lab, boxes, cents)
    if res.empty_parts():
        log.warning("parts without surviving vertices: %s", res.empty_parts())
    return res


def assign_particles(particle_positions, assignment: PartAssignment,
                     dilation: float = BOX_DILATION) -> np.ndarray:
    """Label particles by the (dilated) part boxes containing them.

    A particle inside several boxes goes to the nearest part centroid.
    """
    x = np.asarray(particle_positions, dtype=float).reshape(-1, 3)
    B = assignment.n_parts
    inside = np.zeros((len(x), B), dtype=bool)
    for b in range(B):
        lo, hi = assignment.part_boxes[b]
        if np.isnan(lo[0]):
            continue
        c, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * (1.0 + dilation)
        inside[:, b] = np.all(np.abs(x - c) <= half, axis=1)
    cents = np.nan_to_num(assignment.part_centroids, nan=np.inf)
    dist = np.linalg.norm(x[:, None, :] - cents[None], axis=2)
    dist = np.where(inside, dist, np.inf)
    labels = np.argmin(dist, axis=1).astype(np.int64) + 1
    labels[~inside.any(axis=1)] = UNASSIGNED
    return labels


def synthetic_features(labels, n_parts: int, dims=(16, 8), noise: float = 0.1,
                       seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Part-indexed one-hot features plus seeded Gaussian noise.

    Returns a (diff, geo) pair; the one-hot block sits in the first
    ``n_parts`` columns of each.
    """
    lab = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    out = []
    for D in dims:
        if D < n_parts:
            raise ValueError(f"feature width {D} smaller than part count {n_parts}")
        f = noise * rng.standard_normal((len(lab), D))
        hit = lab > 0
        f[np.flatnonzero(hit), lab[hit] - 1] += 1.0
        out.append(f)
    return out[0], out[1]
