"""Triplane feature field decoded by a three-layer MLP into a velocity offset."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PARAM_NAMES = ("planes", "W1", "b1", "W2", "b2", "W3", "b3")
# plane k samples these coordinate axes: XY, XZ, YZ
PLANE_AXES = ((0, 1), (0, 2), (1, 2))


def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


@dataclass
class TriplaneField:
    params: dict
    domain_box: np.ndarray
    clamp_count: int = field(default=0, compare=False)

    def __post_init__(self):
        self.domain_box = np.asarray(self.domain_box, dtype=float).reshape(2, 3)
        missing = set(PARAM_NAMES) - set(self.params)
        if missing:
            raise ValueError(f"missing triplane parameters: {sorted(missing)}")

    @classmethod
    def create(cls, domain_box, resolution: int = 32, channels: int = 16, hidden: int = 64,
               seed: int = 0, plane_scale: float = 0.0, bias_scale: float = 0.5) -> "TriplaneField":
        """Zero planes and output layer, random hidden layers.

        The field is identically zero at creation.  Random hidden biases keep
        the hidden activations non-zero so gradients reach every layer.
        """
        if resolution < 2:
            raise ValueError("plane resolution must be >= 2")
        rng = np.random.default_rng(seed)
        P, C, H = resolution, channels, hidden
        params = {
            "planes": plane_scale * rng.standard_normal((3, P, P, C)),
            "W1": rng.standard_normal((H, 3 * C)) / np.sqrt(3 * C),
            "b1": bias_scale * rng.standard_normal(H),
            "W2": rng.standard_normal((H, H)) / np.sqrt(H),
            "b2": bias_scale * rng.standard_normal(H),
            "W3": np.zeros((3, H)),
            "b3": np.zeros(3),
        }
        return cls(params, domain_box)

    @property
    def resolution(self) -> int:
        return self.params["planes"].shape[1]

    @property
    def channels(self) -> int:
        return self.params["planes"].shape[3]

    @property
    def hidden(self) -> int:
        return self.params["W1"].shape[0]

    def check_finite(self):
        for k in PARAM_NAMES:
            if not np.all(np.isfinite(self.params[k])):
                raise ValueError(f"non-finite values in triplane parameter {k}")

    # -- sampling --------------------------------------------------------

    def _normalise(self, xs: np.ndarray) -> np.ndarray:
        lo, hi = self.domain_box
        span = np.where(hi > lo, hi - lo, 1.0)
        u = (xs - lo) / span
        outside = np.any((u < 0) | (u > 1), axis=1)
        self.clamp_count += int(outside.sum())
        return np.clip(u, 0.0, 1.0)

    def _corners(self, u: np.ndarray):
        """Lower lattice corner and fractional offset per plane, each (3, M, 2)."""
        P = self.resolution
        g = u * (P - 1)
        i0 = np.clip(np.floor(g).astype(np.int64), 0, P - 2)
        t = g - i0
        ax = np.array(PLANE_AXES)
        return i0[:, ax].transpose(1, 0, 2), t[:, ax].transpose(1, 0, 2)

    def plane_features(self, xs) -> np.ndarray:
        """Bilinearly sampled, concatenated plane features, (M, 3C)."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        return self._sample(self._normalise(xs))

    def _sample(self, u: np.ndarray) -> np.ndarray:
        i0, t = self._corners(u)
        planes = self.params["planes"]
        feats = []
        for k in range(3):
            i, j = i0[k, :, 0], i0[k, :, 1]
            a, b = t[k, :, 0:1], t[k, :, 1:2]
            pk = planes[k]
            feats.append((1 - a) * (1 - b) * pk[i, j] + a * (1 - b) * pk[i + 1, j]
                         + (1 - a) * b * pk[i, j + 1] + a * b * pk[i + 1, j + 1])
        return np.concatenate(feats, axis=1)

    def _mlp(self, h0):
        p = self.params
        z1 = h0 @ p["W1"].T + p["b1"]
        a1 = silu(z1)
        z2 = a1 @ p["W2"].T + p["b2"]
        a2 = silu(z2)
        return a2 @ p["W3"].T + p["b3"], (h0, z1, a1, z2, a2)

    def query(self, xs) -> np.ndarray:
        """Velocity offset at (3,) or (M, 3) positions."""
        self.check_finite()
        x = np.asarray(xs, dtype=float)
        out, _ = self._mlp(self.plane_features(x.reshape(-1, 3)))
        return out[0] if x.ndim == 1 else out

    def query_batch_with_param_grad(self, xs, upstream) -> dict:
        """Gradient of sum(upstream * query(xs)) w.r.t. every parameter."""
        xs = np.asarray(xs, dtype=float).reshape(-1, 3)
        g = np.asarray(upstream, dtype=float).reshape(-1, 3)
        p = self.params
        u = self._normalise(xs)
        out, (h0, z1, a1, z2, a2) = self._mlp(self._sample(u))
        grads = {"W3": g.T @ a2, "b3": g.sum(axis=0)}
        gz2 = (g @ p["W3"]) * silu_grad(z2)
        grads["W2"], grads["b2"] = gz2.T @ a1, gz2.sum(axis=0)
        gz1 = (gz2 @ p["W2"]) * silu_grad(z1)
        grads["W1"], grads["b1"] = gz1.T @ h0, gz1.sum(axis=0)
        gh0 = gz1 @ p["W1"]
        grads["planes"] = self._plane_backward(u, gh0)
        return grads

    def _plane_backward(self, u, gh0):
        P, C = self.resolution, self.channels
        i0, t = self._corners(u)
        gp = np.zeros((3, P, P, C))
        for k in range(3):
            gk = gh0[:, k * C:(k + 1) * C]
            i, j = i0[k, :, 0], i0[k, :, 1]
            a, b = t[k, :, 0:1], t[k, :, 1:2]
            for di, dj, wt in ((0, 0, (1 - a) * (1 - b)), (1, 0, a * (1 - b)),
                               (0, 1, (1 - a) * b), (1, 1, a * b)):
                np.add.at(gp[k], (i + di, j + dj), wt * gk)
        return gp

    def tv_loss(self) -> tuple[float, np.ndarray]:
        return tv_loss_planes(self.params["planes"])

    # -- flat parameter vector --------------------------------------------

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])

    def set_flat(self, vec: np.ndarray):
        off = 0
        for k in PARAM_NAMES:
            size = self.params[k].size
            self.params[k] = vec[off:off + size].reshape(self.params[k].shape).copy()
            off += size

    @staticmethod
    def flatten_grads(grads: dict) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in PARAM_NAMES])

    def copy(self) -> "TriplaneField":
        return TriplaneField({k: v.copy() for k, v in self.params.items()}, self.domain_box.copy())

    # -- serialisation ---------------------------------------------------

    def to_row(self) -> np.ndarray:
        """Header (P, C, H, box) followed by the flat parameters, as one row."""
        head = np.array([self.resolution, self.channels, self.hidden], dtype=float)
        return np.concatenate([head, self.domain_box.ravel(), self.flat()])[None, :]

    @classmethod
    def from_row(cls, row) -> "TriplaneField":
        row = np.asarray(row, dtype=float).ravel()
        P, C, H = (int(round(v)) for v in row[:3])
        f = cls.create(row[3:9].reshape(2, 3), P, C, H)
        expected = 9 + f.flat().size
        if row.size != expected:
            raise ValueError(f"triplane row has {row.size} values, expected {expected}")
        f.set_flat(row[9:])
        return f


def tv_loss_planes(planes) -> tuple[float, np.ndarray]:
    """Squared-difference total variation over (K, P, P, C) planes and its gradient.

    Differences that would reach past the last row or column are skipped.
    """
    p = np.asarray(planes, dtype=float)
    dj = p[:, 1:] - p[:, :-1]
    dk = p[:, :, 1:] - p[:, :, :-1]
    loss = float(np.sum(dj * dj) + np.sum(dk * dk))
    g = np.zeros_like(p)
    g[:, 1:] += 2 * dj
    g[:, :-1] -= 2 * dj
    g[:, :, 1:] += 2 * dk
    g[:, :, :-1] -= 2 * dk
    return loss, g


def query(field: TriplaneField, x) -> np.ndarray:
    return field.query(x)


def query_batch_with_param_grad(field: TriplaneField, xs, upstream) -> dict:
    return field.query_batch_with_param_grad(xs, upstream)


def tv_loss(field: TriplaneField) -> tuple[float, np.ndarray]:
    return field.tv_loss()
