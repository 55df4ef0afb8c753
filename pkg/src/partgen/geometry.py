"""Cuboid geometry: 6D rotations, labelled cuboids, occupancy and surface sampling.

Sizes are full extents along the cuboid's local axes; the local frame of a
cuboid is given by the columns of its rotation matrix.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

IDENTITY_6D = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

# unit normals of the six faces, in local coordinates: (axis, sign)
_FACES = [(k, s) for k in range(3) for s in (-1.0, 1.0)]


class DegenerateRotationError(ValueError):
    pass


def rot6d_to_matrix(r) -> np.ndarray:
    """Decode a 6D rotation (first two matrix columns) via Gram-Schmidt.

    Works on a single 6-vector or on a batch of shape (..., 6).
    """
    r = np.asarray(r, dtype=np.float64)
    a, b = r[..., :3], r[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if not np.all(np.isfinite(r)) or np.any(na < 1e-12):
        raise DegenerateRotationError("first rotation column is zero or non-finite")
    x = a / na
    b = b - np.sum(x * b, axis=-1, keepdims=True) * x
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(nb < 1e-12):
        raise DegenerateRotationError("rotation columns are parallel or the second is zero")
    y = b / nb
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)


def matrix_to_rot6d(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula; used to build yaw/tilt rotations."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def _as_tuple(v, n: int) -> tuple:
    t = tuple(float(x) for x in np.asarray(v, dtype=np.float64).reshape(-1))
    if len(t) != n:
        raise ValueError(f"expected {n} values, got {len(t)}")
    return t


@dataclass(frozen=True)
class Box:
    """An oriented box: full-extent size, center and 6D rotation."""

    size: tuple
    translation: tuple
    rotation: tuple = IDENTITY_6D

    def __post_init__(self):
        object.__setattr__(self, "size", _as_tuple(self.size, 3))
        object.__setattr__(self, "translation", _as_tuple(self.translation, 3))
        object.__setattr__(self, "rotation", _as_tuple(self.rotation, 6))
        vals = self.size + self.translation + self.rotation
        if not all(np.isfinite(vals)):
            raise ValueError("box parameters must be finite")
        if min(self.size) <= 0:
            raise ValueError(f"box size must be positive, got {self.size}")

    @property
    def matrix(self) -> np.ndarray:
        return rot6d_to_matrix(self.rotation)

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        local = signs * (np.asarray(self.size) / 2.0)
        return local @ self.matrix.T + np.asarray(self.translation)

    def to_local(self, x) -> np.ndarray:
        """Express world points (..., 3) in the box frame."""
        x = np.asarray(x, dtype=np.float64)
        return (x - np.asarray(self.translation)) @ self.matrix


@dataclass(frozen=True)
class BoundingBox(Box):
    pass


@dataclass(frozen=True)
class Part(Box):
    """A labelled cuboid. Field order matches (label, size, translation, rotation)."""

    label: int = 0

    def __init__(self, label: int, size, translation, rotation=IDENTITY_6D):
        object.__setattr__(self, "label", int(label))
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "rotation", rotation)
        self.__post_init__()
        if self.label < 0:
            raise ValueError("label must be non-negative")


def cuboid_contains(part: Box, x) -> np.ndarray | bool:
    """Closed containment test; accepts one point or an (n, 3) array."""
    local = part.to_local(x)
    inside = np.all(np.abs(local) <= np.asarray(part.size) / 2.0, axis=-1)
    return bool(inside) if np.ndim(inside) == 0 else inside


def union_contains(parts: Sequence[Box], x) -> np.ndarray | bool:
    if len(parts) == 0:
        raise ValueError("union of an empty part list is undefined")
    x = np.asarray(x, dtype=np.float64)
    inside = np.zeros(x.shape[:-1], dtype=bool)
    for p in parts:
        inside |= cuboid_contains(p, x)
    return bool(inside) if inside.ndim == 0 else inside


def _strictly_inside(part: Box, x: np.ndarray, eps: float) -> np.ndarray:
    local = part.to_local(x)
    return np.all(np.abs(local) < np.asarray(part.size) / 2.0 - eps, axis=-1)


def union_volume_mc(parts: Sequence[Box], n: int, rng: np.random.Generator) -> float:
    """Monte-Carlo union volume inside the parts' axis-aligned hull."""
    corners = np.concatenate([p.corners() for p in parts])
    lo, hi = corners.min(0), corners.max(0)
    x = rng.uniform(lo, hi, size=(n, 3))
    return float(np.prod(hi - lo) * union_contains(parts, x).mean())


def sample_union_surface(
    parts: Sequence[Box],
    n: int,
    rng: np.random.Generator,
    eps_rel: float = 1e-6,
    return_faces: bool = False,
):
    """Area-weighted samples on the boundary of a union of cuboids.

    Points are drawn on all cuboid faces and rejected when they fall strictly
    inside another cuboid (shrunk by ``eps_rel`` of the bounding diagonal).
    With ``return_faces`` the emitting (part index, face index) pairs are
    returned too; face index is ``2 * axis + (sign > 0)``.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if len(parts) == 0:
        raise ValueError("cannot sample the surface of an empty union")
    corners = np.concatenate([p.corners() for p in parts])
    eps = eps_rel * float(np.linalg.norm(corners.max(0) - corners.min(0)))

    areas = []
    for p in parts:
        s = p.size
        for k, _ in _FACES:
            i, j = [a for a in range(3) if a != k]
            areas.append(s[i] * s[j])
    areas = np.asarray(areas)
    probs = areas / areas.sum()

    pts, pidx, fidx = [], [], []
    accepted = drawn = 0
    while accepted < n:
        m = max(2 * (n - accepted), 64)
        faces = rng.choice(len(probs), size=m, p=probs)
        uv = rng.uniform(-0.5, 0.5, size=(m, 2))
        x = np.empty((m, 3))
        for f in np.unique(faces):
            sel = faces == f
            pi, fi = divmod(int(f), 6)
            p = parts[pi]
            k, sign = _FACES[fi]
            i, j = [a for a in range(3) if a != k]
            local = np.zeros((int(sel.sum()), 3))
            local[:, k] = sign * p.size[k] / 2.0
            local[:, i] = uv[sel, 0] * p.size[i]
            local[:, j] = uv[sel, 1] * p.size[j]
            x[sel] = local @ p.matrix.T + np.asarray(p.translation)
        keep = np.ones(m, dtype=bool)
        owner = faces // 6
        for q, p in enumerate(parts):
            keep &= ~(_strictly_inside(p, x, eps) & (owner != q))
        drawn += m
        accepted += int(keep.sum())
        if drawn >= 10_000 and accepted < 1e-3 * drawn:
            raise RuntimeError(
                f"surface sampling acceptance {accepted}/{drawn} below 1e-3; "
                "the union boundary is (almost) entirely hidden"
            )
        pts.append(x[keep])
        pidx.append(owner[keep])
        fidx.append(faces[keep] % 6)
    x = np.concatenate(pts)[:n]
    if return_faces:
        return x, np.concatenate(pidx)[:n], np.concatenate(fidx)[:n]
    return x


def face_normals(parts: Sequence[Box], part_idx: np.ndarray, face_idx: np.ndarray) -> np.ndarray:
    """Outward world-space normals for (part, face) indices from sample_union_surface."""
    out = np.empty((len(part_idx), 3))
    for i, (pi, fi) in enumerate(zip(part_idx, face_idx)):
        k, sign = _FACES[int(fi)]
        out[i] = sign * parts[int(pi)].matrix[:, k]
    return out
