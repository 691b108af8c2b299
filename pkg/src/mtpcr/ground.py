"""Ground plane extraction and gravity alignment.

RANSAC proposes planes from random point triples; among candidates that
reach the consensus fraction, near-horizontal planes are preferred over
large facades. The winning plane is refit by total least squares and the
cloud is rotated so the plane becomes parallel to the XOY plane.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud, RigidTransform, apply_transform
from .errors import InsufficientPoints, InvalidParameter, NoConsensus

# Candidates with normals this close to vertical count as "ground-like".
_GROUND_CONE_DEG = 45.0
_CHUNK = 256


@dataclass(frozen=True)
class Plane:
    """Plane {p : normal . p + d = 0} with unit normal canonicalized upward."""

    normal: np.ndarray
    d: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0.0:
            raise InvalidParameter("plane normal must be nonzero")
        n = n / norm
        d = float(self.d) / norm
        if n[2] < 0:
            n, d = -n, -d
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "d", d)
        self.normal.setflags(write=False)

    def distances(self, points: np.ndarray) -> np.ndarray:
        return np.abs(points @ self.normal + self.d)


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 2000
    inlier_threshold: float = 0.2
    min_inlier_fraction: float = 0.15
    rng_seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidParameter("iterations must be >= 1")
        if self.inlier_threshold <= 0:
            raise InvalidParameter("inlier_threshold must be > 0")
        if not 0 < self.min_inlier_fraction <= 1:
            raise InvalidParameter("min_inlier_fraction must be in (0, 1]")


def _tls_plane(points: np.ndarray) -> Plane:
    """Total-least-squares plane: centroid + smallest covariance eigenvector."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered
    _, vecs = np.linalg.eigh(cov)
    normal = vecs[:, 0]
    return Plane(normal, -float(normal @ centroid))


def fit_ground_plane(cloud: PointCloud, cfg: RansacConfig) -> tuple[Plane, int]:
    """RANSAC plane consensus, preferring near-horizontal candidates.

    Returns the TLS-refit plane and its inlier count. Deterministic for a
    fixed cfg.rng_seed: all samples are drawn up front from one generator.
    """
    pts = cloud.points
    n = pts.shape[0]
    if n < 3:
        raise InsufficientPoints(f"plane fit needs >= 3 points, got {n}")

    rng = np.random.default_rng(cfg.rng_seed)
    samples = rng.integers(0, n, size=(cfg.iterations, 3))

    a = pts[samples[:, 0]]
    normals = np.cross(pts[samples[:, 1]] - a, pts[samples[:, 2]] - a)
    lengths = np.linalg.norm(normals, axis=1)
    valid = lengths > 1e-12
    normals[valid] /= lengths[valid, None]
    ds = -np.einsum("ij,ij->i", normals, a)

    counts = np.zeros(cfg.iterations, dtype=np.int64)
    for start in range(0, cfg.iterations, _CHUNK):
        sl = slice(start, min(start + _CHUNK, cfg.iterations))
        dist = np.abs(pts @ normals[sl].T + ds[sl])
        counts[sl] = (dist <= cfg.inlier_threshold).sum(axis=0)
    counts[~valid] = 0

    min_count = int(np.ceil(cfg.min_inlier_fraction * n))
    eligible = counts >= min_count
    if not eligible.any():
        raise NoConsensus(
            f"best plane has {counts.max()} inliers, need {min_count}"
        )
    groundlike = eligible & (np.abs(normals[:, 2]) >= np.cos(np.radians(_GROUND_CONE_DEG)))
    pool = groundlike if groundlike.any() else eligible
    best = int(np.flatnonzero(pool)[np.argmax(counts[pool])])

    plane = Plane(normals[best], ds[best])
    # Two refit rounds: TLS over consensus inliers, then over the refit's own.
    for _ in range(2):
        inliers = plane.distances(pts) <= cfg.inlier_threshold
        if inliers.sum() < 3:
            break
        plane = _tls_plane(pts[inliers])
    count = int((plane.distances(pts) <= cfg.inlier_threshold).sum())
    if count < min_count:
        raise NoConsensus(f"refit plane keeps {count} inliers, need {min_count}")
    return plane, count


def rotation_to_vertical(normal: np.ndarray) -> RigidTransform:
    """Minimal pure rotation mapping a unit normal onto +e_z."""
    n = np.asarray(normal, dtype=np.float64).reshape(3)
    c = float(n[2])  # n . e_z
    if c <= -1.0 + 1e-9:
        return RigidTransform(np.diag([1.0, -1.0, -1.0]), np.zeros(3))
    w = np.cross(n, np.array([0.0, 0.0, 1.0]))
    s2 = float(w @ w)
    if s2 < 1e-24:
        return RigidTransform.identity()
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    R = np.eye(3) + K + K @ K * ((1.0 - c) / s2)
    # Re-orthonormalize: the closed form drifts by ~1e-12 near c -> -1.
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    if np.linalg.det(R) < 0:
        u[:, -1] *= -1
        R = u @ vt
    return RigidTransform(R, np.zeros(3))


def align_to_xoy(cloud: PointCloud, plane: Plane) -> tuple[PointCloud, RigidTransform]:
    """Rotate the cloud so plane.normal maps to (0, 0, 1). Translation is zero."""
    T = rotation_to_vertical(plane.normal)
    return apply_transform(cloud, T), T
