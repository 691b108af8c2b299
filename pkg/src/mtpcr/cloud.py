"""Core geometric types, point cloud I/O, spatial indexing, downsampling.

A point cloud is an (N, 3) float64 array of x/y/z in meters wrapped in a
small immutable container. All operations are pure functions; nothing here
mutates shared state, so everything is safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, InvalidParameter, IoError, ParseError

SOURCE_LABELS = ("aerial", "terrestrial", "unknown")


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidParameter(f"points must have shape (N, 3), got {pts.shape}")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Ordered set of 3D points in meters, with an optional capture label."""

    points: np.ndarray
    source: str = "unknown"

    def __post_init__(self):
        pts = _as_points(self.points)
        if not np.isfinite(pts).all():
            raise ParseError("point cloud contains non-finite coordinates")
        if self.source not in SOURCE_LABELS:
            raise InvalidParameter(f"unknown source label {self.source!r}")
        object.__setattr__(self, "points", pts)
        self.points.setflags(write=False)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def require_nonempty(self, what: str = "operation") -> None:
        if self.is_empty:
            raise EmptyCloud(f"{what} requires a non-empty cloud")

    def extent(self) -> np.ndarray:
        """Per-axis max-min, shape (3,)."""
        self.require_nonempty("extent")
        return self.points.max(axis=0) - self.points.min(axis=0)


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p -> R @ p + t."""

    R: np.ndarray
    t: np.ndarray

    ORTHO_TOL = 1e-9

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > self.ORTHO_TOL:
            raise InvalidParameter(f"rotation not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(R)
        if abs(det - 1.0) > self.ORTHO_TOL:
            raise InvalidParameter(f"rotation determinant {det} != +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        self.R.setflags(write=False)
        self.t.setflags(write=False)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying `other` first, then self."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -(self.R.T @ self.t))

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.asarray(d["R"]), np.asarray(d["t"]))


@dataclass
class SpatialIndex:
    """Exact nearest-neighbor index over a cloud (read-only after build)."""

    cloud: PointCloud
    _tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        self.cloud.require_nonempty("spatial index")
        self._tree = cKDTree(self.cloud.points)

    def nearest(self, q) -> tuple[np.ndarray, float]:
        """Closest indexed point to q and its Euclidean distance."""
        q = np.asarray(q, dtype=np.float64).reshape(3)
        dist, idx = self._tree.query(q)
        return self.cloud.points[idx], float(dist)

    def query_many(self, qs: np.ndarray, max_dist: float = np.inf, workers: int = 1):
        """Batch nearest query; distances are inf past max_dist."""
        dists, idxs = self._tree.query(qs, distance_upper_bound=max_dist, workers=workers)
        return dists, idxs


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    """New cloud with every point mapped through R p + t."""
    cloud.require_nonempty("apply_transform")
    return PointCloud(T.apply(cloud.points), cloud.source)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Collapse each voxel cell to the centroid of its occupants.

    Output order follows sorted cell keys, so results are deterministic.
    """
    if voxel <= 0:
        raise InvalidParameter(f"voxel size must be > 0, got {voxel}")
    cloud.require_nonempty("voxel_downsample")
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    sums = np.zeros((counts.size, 3))
    np.add.at(sums, inverse, cloud.points)
    return PointCloud(sums / counts[:, None], cloud.source)


def nearest(index: SpatialIndex, q) -> tuple[np.ndarray, float]:
    return index.nearest(q)


# ---------------------------------------------------------------------------
# File I/O: XYZ ASCII and PLY (vertex x/y/z, ascii or binary little-endian)
# ---------------------------------------------------------------------------

_PLY_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}
_PLY_FLOAT_FMT = {"float": "f", "float32": "f", "double": "d", "float64": "d"}


def load_cloud(path, fmt: str | None = None, source: str = "unknown") -> PointCloud:
    """Read a point cloud from an XYZ ASCII or PLY file.

    fmt is inferred from the extension when not given.
    """
    path = str(path)
    if fmt is None:
        fmt = "ply" if path.lower().endswith(".ply") else "xyz"
    if fmt not in ("xyz", "ply"):
        raise InvalidParameter(f"unknown cloud format {fmt!r}")
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    points = _parse_ply(raw, path) if fmt == "ply" else _parse_xyz(raw, path)
    if points.shape[0] == 0:
        raise EmptyCloud(f"{path} contains zero points")
    if not np.isfinite(points).all():
        raise ParseError(f"{path} contains non-finite coordinates")
    return PointCloud(points, source)


def _parse_xyz(raw: bytes, path: str) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(raw.decode("utf-8", errors="strict").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) < 3:
            raise ParseError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
        try:
            rows.append([float(parts[0]), float(parts[1]), float(parts[2])])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def _parse_ply(raw: bytes, path: str) -> np.ndarray:
    # Header is ASCII lines up to end_header regardless of body encoding.
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a PLY file")
    body_start = raw.find(b"\n", end) + 1
    header = raw[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    vertex_count = None
    props: list[tuple[str, str]] = []  # (type, name) of the vertex element
    in_vertex = False
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            if in_vertex:
                break  # only properties up to the vertex element matter
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                vertex_count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise ParseError(f"{path}: list properties in vertex element unsupported")
            props.append((tok[1], tok[2]))

    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"{path}: unsupported PLY format {fmt!r}")
    if vertex_count is None:
        raise ParseError(f"{path}: no vertex element")
    names = [n for _, n in props]
    if not {"x", "y", "z"} <= set(names):
        raise ParseError(f"{path}: vertex element lacks x/y/z properties")
    for axis in ("x", "y", "z"):
        if props[names.index(axis)][0] not in _PLY_FLOAT_FMT:
            raise ParseError(f"{path}: property {axis} must be float or double")

    if fmt == "ascii":
        out = np.empty((vertex_count, 3))
        lines = raw[body_start:].decode("ascii", errors="replace").splitlines()
        data_lines = [ln for ln in lines if ln.strip()]
        if len(data_lines) < vertex_count:
            raise IoError(f"{path}: truncated PLY body")
        cols = (names.index("x"), names.index("y"), names.index("z"))
        for k in range(vertex_count):
            parts = data_lines[k].split()
            if len(parts) < len(props):
                raise ParseError(f"{path}: short vertex row {k}")
            try:
                out[k] = [float(parts[c]) for c in cols]
            except ValueError as exc:
                raise ParseError(f"{path}: vertex row {k}: {exc}") from exc
        return out

    stride = sum(_PLY_SIZES[t] for t, _ in props)
    body = raw[body_start:]
    if len(body) < stride * vertex_count:
        raise IoError(f"{path}: truncated PLY body")
    offsets = {}
    off = 0
    for t, n in props:
        offsets[n] = (off, t)
        off += _PLY_SIZES[t]
    out = np.empty((vertex_count, 3))
    for col, axis in enumerate(("x", "y", "z")):
        o, t = offsets[axis]
        code = _PLY_FLOAT_FMT[t]
        out[:, col] = np.ndarray(
            (vertex_count,),
            dtype=np.dtype("<" + code),
            buffer=body,
            offset=o,
            strides=(stride,),
        )
    return out


def save_cloud(cloud: PointCloud, path, fmt: str | None = None, binary: bool = True) -> None:
    """Write a cloud as XYZ ASCII (9 significant digits) or PLY."""
    path = str(path)
    if fmt is None:
        fmt = "ply" if path.lower().endswith(".ply") else "xyz"
    try:
        if fmt == "xyz":
            with open(path, "w", encoding="utf-8") as fh:
                for x, y, z in cloud.points:
                    fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
        elif fmt == "ply":
            _write_ply(cloud, path, binary)
        else:
            raise InvalidParameter(f"unknown cloud format {fmt!r}")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _write_ply(cloud: PointCloud, path: str, binary: bool) -> None:
    n = len(cloud)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {n}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())
        else:
            for x, y, z in cloud.points:
                fh.write(f"{x!r} {y!r} {z!r}\n".encode("ascii"))
