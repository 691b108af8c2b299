"""Bird's-eye-view rasterization and image enhancement.

A cloud is scaled by a density-adaptive resolution factor, bucketed into a
height grid (max z per pixel), quantized to 8-bit intensities, and sharpened
by two fixed high-pass kernels. Rasters keep the exact height grid alongside
the 8-bit image so later stages can recover heights without quantization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .cloud import PointCloud
from .errors import DegenerateExtent, InvalidParameter, IoError, ParseError

# Edge-extraction and detail-sharpening kernels, applied in this order.
KERNEL_EDGE = np.array([[-2, -2, -2], [-2, 32, -2], [-2, -2, -2]], dtype=np.int64)
KERNEL_SHARPEN = np.array([[-1, -1, -1], [-1, 10, -1], [-1, -1, -1]], dtype=np.int64)

# Bucket indices use ceil with a small slack so that scale round trips
# (meters -> pixels -> meters -> pixels) cannot hop a cell on float noise.
_CEIL_EPS = 1e-9


def bucket_index(v) -> np.ndarray:
    return np.ceil(np.asarray(v) - _CEIL_EPS).astype(np.int64)


@dataclass(frozen=True)
class BevRaster:
    """Top-down raster of a scaled cloud.

    g: (height, width) uint8 intensities, 0 on empty pixels.
    h: (height, width) float64 max height per pixel (scaled units), NaN empty.
    Pixel (i, j) = (column i, row j) holds points with ceil(x - x_min) = i
    and ceil(y - y_min) = j in scaled coordinates.
    """

    g: np.ndarray
    h: np.ndarray
    res: float
    x_min: float
    y_min: float
    z_min: float
    z_max: float

    @property
    def width(self) -> int:
        return self.g.shape[1]

    @property
    def height(self) -> int:
        return self.g.shape[0]

    def occupied(self) -> np.ndarray:
        return ~np.isnan(self.h)

    def metadata(self) -> dict:
        return {
            "res": self.res,
            "x_min": self.x_min,
            "y_min": self.y_min,
            "z_min": self.z_min,
            "z_max": self.z_max,
            "width": self.width,
            "height": self.height,
        }


def compute_resolution(cloud: PointCloud, gamma: float) -> float:
    """Density-adaptive scale factor: N * gamma / (x-extent * y-extent)."""
    if gamma <= 0:
        raise InvalidParameter(f"gamma must be > 0, got {gamma}")
    cloud.require_nonempty("compute_resolution")
    ext = cloud.extent()
    if ext[0] <= 0 or ext[1] <= 0:
        raise DegenerateExtent(f"cloud x/y extent is degenerate: {ext[:2]}")
    return len(cloud) * gamma / (ext[0] * ext[1])


def scale_cloud(cloud: PointCloud, res: float) -> PointCloud:
    if res <= 0:
        raise InvalidParameter(f"res must be > 0, got {res}")
    return PointCloud(cloud.points * res, cloud.source)


def rasterize(scaled: PointCloud, res: float = 1.0) -> BevRaster:
    """Bucket a scaled cloud into max-height and intensity grids.

    `res` is the factor the cloud was scaled by; it is recorded on the
    raster so keypoints can be mapped back to meters.
    """
    scaled.require_nonempty("rasterize")
    pts = scaled.points
    x_min = float(pts[:, 0].min())
    y_min = float(pts[:, 1].min())
    z_min = float(pts[:, 2].min())
    z_max = float(pts[:, 2].max())

    i = bucket_index(pts[:, 0] - x_min)
    j = bucket_index(pts[:, 1] - y_min)
    width = int(i.max()) + 1
    height = int(j.max()) + 1

    h = np.full((height, width), np.nan)
    flat = j * width + i
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    z_sorted = pts[order, 2]
    # Segment-wise max: last index of each run after sorting by (bucket, z).
    zorder = np.lexsort((z_sorted, flat_sorted))
    flat_sorted = flat_sorted[zorder]
    z_sorted = z_sorted[zorder]
    last = np.r_[flat_sorted[1:] != flat_sorted[:-1], True]
    h.ravel()[flat_sorted[last]] = z_sorted[last]

    occ = ~np.isnan(h)
    g = np.zeros((height, width), dtype=np.uint8)
    if z_max > z_min:
        frac = (h[occ] - z_min) / (z_max - z_min)
        g[occ] = np.minimum(np.floor(255.0 * frac), 255.0).astype(np.uint8)
    else:
        g[occ] = 255  # flat cloud: occupied must still read as non-empty
    return BevRaster(g=g, h=h, res=float(res), x_min=x_min,
                     y_min=y_min, z_min=z_min, z_max=z_max)


def enhance(g: np.ndarray) -> np.ndarray:
    """Two-stage high-pass sharpening with clamping after each stage."""
    if g.size == 0:
        raise InvalidParameter("cannot enhance an empty grid")
    work = g.astype(np.int64)
    for kernel in (KERNEL_EDGE, KERNEL_SHARPEN):
        work = ndimage.correlate(work, kernel, mode="nearest")
        np.clip(work, 0, 255, out=work)
    return work.astype(np.uint8)


# ---------------------------------------------------------------------------
# P5 graymap I/O (binary portable graymap; lossless and byte-stable)
# ---------------------------------------------------------------------------


def encode_image(grid: np.ndarray, path) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.dtype != np.uint8:
        raise InvalidParameter("image grid must be 2-D uint8")
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(grid.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def decode_image(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not raw.startswith(b"P5"):
        raise ParseError(f"{path}: not a P5 graymap")
    # Header: magic, width, height, maxval, single whitespace, then payload.
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            pos = raw.find(b"\n", pos)
            if pos < 0:
                raise IoError(f"{path}: truncated header")
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IoError(f"{path}: truncated header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace before payload
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise ParseError(f"{path}: bad header field: {exc}") from exc
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 supported")
    payload = raw[pos : pos + width * height]
    if len(payload) != width * height:
        raise IoError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def save_raster(raster: BevRaster, image_path, meta_path) -> None:
    """Write the intensity image plus the sidecar metadata record."""
    encode_image(raster.g, image_path)
    try:
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump(raster.metadata(), fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {meta_path}: {exc}") from exc
