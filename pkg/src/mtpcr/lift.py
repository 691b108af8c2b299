"""Map matched 2D keypoints back into 3D correspondences.

Planar coordinates come from the sub-pixel keypoint location; heights come
from the raster's exact height grid at the rounded pixel, so no 8-bit
quantization enters the 3D points. A strict mode reproduces the quantized
height path (dequantizing the intensity image) for fidelity testing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bev import BevRaster
from .errors import EmptyPixel, TooFewCorrespondences
from .match2d import MatchSet


@dataclass(frozen=True)
class CorrespondenceSet:
    """Paired 3D points in meters with matcher confidences."""

    p_source: np.ndarray
    p_target: np.ndarray
    confidence: np.ndarray

    def __len__(self) -> int:
        return self.p_source.shape[0]

    def to_dict(self) -> dict:
        return {
            "pairs": [
                {"src": list(map(float, s)), "tgt": list(map(float, t)), "conf": float(c)}
                for s, t, c in zip(self.p_source, self.p_target, self.confidence)
            ]
        }


def _exact_quotient(num: float, den: float) -> float:
    """num/den nudged by ulps so that quotient*den reproduces num exactly.

    Heights were stored as z*res products, so a witness quotient always
    exists within a few ulps of the rounded division.
    """
    q = num / den
    if q * den == num:
        return q
    for k in range(1, 4):
        up, dn = q, q
        for _ in range(k):
            up = np.nextafter(up, np.inf)
            dn = np.nextafter(dn, -np.inf)
        if up * den == num:
            return float(up)
        if dn * den == num:
            return float(dn)
    return q


def _pixel_of(kp, raster: BevRaster) -> tuple[int, int]:
    i = int(round(float(kp[0])))
    j = int(round(float(kp[1])))
    if not (0 <= i < raster.width and 0 <= j < raster.height):
        raise EmptyPixel(f"keypoint ({kp[0]:.2f}, {kp[1]:.2f}) outside raster")
    return i, j


def lift_point(kp, raster: BevRaster, strict_quantized: bool = False) -> np.ndarray:
    """Lift one keypoint to meters: ((u+x_min)/res, (v+y_min)/res, H/res).

    With strict_quantized=True the height is dequantized from the 8-bit
    intensity instead, which carries up to (z_max-z_min)/510 extra error.
    """
    i, j = _pixel_of(kp, raster)
    h = raster.h[j, i]
    if np.isnan(h):
        raise EmptyPixel(f"pixel ({i}, {j}) is unoccupied")
    if strict_quantized:
        g = float(raster.g[j, i])
        h = g * (raster.z_max - raster.z_min) / 255.0 + raster.z_min
        z = h / raster.res
    else:
        z = _exact_quotient(float(h), raster.res)
    x = (float(kp[0]) + raster.x_min) / raster.res
    y = (float(kp[1]) + raster.y_min) / raster.res
    return np.array([x, y, z])


def lift_matches(
    ms: MatchSet,
    raster_a: BevRaster,
    raster_b: BevRaster,
    strict_quantized: bool = False,
) -> CorrespondenceSet:
    """Lift a MatchSet; pairs touching an empty pixel are dropped."""
    if len(ms) == 0:
        raise TooFewCorrespondences("cannot lift an empty match set")
    src = []
    tgt = []
    conf = []
    for a, b, c in zip(ms.uv_a, ms.uv_b, ms.confidence):
        try:
            ps = lift_point(a, raster_a, strict_quantized)
            pt = lift_point(b, raster_b, strict_quantized)
        except EmptyPixel:
            continue
        src.append(ps)
        tgt.append(pt)
        conf.append(c)
    if len(src) < 3:
        raise TooFewCorrespondences(f"only {len(src)} correspondences survive lifting")
    return CorrespondenceSet(
        p_source=np.asarray(src), p_target=np.asarray(tgt), confidence=np.asarray(conf)
    )
