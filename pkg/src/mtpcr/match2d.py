"""2D keypoint detection and matching on BEV images.

The built-in backend is a classical Harris detector with rotation-normalized
patch descriptors: gravity alignment leaves only in-plane rotation between
two BEV images, so each patch is sampled along its dominant gradient
orientation before comparison. A learned matcher can be plugged in as an
external process (see ExternalMatcher).
"""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import bev
from .errors import ExternalMatcherFailure, InvalidParameter

MATCH_SCHEMA = "mtpcr-match/1"

# Harris detector constants.
_HARRIS_K = 0.04
_HARRIS_SIGMA = 1.5
_NMS_RADIUS = 4
_RESPONSE_RATIO = 0.01  # keep responses above this fraction of the local max

# Descriptor constants.
_PATCH = 16
_ORIENT_BINS = 36
_ORIENT_SIGMA = 4.0


@dataclass(frozen=True)
class MatcherConfig:
    backend: str = "builtin"  # "builtin" or a command template with {imgA} {imgB} {out}
    max_keypoints: int = 4096
    ratio_threshold: float = 0.85
    focus_threshold: float = 0.3
    focus_margin: int = 32

    def __post_init__(self):
        if self.max_keypoints < 1:
            raise InvalidParameter("max_keypoints must be >= 1")
        if not 0 < self.ratio_threshold <= 1:
            raise InvalidParameter("ratio_threshold must be in (0, 1]")
        if not 0 < self.focus_threshold <= 1:
            raise InvalidParameter("focus_threshold must be in (0, 1]")
        if self.focus_margin < 0:
            raise InvalidParameter("focus_margin must be >= 0")


@dataclass(frozen=True)
class Keypoints:
    """Detected keypoints: uv is (N, 2) sub-pixel (column, row) coordinates."""

    uv: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray

    def __len__(self) -> int:
        return self.uv.shape[0]

    @classmethod
    def empty(cls) -> "Keypoints":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, _PATCH * _PATCH), np.float32))


@dataclass(frozen=True)
class MatchSet:
    """Paired keypoints between two images; one pair per source keypoint."""

    uv_a: np.ndarray
    uv_b: np.ndarray
    confidence: np.ndarray

    def __len__(self) -> int:
        return self.uv_a.shape[0]

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))

    def to_dict(self) -> dict:
        return {
            "schema": MATCH_SCHEMA,
            "matches": [
                {
                    "u0": float(a[0]), "v0": float(a[1]),
                    "u1": float(b[0]), "v1": float(b[1]),
                    "score": float(c),
                }
                for a, b, c in zip(self.uv_a, self.uv_b, self.confidence)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MatchSet":
        if "matches" not in doc or not isinstance(doc["matches"], list):
            raise ExternalMatcherFailure("match document lacks a 'matches' list")
        if doc.get("schema", MATCH_SCHEMA) != MATCH_SCHEMA:
            raise ExternalMatcherFailure(f"unsupported match schema {doc.get('schema')!r}")
        rows = doc["matches"]
        uv_a = np.zeros((len(rows), 2))
        uv_b = np.zeros((len(rows), 2))
        conf = np.zeros(len(rows))
        try:
            for k, row in enumerate(rows):
                uv_a[k] = (row["u0"], row["v0"])
                uv_b[k] = (row["u1"], row["v1"])
                conf[k] = row.get("score", 1.0)
        except (KeyError, TypeError, ValueError) as exc:
            raise ExternalMatcherFailure(f"malformed match row {k}: {exc}") from exc
        if not (np.isfinite(uv_a).all() and np.isfinite(uv_b).all() and np.isfinite(conf).all()):
            raise ExternalMatcherFailure("match document contains non-finite values")
        return cls(uv_a, uv_b, np.clip(conf, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------


def harris_response(img: np.ndarray) -> np.ndarray:
    f = img.astype(np.float64)
    ix = ndimage.sobel(f, axis=1, mode="nearest") / 8.0
    iy = ndimage.sobel(f, axis=0, mode="nearest") / 8.0
    sxx = ndimage.gaussian_filter(ix * ix, _HARRIS_SIGMA, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, _HARRIS_SIGMA, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, _HARRIS_SIGMA, mode="nearest")
    return sxx * syy - sxy * sxy - _HARRIS_K * (sxx + syy) ** 2


def _subpixel_offset(r: np.ndarray, rows: np.ndarray, cols: np.ndarray, axis: int) -> np.ndarray:
    """Per-axis parabola through the response and its two axis neighbors."""
    if axis == 0:
        lo = r[rows - 1, cols]
        hi = r[rows + 1, cols]
    else:
        lo = r[rows, cols - 1]
        hi = r[rows, cols + 1]
    mid = r[rows, cols]
    denom = lo - 2.0 * mid + hi
    off = np.where(np.abs(denom) > 1e-12, 0.5 * (lo - hi) / np.where(denom == 0, 1, denom), 0.0)
    return np.clip(off, -0.5, 0.5)


def detect_keypoints(image: np.ndarray, cfg: MatcherConfig) -> Keypoints:
    """Harris corners with NMS, sub-pixel refinement, and patch descriptors."""
    img = np.asarray(image)
    if img.size == 0:
        raise InvalidParameter("cannot detect keypoints on an empty image")
    r = harris_response(img)
    r_max = r.max()
    if r_max <= 0:
        return Keypoints.empty()
    size = 2 * _NMS_RADIUS + 1
    local_max = ndimage.maximum_filter(r, size=size, mode="nearest")
    mask = (r == local_max) & (r > _RESPONSE_RATIO * r_max)
    # Exclude the outermost pixel ring: sub-pixel fit needs all 4 neighbors.
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return Keypoints.empty()
    scores = r[rows, cols]
    order = np.lexsort((cols, rows, -scores))[: cfg.max_keypoints]
    rows, cols, scores = rows[order], cols[order], scores[order]

    du = _subpixel_offset(r, rows, cols, axis=1)
    dv = _subpixel_offset(r, rows, cols, axis=0)
    uv = np.stack([cols + du, rows + dv], axis=1)
    uv[:, 0] = np.clip(uv[:, 0], 0.0, img.shape[1] - 1.0)
    uv[:, 1] = np.clip(uv[:, 1], 0.0, img.shape[0] - 1.0)

    desc = _describe(img, uv)
    return Keypoints(uv=uv, scores=scores.astype(np.float64), descriptors=desc)


def _sample(f: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(f, [rows, cols], order=1, mode="nearest")


def _dominant_orientations(ix: np.ndarray, iy: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Peak of the Gaussian-weighted gradient-angle histogram per keypoint."""
    half = _PATCH / 2.0 - 0.5
    lin = np.arange(_PATCH) - half
    gx, gy = np.meshgrid(lin, lin)
    gx = gx.ravel()
    gy = gy.ravel()
    w_spatial = np.exp(-(gx**2 + gy**2) / (2.0 * _ORIENT_SIGMA**2))

    rows = uv[:, 1:2] + gy[None, :]
    cols = uv[:, 0:1] + gx[None, :]
    sx = _sample(ix, rows.ravel(), cols.ravel()).reshape(rows.shape)
    sy = _sample(iy, rows.ravel(), cols.ravel()).reshape(rows.shape)
    mag = np.hypot(sx, sy) * w_spatial[None, :]
    ang = np.arctan2(sy, sx)  # [-pi, pi]
    bins = np.floor((ang + np.pi) / (2.0 * np.pi) * _ORIENT_BINS).astype(np.int64)
    bins = np.clip(bins, 0, _ORIENT_BINS - 1)

    n = uv.shape[0]
    hist = np.zeros((n, _ORIENT_BINS))
    idx = np.repeat(np.arange(n), bins.shape[1])
    np.add.at(hist, (idx, bins.ravel()), mag.ravel())
    # Circular smoothing, two passes of a [1, 2, 1]/4 kernel.
    for _ in range(2):
        hist = 0.25 * (np.roll(hist, 1, axis=1) + 2.0 * hist + np.roll(hist, -1, axis=1))

    peak = np.argmax(hist, axis=1)
    lo = hist[np.arange(n), (peak - 1) % _ORIENT_BINS]
    hi = hist[np.arange(n), (peak + 1) % _ORIENT_BINS]
    mid = hist[np.arange(n), peak]
    denom = lo - 2.0 * mid + hi
    shift = np.where(np.abs(denom) > 1e-12, 0.5 * (lo - hi) / np.where(denom == 0, 1, denom), 0.0)
    shift = np.clip(shift, -0.5, 0.5)
    return (peak + 0.5 + shift) / _ORIENT_BINS * 2.0 * np.pi - np.pi


def _describe(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Rotation-normalized, mean-free, L2-normalized 16x16 intensity patches."""
    if uv.shape[0] == 0:
        return np.zeros((0, _PATCH * _PATCH), np.float32)
    f = img.astype(np.float64)
    ix = ndimage.sobel(f, axis=1, mode="nearest") / 8.0
    iy = ndimage.sobel(f, axis=0, mode="nearest") / 8.0
    theta = _dominant_orientations(ix, iy, uv)

    half = _PATCH / 2.0 - 0.5
    lin = np.arange(_PATCH) - half
    gx, gy = np.meshgrid(lin, lin)
    gx = gx.ravel()[None, :]
    gy = gy.ravel()[None, :]
    cos = np.cos(theta)[:, None]
    sin = np.sin(theta)[:, None]
    cols = uv[:, 0:1] + cos * gx - sin * gy
    rows = uv[:, 1:2] + sin * gx + cos * gy

    patches = _sample(f, rows.ravel(), cols.ravel()).reshape(uv.shape[0], -1)
    patches -= patches.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(patches, axis=1, keepdims=True)
    np.divide(patches, norms, out=patches, where=norms > 1e-12)
    return patches.astype(np.float32)


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


def _mutual_ratio_match(ka: Keypoints, kb: Keypoints, ratio: float) -> MatchSet:
    if len(ka) == 0 or len(kb) == 0:
        return MatchSet.empty()
    sim = ka.descriptors @ kb.descriptors.T
    dist = np.sqrt(np.maximum(0.0, 2.0 - 2.0 * sim.astype(np.float64)))

    best_b = np.argmin(dist, axis=1)
    best_a = np.argmin(dist, axis=0)
    ia = np.arange(len(ka))
    mutual = best_a[best_b] == ia

    def ratio_ok(d: np.ndarray, axis: int, best_idx: np.ndarray) -> np.ndarray:
        if d.shape[axis] < 2:
            return np.ones(best_idx.shape[0], dtype=bool)
        part = np.partition(d, 1, axis=axis)
        d1 = np.take(part, 0, axis=axis)
        d2 = np.take(part, 1, axis=axis)
        return d1 <= ratio * d2

    ok_a = ratio_ok(dist, 1, best_b)
    ok_b = ratio_ok(dist, 0, best_a)
    keep = mutual & ok_a & ok_b[best_b]
    idx_a = ia[keep]
    idx_b = best_b[keep]
    conf = np.clip((1.0 + sim[idx_a, idx_b].astype(np.float64)) / 2.0, 0.0, 1.0)
    return MatchSet(uv_a=ka.uv[idx_a], uv_b=kb.uv[idx_b], confidence=conf)


class ExternalMatcher:
    """Runs a matcher process: command template with {imgA} {imgB} {out}.

    The process must write a JSON document with a "matches" list of
    {u0, v0, u1, v1, score} rows (schema "mtpcr-match/1").
    """

    def __init__(self, template: str):
        if not all(ph in template for ph in ("{imgA}", "{imgB}", "{out}")):
            raise InvalidParameter("matcher template needs {imgA} {imgB} {out}")
        self.template = template

    def match(self, img_a: np.ndarray, img_b: np.ndarray, workdir=None) -> MatchSet:
        with tempfile.TemporaryDirectory(dir=workdir, prefix="mtpcr-match-") as tmp:
            pa = Path(tmp) / "a.pgm"
            pb = Path(tmp) / "b.pgm"
            out = Path(tmp) / "matches.json"
            bev.encode_image(np.ascontiguousarray(img_a, dtype=np.uint8), pa)
            bev.encode_image(np.ascontiguousarray(img_b, dtype=np.uint8), pb)
            argv = [
                a.replace("{imgA}", str(pa)).replace("{imgB}", str(pb)).replace("{out}", str(out))
                for a in shlex.split(self.template)
            ]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True)
            except OSError as exc:
                raise ExternalMatcherFailure(f"cannot launch matcher: {exc}") from exc
            if proc.returncode != 0:
                raise ExternalMatcherFailure(
                    f"matcher exited {proc.returncode}: {proc.stderr.strip()[:500]}"
                )
            try:
                doc = json.loads(out.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ExternalMatcherFailure(f"matcher output unreadable: {exc}") from exc
            return MatchSet.from_dict(doc)


def match(img_a: np.ndarray, img_b: np.ndarray, cfg: MatcherConfig) -> MatchSet:
    """Detect and match keypoints between two images."""
    if cfg.backend == "builtin":
        ka = detect_keypoints(img_a, cfg)
        kb = detect_keypoints(img_b, cfg)
        return _mutual_ratio_match(ka, kb, cfg.ratio_threshold)
    return ExternalMatcher(cfg.backend).match(img_a, img_b)


def estimate_overlap_fraction(ms: MatchSet, shape_a, shape_b) -> tuple[float, float]:
    """Bounding-box area of matched keypoints over image area, per image.

    Shapes are numpy-style (height, width). Uses the pixel-count convention
    (extent + 1) so corner-to-corner matches report exactly 1.0.
    """
    if len(ms) == 0:
        return 0.0, 0.0

    def frac(uv: np.ndarray, shape) -> float:
        h, w = shape[0], shape[1]
        span_u = uv[:, 0].max() - uv[:, 0].min() + 1.0
        span_v = uv[:, 1].max() - uv[:, 1].min() + 1.0
        return float(min(1.0, (span_u * span_v) / (w * h)))

    return frac(ms.uv_a, shape_a), frac(ms.uv_b, shape_b)


def _crop_box(uv: np.ndarray, shape, margin: int) -> tuple[int, int, int, int]:
    u0 = max(0, int(np.floor(uv[:, 0].min())) - margin)
    v0 = max(0, int(np.floor(uv[:, 1].min())) - margin)
    u1 = min(shape[1], int(np.ceil(uv[:, 0].max())) + margin + 1)
    v1 = min(shape[0], int(np.ceil(uv[:, 1].max())) + margin + 1)
    return u0, v0, u1, v1


def _pair_keys(uv_a: np.ndarray, uv_b: np.ndarray) -> list[tuple]:
    q = np.hstack([np.round(uv_a * 2.0), np.round(uv_b * 2.0)]).astype(np.int64)
    return [tuple(row) for row in q]


def focus_rematch(img_a: np.ndarray, img_b: np.ndarray, ms: MatchSet, cfg: MatcherConfig) -> MatchSet:
    """Re-run detection and matching inside the matched regions.

    Crops around the matched-keypoint bounding boxes (expanded by
    focus_margin) concentrate the detector on the overlap, typically adding
    matches. Original pairs are always kept; re-run pairs are added unless
    they collide with an existing pair endpoint at 0.5 px resolution.
    """
    if len(ms) == 0:
        raise InvalidParameter("focus_rematch requires a non-empty MatchSet")
    box_a = _crop_box(ms.uv_a, np.asarray(img_a).shape, cfg.focus_margin)
    box_b = _crop_box(ms.uv_b, np.asarray(img_b).shape, cfg.focus_margin)
    if box_a[2] - box_a[0] < _PATCH or box_a[3] - box_a[1] < _PATCH:
        return ms
    if box_b[2] - box_b[0] < _PATCH or box_b[3] - box_b[1] < _PATCH:
        return ms

    crop_a = np.asarray(img_a)[box_a[1] : box_a[3], box_a[0] : box_a[2]]
    crop_b = np.asarray(img_b)[box_b[1] : box_b[3], box_b[0] : box_b[2]]
    extra = match(crop_a, crop_b, cfg)
    if len(extra) == 0:
        return ms
    uv_a = extra.uv_a + np.array([box_a[0], box_a[1]], dtype=np.float64)
    uv_b = extra.uv_b + np.array([box_b[0], box_b[1]], dtype=np.float64)

    seen_a = set()
    seen_b = set()
    for key in _pair_keys(ms.uv_a, ms.uv_b):
        seen_a.add(key[:2])
        seen_b.add(key[2:])
    keep = []
    order = np.argsort(-extra.confidence, kind="stable")
    for k in order:
        ka = (int(round(uv_a[k, 0] * 2.0)), int(round(uv_a[k, 1] * 2.0)))
        kb = (int(round(uv_b[k, 0] * 2.0)), int(round(uv_b[k, 1] * 2.0)))
        if ka in seen_a or kb in seen_b:
            continue
        seen_a.add(ka)
        seen_b.add(kb)
        keep.append(k)
    if not keep:
        return ms
    keep = np.array(sorted(keep))
    return MatchSet(
        uv_a=np.vstack([ms.uv_a, uv_a[keep]]),
        uv_b=np.vstack([ms.uv_b, uv_b[keep]]),
        confidence=np.concatenate([ms.confidence, extra.confidence[keep]]),
    )


def match_pipeline(img_a: np.ndarray, img_b: np.ndarray, cfg: MatcherConfig) -> MatchSet:
    """First-pass matching, with a focused second pass below the overlap gate."""
    ms = match(img_a, img_b, cfg)
    if len(ms) == 0:
        return ms
    frac_a, frac_b = estimate_overlap_fraction(ms, np.asarray(img_a).shape, np.asarray(img_b).shape)
    if min(frac_a, frac_b) >= cfg.focus_threshold:
        return ms
    return focus_rematch(img_a, img_b, ms, cfg)
