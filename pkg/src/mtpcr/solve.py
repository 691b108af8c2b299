"""Rigid transform estimation: weighted SVD, iterative rejection, ICP, and
the end-to-end registration pipeline.

register() composes the whole chain: gravity-align both clouds, scale by the
density-adaptive resolution, rasterize, enhance, match in 2D, lift matches
to 3D, solve robustly, refine with ICP, then fold the per-cloud alignment
rotations back so the result maps original source frame to original target
frame.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import bev, ground, lift, match2d
from .cloud import PointCloud, RigidTransform, voxel_downsample
from .errors import (
    DegenerateConfiguration,
    ConvergenceFailed,
    MtpcrError,
    NoCorrespondencesInRange,
    StageError,
    TooFewCorrespondences,
)
from .lift import CorrespondenceSet

# Images are matched at a common meters-per-pixel when the two resolutions
# differ by more than this factor; patch descriptors are not scale invariant.
_SCALE_NORM_TRIGGER = 1.25


@dataclass(frozen=True)
class SolveConfig:
    max_reject_iters: int = 10
    residual_multiplier: float = 3.0
    min_abs_residual: float = 1.0
    icp_max_iters: int = 50
    icp_max_corr_dist: float = 2.0
    icp_convergence_eps_m: float = 1e-3
    icp_convergence_eps_deg: float = 1e-3
    icp_voxel: float = 0.5  # <= 0 disables target downsampling

    def __post_init__(self):
        for name in ("max_reject_iters", "residual_multiplier", "min_abs_residual",
                     "icp_max_iters", "icp_max_corr_dist", "icp_convergence_eps_m",
                     "icp_convergence_eps_deg"):
            if getattr(self, name) <= 0:
                raise MtpcrError(f"{name} must be positive")


@dataclass
class SolveDiagnostics:
    inlier_counts: list[int] = field(default_factory=list)
    final_rms: float = 0.0
    icp_iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "inlier_counts": self.inlier_counts,
            "final_rms": self.final_rms,
            "icp_iterations": self.icp_iterations,
        }


def kabsch_arrays(src: np.ndarray, tgt: np.ndarray, weights: np.ndarray | None = None) -> RigidTransform:
    """Least-squares rigid fit src -> tgt for paired points."""
    if src.shape[0] < 3:
        raise TooFewCorrespondences(f"need >= 3 pairs, got {src.shape[0]}")
    if weights is None:
        w = np.full(src.shape[0], 1.0 / src.shape[0])
    else:
        total = weights.sum()
        w = weights / total if total > 0 else np.full(src.shape[0], 1.0 / src.shape[0])
    c_src = w @ src
    c_tgt = w @ tgt
    cov = (src - c_src).T @ ((tgt - c_tgt) * w[:, None])
    u, s, vt = np.linalg.svd(cov)
    if s[0] <= 0 or s[1] < 1e-9 * s[0]:
        raise DegenerateConfiguration(
            f"cross-covariance rank < 2 (singular values {s})"
        )
    d = np.sign(np.linalg.det(vt.T @ u.T))
    R = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(R, c_tgt - R @ c_src)


def kabsch(cs: CorrespondenceSet) -> RigidTransform:
    """Confidence-weighted SVD alignment of a correspondence set."""
    return kabsch_arrays(cs.p_source, cs.p_target, cs.confidence)


def robust_estimate(cs: CorrespondenceSet, cfg: SolveConfig) -> tuple[RigidTransform, SolveDiagnostics]:
    """Iterated SVD with median-scaled residual trimming.

    Pairs whose residual exceeds max(min_abs_residual,
    residual_multiplier * median) are dropped and the fit repeated until the
    inlier set is stable. Dropped pairs are never re-admitted.
    """
    active = np.arange(len(cs))
    T = kabsch(cs)
    diag = SolveDiagnostics(inlier_counts=[len(cs)])
    for _ in range(cfg.max_reject_iters):
        res = np.linalg.norm(T.apply(cs.p_source[active]) - cs.p_target[active], axis=1)
        thr = max(cfg.min_abs_residual, cfg.residual_multiplier * float(np.median(res)))
        keep = res <= thr
        if keep.all():
            break
        active = active[keep]
        if active.size < 3:
            raise ConvergenceFailed(f"{active.size} inliers remain, need >= 3")
        T = kabsch_arrays(cs.p_source[active], cs.p_target[active], cs.confidence[active])
        diag.inlier_counts.append(int(active.size))
    res = np.linalg.norm(T.apply(cs.p_source[active]) - cs.p_target[active], axis=1)
    diag.final_rms = float(np.sqrt(np.mean(res**2)))
    return T, diag


def _rotation_angle_deg(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def icp_refine(
    source: PointCloud,
    target: PointCloud,
    T0: RigidTransform,
    cfg: SolveConfig,
) -> tuple[RigidTransform, SolveDiagnostics]:
    """Point-to-point ICP from T0; never returns a worse mean residual.

    Correspondence = nearest target point within icp_max_corr_dist. The
    target is voxel-downsampled to bound cost on dense clouds.
    """
    source.require_nonempty("icp_refine")
    target.require_nonempty("icp_refine")
    tgt = voxel_downsample(target, cfg.icp_voxel) if cfg.icp_voxel > 0 else target
    tree = cKDTree(tgt.points)
    src_pts = source.points

    def correspondences(T: RigidTransform):
        moved = T.apply(src_pts)
        dists, idx = tree.query(moved, distance_upper_bound=cfg.icp_max_corr_dist, workers=-1)
        matched = np.isfinite(dists)
        return matched, idx, dists

    matched, idx, dists = correspondences(T0)
    if not matched.any():
        raise NoCorrespondencesInRange(
            f"no pair within {cfg.icp_max_corr_dist} m at the initial transform"
        )
    best_T = T0
    best_mean = float(dists[matched].mean())
    best_rms = float(np.sqrt(np.mean(dists[matched] ** 2)))
    diag = SolveDiagnostics()

    T = T0
    for it in range(1, cfg.icp_max_iters + 1):
        pairs_src = src_pts[matched]
        pairs_tgt = tgt.points[idx[matched]]
        try:
            T_new = kabsch_arrays(pairs_src, pairs_tgt)
        except (TooFewCorrespondences, DegenerateConfiguration):
            break
        diag.icp_iterations = it
        delta_rot = _rotation_angle_deg(T_new.R @ T.R.T)
        delta_t = float(np.linalg.norm(T_new.t - T.t))
        T = T_new

        matched, idx, dists = correspondences(T)
        if not matched.any():
            break
        mean = float(dists[matched].mean())
        if mean < best_mean:
            best_T = T
            best_mean = mean
            best_rms = float(np.sqrt(np.mean(dists[matched] ** 2)))
        if delta_rot < cfg.icp_convergence_eps_deg and delta_t < cfg.icp_convergence_eps_m:
            break
    diag.final_rms = best_rms
    return best_T, diag


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    gamma: float = 1.0
    ground: ground.RansacConfig = field(default_factory=ground.RansacConfig)
    matcher: match2d.MatcherConfig = field(default_factory=match2d.MatcherConfig)
    solver: SolveConfig = field(default_factory=SolveConfig)
    res_scaling: bool = True
    enhance: bool = True
    focus: bool = True
    scale_normalize: bool = True
    strict_quantized_lift: bool = False


@dataclass
class RegistrationReport:
    """Transform estimate plus per-stage diagnostics and optional metrics."""

    transform: RigidTransform
    stages: dict
    metrics: dict | None = None
    timings_s: dict | None = None

    def to_dict(self, include_timings: bool = False) -> dict:
        doc = {
            "schema": "mtpcr-report/1",
            "transform": self.transform.to_dict(),
            "stages": self.stages,
        }
        if self.metrics is not None:
            doc["metrics"] = self.metrics
        if include_timings and self.timings_s is not None:
            doc["timings_s"] = self.timings_s
        return doc


def _resample(img: np.ndarray, factor: float) -> np.ndarray:
    """Shrink an image by `factor` < 1 with bilinear sampling at k/factor."""
    h, w = img.shape
    out_h = int(np.floor((h - 1) * factor)) + 1
    out_w = int(np.floor((w - 1) * factor)) + 1
    rows = np.arange(out_h) / factor
    cols = np.arange(out_w) / factor
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    out = ndimage.map_coordinates(img.astype(np.float64), [grid_r, grid_c], order=1, mode="nearest")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _prepare_side(cloud: PointCloud, cfg: PipelineConfig, stage: dict):
    plane, inliers = ground.fit_ground_plane(cloud, cfg.ground)
    aligned, T_align = ground.align_to_xoy(cloud, plane)
    res = bev.compute_resolution(aligned, cfg.gamma) if cfg.res_scaling else 1.0
    raster = bev.rasterize(bev.scale_cloud(aligned, res), res)
    img = bev.enhance(raster.g) if cfg.enhance else raster.g
    stage.update(
        ground_inliers=int(inliers),
        res=float(res),
        image_size=[int(raster.width), int(raster.height)],
    )
    return aligned, T_align, raster, img


def register(
    source: PointCloud,
    target: PointCloud,
    cfg: PipelineConfig | None = None,
) -> tuple[RigidTransform, RegistrationReport]:
    """Register source onto target; returns the original-frame transform."""
    cfg = cfg or PipelineConfig()
    stages: dict = {"source": {}, "target": {}}
    timings: dict = {}

    def run(stage_name: str, fn, *args):
        t0 = time.perf_counter()
        try:
            out = fn(*args)
        except MtpcrError as exc:
            raise StageError(stage_name, exc) from exc
        timings[stage_name] = time.perf_counter() - t0
        return out

    src_aligned, T_src, raster_a, img_a = run(
        "ground/bev source", _prepare_side, source, cfg, stages["source"]
    )
    tgt_aligned, T_tgt, raster_b, img_b = run(
        "ground/bev target", _prepare_side, target, cfg, stages["target"]
    )

    def do_match():
        scale_a = scale_b = 1.0
        ia, ib = img_a, img_b
        ratio = raster_a.res / raster_b.res
        if cfg.scale_normalize and max(ratio, 1.0 / ratio) > _SCALE_NORM_TRIGGER:
            if ratio > 1.0:  # source image is finer: bring it down to target scale
                scale_a = 1.0 / ratio
                ia = _resample(img_a, scale_a)
            else:
                scale_b = ratio
                ib = _resample(img_b, scale_b)
        matcher = match2d.match_pipeline if cfg.focus else match2d.match
        ms = matcher(ia, ib, cfg.matcher)
        frac = match2d.estimate_overlap_fraction(ms, ia.shape, ib.shape)
        if scale_a != 1.0 or scale_b != 1.0:
            ms = match2d.MatchSet(
                uv_a=ms.uv_a / scale_a, uv_b=ms.uv_b / scale_b, confidence=ms.confidence
            )
        return ms, frac

    ms, frac = run("match", do_match)
    stages["match"] = {
        "pairs": len(ms),
        "overlap_fraction": [float(frac[0]), float(frac[1])],
    }
    if len(ms) == 0:
        raise StageError("match", TooFewCorrespondences("no 2D matches found"))

    cs = run("lift", lift.lift_matches, ms, raster_a, raster_b, cfg.strict_quantized_lift)
    stages["lift"] = {"pairs": len(cs)}

    def do_solve():
        T_svd, svd_diag = robust_estimate(cs, cfg.solver)
        return T_svd, svd_diag

    T_svd, svd_diag = run("svd", do_solve)
    stages["svd"] = svd_diag.to_dict()

    T_icp, icp_diag = run("icp", icp_refine, src_aligned, tgt_aligned, T_svd, cfg.solver)
    stages["icp"] = icp_diag.to_dict()

    # Fold gravity alignments back into the original frames.
    T_final = T_tgt.inverse().compose(T_icp).compose(T_src)
    report = RegistrationReport(transform=T_final, stages=stages, timings_s=timings)
    return T_final, report
