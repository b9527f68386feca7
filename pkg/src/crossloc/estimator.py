"""End-to-end pose estimation from an aerial grid and a ground view.

Pipeline: score all aerial/ground cell pairs, mask ground cells with
unusable depth, soft-assign with a dustbin dual softmax, take the top-N
probabilities as weighted correspondences, lift the ground cells to BEV
points, convert aerial cells to metric coordinates, and solve for the
aligning similarity (scale, heading, translation).  An optional RANSAC
wrapper makes the solve robust to outlier correspondences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import AllHypothesesDegenerate, DegenerateConfiguration, InsufficientMatches
from .geometry import (
    SimilarityTransform2D,
    apply_transform,
    solve_orthogonal,
    solve_similarity,
)
from .lifting import (
    DepthMap,
    LiftConfig,
    RayModel,
    aerial_cells_to_metric,
    depth_valid_mask,
    lift_ground_cells,
    topmost_selection,
)
from .matching import (
    FeatureGrid,
    mask_ground_columns,
    match_probabilities,
    sample_correspondences,
    score_matrix,
)

__all__ = [
    "RansacConfig",
    "PipelineConfig",
    "PoseEstimate",
    "CorrespondenceSet",
    "build_correspondences",
    "estimate_pose",
    "ransac_estimate",
    "count_inliers",
    "overlay_layout",
]


@dataclass(frozen=True)
class RansacConfig:
    """Robust-solve settings: hypotheses from minimal samples, consensus by
    an inlier distance threshold, optional weighted refit on the winners."""

    iterations: int = 1000
    inlier_threshold: float = 1.0  # meters
    min_sample: int = 3
    refit_on_inliers: bool = True
    seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    """Full estimator settings."""

    tau: float = 0.1
    num_correspondences: int = 1024
    dustbin_z: float = 0.0
    lift: LiftConfig = field(default_factory=LiftConfig)
    ransac: Optional[RansacConfig] = None
    scale_aware: bool = True  # False pins scale to 1 (ablation)


@dataclass(frozen=True)
class PoseEstimate:
    """Solver output plus the evidence that produced it."""

    transform: SimilarityTransform2D
    correspondences: Optional[list] = None  # Correspondence list actually used
    inlier_mask: Optional[np.ndarray] = None  # only when RANSAC ran
    inlier_count: Optional[int] = None


@dataclass(frozen=True)
class CorrespondenceSet:
    """Weighted planar correspondence geometry extracted from the grids."""

    ground_planar: np.ndarray  # (N, 2) BEV points in the camera frame
    aerial_metric: np.ndarray  # (N, 2) metric points in the aerial frame
    weights: np.ndarray  # (N,)
    ground_points3: np.ndarray  # (N, 3) lifted points before projection
    matches: list  # matching.Correspondence entries, parallel to the rows


def build_correspondences(
    aerial: FeatureGrid,
    ground: FeatureGrid,
    depth: DepthMap,
    rays: RayModel,
    cfg: PipelineConfig,
) -> CorrespondenceSet:
    """Run matching and lifting, returning solver-ready weighted pairs.

    Ground cells failing the depth validity test are masked before the
    softmax, zero-weight matches are discarded, and in topmost mode only
    the highest lifted point per aerial-cell-sized planar bucket survives.
    Raises InsufficientMatches when fewer than two weighted pairs remain.
    """
    m = score_matrix(aerial, ground, cfg.tau)
    valid = depth_valid_mask(depth, cfg.lift).ravel()
    probs = match_probabilities(mask_ground_columns(m, valid), z=cfg.dustbin_z)
    matches = sample_correspondences(probs, cfg.num_correspondences)

    kept = []
    for c in matches:
        if c.weight <= 0.0:
            continue
        if not valid[c.ground[0] * ground.cols + c.ground[1]]:
            continue
        kept.append(c)
    if len(kept) < 2:
        raise InsufficientMatches(
            f"only {len(kept)} positively weighted correspondences after masking"
        )

    ground_cells = np.array([c.ground for c in kept])
    aerial_cells = np.array([c.aerial for c in kept])
    weights = np.array([c.weight for c in kept])
    points3 = lift_ground_cells(ground_cells, depth, rays, cfg.lift.initial_scale)
    aerial_xy = aerial_cells_to_metric(
        aerial_cells, aerial.meta, (aerial.rows, aerial.cols)
    )

    if cfg.lift.projection_mode == "topmost":
        keep = topmost_selection(points3, aerial.meta.meters_per_cell)
        if len(keep) < 2:
            raise InsufficientMatches(
                f"only {len(keep)} correspondences after topmost selection"
            )
        points3 = points3[keep]
        aerial_xy = aerial_xy[keep]
        weights = weights[keep]
        kept = [kept[i] for i in keep]

    return CorrespondenceSet(
        ground_planar=points3[:, :2].copy(),
        aerial_metric=aerial_xy,
        weights=weights,
        ground_points3=points3,
        matches=kept,
    )


def estimate_pose(
    aerial: FeatureGrid,
    ground: FeatureGrid,
    depth: DepthMap,
    rays: RayModel,
    cfg: PipelineConfig = PipelineConfig(),
) -> PoseEstimate:
    """Full pipeline: grids in, planar pose (and depth scale) out."""
    corr = build_correspondences(aerial, ground, depth, rays, cfg)
    if cfg.ransac is not None:
        est = ransac_estimate(
            corr.ground_planar, corr.aerial_metric, corr.weights, cfg.ransac,
            scale_aware=cfg.scale_aware,
        )
        return PoseEstimate(
            transform=est.transform,
            correspondences=corr.matches,
            inlier_mask=est.inlier_mask,
            inlier_count=est.inlier_count,
        )
    solver = solve_similarity if cfg.scale_aware else solve_orthogonal
    transform = solver(corr.ground_planar, corr.aerial_metric, corr.weights)
    return PoseEstimate(transform=transform, correspondences=corr.matches)


def count_inliers(
    transform: SimilarityTransform2D,
    ground_planar: np.ndarray,
    aerial_metric: np.ndarray,
    threshold: float,
):
    """Correspondences whose transformed ground point lands within
    ``threshold`` meters of its aerial point.  Returns (count, flags)."""
    residual = apply_transform(transform, ground_planar) - aerial_metric
    flags = np.linalg.norm(residual, axis=1) <= threshold
    return int(flags.sum()), flags


def ransac_estimate(
    ground_planar: np.ndarray,
    aerial_metric: np.ndarray,
    weights: np.ndarray,
    cfg: RansacConfig = RansacConfig(),
    scale_aware: bool = True,
) -> PoseEstimate:
    """Classic hypothesize-and-verify around the closed-form solver.

    Each iteration solves a minimal uniform-weight sample (3 pairs by
    default); consensus is counted over all pairs and the earliest best
    hypothesis wins ties.  Degenerate samples are redrawn without consuming
    iterations (total draws are capped at ten times the iteration budget).
    With ``refit_on_inliers`` the final transform is a weighted solve over
    the winning consensus set; the reported inlier flags are the winning
    hypothesis's consensus.  Deterministic for a fixed seed.
    """
    ground_planar = np.asarray(ground_planar, dtype=float)
    aerial_metric = np.asarray(aerial_metric, dtype=float)
    weights = np.asarray(weights, dtype=float)
    n = len(ground_planar)
    solver = solve_similarity if scale_aware else solve_orthogonal
    if n < cfg.min_sample:
        raise InsufficientMatches(
            f"{n} correspondences cannot seed {cfg.min_sample}-point hypotheses"
        )
    rng = np.random.default_rng(cfg.seed)
    uniform = np.ones(cfg.min_sample)

    best_count = -1
    best_transform = None
    best_flags = None
    completed = 0
    attempts = 0
    max_attempts = cfg.iterations * 10
    while completed < cfg.iterations and attempts < max_attempts:
        attempts += 1
        sample = rng.choice(n, size=cfg.min_sample, replace=False)
        try:
            hyp = solver(ground_planar[sample], aerial_metric[sample], uniform)
        except DegenerateConfiguration:
            continue  # redraw; not counted against the iteration budget
        count, flags = count_inliers(
            hyp, ground_planar, aerial_metric, cfg.inlier_threshold
        )
        if count > best_count:
            best_count, best_transform, best_flags = count, hyp, flags
        completed += 1
    if best_transform is None:
        raise AllHypothesesDegenerate(
            f"no valid hypothesis in {attempts} sample draws"
        )

    transform = best_transform
    if cfg.refit_on_inliers and best_count >= 2:
        try:
            transform = solver(
                ground_planar[best_flags],
                aerial_metric[best_flags],
                weights[best_flags],
            )
        except DegenerateConfiguration:
            transform = best_transform  # keep the raw hypothesis
    return PoseEstimate(
        transform=transform,
        inlier_mask=best_flags,
        inlier_count=best_count,
    )


def overlay_layout(points3: np.ndarray, transform: SimilarityTransform2D) -> np.ndarray:
    """Project lifted scene points into the aerial frame for inspection."""
    points3 = np.asarray(points3, dtype=float)
    return apply_transform(transform, points3[:, :2])
