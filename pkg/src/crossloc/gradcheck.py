"""Analytic gradients of the matching-to-alignment loss, with an FD oracle.

The pipeline from scores to pose is differentiable once the discrete top-N
selection is frozen: gradients flow through the selected entries' soft
weights, not through which entries were selected (the usual straight-through
treatment of hard selection).  This module builds that frozen view of a
scene, evaluates the training loss through the *production* code paths
(SVD-based alignment solver, loss module), and computes its gradient
analytically through an independent closed-form route:

* dual softmax with dustbin -- standard softmax vector-Jacobian products on
  the augmented matrix;
* weighted scale-aware alignment -- the optimal angle in 2-D has the closed
  form theta* = atan2(C01 - C10, C00 + C11) over the weighted covariance C,
  and the optimal scale is hypot of the same two invariants over the
  weighted ground spread, so no SVD differentiation is needed;
* contrastive losses -- textbook softmax/cross-entropy gradients on the raw
  score entries.

Because the forward pass uses the SVD solver while the backward pass uses
the angle parameterization, a central finite-difference check of this module
is a genuine two-route consistency test, not a tautology.

The FD oracle evaluates the loss in extended precision (``np.longdouble``):
float64 rounding of an O(1) loss leaves ~1e-10 of noise in a central
difference at step 1e-5, which would swamp honest gradient entries near the
relative-error floor.  The extended-precision path is a dtype-parameterized
twin of the forward computation; its float64 instantiation is tested to
match the production forward to machine precision.

Leaf parameterizations:

* ``"score"``      -- every raw score-matrix entry plus the dustbin score;
* ``"features"``   -- both grids' raw (pre-normalization) feature vectors
                      plus the dustbin score;
* ``"projection"`` -- a shared linear projection applied to both grids'
                      features before normalization, plus the dustbin score
                      (the trainable parameterization used by the trainer).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateConfiguration, NonDifferentiablePoint, OutOfRange
from .estimator import PipelineConfig, build_correspondences
from .geometry import rotation_matrix, solve_similarity
from .lifting import aerial_coverage_mask, depth_valid_mask, metric_to_aerial_cell
from .losses import (
    NegativeRule,
    gt_aerial_targets,
    gt_ground_targets,
    info_nce_g2s,
    info_nce_s2g,
    total_loss,
    vce_loss,
    virtual_point_grid,
)
from .matching import (
    MASK_SCORE,
    FeatureGrid,
    ScoreMatrix,
    augment_dustbin,
    col_softmax,
    drop_dustbin,
    dual_softmax,
    mask_ground_columns,
    normalize_features,
    row_softmax,
    score_matrix,
)

__all__ = [
    "GradContext",
    "GradReport",
    "build_context",
    "forward",
    "forward_value",
    "backward",
    "finite_difference",
    "check",
    "compare_gradients",
    "pose_weight_gradients",
]

REL_FLOOR = 1.0e-8


@dataclass(frozen=True)
class GradContext:
    """Everything held fixed while differentiating: the frozen selection,
    the lifted geometry, the supervision targets, and the leaf layout."""

    mode: str  # "score" | "features" | "projection"
    tau: float
    valid: np.ndarray  # (n_ground,) bool, usable ground cells
    aerial_flat: np.ndarray  # (N,) selected aerial cells, flat indices
    ground_flat: np.ndarray  # (N,) selected ground cells, flat indices
    ground_planar: np.ndarray  # (N, 2) lifted BEV points (fixed)
    aerial_metric: np.ndarray  # (N, 2) matched aerial points (fixed)
    truth: object  # SimilarityTransform2D supervision pose
    target_scale: float  # scale used for contrastive targets (frozen)
    virtual_points: np.ndarray  # (V, 2) lattice for the pose loss
    beta: float
    rule: NegativeRule
    aerial_meta: object
    aerial_shape: tuple
    ground_shape: tuple
    aerial_raw: np.ndarray  # (n_aerial, dim) unnormalized features
    ground_raw: np.ndarray  # (n_ground, dim) unnormalized features
    params0: np.ndarray  # flat leaf vector matching the scene as rendered
    # frozen contrastive structure: positives and negative sets are fixed
    # functions of the (fixed) geometry, captured once at construction
    g2s_terms: tuple = ()  # ((ground column, positive aerial flat cell), ...)
    s2g_terms: tuple = ()  # ((aerial row, candidate columns, positive index), ...)

    @property
    def n_aerial(self) -> int:
        return self.aerial_raw.shape[0]

    @property
    def n_ground(self) -> int:
        return self.ground_raw.shape[0]

    @property
    def dim(self) -> int:
        return self.aerial_raw.shape[1]


@dataclass(frozen=True)
class GradReport:
    """Outcome of one analytic-versus-finite-difference comparison."""

    mode: str
    n_params: int
    analytic: Optional[np.ndarray]
    fd: Optional[np.ndarray]
    max_abs_err: float
    max_rel_err: float
    passed: bool
    error: Optional[str] = None  # failure surfaced instead of gradients

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_params": int(self.n_params),
            "max_abs_err": float(self.max_abs_err),
            "max_rel_err": float(self.max_rel_err),
            "passed": bool(self.passed),
            "error": self.error,
        }


# ---------------------------------------------------------------------------
# context construction


def build_context(
    scene,
    cfg: PipelineConfig = None,
    mode: str = "score",
    beta: float = 0.1,
    virtual_side: int = 8,
    virtual_extent: float = 5.0,
    rule: NegativeRule = NegativeRule(),
    projection: Optional[tuple] = None,
    target_scale: Optional[float] = None,
) -> GradContext:
    """Freeze one scene's pipeline state into a differentiable view.

    Runs the production matching/lifting once, records the selected pairs
    and their fixed geometry, and captures the contrastive-target scale
    (the true scale when depths are metric, otherwise the solver's estimate
    at the frozen weights -- the stop-gradient treatment the trainer uses;
    pass ``target_scale`` to override either).

    ``projection`` supplies (matrix, dustbin z) applied to both feature
    grids before matching, so the frozen selection reflects the current
    trainable weights; it also becomes ``params0`` in projection mode.
    """
    if mode not in ("score", "features", "projection"):
        raise OutOfRange(f"unknown leaf mode {mode!r}")
    if cfg is None:
        cfg = PipelineConfig(num_correspondences=8)
    aerial_view, ground_view = scene.aerial, scene.ground
    if projection is not None:
        proj_mat, proj_z = projection
        proj_mat = np.asarray(proj_mat, dtype=float)
        aerial_view = FeatureGrid(
            scene.aerial.data @ proj_mat.T, "aerial", scene.aerial.meta
        )
        ground_view = FeatureGrid(
            scene.ground.data @ proj_mat.T, "ground", scene.ground.meta
        )
        cfg = dataclasses.replace(cfg, dustbin_z=float(proj_z))
    corr = build_correspondences(aerial_view, ground_view, scene.depth, scene.rays, cfg)

    a_cols = scene.aerial.cols
    g_cols = scene.ground.cols
    aerial_flat = np.array([c.aerial[0] * a_cols + c.aerial[1] for c in corr.matches])
    ground_flat = np.array([c.ground[0] * g_cols + c.ground[1] for c in corr.matches])
    valid = depth_valid_mask(scene.depth, cfg.lift).ravel()

    if target_scale is None:
        if scene.depth.kind == "metric":
            target_scale = 1.0 / cfg.lift.initial_scale
        else:
            est = solve_similarity(corr.ground_planar, corr.aerial_metric, corr.weights)
            target_scale = est.scale

    aerial_shape = (scene.aerial.rows, scene.aerial.cols)
    q_hat = gt_aerial_targets(corr.ground_planar, scene.truth, target_scale)
    inside = aerial_coverage_mask(q_hat, scene.aerial.meta, aerial_shape)
    g2s_terms = []
    for n in np.flatnonzero(inside):
        r, c = metric_to_aerial_cell(q_hat[n], scene.aerial.meta, aerial_shape)
        g2s_terms.append((int(ground_flat[n]), r * aerial_shape[1] + c))
    p_hat = gt_ground_targets(corr.aerial_metric, scene.truth, target_scale)
    s2g_terms = []
    for n in range(len(aerial_flat)):
        dist = np.linalg.norm(corr.ground_planar - p_hat[n], axis=1)
        pos = int(np.argmin(dist))
        keep = dist > rule.radius
        keep[pos] = True
        s2g_terms.append(
            (int(aerial_flat[n]), ground_flat[keep].copy(), int(keep[:pos].sum()))
        )

    aerial_raw = scene.aerial.flat().astype(float).copy()
    ground_raw = scene.ground.flat().astype(float).copy()
    if mode == "score":
        scores0 = score_matrix(aerial_view, ground_view, cfg.tau).scores
        params0 = np.append(scores0.ravel(), cfg.dustbin_z)
    elif mode == "features":
        params0 = np.concatenate(
            [aerial_raw.ravel(), ground_raw.ravel(), [cfg.dustbin_z]]
        )
    else:  # projection
        dim = aerial_raw.shape[1]
        base = np.eye(dim) if projection is None else proj_mat
        params0 = np.append(base.ravel(), cfg.dustbin_z)

    return GradContext(
        mode=mode,
        tau=cfg.tau,
        valid=valid,
        aerial_flat=aerial_flat,
        ground_flat=ground_flat,
        ground_planar=corr.ground_planar.copy(),
        aerial_metric=corr.aerial_metric.copy(),
        truth=scene.truth,
        target_scale=float(target_scale),
        virtual_points=virtual_point_grid(virtual_side, virtual_extent),
        beta=float(beta),
        rule=rule,
        aerial_meta=scene.aerial.meta,
        aerial_shape=aerial_shape,
        ground_shape=(scene.ground.rows, scene.ground.cols),
        aerial_raw=aerial_raw,
        ground_raw=ground_raw,
        params0=params0,
        g2s_terms=tuple(g2s_terms),
        s2g_terms=tuple(s2g_terms),
    )


def _unpack(ctx: GradContext, params: np.ndarray):
    """Leaf vector -> (raw scores, dustbin z) for the context's mode."""
    params = np.asarray(params, dtype=float)
    if params.shape != ctx.params0.shape:
        raise OutOfRange(
            f"expected {ctx.params0.shape[0]} parameters, got {params.shape}"
        )
    z = float(params[-1])
    if ctx.mode == "score":
        scores = params[:-1].reshape(ctx.n_aerial, ctx.n_ground)
        return scores, z
    if ctx.mode == "features":
        na, ng, d = ctx.n_aerial, ctx.n_ground, ctx.dim
        a_raw = params[: na * d].reshape(na, d)
        g_raw = params[na * d : na * d + ng * d].reshape(ng, d)
    else:  # projection
        d = ctx.dim
        w = params[: d * d].reshape(d, d)
        a_raw = ctx.aerial_raw @ w.T
        g_raw = ctx.ground_raw @ w.T
    a_hat = normalize_features(a_raw)
    g_hat = normalize_features(g_raw)
    return (a_hat @ g_hat.T) / ctx.tau, z


def _masked_matrix(ctx: GradContext, scores: np.ndarray) -> ScoreMatrix:
    m = ScoreMatrix(scores, ctx.tau, ctx.aerial_shape, ctx.ground_shape)
    return mask_ground_columns(m, ctx.valid)


def _selected_weights(ctx: GradContext, probs: np.ndarray) -> np.ndarray:
    return probs[ctx.aerial_flat, ctx.ground_flat]


# ---------------------------------------------------------------------------
# forward


def forward(ctx: GradContext, params: np.ndarray) -> float:
    """Total training loss at ``params`` with the context's frozen selection.

    Uses the production solver and loss implementations end to end, so this
    is exactly the quantity the trainer descends.
    """
    scores, z = _unpack(ctx, params)
    masked = _masked_matrix(ctx, scores)
    probs = drop_dustbin(dual_softmax(augment_dustbin(masked.scores, z)))
    w = _selected_weights(ctx, probs)
    estimate = solve_similarity(ctx.ground_planar, ctx.aerial_metric, w)
    vce = vce_loss(estimate, ctx.truth, ctx.virtual_points)
    if ctx.beta == 0.0:
        return total_loss(vce, 0.0, 0.0, 0.0).total
    q_hat = gt_aerial_targets(ctx.ground_planar, ctx.truth, ctx.target_scale)
    p_hat = gt_ground_targets(ctx.aerial_metric, ctx.truth, ctx.target_scale)
    g2s = info_nce_g2s(masked, ctx.ground_flat, q_hat, ctx.aerial_meta)
    s2g = info_nce_s2g(
        masked, ctx.aerial_flat, p_hat, ctx.ground_flat, ctx.ground_planar, ctx.rule
    )
    return total_loss(vce, g2s, s2g, ctx.beta).total


def forward_value(ctx: GradContext, params: np.ndarray, dtype=np.longdouble):
    """The same scalar as ``forward``, computed in a chosen float type.

    A dtype-parameterized twin of the loss chain built from elementwise
    numpy operations only (the alignment step uses the closed-form angle
    solution instead of an SVD, which LAPACK cannot run in extended
    precision).  The finite-difference oracle evaluates this in
    ``np.longdouble`` so that arithmetic rounding stays far below the
    gradient entries being resolved; with ``np.float64`` it reproduces
    ``forward`` to machine precision, which is tested.
    """
    params = np.asarray(params, dtype=dtype)
    z = params[-1]
    if ctx.mode == "score":
        scores = params[:-1].reshape(ctx.n_aerial, ctx.n_ground)
    else:
        if ctx.mode == "features":
            na, ng, d = ctx.n_aerial, ctx.n_ground, ctx.dim
            a_raw = params[: na * d].reshape(na, d)
            g_raw = params[na * d : na * d + ng * d].reshape(ng, d)
        else:
            d = ctx.dim
            mat = params[: d * d].reshape(d, d)
            a_raw = ctx.aerial_raw.astype(dtype) @ mat.T
            g_raw = ctx.ground_raw.astype(dtype) @ mat.T
        a_hat = a_raw / np.sqrt((a_raw**2).sum(axis=1, keepdims=True))
        g_hat = g_raw / np.sqrt((g_raw**2).sum(axis=1, keepdims=True))
        scores = (a_hat @ g_hat.T) / dtype(ctx.tau)
    scores = np.where(ctx.valid[None, :], scores, dtype(MASK_SCORE))

    extended = np.full(
        (ctx.n_aerial + 1, ctx.n_ground + 1), z, dtype=dtype
    )
    extended[:-1, :-1] = scores
    er = np.exp(extended - extended.max(axis=1, keepdims=True))
    ec = np.exp(extended - extended.max(axis=0, keepdims=True))
    probs = (er / er.sum(axis=1, keepdims=True)) * (ec / ec.sum(axis=0, keepdims=True))
    w = probs[:-1, :-1][ctx.aerial_flat, ctx.ground_flat]

    p = ctx.ground_planar.astype(dtype)
    q = ctx.aerial_metric.astype(dtype)
    total = w.sum()
    p_bar = (w[:, None] * p).sum(axis=0) / total
    q_bar = (w[:, None] * q).sum(axis=0) / total
    pt = p - p_bar
    qt = q - q_bar
    g = (w * (pt[:, 0] * qt[:, 1] - pt[:, 1] * qt[:, 0])).sum()
    h = (w * (pt * qt).sum(axis=1)).sum()
    theta = np.arctan2(g, h)
    scale = np.hypot(g, h) / (w * (pt**2).sum(axis=1)).sum()
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]], dtype=dtype)
    t_est = q_bar - scale * (rot @ p_bar)

    v = ctx.virtual_points.astype(dtype)
    gt_theta = dtype(ctx.truth.theta)
    rot_gt = np.array(
        [
            [np.cos(gt_theta), -np.sin(gt_theta)],
            [np.sin(gt_theta), np.cos(gt_theta)],
        ],
        dtype=dtype,
    )
    delta = (v @ rot_gt.T + ctx.truth.t.astype(dtype)) - (v @ rot.T + t_est)
    vce = np.sqrt((delta**2).sum(axis=1)).mean()
    if ctx.beta == 0.0:
        return vce

    def logsumexp(x):
        m = x.max()
        return m + np.log(np.exp(x - m).sum())

    g2s = dtype(0.0)
    for col, pos in ctx.g2s_terms:
        column = scores[:, col]
        g2s += -(column[pos] - logsumexp(column))
    g2s /= len(ctx.g2s_terms)
    s2g = dtype(0.0)
    for row, cols, pos_idx in ctx.s2g_terms:
        entries = scores[row, cols]
        s2g += -(entries[pos_idx] - logsumexp(entries))
    s2g /= len(ctx.s2g_terms)
    return vce + dtype(ctx.beta) * (g2s + s2g) / dtype(2.0)


# ---------------------------------------------------------------------------
# backward: closed-form chain rule


def _solver_internals(p: np.ndarray, q: np.ndarray, w: np.ndarray) -> dict:
    """Weighted-alignment byproducts needed by the chain rule.

    The optimal angle maximizes the weighted correlation
    c(theta) = h cos(theta) + g sin(theta), where g and h are the
    antisymmetric and symmetric invariants of the weighted covariance;
    the optimal scale is hypot(g, h) over the weighted ground spread.
    """
    total = float(w.sum())
    if total <= 0.0:
        raise DegenerateConfiguration("weights sum to zero")
    p_bar = (w[:, None] * p).sum(axis=0) / total
    q_bar = (w[:, None] * q).sum(axis=0) / total
    pt = p - p_bar
    qt = q - q_bar
    g = float((w * (pt[:, 0] * qt[:, 1] - pt[:, 1] * qt[:, 0])).sum())
    h = float((w * (pt * qt).sum(axis=1)).sum())
    r = math.hypot(g, h)
    spp = float((w * (pt**2).sum(axis=1)).sum())
    if spp <= 0.0:
        raise DegenerateConfiguration("ground points have no weighted spread")
    if r == 0.0:
        raise DegenerateConfiguration("zero covariance leaves the angle undefined")
    theta = math.atan2(g, h)
    scale = r / spp
    return {
        "total": total, "p_bar": p_bar, "q_bar": q_bar, "pt": pt, "qt": qt,
        "g": g, "h": h, "r": r, "spp": spp, "theta": theta, "scale": scale,
    }


def pose_weight_gradients(
    p: np.ndarray,
    q: np.ndarray,
    w: np.ndarray,
    d_theta: float,
    d_scale: float,
    d_t: np.ndarray,
) -> np.ndarray:
    """Gradient of a scalar through the weighted alignment, per weight.

    Given the scalar's partials with respect to the solved angle, scale, and
    translation, returns dE/dw for every correspondence weight.  Centering
    makes the centroid-shift terms vanish in the covariance derivatives, so
    each weight's contribution reduces to its centered pair.
    """
    s = _solver_internals(np.asarray(p, float), np.asarray(q, float), np.asarray(w, float))
    pt, qt = s["pt"], s["qt"]
    cross = pt[:, 0] * qt[:, 1] - pt[:, 1] * qt[:, 0]  # dg/dw_n
    dot = (pt * qt).sum(axis=1)  # dh/dw_n
    pp = (pt**2).sum(axis=1)  # dSpp/dw_n
    r2 = s["r"] ** 2
    dtheta_dw = (s["h"] * cross - s["g"] * dot) / r2
    dscale_dw = (s["g"] * cross + s["h"] * dot) / (s["r"] * s["spp"]) - s[
        "scale"
    ] * pp / s["spp"]
    rot = rotation_matrix(s["theta"])
    rot_p = rotation_matrix(s["theta"] + math.pi / 2)  # dR/dtheta
    rp = rot @ s["p_bar"]
    rpp = rot_p @ s["p_bar"]
    # t = q_bar - scale * R p_bar, totally differentiated in w_n
    dt_dw = (
        (qt - s["scale"] * (pt @ rot.T)) / s["total"]
        - np.outer(dscale_dw, rp)
        - s["scale"] * np.outer(dtheta_dw, rpp)
    )
    return d_theta * dtheta_dw + d_scale * dscale_dw + dt_dw @ np.asarray(d_t, float)


def _vce_partials(theta: float, t: np.ndarray, truth, points: np.ndarray):
    """(dvce/dtheta, dvce/dt) for the mean virtual-point offset norm.

    Offsets that are exactly zero contribute nothing (the minimum of the
    cone; its symmetric subgradient).
    """
    r_est = rotation_matrix(theta)
    r_gt = rotation_matrix(truth.theta)
    delta = (points @ r_gt.T + truth.t) - (points @ r_est.T + t)
    norms = np.linalg.norm(delta, axis=1)
    unit = np.zeros_like(delta)
    nz = norms > 0.0
    unit[nz] = delta[nz] / norms[nz, None]
    rot_p = rotation_matrix(theta + math.pi / 2)
    d_theta = -float((unit * (points @ rot_p.T)).sum() / len(points))
    d_t = -unit.sum(axis=0) / len(points)
    return d_theta, d_t


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _contrastive_score_gradient(ctx: GradContext, scores_masked: np.ndarray):
    """d(beta-weighted contrastive losses)/d(score entries), dense.

    Uses the frozen positive/negative structure captured at construction;
    both directions are plain softmax cross-entropy gradients.
    """
    ds = np.zeros_like(scores_masked)
    coef = ctx.beta / 2.0

    count = len(ctx.g2s_terms)
    for col, pos in ctx.g2s_terms:
        grad = _softmax(scores_masked[:, col])
        grad[pos] -= 1.0
        ds[:, col] += (coef / count) * grad

    n_rows = len(ctx.s2g_terms)
    for row, cols, pos_idx in ctx.s2g_terms:
        grad = _softmax(scores_masked[row, cols])
        grad[pos_idx] -= 1.0
        np.add.at(ds[row], cols, (coef / n_rows) * grad)
    return ds


def _dual_softmax_vjp(extended: np.ndarray, d_probs_full: np.ndarray) -> np.ndarray:
    """VJP of row_softmax(E) * col_softmax(E) at E = ``extended``."""
    ra = row_softmax(extended)
    cb = col_softmax(extended)
    u = d_probs_full * cb
    d_row = ra * (u - (ra * u).sum(axis=1, keepdims=True))
    v = d_probs_full * ra
    d_col = cb * (v - (cb * v).sum(axis=0, keepdims=True))
    return d_row + d_col


def _check_selection_boundary(ctx: GradContext, probs: np.ndarray):
    """Exact probability tie across the top-N boundary means the frozen
    selection is ambiguous at these parameters."""
    flat = probs.ravel()
    if len(ctx.aerial_flat) >= flat.size:
        return
    sel = ctx.aerial_flat * ctx.n_ground + ctx.ground_flat
    outside = np.ones(flat.size, dtype=bool)
    outside[sel] = False
    if flat[sel].min() == flat[outside].max():
        raise NonDifferentiablePoint(
            "selected and unselected entries tie exactly at the sampling boundary"
        )


def backward(ctx: GradContext, params: np.ndarray) -> np.ndarray:
    """Exact gradient of ``forward`` at ``params``, fully closed-form."""
    params = np.asarray(params, dtype=float)
    scores, z = _unpack(ctx, params)
    masked = _masked_matrix(ctx, scores)
    extended = augment_dustbin(masked.scores, z)
    probs = drop_dustbin(dual_softmax(extended))
    _check_selection_boundary(ctx, probs)
    w = _selected_weights(ctx, probs)

    internals = _solver_internals(ctx.ground_planar, ctx.aerial_metric, w)
    rot = rotation_matrix(internals["theta"])
    t_est = internals["q_bar"] - internals["scale"] * (rot @ internals["p_bar"])
    d_theta, d_t = _vce_partials(
        internals["theta"], t_est, ctx.truth, ctx.virtual_points
    )
    de_dw = pose_weight_gradients(
        ctx.ground_planar, ctx.aerial_metric, w, d_theta, 0.0, d_t
    )

    d_probs_full = np.zeros_like(extended)
    np.add.at(d_probs_full, (ctx.aerial_flat, ctx.ground_flat), de_dw)
    d_extended = _dual_softmax_vjp(extended, d_probs_full)
    d_scores = d_extended[:-1, :-1]
    d_z = float(d_extended[-1, :].sum() + d_extended[:-1, -1].sum())

    if ctx.beta != 0.0:
        d_scores = d_scores + _contrastive_score_gradient(ctx, masked.scores)
    d_scores = np.where(ctx.valid[None, :], d_scores, 0.0)

    if ctx.mode == "score":
        return np.append(d_scores.ravel(), d_z)

    # chain through cosine scores into the raw feature vectors
    if ctx.mode == "features":
        a_raw = params[: ctx.n_aerial * ctx.dim].reshape(ctx.n_aerial, ctx.dim)
        g_raw = params[
            ctx.n_aerial * ctx.dim : ctx.n_aerial * ctx.dim + ctx.n_ground * ctx.dim
        ].reshape(ctx.n_ground, ctx.dim)
    else:
        mat = params[: ctx.dim * ctx.dim].reshape(ctx.dim, ctx.dim)
        a_raw = ctx.aerial_raw @ mat.T
        g_raw = ctx.ground_raw @ mat.T
    a_hat = normalize_features(a_raw)
    g_hat = normalize_features(g_raw)
    d_a_hat = (d_scores @ g_hat) / ctx.tau
    d_g_hat = (d_scores.T @ a_hat) / ctx.tau
    a_norm = np.linalg.norm(a_raw, axis=1, keepdims=True)
    g_norm = np.linalg.norm(g_raw, axis=1, keepdims=True)
    d_a_raw = (d_a_hat - a_hat * (a_hat * d_a_hat).sum(axis=1, keepdims=True)) / a_norm
    d_g_raw = (d_g_hat - g_hat * (g_hat * d_g_hat).sum(axis=1, keepdims=True)) / g_norm
    if ctx.mode == "features":
        return np.concatenate([d_a_raw.ravel(), d_g_raw.ravel(), [d_z]])
    d_mat = d_a_raw.T @ ctx.aerial_raw + d_g_raw.T @ ctx.ground_raw
    return np.append(d_mat.ravel(), d_z)


# ---------------------------------------------------------------------------
# finite differences and the comparison report


def finite_difference(
    f: Callable[[np.ndarray], float], params: np.ndarray, epsilon: float = 1.0e-5
) -> np.ndarray:
    """Central differences (f(p + eps e_i) - f(p - eps e_i)) / (2 eps)."""
    if epsilon <= 0:
        raise OutOfRange(f"epsilon must be positive, got {epsilon}")
    params = np.asarray(params, dtype=float)
    grad = np.empty_like(params)
    for i in range(params.size):
        step = np.zeros_like(params)
        step[i] = epsilon
        grad[i] = (f(params + step) - f(params - step)) / (2.0 * epsilon)
    return grad


def compare_gradients(
    analytic: np.ndarray,
    fd: np.ndarray,
    tol: float = 1.0e-4,
    floor: float = REL_FLOOR,
):
    """(max abs err, max rel err, passed) with a floored relative error."""
    analytic = np.asarray(analytic, dtype=float)
    fd = np.asarray(fd, dtype=float)
    abs_err = np.abs(analytic - fd)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    rel_err = abs_err / denom
    return float(abs_err.max()), float(rel_err.max()), bool(rel_err.max() < tol)


def check(
    ctx: GradContext,
    params: np.ndarray = None,
    epsilon: float = 1.0e-5,
    tol: float = 1.0e-4,
) -> GradReport:
    """Run backward against the FD oracle and report the discrepancy.

    Pipeline failures (degenerate alignment, selection-boundary ties) are
    surfaced in the report rather than raised.
    """
    if params is None:
        params = ctx.params0
    try:
        analytic = backward(ctx, params)
        fd = finite_difference(
            lambda p: forward_value(ctx, p),
            np.asarray(params, dtype=np.longdouble),
            epsilon,
        ).astype(float)
    except (DegenerateConfiguration, NonDifferentiablePoint) as exc:
        return GradReport(
            mode=ctx.mode,
            n_params=len(ctx.params0),
            analytic=None,
            fd=None,
            max_abs_err=math.inf,
            max_rel_err=math.inf,
            passed=False,
            error=f"{type(exc).__name__}: {exc}",
        )
    max_abs, max_rel, passed = compare_gradients(analytic, fd, tol)
    return GradReport(
        mode=ctx.mode,
        n_params=len(params),
        analytic=analytic,
        fd=fd,
        max_abs_err=max_abs,
        max_rel_err=max_rel,
        passed=passed,
    )
