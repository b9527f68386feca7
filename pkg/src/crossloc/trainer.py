"""Desk-scale end-to-end training of a shared linear feature projection.

The trainable parameters are a single dim x dim matrix applied to the raw
feature vectors of *both* grids before normalization, plus the dustbin
score.  Optimization is plain full-batch gradient descent on the combined
alignment-plus-contrastive loss; each step rebuilds the frozen pipeline
view (selection, targets) under the current weights and takes gradients
through the closed-form backward pass.  No momentum, no adaptive scaling:
the point is to demonstrate that pose supervision alone moves the
projection toward better matching, not to engineer an optimizer.

Three loss modes mirror the ablation settings of the alignment objective:

* ``"gt-scale"``     -- contrastive targets placed with the true depth
                        scale (assumes the scale is known during training);
* ``"pseudo-scale"`` -- targets placed with the solver's own scale
                        estimate at the current weights, treated as a
                        constant (stop-gradient) within the step;
* ``"vce-only"``     -- contrastive terms off (beta = 0).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DivergenceDetected, EmptyInput, OutOfRange
from .estimator import PipelineConfig, estimate_pose
from .geometry import wrap_angle
from .gradcheck import backward, build_context, finite_difference, forward, forward_value
from .lifting import LiftConfig
from .matching import FeatureGrid
from .simulator import SceneConfig, generate

__all__ = [
    "ProjectionWeights",
    "TrainConfig",
    "TrainResult",
    "train",
    "evaluate_projection",
    "smoothed_curve",
    "reference_dataset",
    "reference_pipeline",
    "reference_eval_pipeline",
    "reference_run",
    "REFERENCE_SCENE",
    "REFERENCE_TRAIN",
]

LOSS_MODES = ("gt-scale", "pseudo-scale", "vce-only")


@dataclass(frozen=True)
class ProjectionWeights:
    """A linear projection shared by both feature branches, plus the dustbin.

    Both grids observe the same latent space in the synthetic scenes, so a
    single shared matrix is the natural parameterization; separate per-branch
    matrices would only double the parameter count without adding capacity
    the toy problem can use.
    """

    matrix: np.ndarray  # (dim, dim)
    dustbin_z: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "matrix", np.asarray(self.matrix, dtype=float))
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise OutOfRange(f"projection matrix must be square, got {self.matrix.shape}")
        if not (np.isfinite(self.matrix).all() and math.isfinite(self.dustbin_z)):
            raise OutOfRange("projection weights must be finite")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def identity(cls, dim: int, dustbin_z: float = 0.0) -> "ProjectionWeights":
        return cls(np.eye(dim), dustbin_z)

    def as_params(self) -> np.ndarray:
        """Flat parameter vector in the gradcheck projection-mode layout."""
        return np.append(self.matrix.ravel(), self.dustbin_z)

    def apply(self, grid: FeatureGrid) -> FeatureGrid:
        """Project a feature grid through the matrix (metadata preserved)."""
        return FeatureGrid(grid.data @ self.matrix.T, grid.kind, grid.meta)


@dataclass(frozen=True)
class TrainConfig:
    """Gradient-descent schedule and loss selection.

    ``lr`` may be zero (useful for verifying that the loss curve is then
    exactly constant) but not negative.  ``batch=None`` uses every training
    scene each step; smaller values cycle through the dataset in order.
    """

    lr: float = 1e-4
    steps: int = 100
    batch: Optional[int] = None  # scenes per step; None = full batch
    beta: float = 0.1
    loss_mode: str = "gt-scale"
    seed: int = 0
    holdout: int = 2  # trailing scenes reserved for evaluation
    init_jitter: float = 0.0  # stddev of the identity-offset initialization
    gradient_mode: str = "analytic"  # "analytic" | "fd" (slow oracle route)
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.lr < 0:
            raise OutOfRange(f"learning rate must be >= 0, got {self.lr}")
        if self.steps < 1:
            raise OutOfRange(f"steps must be >= 1, got {self.steps}")
        if self.loss_mode not in LOSS_MODES:
            raise OutOfRange(f"unknown loss mode {self.loss_mode!r}")
        if self.gradient_mode not in ("analytic", "fd"):
            raise OutOfRange(f"unknown gradient mode {self.gradient_mode!r}")
        if self.batch is not None and self.batch < 1:
            raise OutOfRange(f"batch must be >= 1, got {self.batch}")
        if self.holdout < 0:
            raise OutOfRange(f"holdout must be >= 0, got {self.holdout}")


@dataclass(frozen=True)
class TrainResult:
    """Learned weights plus the loss curve and before/after evaluation."""

    weights: ProjectionWeights
    loss_curve: np.ndarray  # (steps,) mean batch loss per step
    eval_before: dict
    eval_after: dict

    def metrics(self) -> dict:
        """JSON-ready summary of the run."""
        smooth = smoothed_curve(self.loss_curve)
        return {
            "steps": int(self.loss_curve.shape[0]),
            "initial_loss": float(self.loss_curve[0]),
            "final_loss": float(self.loss_curve[-1]),
            "final_smoothed_loss": float(smooth[-1]),
            "eval_before": self.eval_before,
            "eval_after": self.eval_after,
        }


def smoothed_curve(curve: np.ndarray, window: int = 20) -> np.ndarray:
    """Trailing moving average: entry i averages the last ``window`` values."""
    curve = np.asarray(curve, dtype=float)
    if window < 1:
        raise OutOfRange(f"window must be >= 1, got {window}")
    out = np.empty_like(curve)
    csum = np.concatenate([[0.0], np.cumsum(curve)])
    for i in range(curve.shape[0]):
        lo = max(0, i - window + 1)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def evaluate_projection(weights: ProjectionWeights, scenes, pipe: PipelineConfig) -> dict:
    """Run the estimator on projected features and summarize pose errors."""
    if not scenes:
        return {"count": 0}
    loc, ori = [], []
    for scene in scenes:
        est = estimate_pose(
            weights.apply(scene.aerial),
            weights.apply(scene.ground),
            scene.depth,
            scene.rays,
            pipe,
        )
        loc.append(float(np.linalg.norm(est.transform.t - scene.truth.t)))
        ori.append(abs(wrap_angle(est.transform.theta - scene.truth.theta)))
    return {
        "count": len(scenes),
        "median_loc_error": float(np.median(loc)),
        "mean_loc_error": float(np.mean(loc)),
        "median_ori_error_rad": float(np.median(ori)),
        "mean_ori_error_rad": float(np.mean(ori)),
    }


def _target_scale_and_beta(cfg: TrainConfig, scene, pipe: PipelineConfig):
    """Per-scene contrastive target scale (None = solver estimate) and beta."""
    if cfg.loss_mode == "gt-scale":
        return scene.scale_gt / pipe.lift.initial_scale, cfg.beta
    if cfg.loss_mode == "pseudo-scale":
        return None, cfg.beta
    return None, 0.0  # vce-only


def _scene_gradient(ctx, params: np.ndarray, mode: str) -> np.ndarray:
    if mode == "analytic":
        return backward(ctx, params)
    fd = finite_difference(
        lambda p: forward_value(ctx, p), params.astype(np.longdouble)
    )
    return fd.astype(float)


def train(
    dataset,
    cfg: TrainConfig = TrainConfig(),
    pipe: PipelineConfig = None,
    eval_pipe: PipelineConfig = None,
) -> TrainResult:
    """Gradient-descend the shared projection on a list of scenes.

    The trailing ``cfg.holdout`` scenes are excluded from gradient steps and
    used only for the before/after estimator evaluation (with no holdout the
    evaluation falls back to the training scenes).  Each step rebuilds every
    batch scene's frozen pipeline view at the current weights, averages the
    per-scene gradients in dataset order, and takes one descent step.
    Raises DivergenceDetected as soon as the batch loss exceeds
    ``divergence_factor`` times its step-0 value.

    ``eval_pipe`` lets the before/after evaluation use different estimator
    settings than training (typically more correspondences plus the robust
    solve); it defaults to ``pipe``.
    """
    dataset = list(dataset)
    if not dataset:
        raise EmptyInput("train() needs at least one scene")
    if pipe is None:
        pipe = PipelineConfig()
    if eval_pipe is None:
        eval_pipe = pipe
    if cfg.holdout >= len(dataset):
        raise OutOfRange(
            f"holdout {cfg.holdout} leaves no training scenes out of {len(dataset)}"
        )
    train_scenes = dataset[: len(dataset) - cfg.holdout] if cfg.holdout else dataset
    held_scenes = dataset[len(dataset) - cfg.holdout :] if cfg.holdout else dataset

    dim = train_scenes[0].aerial.dim
    rng = np.random.default_rng(cfg.seed)
    matrix = np.eye(dim) + cfg.init_jitter * rng.standard_normal((dim, dim))
    dustbin = pipe.dustbin_z

    eval_before = evaluate_projection(
        ProjectionWeights(matrix, dustbin), held_scenes, eval_pipe
    )

    n_train = len(train_scenes)
    batch = n_train if cfg.batch is None else min(cfg.batch, n_train)
    curve = np.empty(cfg.steps)
    initial = None
    for step in range(cfg.steps):
        if batch == n_train:
            batch_scenes = train_scenes
        else:
            start = (step * batch) % n_train
            idx = [(start + i) % n_train for i in range(batch)]
            batch_scenes = [train_scenes[i] for i in idx]

        contexts = []
        loss_sum = 0.0
        for scene in batch_scenes:
            target_scale, beta = _target_scale_and_beta(cfg, scene, pipe)
            ctx = build_context(
                scene,
                pipe,
                mode="projection",
                beta=beta,
                projection=(matrix, dustbin),
                target_scale=target_scale,
            )
            contexts.append(ctx)
            loss_sum += forward(ctx, ctx.params0)

        loss = loss_sum / batch
        curve[step] = loss
        if initial is None:
            initial = loss
        elif loss > cfg.divergence_factor * initial:
            raise DivergenceDetected(
                f"loss {loss:.3e} at step {step} exceeds "
                f"{cfg.divergence_factor:g}x the initial {initial:.3e}"
            )

        grad_sum = np.zeros(dim * dim + 1)
        for ctx in contexts:
            grad_sum += _scene_gradient(ctx, ctx.params0, cfg.gradient_mode)
        grad = grad_sum / batch
        matrix = matrix - cfg.lr * grad[:-1].reshape(dim, dim)
        dustbin = dustbin - cfg.lr * grad[-1]

    weights = ProjectionWeights(matrix, dustbin)
    eval_after = evaluate_projection(weights, held_scenes, eval_pipe)
    return TrainResult(weights, curve, eval_before, eval_after)


# --- seeded reference configuration ----------------------------------------
#
# A fixed, fast-enough-for-CI training setup used by the acceptance suite:
# moderate grids, feature noise sigma = 0.2, identity-plus-jitter init.  The
# committed reference artifact pins the loss-curve numbers this run produces.
#
# On raw simulated scenes the identity projection is already optimal -- both
# branches observe the same latent features under isotropic noise -- so a
# trained projection could only overfit and held-out pose error would not
# improve.  The reference scenes therefore confine the informative features
# to a fixed subspace and add branch-specific unit-norm clutter in its
# orthogonal complement.  The clutter decorrelates cross-branch matching for
# the identity projection but vanishes under the projector onto the signal
# subspace, and because that subspace is shared across scenes, a projection
# learned on the training split transfers to held-out scenes.

REFERENCE_SCENE = SceneConfig(
    extent=36.0,
    aerial_cells=21,
    landmark_count=24,
    ground_rows=6,
    ground_cols=24,
    feature_dim=16,
    noise_sigma=0.2,
    visibility_range=20.0,
    min_visible=6,
    max_height=6.0,
)

SIGNAL_DIM = 10  # informative directions out of REFERENCE_SCENE.feature_dim
NUISANCE_AMP = 0.5  # magnitude of the branch-specific clutter component

REFERENCE_TRAIN = TrainConfig(
    lr=1e-2,
    steps=500,
    beta=0.7,
    loss_mode="pseudo-scale",
    seed=0,
    holdout=6,
    init_jitter=0.05,
)


def reference_pipeline() -> PipelineConfig:
    return PipelineConfig(
        num_correspondences=24, lift=LiftConfig(max_depth=40.0)
    )


def reference_eval_pipeline() -> PipelineConfig:
    """Robustified settings for the before/after pose evaluations."""
    from .estimator import RansacConfig

    return dataclasses.replace(
        reference_pipeline(),
        num_correspondences=64,
        ransac=RansacConfig(iterations=300, inlier_threshold=2.0),
    )


def _subspace_split(dim: int, signal_dim: int, seed: int):
    """Orthonormal bases for the signal subspace and its complement."""
    rng = np.random.default_rng(7777 + seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q[:, :signal_dim], q[:, signal_dim:]


def _add_branch_clutter(grid, proj_signal, nuisance_basis, amp, rng):
    """Project features onto the signal subspace, add clutter outside it."""
    flat = grid.data.reshape(-1, grid.data.shape[-1])
    coef = rng.standard_normal((flat.shape[0], nuisance_basis.shape[1]))
    coef /= np.linalg.norm(coef, axis=1, keepdims=True)
    data = flat @ proj_signal.T + amp * (coef @ nuisance_basis.T)
    return FeatureGrid(data.reshape(grid.data.shape), grid.kind, grid.meta)


def reference_dataset(
    n_scenes: int = 22,
    seed: int = 0,
    noise_sigma: float = 0.2,
    nuisance_amp: float = NUISANCE_AMP,
):
    """Deterministic scene list for the reference run (last scenes held out).

    Each scene's feature grids are restricted to a fixed signal subspace and
    given branch-specific clutter in the complementary directions (see the
    section comment above); the clutter coefficients are drawn per scene and
    per branch.  ``nuisance_amp=0`` leaves the raw generated scenes untouched.
    """
    dim = REFERENCE_SCENE.feature_dim
    signal, nuisance = _subspace_split(dim, SIGNAL_DIM, seed)
    proj_signal = signal @ signal.T
    scenes = []
    for i in range(n_scenes):
        scene = generate(
            dataclasses.replace(
                REFERENCE_SCENE, noise_sigma=noise_sigma, seed=1000 * seed + i
            )
        )
        if nuisance_amp:
            rng = np.random.default_rng(50_000 + 1000 * seed + i)
            scene = dataclasses.replace(
                scene,
                aerial=_add_branch_clutter(
                    scene.aerial, proj_signal, nuisance, nuisance_amp, rng
                ),
                ground=_add_branch_clutter(
                    scene.ground, proj_signal, nuisance, nuisance_amp, rng
                ),
            )
        scenes.append(scene)
    return scenes


def reference_run(steps: int = None) -> TrainResult:
    """The pinned seed-0 training run (optionally truncated for smoke tests)."""
    cfg = REFERENCE_TRAIN
    if steps is not None:
        cfg = dataclasses.replace(cfg, steps=steps)
    return train(
        reference_dataset(),
        cfg,
        reference_pipeline(),
        eval_pipe=reference_eval_pipeline(),
    )
