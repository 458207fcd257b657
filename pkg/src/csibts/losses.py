"""Loss family for bifold teacher-student training.

Five families: confidence-shaped cross entropy on labeled data (TCE),
feedback-weighted pseudo-label cross entropy on unlabeled data for teachers
and plain pseudo-label cross entropy for students (UICE), a cross-teacher
quadratic consistency term between the two projected latents (CTQ), and a
time-varying Euclidean term pulling projections toward a frozen unlabeled
center (CTVE), whose per-sample distances double as the drift statistic.

Targets are always probability vectors (one-hot labels or teacher output
distributions) shifted by the confidence vector xi and renormalized through a
softmax; targets carry no gradient.  Every log is floored at 1e-12.

Each scored op has a ``*_grad`` companion returning the gradient with respect
to the network logits (or projections), so the trainer can assemble per-
network updates without an autodiff dependency.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .layers import softmax
from .nets import PrimalConfig, PsiConfig, primal_forward, psi_forward

PROB_FLOOR = 1e-12


class CenterNotInitializedError(RuntimeError):
    """Distance requested before the projection-space center was computed."""


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the teacher total losses."""

    lambda1: float = 0.1    # labeled TCE
    lambda2: float = 2.0    # unlabeled UICE
    lambda3: float = 1.0    # cross-teacher CTQ
    lambda4: float = 0.5    # center-pull CTVE (primal teacher only)

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class FeedbackSignal:
    """Per-pair student-improvement signal, ReLU-clamped to be nonnegative."""

    ps: float
    ds: float

    def __post_init__(self):
        if self.ps < 0.0 or self.ds < 0.0:
            raise ValueError("feedback values must be nonnegative")


class TotalLosses(NamedTuple):
    l_pt: float
    l_dt: float
    l_ps: float
    l_ds: float


def soft_target(base: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """softmax(base + xi) per row; base is one-hot labels or teacher probs."""
    return softmax(np.asarray(base, dtype=np.float64) + xi)


def cross_entropy(probs: np.ndarray, target: np.ndarray) -> float:
    """Batch-mean cross entropy -sum target*log(probs) with floored logs."""
    logp = np.log(np.maximum(probs, PROB_FLOOR))
    return float(-np.mean((target * logp).sum(axis=-1)))


def _ce_grad_logits(probs: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of batch-mean CE w.r.t. the logits behind ``probs``.

    Entries clipped by the probability floor contribute a constant to the
    loss, so their target mass drops out of the gradient.
    """
    masked = np.where(probs > PROB_FLOOR, target, 0.0)
    row_mass = masked.sum(axis=-1, keepdims=True)
    return (row_mass * probs - masked) / probs.shape[0]


def tce(probs: np.ndarray, y_onehot: np.ndarray, xi: np.ndarray) -> float:
    """Labeled cross entropy against the confidence-shaped target softmax(y+xi)."""
    return cross_entropy(probs, soft_target(y_onehot, xi))


def tce_grad(probs: np.ndarray, y_onehot: np.ndarray, xi: np.ndarray) -> np.ndarray:
    return _ce_grad_logits(probs, soft_target(y_onehot, xi))


def uice_teacher(probs: np.ndarray, pseudo_soft: np.ndarray, xi: np.ndarray,
                 feedback: float) -> float:
    """Feedback-weighted CE of a teacher against its own shaped pseudo target.

    ``pseudo_soft`` is the teacher's output distribution on the unlabeled
    batch, treated as a constant.
    """
    return feedback * cross_entropy(probs, soft_target(pseudo_soft, xi))


def uice_teacher_grad(probs: np.ndarray, pseudo_soft: np.ndarray, xi: np.ndarray,
                      feedback: float) -> np.ndarray:
    return feedback * _ce_grad_logits(probs, soft_target(pseudo_soft, xi))


def uice_student(probs: np.ndarray, pseudo_soft: np.ndarray, xi: np.ndarray) -> float:
    """Student CE against the teacher's shaped pseudo target (constant)."""
    return cross_entropy(probs, soft_target(pseudo_soft, xi))


def uice_student_grad(probs: np.ndarray, pseudo_soft: np.ndarray,
                      xi: np.ndarray) -> np.ndarray:
    return _ce_grad_logits(probs, soft_target(pseudo_soft, xi))


def compute_feedback(probs_before: np.ndarray, probs_after: np.ndarray,
                     y_onehot: np.ndarray) -> float:
    """Improvement of a student on the labeled batch across its update.

    Positive exactly when the after-update snapshot assigns more log mass to
    the true labels; clamped at zero.
    """
    before = np.mean((y_onehot * np.log(np.maximum(probs_before, PROB_FLOOR))).sum(axis=-1))
    after = np.mean((y_onehot * np.log(np.maximum(probs_after, PROB_FLOOR))).sum(axis=-1))
    return float(max(0.0, after - before))


def ctq(proj_pt: np.ndarray, proj_dt: np.ndarray) -> float:
    """Mean squared row-wise distance between the two teachers' projections."""
    if proj_pt.shape != proj_dt.shape:
        raise ValueError(f"projection shapes differ: {proj_pt.shape} vs {proj_dt.shape}")
    return float(np.mean(np.sum((proj_pt - proj_dt) ** 2, axis=-1)))


def ctq_grad(proj_pt: np.ndarray, proj_dt: np.ndarray):
    diff = 2.0 * (proj_pt - proj_dt) / proj_pt.shape[0]
    return diff, -diff


def ctve(proj_pt: np.ndarray, center: np.ndarray | None) -> float:
    """Mean squared distance of projections to the frozen unlabeled center."""
    if center is None:
        raise CenterNotInitializedError("projection-space center has not been initialized")
    return float(np.mean(np.sum((proj_pt - center) ** 2, axis=-1)))


def ctve_grad(proj_pt: np.ndarray, center: np.ndarray) -> np.ndarray:
    return 2.0 * (proj_pt - center) / proj_pt.shape[0]


def outlier_distance(proj: np.ndarray, center: np.ndarray | None) -> np.ndarray | float:
    """Squared distance to the center, per sample for (B, D) input."""
    if center is None:
        raise CenterNotInitializedError("projection-space center has not been initialized")
    dist = np.sum((np.asarray(proj) - center) ** 2, axis=-1)
    return float(dist) if np.ndim(dist) == 0 else dist


def init_center(psi_params: dict, psi_cfg: PsiConfig, primal_params: dict,
                primal_cfg: PrimalConfig,
                embedded_chunks: Iterable[np.ndarray]) -> np.ndarray:
    """Projection-space mean over the whole unlabeled set at iteration 0.

    ``embedded_chunks`` yields (b, tau, P) batches covering every unlabeled
    frame exactly once.  The result is marked read-only: the center stays
    frozen while the networks train away from their initial weights.
    """
    total = np.zeros(psi_cfg.dims[-1])
    count = 0
    for chunk in embedded_chunks:
        out, _ = primal_forward(primal_params, primal_cfg, chunk)
        proj, _ = psi_forward(psi_params, psi_cfg, out.z)
        total += proj.sum(axis=0)
        count += proj.shape[0]
    if count == 0:
        raise ValueError("cannot initialize the center from zero unlabeled frames")
    center = total / count
    center.flags.writeable = False
    return center


def total_losses(components: dict, weights: LossWeights) -> TotalLosses:
    """Weighted totals per network from named component values."""
    c = components
    return TotalLosses(
        l_pt=(weights.lambda1 * c["tce_pt"] + weights.lambda2 * c["uice_pt"]
              + weights.lambda3 * c["ctq"] + weights.lambda4 * c["ctve"]),
        l_dt=(weights.lambda1 * c["tce_dt"] + weights.lambda2 * c["uice_dt"]
              + weights.lambda3 * c["ctq"]),
        l_ps=c["uice_ps"],
        l_ds=c["uice_ds"])
