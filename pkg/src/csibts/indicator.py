"""Training-free presence indicators from CSI disarray.

Disarray scores how ordered a frame's temporal structure is: per subcarrier
and antenna pair, the temporal entropy of the (sum-normalized) amplitude
series minus a weighted mean-deviation term, averaged over subcarriers and
multiplied across pairs.  An empty room gives near-constant series, so
entropy sits at its ln(tau) ceiling and the deviation term vanishes; motion
lowers it.  Per-case means of labeled disarray (shifted by the
labeled-vs-unlabeled disparity) give one reference value per case, and a
frame or batch is scored by its squared distance to each reference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend

CASES = (1, 2, 3, 4)


class MissingCaseError(ValueError):
    """The labeled set does not cover every presence case."""

    def __init__(self, missing):
        self.missing = tuple(sorted(missing))
        super().__init__(f"labeled data missing case(s) {list(self.missing)}")


@dataclass(frozen=True)
class DisarrayParams:
    """Fine-step weight and fine-order exponent of the deviation term."""

    alpha: float = 1.0
    beta: float = 1.0
    eps: float = 1e-12

    def __post_init__(self):
        if self.alpha < 0.0:
            raise ValueError("alpha must be nonnegative")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class IndicatorSet:
    """Per-case disarray references plus the disparity that produced them."""

    gamma: np.ndarray               # (C,) reference disarray per case
    delta: float                    # disparity: mean labeled minus mean unlabeled
    n_labeled: int
    n_unlabeled: int
    case_counts: dict[int, int]
    params: DisarrayParams

    def __post_init__(self):
        if not np.all(np.isfinite(self.gamma)):
            raise ValueError("indicator values must be finite")
        if sum(self.case_counts.values()) != self.n_labeled:
            raise ValueError("per-case counts must sum to the labeled total")


def disarray(values: np.ndarray, params: DisarrayParams = DisarrayParams()) -> float:
    """Disarray of one frame, shape (tau, S, K)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise ValueError(f"expected one (tau, S, K) frame, got shape {values.shape}")
    if values.shape[0] < 2:
        raise ValueError("disarray needs at least 2 packets per frame")
    return float(backend.disarray_frames(
        values[None], params.alpha, params.beta, params.eps)[0])


def disarray_frames(frames: np.ndarray, params: DisarrayParams = DisarrayParams()) -> np.ndarray:
    """Disarray of a stack of frames, shape (N, tau, S, K) -> (N,)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ValueError(f"expected (N, tau, S, K), got shape {frames.shape}")
    return backend.disarray_frames(frames, params.alpha, params.beta, params.eps)


def disarray_windows(data: np.ndarray, anchors: np.ndarray, tau: int,
                     params: DisarrayParams = DisarrayParams()) -> np.ndarray:
    """Disarray of sliding windows over a (T, S, K) series without copies."""
    return backend.disarray_windows(data, anchors, tau, params.alpha, params.beta, params.eps)


def disparity(labeled_rho, unlabeled_rho) -> float:
    """Mean labeled disarray minus mean unlabeled disarray."""
    labeled_rho = np.asarray(labeled_rho, dtype=np.float64)
    unlabeled_rho = np.asarray(unlabeled_rho, dtype=np.float64)
    if labeled_rho.size == 0:
        raise ValueError("labeled disarray list is empty")
    if unlabeled_rho.size == 0:
        raise ValueError("unlabeled disarray list is empty")
    return float(labeled_rho.mean() - unlabeled_rho.mean())


def _as_rho(values, params) -> np.ndarray:
    """Accept per-frame disarray values (N,) or raw frames (N, tau, S, K)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 4:
        return disarray_frames(values, params)
    if values.ndim == 1:
        return values
    raise ValueError(f"expected disarray values or frames, got shape {values.shape}")


def build_indicators(labeled_by_case, unlabeled,
                     params: DisarrayParams = DisarrayParams()) -> IndicatorSet:
    """Build per-case references from labeled data plus unlabeled disparity.

    ``labeled_by_case`` maps case id -> frames (M_c, tau, S, K) or disarray
    values (M_c,); ``unlabeled`` is frames or disarray values likewise.  Case
    1 keeps its labeled mean; other cases are shifted by the disparity.
    """
    missing = [c for c in CASES if c not in labeled_by_case]
    if missing:
        raise MissingCaseError(missing)
    rho_by_case = {c: _as_rho(labeled_by_case[c], params) for c in CASES}
    empty = [c for c, r in rho_by_case.items() if r.size == 0]
    if empty:
        raise MissingCaseError(empty)
    unlabeled_rho = _as_rho(unlabeled, params)
    all_labeled = np.concatenate([rho_by_case[c] for c in CASES])
    delta = disparity(all_labeled, unlabeled_rho)
    gamma = np.array([rho_by_case[c].mean() + (delta if c > 1 else 0.0) for c in CASES])
    return IndicatorSet(
        gamma=gamma, delta=delta,
        n_labeled=int(all_labeled.size), n_unlabeled=int(unlabeled_rho.size),
        case_counts={c: int(rho_by_case[c].size) for c in CASES},
        params=params)


def confidence_distribution(batch, indicators: IndicatorSet) -> np.ndarray:
    """Length-C confidence vector of a batch, rescaled into [-1, 1].

    ``batch`` may be frames (B, tau, S, K), a single frame (tau, S, K), or a
    precomputed batch-level disarray scalar.  The batch-level disarray is the
    mean of per-frame values; raw confidence is the negated squared distance
    to each reference, then affinely mapped so max -> 1 and min -> -1 (all
    zeros when every raw value ties).
    """
    if np.ndim(batch) == 0:
        rho = float(batch)
    elif np.ndim(batch) == 3:
        rho = disarray(np.asarray(batch), indicators.params)
    else:
        rho = float(_as_rho(batch, indicators.params).mean())
    raw = -np.square(rho - indicators.gamma)
    return rescale_confidence(raw)


def rescale_confidence(raw: np.ndarray) -> np.ndarray:
    """Affine per-batch rescale of raw confidences onto [-1, 1]."""
    mn, mx = raw.min(axis=-1, keepdims=True), raw.max(axis=-1, keepdims=True)
    span = mx - mn
    out = np.where(span == 0.0, 0.0, 2.0 * (raw - mn) / np.where(span == 0.0, 1.0, span) - 1.0)
    return out


def indicator_classify(frame, indicators: IndicatorSet) -> int:
    """Classify one frame (or disarray value) by nearest reference.

    Ties resolve to the lowest case id (argmax of the confidence vector).
    """
    xi = confidence_distribution(frame, indicators)
    return int(np.argmax(xi)) + 1


def classify_many(values, indicators: IndicatorSet) -> np.ndarray:
    """Vectorized per-frame classification; ``values`` as in ``_as_rho``."""
    rho = _as_rho(values, indicators.params)
    raw = -np.square(rho[:, None] - indicators.gamma[None, :])
    return np.argmax(raw, axis=1) + 1
