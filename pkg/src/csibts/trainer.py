"""Bi-level teacher-student training loop, prediction, drift monitoring.

One iteration: sample a labeled and an unlabeled block, let both teachers
produce pseudo distributions on the unlabeled block, shape targets with the
confidence vectors, step both students on their pseudo-label losses, measure
each student's labeled improvement (the feedback), then step both teachers on
their weighted totals.  Students step strictly before teachers so the
before/after snapshots the feedback needs exist.

Both batch kinds are case-pure, because the batch-level confidence vector
only means something when the batch holds one case.  Labeled batches cycle
round-robin over the four cases (random members within the case), which keeps
the averaged supervised gradient covering every class; unlabeled batches are
contiguous anchor blocks inside one recording segment, the way frames arrive
from a live link.  Per-anchor disarray is precomputed once per store.

Loss terms with a zero coefficient (weight zero, or feedback exactly zero)
are skipped rather than multiplied by zero, so disabling them leaves the
remaining gradient arithmetic bit-identical; a supervised run and a
feedback-zero run with the same seed produce the same teacher trajectory.

All randomness flows from named child streams of the config seed (network
inits, labeled sampling, unlabeled sampling), so consuming one stream never
shifts another.
"""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .indicator import (DisarrayParams, IndicatorSet, MissingCaseError,
                        build_indicators, disarray_windows, rescale_confidence)
from .layers import Adam, accumulate, zero_grads_like
from .losses import (FeedbackSignal, LossWeights, compute_feedback, ctq, ctq_grad,
                     ctve, ctve_grad, init_center, outlier_distance, soft_target,
                     tce, tce_grad, total_losses, uice_student, uice_student_grad,
                     uice_teacher, uice_teacher_grad)
from .nets import (BundleConfig, ModelBundle, dual_backward, dual_forward,
                   init_bundle, primal_backward, primal_forward, psi_backward,
                   psi_forward)
from .preprocess import FrameStore, embed_with_diversity

MODES = ("bts", "supervised", "primal_only", "dual_only")
CENTER_CHUNK = 128      # fixed so the frozen center is independent of batch size
COMPONENT_NAMES = ("tce_pt", "tce_dt", "uice_pt", "uice_dt",
                   "uice_ps", "uice_ds", "ctq", "ctve")


class TrainingDivergedError(RuntimeError):
    """A loss component became non-finite."""

    def __init__(self, iteration: int, component: str):
        self.iteration = iteration
        self.component = component
        super().__init__(f"non-finite loss component {component!r} at iteration {iteration}")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 300
    batch_size: int = 256
    lr_teacher: float = 1e-3
    lr_student: float = 1e-3
    lr_psi: float = 1e-5
    weights: LossWeights = field(default_factory=LossWeights)
    disarray: DisarrayParams = field(default_factory=DisarrayParams)
    tau: int = 50
    eta: float = 10000.0
    d_th: float = 50.0
    seed: int = 0
    mode: str = "bts"
    feedback_scale: float = 1.0     # 0 forces feedback to zero (decouples teachers)
    disable_cd: bool = False        # zero out confidence vectors (plain soft targets)
    drift_window: int = 100
    d_model: int = 64
    n_heads: int = 4
    primal_blocks: int = 2
    d_ff: int = 128
    width: int = 32
    dual_blocks: int = 3
    psi_dims: tuple[int, ...] = (64, 64, 32)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.d_th <= 0.0:
            raise ValueError("d_th must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.feedback_scale < 0.0:
            raise ValueError("feedback_scale must be nonnegative")
        if min(self.lr_teacher, self.lr_student, self.lr_psi) <= 0.0:
            raise ValueError("learning rates must be positive")

    def bundle_config(self, n_subcarriers: int, n_pairs: int) -> BundleConfig:
        return BundleConfig(
            tau=self.tau, n_subcarriers=n_subcarriers, n_pairs=n_pairs,
            eta=self.eta, d_model=self.d_model, n_heads=self.n_heads,
            primal_blocks=self.primal_blocks, d_ff=self.d_ff, width=self.width,
            dual_blocks=self.dual_blocks, psi_dims=tuple(self.psi_dims),
            d_th=self.d_th, seed=self.seed)


@dataclass
class IterRecord:
    iteration: int
    components: dict[str, float]
    feedback: FeedbackSignal
    wall_time: float

    def totals(self, weights: LossWeights):
        return total_losses(self.components, weights)

    def to_json(self) -> str:
        row = {"iteration": self.iteration, **self.components,
               "feedback_ps": self.feedback.ps, "feedback_ds": self.feedback.ds,
               "wall_time": self.wall_time}
        return json.dumps(row, sort_keys=True)


@dataclass
class DriftReport:
    distances: np.ndarray                       # (N,) per-frame outlier distances
    per_origin: dict[str, tuple[float, float]]  # origin -> (min, max)
    verdict: str                                # "drift" | "no-drift"
    threshold: float
    window: int
    buffer: np.ndarray | None = None            # frames to retrain on when drifted


def write_log(records: list[IterRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(record.to_json() + "\n")


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init_pt", "init_dt", "init_ps", "init_ds", "init_psi",
             "batch_labeled", "batch_unlabeled")
    return {name: np.random.default_rng(np.random.SeedSequence([seed, 0xB75, i]))
            for i, name in enumerate(names)}


def _segment_starts(store: FrameStore) -> np.ndarray:
    """Start offsets (into the anchor arrays) of each run of one segment id."""
    ids = store.segment_ids
    changes = np.flatnonzero(np.diff(ids)) + 1
    return np.concatenate(([0], changes, [len(ids)]))


def _sample_block(rng: np.random.Generator, starts: np.ndarray, batch: int) -> np.ndarray:
    """Contiguous case-pure index block chosen from one uniform draw."""
    total = starts[-1]
    r = int(rng.integers(total))
    seg = int(np.searchsorted(starts, r, side="right")) - 1
    lo, hi = int(starts[seg]), int(starts[seg + 1])
    length = hi - lo
    if length <= batch:
        return lo + (np.arange(batch) % length)
    start = min(r - lo, length - batch)
    return np.arange(lo + start, lo + start + batch)


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return np.eye(n_classes)[labels - 1]


def _batch_xi(rho: np.ndarray, indicators: IndicatorSet) -> np.ndarray:
    """Confidence vector of a batch from its precomputed per-frame disarray."""
    raw = -np.square(float(rho.mean()) - indicators.gamma)
    return rescale_confidence(raw)


def _indicators_for(labeled: FrameStore, rho_l: np.ndarray,
                    rho_u: np.ndarray | None, params: DisarrayParams) -> IndicatorSet:
    by_case = {int(c): rho_l[labeled.labels == c] for c in (1, 2, 3, 4)}
    if rho_u is not None:
        return build_indicators(by_case, rho_u, params)
    missing = [c for c, r in by_case.items() if r.size == 0]
    if missing:
        raise MissingCaseError(missing)
    gamma = np.array([by_case[c].mean() for c in (1, 2, 3, 4)])
    return IndicatorSet(gamma=gamma, delta=0.0, n_labeled=int(rho_l.size),
                        n_unlabeled=0,
                        case_counts={c: int(by_case[c].size) for c in (1, 2, 3, 4)},
                        params=params)


def train(labeled: FrameStore, unlabeled: FrameStore | None,
          cfg: TrainConfig) -> tuple[ModelBundle, list[IterRecord]]:
    """Run the offline phase; returns the trained bundle and per-iteration log.

    ``unlabeled`` may be None only in supervised mode; when provided there it
    still contributes to the indicator disparity (so a supervised twin of a
    semi-supervised run sees identical confidence vectors) but is never
    sampled.
    """
    uses_unlabeled = cfg.mode != "supervised"
    if uses_unlabeled and unlabeled is None:
        raise ValueError(f"mode {cfg.mode!r} requires an unlabeled store")
    if labeled.tau != cfg.tau or (unlabeled is not None and unlabeled.tau != cfg.tau):
        raise ValueError("store tau does not match config tau")
    if unlabeled is not None and labeled.data.shape[1:] != unlabeled.data.shape[1:]:
        raise ValueError(
            f"labeled (S, K)={labeled.data.shape[1:]} does not match "
            f"unlabeled (S, K)={unlabeled.data.shape[1:]}")
    missing = sorted(set((1, 2, 3, 4)) - set(int(c) for c in np.unique(labeled.labels)))
    if missing:
        raise MissingCaseError(missing)

    s_len, k_len = labeled.data.shape[1], labeled.data.shape[2]
    config = cfg.bundle_config(s_len, k_len)
    streams = _streams(cfg.seed)
    bundle = init_bundle(config, streams)
    weights = cfg.weights

    rho_l = disarray_windows(labeled.data, labeled.anchors, cfg.tau, cfg.disarray)
    rho_u = None
    if unlabeled is not None:
        rho_u = disarray_windows(unlabeled.data, unlabeled.anchors, cfg.tau, cfg.disarray)
    indicators = _indicators_for(labeled, rho_l, rho_u, cfg.disarray)

    train_primal = cfg.mode in ("bts", "supervised", "primal_only")
    train_dual = cfg.mode in ("bts", "supervised", "dual_only")
    train_students = cfg.mode != "supervised"
    use_psi = cfg.mode == "bts"

    if use_psi and weights.lambda4 > 0.0:
        def chunks():
            for lo in range(0, len(unlabeled), CENTER_CHUNK):
                frames = unlabeled.gather(np.arange(lo, min(lo + CENTER_CHUNK, len(unlabeled))))
                yield embed_with_diversity(frames, cfg.eta)
        bundle.center = init_center(bundle.psi, config.psi, bundle.primal_teacher,
                                    config.primal, chunks())

    optimizers = {}
    if train_primal:
        optimizers["primal_teacher"] = Adam(bundle.primal_teacher, cfg.lr_teacher)
    if train_dual:
        optimizers["dual_teacher"] = Adam(bundle.dual_teacher, cfg.lr_teacher)
    if train_students and train_primal:
        optimizers["primal_student"] = Adam(bundle.primal_student, cfg.lr_student)
    if train_students and train_dual:
        optimizers["dual_student"] = Adam(bundle.dual_student, cfg.lr_student)
    if use_psi and (weights.lambda3 > 0.0 or weights.lambda4 > 0.0):
        # slow head: fast rates let the center objective contract the
        # projection until drift distances lose their meaning
        optimizers["psi"] = Adam(bundle.psi, cfg.lr_psi)

    starts_u = _segment_starts(unlabeled) if uses_unlabeled else None
    case_pools = {c: np.flatnonzero(labeled.labels == c)
                  for c in range(1, config.n_classes + 1)}
    records: list[IterRecord] = []

    for iteration in range(cfg.iterations):
        t_start = time.perf_counter()
        zero_xi = np.zeros(config.n_classes)
        pool = case_pools[iteration % config.n_classes + 1]
        idx_l = pool[streams["batch_labeled"].integers(len(pool), size=cfg.batch_size)]
        frames_l = labeled.gather(idx_l)
        y_l = _one_hot(labeled.labels[idx_l], config.n_classes)
        xi_l = zero_xi if cfg.disable_cd else _batch_xi(rho_l[idx_l], indicators)
        embedded_l = embed_with_diversity(frames_l, cfg.eta) if train_primal else None

        frames_u = embedded_u = xi_u = None
        if uses_unlabeled:
            idx_u = _sample_block(streams["batch_unlabeled"], starts_u, cfg.batch_size)
            frames_u = unlabeled.gather(idx_u)
            xi_u = zero_xi if cfg.disable_cd else _batch_xi(rho_u[idx_u], indicators)
            if train_primal:
                embedded_u = embed_with_diversity(frames_u, cfg.eta)

        components = dict.fromkeys(COMPONENT_NAMES, 0.0)
        feedback = {"ps": 0.0, "ds": 0.0}

        # teacher forward passes (pseudo distributions precede student steps)
        pt_l = dt_l = pt_u = dt_u = None
        if train_primal:
            pt_l = primal_forward(bundle.primal_teacher, config.primal, embedded_l)
            if uses_unlabeled:
                pt_u = primal_forward(bundle.primal_teacher, config.primal, embedded_u)
        if train_dual:
            dt_l = dual_forward(bundle.dual_teacher, config.dual, frames_l)
            if uses_unlabeled:
                dt_u = dual_forward(bundle.dual_teacher, config.dual, frames_u)

        # student steps and feedback
        if train_students and train_primal:
            feedback["ps"], components["uice_ps"] = _student_step(
                bundle.primal_student, config.primal, optimizers["primal_student"],
                primal_forward, primal_backward, embedded_l, embedded_u,
                pt_u[0].probs, xi_u, y_l, cfg.feedback_scale)
        if train_students and train_dual:
            feedback["ds"], components["uice_ds"] = _student_step(
                bundle.dual_student, config.dual, optimizers["dual_student"],
                dual_forward, dual_backward, frames_l, frames_u,
                dt_u[0].probs, xi_u, y_l, cfg.feedback_scale)

        # cross-teacher projection terms
        dz_pt = dz_dt = None
        psi_grads = None
        if use_psi:
            proj_pt, cache_psi_pt = psi_forward(bundle.psi, config.psi, pt_u[0].z)
            proj_dt, cache_psi_dt = psi_forward(bundle.psi, config.psi, dt_u[0].z)
            dproj_pt = dproj_dt = None
            if weights.lambda3 > 0.0:
                components["ctq"] = ctq(proj_pt, proj_dt)
                g_pt, g_dt = ctq_grad(proj_pt, proj_dt)
                dproj_pt = weights.lambda3 * g_pt
                dproj_dt = weights.lambda3 * g_dt
            if weights.lambda4 > 0.0:
                components["ctve"] = ctve(proj_pt, bundle.center)
                g_c = weights.lambda4 * ctve_grad(proj_pt, bundle.center)
                dproj_pt = g_c if dproj_pt is None else dproj_pt + g_c
            if dproj_pt is not None:
                psi_grads = zero_grads_like(bundle.psi)
                part, dz_pt = psi_backward(bundle.psi, config.psi, cache_psi_pt, dproj_pt)
                accumulate(psi_grads, part)
            if dproj_dt is not None:
                part, dz_dt = psi_backward(bundle.psi, config.psi, cache_psi_dt, dproj_dt)
                accumulate(psi_grads, part)

        # teacher updates
        if train_primal:
            components["tce_pt"] = tce(pt_l[0].probs, y_l, xi_l)
            if uses_unlabeled:
                components["uice_pt"] = uice_teacher(
                    pt_u[0].probs, pt_u[0].probs, xi_u, feedback["ps"])
            _teacher_step(
                bundle.primal_teacher, config.primal, optimizers["primal_teacher"],
                primal_backward, pt_l, pt_u, y_l, xi_l, xi_u,
                weights, feedback["ps"], dz_pt)
        if train_dual:
            components["tce_dt"] = tce(dt_l[0].probs, y_l, xi_l)
            if uses_unlabeled:
                components["uice_dt"] = uice_teacher(
                    dt_u[0].probs, dt_u[0].probs, xi_u, feedback["ds"])
            _teacher_step(
                bundle.dual_teacher, config.dual, optimizers["dual_teacher"],
                dual_backward, dt_l, dt_u, y_l, xi_l, xi_u,
                weights, feedback["ds"], dz_dt)
        if psi_grads is not None:
            optimizers["psi"].step(bundle.psi, psi_grads)

        for name, value in components.items():
            if not np.isfinite(value):
                raise TrainingDivergedError(iteration, name)
        records.append(IterRecord(
            iteration=iteration, components=components,
            feedback=FeedbackSignal(ps=feedback["ps"], ds=feedback["ds"]),
            wall_time=time.perf_counter() - t_start))
    return bundle, records


def _student_step(params, net_cfg, optimizer, forward, backward, inputs_l, inputs_u,
                  teacher_probs_u, xi_u, y_l, feedback_scale):
    """One pseudo-label step for a student; returns (feedback, loss value)."""
    probs_before = forward(params, net_cfg, inputs_l)[0].probs
    out_u, cache_u = forward(params, net_cfg, inputs_u)
    value = uice_student(out_u.probs, teacher_probs_u, xi_u)
    dlogits = uice_student_grad(out_u.probs, teacher_probs_u, xi_u)
    optimizer.step(params, backward(params, net_cfg, cache_u, dlogits=dlogits))
    probs_after = forward(params, net_cfg, inputs_l)[0].probs
    fb = feedback_scale * compute_feedback(probs_before, probs_after, y_l)
    return fb, value


def _teacher_step(params, net_cfg, optimizer, backward, fwd_l, fwd_u, y_l, xi_l, xi_u,
                  weights: LossWeights, feedback: float, dz_u):
    """Assemble one teacher update, skipping inactive terms entirely."""
    grads = zero_grads_like(params)
    if weights.lambda1 > 0.0:
        dlogits_l = weights.lambda1 * tce_grad(fwd_l[0].probs, y_l, xi_l)
        accumulate(grads, backward(params, net_cfg, fwd_l[1], dlogits=dlogits_l))
    dlogits_u = None
    if fwd_u is not None and weights.lambda2 > 0.0 and feedback > 0.0:
        dlogits_u = uice_teacher_grad(fwd_u[0].probs, fwd_u[0].probs, xi_u,
                                      weights.lambda2 * feedback)
    if dlogits_u is not None or dz_u is not None:
        accumulate(grads, backward(params, net_cfg, fwd_u[1],
                                   dz=dz_u, dlogits=dlogits_u))
    optimizer.step(params, grads)


# ---------------------------------------------------------------------------
# inference, evaluation, drift
# ---------------------------------------------------------------------------

def _check_frame_shape(bundle: ModelBundle, frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[None]
    cfg = bundle.config
    expected = (cfg.tau, cfg.n_subcarriers, cfg.n_pairs)
    if frames.ndim != 4 or frames.shape[1:] != expected:
        raise ValueError(
            f"frames of shape {frames.shape} do not match the checkpoint's "
            f"(tau, S, K)={expected}")
    return frames


def predict(bundle: ModelBundle, frames: np.ndarray,
            chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Classify frames with the primal teacher; returns (case ids, probs)."""
    frames = _check_frame_shape(bundle, frames)
    ids, probs = [], []
    for lo in range(0, frames.shape[0], chunk):
        embedded = embed_with_diversity(frames[lo:lo + chunk], bundle.config.eta)
        out, _ = primal_forward(bundle.primal_teacher, bundle.config.primal, embedded)
        ids.append(np.argmax(out.probs, axis=1) + 1)
        probs.append(out.probs)
    return np.concatenate(ids), np.concatenate(probs)


def evaluate(bundle: ModelBundle, store: FrameStore, chunk: int = 256) -> dict:
    """Accuracy of the primal teacher over a whole store, with per-case detail."""
    preds, _ = predict(bundle, store.frames(), chunk=chunk)
    correct = preds == store.labels
    per_case = {}
    for case in sorted(set(int(c) for c in store.labels)):
        mask = store.labels == case
        per_case[case] = float(correct[mask].mean())
    return {"accuracy": float(correct.mean()), "per_case": per_case,
            "n_frames": int(len(store)), "predictions": preds}


def project_frames(bundle: ModelBundle, frames: np.ndarray,
                   chunk: int = 256) -> np.ndarray:
    """Map frames through the primal teacher and psi, (N, ...) -> (N, D_psi)."""
    frames = _check_frame_shape(bundle, frames)
    out = []
    for lo in range(0, frames.shape[0], chunk):
        embedded = embed_with_diversity(frames[lo:lo + chunk], bundle.config.eta)
        enc, _ = primal_forward(bundle.primal_teacher, bundle.config.primal, embedded)
        proj, _ = psi_forward(bundle.psi, bundle.config.psi, enc.z)
        out.append(proj)
    return np.concatenate(out)


def monitor_drift(bundle: ModelBundle, stream, window: int = 100,
                  d_th: float | None = None) -> DriftReport:
    """Score a stream of frames against the frozen center.

    ``stream`` is a FrameStore or a (N, tau, S, K) array.  The verdict is
    "drift" when the median outlier distance over the trailing ``window``
    frames reaches the threshold; single outliers do not trigger retraining.
    On drift the report carries the streamed frames as the retraining buffer.
    """
    if isinstance(stream, FrameStore):
        frames = stream.frames()
        origin = stream.dataset_id or "stream"
    else:
        frames = np.asarray(stream, dtype=np.float64)
        origin = "stream"
    if frames.size == 0:
        raise ValueError("cannot monitor an empty frame stream")
    if window < 1:
        raise ValueError("window must be at least 1")
    threshold = bundle.config.d_th if d_th is None else d_th
    proj = project_frames(bundle, frames)
    distances = outlier_distance(proj, bundle.center)
    tail = distances[-window:]
    verdict = "drift" if float(np.median(tail)) >= threshold else "no-drift"
    report = DriftReport(
        distances=distances,
        per_origin={origin: (float(distances.min()), float(distances.max()))},
        verdict=verdict, threshold=float(threshold), window=int(window),
        buffer=frames if verdict == "drift" else None)
    return report


def retrain(bundle: ModelBundle, labeled: FrameStore, new_unlabeled: FrameStore,
            cfg: TrainConfig) -> tuple[ModelBundle, list[IterRecord]]:
    """Full from-scratch retrain on the original labeled set plus new unlabeled data.

    Weights restart from fresh initialization and the center is recomputed
    from the new unlabeled set; the prior bundle only contributes its config
    sanity check (same frame geometry).
    """
    cur = bundle.config
    if (cfg.tau, labeled.data.shape[1], labeled.data.shape[2]) != (
            cur.tau, cur.n_subcarriers, cur.n_pairs):
        warnings.warn("retrain config geometry differs from the prior bundle",
                      stacklevel=2)
    return train(labeled, new_unlabeled, cfg)
