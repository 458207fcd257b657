"""Amplitude CSI preprocessing: normalization, windowing, diversity encoding.

Raw amplitudes are normalized per packet and antenna pair across the
subcarrier axis, cut into sliding frames of ``tau`` packets, and (for the
sequence model) reshaped to (tau, S*K) with a sinusoidal diversity table added
so equal amplitude values at different subcarrier/pair positions become
distinguishable.
"""
from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .csi_sim import CsiDataset


class DegenerateSliceWarning(UserWarning):
    """Some (packet, pair) slices were constant and normalized to zeros."""


class ShortSeriesWarning(UserWarning):
    """Input had fewer packets than one window; no frames produced."""


def pairwise_normalize(amplitudes: np.ndarray) -> np.ndarray:
    """Min-max normalize each (packet, pair) slice across subcarriers to [0, 1].

    Constant slices have no spread to normalize by; they map to all zeros and
    are counted in a single ``DegenerateSliceWarning``.
    """
    x = np.asarray(amplitudes, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (T, S, K) array, got shape {x.shape}")
    mn = x.min(axis=1, keepdims=True)
    mx = x.max(axis=1, keepdims=True)
    span = mx - mn
    degenerate = span == 0.0
    out = (x - mn) / np.where(degenerate, 1.0, span)
    n_degenerate = int(degenerate.sum())
    if n_degenerate:
        out = np.where(np.broadcast_to(degenerate, x.shape), 0.0, out)
        warnings.warn(f"{n_degenerate} degenerate (packet, pair) slices normalized to zeros",
                      DegenerateSliceWarning, stacklevel=2)
    return out


@dataclass
class Frame:
    """One sliding window of normalized CSI.

    The anchor is the 0-based index of the window's last packet, so the frame
    covers packets ``anchor - tau + 1 .. anchor`` of its source dataset.
    """

    values: np.ndarray                  # (tau, S, K) in [0, 1]
    origin: tuple[str, int]             # (dataset id, anchor packet index)
    label: int | None = None
    split: str = "unlabeled"            # "labeled" | "unlabeled"


def window(normalized: np.ndarray, tau: int, stride: int = 1,
           labels: np.ndarray | None = None, dataset_id: str = "") -> list[Frame]:
    """Cut a (T, S, K) series into frames of ``tau`` packets every ``stride``.

    A frame's label is the label of its anchor packet.  Series shorter than
    one window yield no frames and a ``ShortSeriesWarning``.
    """
    if tau < 2:
        raise ValueError("tau must be at least 2")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    n = normalized.shape[0]
    if n < tau:
        warnings.warn(f"series of {n} packets is shorter than one window (tau={tau})",
                      ShortSeriesWarning, stacklevel=2)
        return []
    frames = []
    for anchor in range(tau - 1, n, stride):
        frames.append(Frame(
            values=normalized[anchor - tau + 1:anchor + 1],
            origin=(dataset_id, anchor),
            label=None if labels is None else int(labels[anchor])))
    return frames


@functools.lru_cache(maxsize=8)
def sinusoid_table(tau: int, n_features: int, eta: float) -> np.ndarray:
    """Additive diversity table, shape (tau, n_features).

    With 1-based feature position p and 0-based within-frame time t, entry
    (t, p) is sin(t / eta^((p-2)/P)) for even p and cos(t / eta^((p-1)/P))
    for odd p.  The returned array is read-only so the cache stays clean.
    """
    t = np.arange(tau, dtype=np.float64)[:, None]
    p = np.arange(1, n_features + 1)
    exponent = np.where(p % 2 == 0, p - 2, p - 1) / n_features
    angle = t / (eta ** exponent)[None, :]
    table = np.where(p % 2 == 0, np.sin(angle), np.cos(angle))
    table.flags.writeable = False
    return table


def embed_with_diversity(values: np.ndarray, eta: float = 10000.0) -> np.ndarray:
    """Reshape frames (..., tau, S, K) -> (..., tau, S*K) and add the table.

    The reshape is pair-major: feature p = (k-1)*S + s in 1-based terms, so
    the S subcarriers of pair 1 come first.
    """
    values = np.asarray(values, dtype=np.float64)
    tau, s_len, k_len = values.shape[-3:]
    flat = np.swapaxes(values, -1, -2).reshape(values.shape[:-3] + (tau, s_len * k_len))
    return flat + sinusoid_table(tau, s_len * k_len, eta)


@dataclass
class FrameStore:
    """Windowed view over one normalized dataset.

    Keeps the (T, S, K) array plus anchor indices instead of materialized
    frames, so stride-1 windowing stays cheap in memory; batches are gathered
    on demand.
    """

    dataset_id: str
    data: np.ndarray                    # (T, S, K) normalized float64
    anchors: np.ndarray                 # (N,) int64 anchor packet indices
    labels: np.ndarray                  # (N,) case id per anchor (evaluation ground truth)
    tau: int
    segment_ids: np.ndarray = field(default=None)   # (N,) index into source segments

    def __len__(self) -> int:
        return len(self.anchors)

    def gather(self, idx: np.ndarray) -> np.ndarray:
        """Materialize frames for anchor positions ``idx``, shape (B, tau, S, K)."""
        rows = self.anchors[np.asarray(idx)]
        offsets = np.arange(-self.tau + 1, 1)
        return self.data[rows[:, None] + offsets]

    def frames(self, idx: np.ndarray | None = None) -> np.ndarray:
        return self.gather(np.arange(len(self)) if idx is None else idx)


def build_store(dataset: CsiDataset, tau: int, stride: int = 1, part: str = "all",
                holdout_frac: float = 0.2) -> FrameStore:
    """Normalize a dataset and enumerate window anchors segment by segment.

    Windows never straddle a segment boundary, so every frame is case-pure.
    ``part`` selects packets within each segment: ``"fit"`` takes the leading
    ``1 - holdout_frac`` span, ``"holdout"`` the trailing span (windows fully
    inside it), ``"all"`` the whole segment.
    """
    if part not in ("all", "fit", "holdout"):
        raise ValueError(f"part must be all|fit|holdout, got {part!r}")
    data = pairwise_normalize(dataset.amplitudes)
    anchors, labels, seg_ids = [], [], []
    for seg_index, (start, end, case) in enumerate(dataset.segments):
        if part != "all":
            boundary = start + int(round((end - start) * (1.0 - holdout_frac)))
            start, end = (start, boundary) if part == "fit" else (boundary, end)
        for anchor in range(start + tau - 1, end, stride):
            anchors.append(anchor)
            labels.append(case)
            seg_ids.append(seg_index)
    if not anchors:
        raise ValueError(
            f"no complete tau={tau} windows in part={part!r}; segments too short")
    return FrameStore(
        dataset_id=f"round{dataset.round_id}" + (f":{part}" if part != "all" else ""),
        data=data,
        anchors=np.asarray(anchors, dtype=np.int64),
        labels=np.asarray(labels, dtype=np.int64),
        tau=tau,
        segment_ids=np.asarray(seg_ids, dtype=np.int64))
