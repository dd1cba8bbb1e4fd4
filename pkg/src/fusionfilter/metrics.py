"""Macro-F1, data efficiency, quality loss and tradeoff curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datagen import FrameSet
from .errors import DataError, ShapeError, UsageError
from .fusionmodel import FusionModel, predict_frames


def per_label_f1(predictions, labels) -> np.ndarray:
    """F1 per column. A column with no TP, FP or FN scores 1.0 (vacuous class)."""
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    if p.ndim == 1:
        p = p[:, None]
        y = y[:, None]
    tp = np.sum(p & y, axis=0)
    fp = np.sum(p & ~y, axis=0)
    fn = np.sum(~p & y, axis=0)
    denom = 2 * tp + fp + fn
    return np.where(denom == 0, 1.0, 2 * tp / np.maximum(denom, 1))


def macro_f1(predictions, labels) -> float:
    return float(np.mean(per_label_f1(predictions, labels)))


@dataclass
class TradeoffRow:
    tau: float
    data_efficiency: float
    quality_loss: float
    sent_fraction: list[float]
    f1_full: float
    f1_filtered: float


def data_efficiency(send: np.ndarray, bytes_per_modality: Sequence[int]) -> float:
    """1 - bytes sent / bytes total, computed with exact integer arithmetic."""
    send = np.asarray(send)
    sizes = [int(b) for b in bytes_per_modality]
    if send.ndim != 2 or send.shape[1] != len(sizes):
        raise ShapeError(f"send matrix {send.shape} does not match {len(sizes)} modality sizes")
    n = send.shape[0]
    total = n * sum(sizes)
    if total == 0:
        raise UsageError("no bytes to account")
    sent = sum(int(np.count_nonzero(send[:, m])) * sizes[m] for m in range(len(sizes)))
    return float(1 - Fraction(sent, total))


def quality_loss(f1_full: float, f1_filtered: float) -> float:
    if f1_full <= 0:
        raise UsageError("quality loss is undefined when the unfiltered macro-F1 is 0")
    return (f1_full - f1_filtered) / f1_full


def _bytes_list(bytes_per_modality, n_mod: int, names=None) -> list[int]:
    if isinstance(bytes_per_modality, Mapping):
        if names is None:
            raise UsageError("byte map given by name but modality names unknown")
        return [int(bytes_per_modality[n]) for n in names]
    out = [int(b) for b in bytes_per_modality]
    if len(out) != n_mod:
        raise ShapeError(f"{len(out)} byte sizes for {n_mod} modalities")
    return out


def evaluate_filtered(
    server: FusionModel,
    frames: FrameSet,
    send: np.ndarray,
    bytes_per_modality,
    tau: float = float("nan"),
    names=None,
    f1_full: float | None = None,
) -> TradeoffRow:
    """Score the server on zero-filled inputs wherever ``send`` is 0.

    ``send`` is an (n_frames, n_modalities) bit matrix, one row per frame.
    """
    send = np.asarray(send)
    if send.ndim != 2 or send.shape[0] != len(frames):
        raise DataError(f"{send.shape[0] if send.ndim else 0} decisions for {len(frames)} frames")
    sizes = _bytes_list(bytes_per_modality, frames.n_modalities, names)
    if f1_full is None:
        _, full = predict_frames(server, frames)
        f1_full = macro_f1(full, frames.labels)
    _, filt = predict_frames(server, frames, keep=send)
    f1_filt = macro_f1(filt, frames.labels)
    return TradeoffRow(
        tau=float(tau),
        data_efficiency=data_efficiency(send, sizes),
        quality_loss=quality_loss(f1_full, f1_filt),
        sent_fraction=[float(np.mean(send[:, m])) for m in range(send.shape[1])],
        f1_full=f1_full,
        f1_filtered=f1_filt,
    )


def build_tradeoff_curve(server, filters, frames: FrameSet, grid, bytes_per_modality, names=None):
    """One row per threshold, the same threshold applied to every modality's filter.

    ``filters`` is a list of per-modality near-sensor models (fusion-aware or
    uni-modal baseline; both expose the same scoring interface).
    """
    from .nearsensor import filter_scores

    grid = [float(t) for t in grid]
    if not grid:
        raise UsageError("threshold grid is empty")
    _, full = predict_frames(server, frames)
    f1_full = macro_f1(full, frames.labels)
    scores = filter_scores(filters, frames)
    rows = []
    for tau in grid:
        send = (scores >= tau).astype(np.int8)
        rows.append(evaluate_filtered(server, frames, send, bytes_per_modality, tau, names, f1_full))
    return rows


def interpolate_quality_loss(rows: Sequence[TradeoffRow], target_efficiency: float) -> float:
    """Quality loss at ``target_efficiency``, linear between the bracketing rows.

    Rows are ordered by efficiency; where several rows share an efficiency
    their losses are averaged first.
    """
    eff = np.array([r.data_efficiency for r in rows])
    loss = np.array([r.quality_loss for r in rows])
    uniq = np.unique(eff)
    mean_loss = np.array([loss[eff == e].mean() for e in uniq])
    if target_efficiency < uniq[0] or target_efficiency > uniq[-1]:
        raise UsageError(
            f"efficiency {target_efficiency} outside the curve's range [{uniq[0]}, {uniq[-1]}]"
        )
    return float(np.interp(target_efficiency, uniq, mean_loss))


@dataclass
class CurveComparison:
    efficiency: float
    loss_fusion_aware: float
    loss_unimodal: float
    ratio: float = field(init=False)

    def __post_init__(self):
        self.ratio = (
            self.loss_fusion_aware / self.loss_unimodal if self.loss_unimodal != 0 else float("nan")
        )


def curve_header(names: Sequence[str]) -> list[str]:
    """tau, data_efficiency, quality_loss, sent_<modality>..., f1_full, f1_filtered."""
    return ["tau", "data_efficiency", "quality_loss"] + [f"sent_{n}" for n in names] + ["f1_full", "f1_filtered"]


def curve_cells(r: TradeoffRow) -> list[str]:
    return (
        [_fmt(r.tau), _fmt(r.data_efficiency), _fmt(r.quality_loss)]
        + [_fmt(s) for s in r.sent_fraction]
        + [_fmt(r.f1_full), _fmt(r.f1_filtered)]
    )


def write_curve_csv(rows: Sequence[TradeoffRow], path, names: Sequence[str], extra: dict | None = None):
    extra = extra or {}
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(curve_header(names) + list(extra))
        for r in rows:
            w.writerow(curve_cells(r) + [extra[k] for k in extra])


def _fmt(x: float) -> str:
    return repr(float(x))
