"""Filter-out-safe supervision for the near-sensor models.

A modality is *droppable* on a frame when zero-filling it alone leaves the
server's thresholded decision vector unchanged. Per-modality send labels are
then derived from (foi, droppable) either by the fixed two-modality
decision table or by the N-modality rule that reproduces it.

Column mapping for the decision table: its "RGB FoS" column is read as
"RGB suffices alone", i.e. droppable_depth, and its "Depth FoS" column as
droppable_rgb. Under that reading every row keeps whatever modality the
server needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .datagen import Dataset, Frame, FrameSet
from .errors import ConfigError, DataError, ShapeError
from .fusionmodel import FusionModel, decision_equal, predict, predict_frames

FOS_FORMAT = "fusionfilter.fos/1"

MODES = ("table_verbatim", "droppability_rule")

# (FoI, RGB FoS, Depth FoS) -> (RGB label, Depth label).
DECISION_TABLE = {
    (0, 0, 0): (0, 0),
    (0, 0, 1): (0, 0),
    (0, 1, 0): (0, 0),
    (0, 1, 1): (0, 0),
    (1, 0, 0): (1, 1),
    (1, 0, 1): (0, 1),
    (1, 1, 0): (1, 0),
    (1, 1, 1): (0, 1),
}


@dataclass(frozen=True)
class FosPolicy:
    mode: str = "droppability_rule"
    keep_priority: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown FoS mode {self.mode!r}; expected one of {MODES}")
        if self.keep_priority is not None:
            object.__setattr__(self, "keep_priority", tuple(int(m) for m in self.keep_priority))

    def priority(self, n_modalities: int) -> tuple[int, ...]:
        """Modality order used when every modality is droppable. Defaults to last-first."""
        prio = self.keep_priority
        if prio is None:
            prio = tuple(range(n_modalities - 1, -1, -1))
        if sorted(prio) != list(range(n_modalities)):
            raise ConfigError(f"keep_priority {prio} is not a permutation of {n_modalities} modalities")
        return prio


def augment_labels(foi: int, droppable: Sequence[int], policy: FosPolicy = FosPolicy()) -> tuple[int, ...]:
    """Per-modality send labels for one frame."""
    drop = tuple(int(bool(d)) for d in droppable)
    foi = int(bool(foi))
    if policy.mode == "table_verbatim":
        if len(drop) != 2:
            raise ConfigError("the fixed decision table covers exactly two modalities")
        drop_rgb, drop_depth = drop
        return DECISION_TABLE[(foi, drop_depth, drop_rgb)]
    if not foi:
        return (0,) * len(drop)
    send = [1 - d for d in drop]
    if not any(send):
        send[policy.priority(len(drop))[0]] = 1
    return tuple(send)


def augment_labels_batch(foi: np.ndarray, droppable: np.ndarray, policy: FosPolicy = FosPolicy()) -> np.ndarray:
    foi = np.asarray(foi).astype(bool)
    drop = np.asarray(droppable).astype(bool)
    n, n_mod = drop.shape
    if policy.mode == "table_verbatim":
        if n_mod != 2:
            raise ConfigError("the fixed decision table covers exactly two modalities")
        out = np.zeros((n, 2), dtype=np.int8)
        for i in range(n):
            out[i] = DECISION_TABLE[(int(foi[i]), int(drop[i, 1]), int(drop[i, 0]))]
        return out
    send = (~drop).astype(np.int8)
    head = policy.priority(n_mod)[0]
    send[drop.all(axis=1), head] = 1
    send[~foi] = 0
    return send


def derive_droppable(server: FusionModel, frame: Frame) -> tuple[int, ...]:
    """Zero one modality at a time and compare thresholded decisions to the full input."""
    n_mod = server.spec.n_modalities
    if len(frame.features) != n_mod:
        raise ShapeError(f"frame has {len(frame.features)} modalities, model expects {n_mod}")
    _, full = predict(server, frame.features)
    out = []
    for m in range(n_mod):
        mask = [1] * n_mod
        mask[m] = 0
        _, ablated = predict(server, frame.features, mask)
        out.append(decision_equal(full, ablated))
    return tuple(out)


def derive_droppable_batch(server: FusionModel, frames: FrameSet) -> np.ndarray:
    n_mod = server.spec.n_modalities
    _, full = predict_frames(server, frames)
    out = np.zeros((len(frames), n_mod), dtype=np.int8)
    for m in range(n_mod):
        keep = np.ones(n_mod, dtype=np.int8)
        keep[m] = 0
        _, ablated = predict_frames(server, frames, keep=keep)
        out[:, m] = np.all(full == ablated, axis=1)
    return out


@dataclass
class FosRecord:
    frame_id: int
    foi: int
    droppable: tuple[int, ...]
    send_label: tuple[int, ...]


@dataclass
class FosRecords:
    """Column-wise FoS records; iterating yields :class:`FosRecord` objects."""

    frame_id: np.ndarray
    foi: np.ndarray
    droppable: np.ndarray
    send_label: np.ndarray
    modality_names: tuple[str, ...]

    def __len__(self) -> int:
        return int(self.frame_id.size)

    def __getitem__(self, i: int) -> FosRecord:
        return FosRecord(
            int(self.frame_id[i]),
            int(self.foi[i]),
            tuple(int(b) for b in self.droppable[i]),
            tuple(int(b) for b in self.send_label[i]),
        )

    def __iter__(self) -> Iterator[FosRecord]:
        for i in range(len(self)):
            yield self[i]

    def labels_for(self, frames: FrameSet, modality: int) -> np.ndarray:
        """Send labels of ``modality`` aligned to ``frames`` by frame id."""
        pos = {int(f): i for i, f in enumerate(self.frame_id)}
        try:
            rows = np.array([pos[int(f)] for f in frames.frame_id], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"no FoS record for frame {exc.args[0]}") from None
        return self.send_label[rows, modality]


def fos_records_for(server: FusionModel, frames: FrameSet, policy: FosPolicy, names=None) -> FosRecords:
    drop = derive_droppable_batch(server, frames)
    send = augment_labels_batch(frames.foi, drop, policy)
    names = tuple(names or (f"m{m}" for m in range(frames.n_modalities)))
    return FosRecords(frames.frame_id.copy(), frames.foi.copy(), drop, send, names)


def build_fos_dataset(server: FusionModel, dataset: Dataset, policy: FosPolicy = FosPolicy()) -> FosRecords:
    """FoS records for every training frame (the test split is never touched)."""
    return fos_records_for(server, dataset.train, policy, dataset.config.modality_names)


# -- line-delimited export: header line, then one record per frame ------------
#   {"format": "fusionfilter.fos/1", "modalities": [...]}
#   {"frame_id": int, "foi": 0|1, "droppable": [..], "send_label": [..]}


def save_fos(records: FosRecords, path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps({"format": FOS_FORMAT, "modalities": list(records.modality_names)}) + "\n")
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "frame_id": r.frame_id,
                        "foi": r.foi,
                        "droppable": list(r.droppable),
                        "send_label": list(r.send_label),
                    }
                )
                + "\n"
            )
    return path


def load_fos(path) -> FosRecords:
    path = Path(path)
    try:
        with path.open() as fh:
            header = json.loads(fh.readline())
            if header.get("format") != FOS_FORMAT:
                raise DataError(f"{path}: not a {FOS_FORMAT} file")
            recs = [json.loads(line) for line in fh if line.strip()]
        n_mod = len(header["modalities"])
        return FosRecords(
            np.array([r["frame_id"] for r in recs], dtype=np.int64),
            np.array([r["foi"] for r in recs], dtype=np.int8),
            np.array([r["droppable"] for r in recs], dtype=np.int8).reshape(-1, n_mod),
            np.array([r["send_label"] for r in recs], dtype=np.int8).reshape(-1, n_mod),
            tuple(header["modalities"]),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed FoS file: {exc}") from None
