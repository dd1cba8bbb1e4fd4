"""Per-modality keep/drop filters that run next to each sensor.

A filter sees only its own modality's features. Fusion-aware filters learn
the FoS send labels; the uni-modal baseline learns the FoI bit directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datagen import Dataset, FrameSet
from .errors import ConfigError, ShapeError, UsageError
from .foslabeler import FosRecords
from .nncore import MlpModel, MlpSpec, TrainConfig, forward, forward_batch, init_model, train
from .seeding import derive_seed


@dataclass
class NearSensorModel:
    modality: int
    model: MlpModel
    send_threshold: float = 0.5
    kind: str = "fusion_aware"

    def __post_init__(self):
        if self.model.spec.n_outputs != 1:
            raise ConfigError("a near-sensor model has exactly one output")
        if not 0 <= self.send_threshold <= 1:
            raise ConfigError("send_threshold must be in [0, 1]")

    def score(self, x: np.ndarray) -> np.ndarray:
        return forward_batch(self.model, x)[:, 0]


@dataclass
class FilterDecision:
    send: tuple[int, ...]
    scores: tuple[float, ...]


def near_sensor_spec(feature_width: int, hidden: Sequence[int] = (16,)) -> MlpSpec:
    return MlpSpec((feature_width, *hidden, 1))


def train_near_sensor(
    fos_records: FosRecords,
    dataset: Dataset,
    modality: int,
    spec: MlpSpec,
    tc: TrainConfig,
    send_threshold: float = 0.5,
) -> NearSensorModel:
    """Fit modality ``modality``'s filter to its FoS send labels on the training frames."""
    labels = fos_records.labels_for(dataset.train, modality)
    model = init_model(spec, derive_seed(tc.seed, "near", modality))
    model, _ = train(model, dataset.train.features[modality], labels.astype(np.float64), tc)
    return NearSensorModel(modality, model, send_threshold, "fusion_aware")


def train_unimodal_filter(
    dataset: Dataset,
    modality: int,
    spec: MlpSpec,
    tc: TrainConfig,
    send_threshold: float = 0.5,
) -> NearSensorModel:
    """Baseline filter: same architecture, trained on the FoI bit alone."""
    model = init_model(spec, derive_seed(tc.seed, "unimodal", modality))
    model, _ = train(model, dataset.train.features[modality], dataset.train.foi.astype(np.float64), tc)
    return NearSensorModel(modality, model, send_threshold, "unimodal")


def _check_models(models: Sequence[NearSensorModel], n_mod: int):
    if len(models) != n_mod:
        raise ShapeError(f"{len(models)} filters for {n_mod} modalities")
    for m, nm in enumerate(models):
        if nm.modality != m:
            raise ShapeError(f"filter {m} is registered for modality {nm.modality}")


def decide(models: Sequence[NearSensorModel], features: Sequence, thresholds=None) -> FilterDecision:
    """Independent per-modality thresholding for one frame."""
    _check_models(models, len(features))
    taus = [nm.send_threshold for nm in models] if thresholds is None else list(thresholds)
    scores = tuple(float(forward(nm.model, np.asarray(f, dtype=np.float64))[0]) for nm, f in zip(models, features))
    return FilterDecision(tuple(int(s >= t) for s, t in zip(scores, taus)), scores)


def filter_scores(models: Sequence[NearSensorModel], frames: FrameSet) -> np.ndarray:
    _check_models(models, frames.n_modalities)
    return np.stack([nm.score(frames.features[m]) for m, nm in enumerate(models)], axis=1)


def decide_frames(models: Sequence[NearSensorModel], frames: FrameSet, thresholds=None):
    """(send bits, scores), both (n_frames, n_modalities)."""
    scores = filter_scores(models, frames)
    taus = np.array([nm.send_threshold for nm in models] if thresholds is None else thresholds)
    return (scores >= taus[None, :]).astype(np.int8), scores


@dataclass
class SweepRow:
    tau: float
    send_rate: list[float]


def sweep_thresholds(models: Sequence[NearSensorModel], frames: FrameSet, grid) -> list[SweepRow]:
    grid = [float(t) for t in grid]
    if not grid:
        raise UsageError("threshold grid is empty")
    if any(not 0 <= t <= 1 for t in grid):
        raise UsageError("threshold grid values must lie in [0, 1]")
    scores = filter_scores(models, frames)
    return [SweepRow(t, [float(np.mean(scores[:, m] >= t)) for m in range(scores.shape[1])]) for t in grid]
