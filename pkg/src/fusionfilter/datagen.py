"""Seeded synthetic multimodal streams.

Each label owns a fixed random template per modality. A frame of interest
draws a nonempty label subset and embeds the sum of its templates into both
modalities (with probability ``redundancy``) or into exactly one uniformly
chosen modality. Gaussian noise is added everywhere; a modality may then be
overwritten with pure noise (``corruption_rate``). Frames that are not of
interest are pure noise with all-zero labels.

Templates depend only on ``GenConfig.seed``, so a stream drawn with another
``stream_seed`` or prevalence stays compatible with models trained on the
original dataset.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, ShapeError, UsageError
from .seeding import derive_seed

DEFAULT_MODALITY_NAMES = ("rgb", "depth")
DATASET_FORMAT = "fusionfilter.dataset/1"


@dataclass(frozen=True)
class GenConfig:
    n_frames: int = 5000
    n_modalities: int = 2
    feature_width: int = 16
    n_labels: int = 6
    foi_prevalence: float = 0.10
    redundancy: float = 0.7
    corruption_rate: float = 0.05
    noise_sigma: float = 0.5
    signal_scale: float = 0.5
    label_density: float = 0.3
    train_fraction: float = 0.80
    seed: int = 0
    modality_names: tuple[str, ...] = ()

    def __post_init__(self):
        names = tuple(self.modality_names) or _default_names(self.n_modalities)
        object.__setattr__(self, "modality_names", names)
        if self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")
        if self.n_modalities < 1:
            raise ConfigError("n_modalities must be >= 1")
        if len(names) != self.n_modalities or len(set(names)) != len(names):
            raise ConfigError(f"need {self.n_modalities} distinct modality names, got {names}")
        if self.feature_width < 1:
            raise ConfigError("feature_width must be >= 1")
        if self.n_labels < 1:
            raise ConfigError("n_labels must be >= 1")
        if not 0 < self.foi_prevalence < 1:
            raise ConfigError("foi_prevalence must be in (0, 1)")
        if not 0 <= self.redundancy <= 1:
            raise ConfigError("redundancy must be in [0, 1]")
        if not 0 <= self.corruption_rate < 1:
            raise ConfigError("corruption_rate must be in [0, 1)")
        if self.noise_sigma < 0 or self.signal_scale < 0:
            raise ConfigError("noise_sigma and signal_scale must be >= 0")
        if not 0 < self.label_density <= 1:
            raise ConfigError("label_density must be in (0, 1]")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modality_names"] = list(self.modality_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "modality_names" in d:
            d["modality_names"] = tuple(d["modality_names"])
        return cls(**d)


def _default_names(n: int) -> tuple[str, ...]:
    if n <= len(DEFAULT_MODALITY_NAMES):
        return DEFAULT_MODALITY_NAMES[:n]
    return DEFAULT_MODALITY_NAMES + tuple(f"m{i}" for i in range(len(DEFAULT_MODALITY_NAMES), n))


@dataclass
class Frame:
    frame_id: int
    features: list[np.ndarray]
    labels: np.ndarray
    foi: int
    corrupted: np.ndarray
    signal: np.ndarray = field(default=None, repr=False)


@dataclass
class FrameSet:
    """A block of frames stored column-wise.

    ``features[m]`` is an (n, feature_width) array for modality ``m``;
    ``signal`` is generator metadata: which modalities carry label signal.
    """

    frame_id: np.ndarray
    features: list[np.ndarray]
    labels: np.ndarray
    foi: np.ndarray
    corrupted: np.ndarray
    signal: np.ndarray

    def __len__(self) -> int:
        return int(self.frame_id.size)

    def __getitem__(self, i: int) -> Frame:
        return Frame(
            int(self.frame_id[i]),
            [f[i].copy() for f in self.features],
            self.labels[i].copy(),
            int(self.foi[i]),
            self.corrupted[i].copy(),
            self.signal[i].copy(),
        )

    def __iter__(self) -> Iterator[Frame]:
        for i in range(len(self)):
            yield self[i]

    @property
    def n_modalities(self) -> int:
        return len(self.features)

    def subset(self, idx) -> "FrameSet":
        idx = np.asarray(idx)
        return FrameSet(
            self.frame_id[idx],
            [np.ascontiguousarray(f[idx]) for f in self.features],
            self.labels[idx],
            self.foi[idx],
            self.corrupted[idx],
            self.signal[idx],
        )

    @classmethod
    def from_frames(cls, frames) -> "FrameSet":
        frames = list(frames)
        if not frames:
            raise UsageError("no frames")
        n_mod = len(frames[0].features)
        sig = [f.signal if f.signal is not None else np.zeros(n_mod, dtype=np.int8) for f in frames]
        return cls(
            np.array([f.frame_id for f in frames], dtype=np.int64),
            [np.array([f.features[m] for f in frames], dtype=np.float64) for m in range(n_mod)],
            np.array([f.labels for f in frames], dtype=np.int8),
            np.array([f.foi for f in frames], dtype=np.int8),
            np.array([f.corrupted for f in frames], dtype=np.int8),
            np.array(sig, dtype=np.int8),
        )


@dataclass
class Dataset:
    train: FrameSet
    test: FrameSet
    config: GenConfig


def label_templates(config: GenConfig) -> np.ndarray:
    """(n_modalities, n_labels, feature_width) template array fixed by ``config.seed``."""
    rng = np.random.default_rng(derive_seed(config.seed, "templates"))
    return rng.normal(
        0.0, config.signal_scale, size=(config.n_modalities, config.n_labels, config.feature_width)
    )


def generate_frames(config: GenConfig, n_frames: int, stream_seed, first_id: int = 0) -> FrameSet:
    """Draw ``n_frames`` frames under ``config``'s templates from an independent stream."""
    templates = label_templates(config)
    rng = np.random.default_rng(derive_seed(config.seed, "stream", stream_seed))
    n, M, L, F = n_frames, config.n_modalities, config.n_labels, config.feature_width

    foi = rng.random(n) < config.foi_prevalence
    labels = np.zeros((n, L), dtype=np.int8)
    rows = np.flatnonzero(foi)
    pending = rows
    # redraw empty subsets until every frame of interest has a label
    while pending.size:
        draw = rng.random((pending.size, L)) < config.label_density
        labels[pending] = draw
        pending = pending[~draw.any(axis=1)]

    both = rng.random(n) < config.redundancy
    which = rng.integers(0, M, size=n)
    signal = np.zeros((n, M), dtype=np.int8)
    signal[foi & both] = 1
    single = foi & ~both
    signal[np.flatnonzero(single), which[single]] = 1

    features = []
    for m in range(M):
        x = rng.normal(0.0, config.noise_sigma, size=(n, F))
        x += signal[:, m:m + 1] * (labels @ templates[m])
        features.append(x)

    corrupted = (rng.random((n, M)) < config.corruption_rate).astype(np.int8)
    for m in range(M):
        hit = np.flatnonzero(corrupted[:, m])
        features[m][hit] = rng.normal(0.0, config.noise_sigma, size=(hit.size, F))

    return FrameSet(
        np.arange(first_id, first_id + n, dtype=np.int64),
        features,
        labels,
        foi.astype(np.int8),
        corrupted,
        signal,
    )


def generate(config: GenConfig) -> Dataset:
    frames = generate_frames(config, config.n_frames, "dataset")
    n_train = int(round(config.n_frames * config.train_fraction))
    idx = np.arange(config.n_frames)
    return Dataset(frames.subset(idx[:n_train]), frames.subset(idx[n_train:]), config)


def generate_stream(config: GenConfig, prevalence: float, n_frames: int, stream_seed) -> FrameSet:
    """A fresh test stream at another FoI prevalence, sharing ``config``'s templates."""
    cfg = replace(config, foi_prevalence=prevalence)
    return generate_frames(cfg, n_frames, ("scenario", stream_seed))


def empirical_foi_rate(frames) -> float:
    foi = frames.foi if isinstance(frames, FrameSet) else np.array([f.foi for f in frames])
    if len(foi) == 0:
        raise UsageError("empirical_foi_rate of an empty frame sequence")
    return float(np.mean(foi))


def stack_inputs(frames: FrameSet, keep=None) -> list[np.ndarray]:
    """Per-modality inputs with zero-fill applied where ``keep`` is 0.

    ``keep`` is None (keep everything), a length-M bit vector applied to every
    frame, or an (n, M) per-frame bit matrix.
    """
    if keep is None:
        return frames.features
    keep = np.asarray(keep)
    out = []
    for m, f in enumerate(frames.features):
        col = keep[m] if keep.ndim == 1 else keep[:, m]
        if keep.ndim == 1:
            out.append(f if col else np.zeros_like(f))
        else:
            if col.shape[0] != f.shape[0]:
                raise ShapeError("per-frame mask rows do not match frame count")
            out.append(f * col[:, None].astype(np.float64))
    return out


# -- line-delimited export --------------------------------------------------
#
# First line: {"format": "fusionfilter.dataset/1", "config": {...}}
# Then one JSON object per frame:
#   {"frame_id": int, "split": "train"|"test",
#    "features": {modality_name: [float, ...]}, "labels": [0|1, ...],
#    "foi": 0|1, "corrupted": [0|1, ...], "signal": [0|1, ...]}
# Floats are written with repr precision, so a round trip is exact.


def _frame_record(fs: FrameSet, i: int, split: str, names) -> dict:
    return {
        "frame_id": int(fs.frame_id[i]),
        "split": split,
        "features": {name: fs.features[m][i].tolist() for m, name in enumerate(names)},
        "labels": fs.labels[i].tolist(),
        "foi": int(fs.foi[i]),
        "corrupted": fs.corrupted[i].tolist(),
        "signal": fs.signal[i].tolist(),
    }


def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    names = dataset.config.modality_names
    with path.open("w") as fh:
        fh.write(json.dumps({"format": DATASET_FORMAT, "config": dataset.config.to_dict()}) + "\n")
        for split, fs in (("train", dataset.train), ("test", dataset.test)):
            for i in range(len(fs)):
                fh.write(json.dumps(_frame_record(fs, i, split, names)) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        with path.open() as fh:
            header = json.loads(fh.readline())
            if header.get("format") != DATASET_FORMAT:
                raise DataError(f"{path}: not a {DATASET_FORMAT} file")
            config = GenConfig.from_dict(header["config"])
            names = config.modality_names
            parts = {"train": [], "test": []}
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                feats = [np.asarray(rec["features"][n], dtype=np.float64) for n in names]
                if any(f.size != config.feature_width for f in feats):
                    raise DataError(f"frame {rec['frame_id']}: feature width mismatch")
                parts[rec["split"]].append(
                    Frame(
                        rec["frame_id"],
                        feats,
                        np.asarray(rec["labels"], dtype=np.int8),
                        int(rec["foi"]),
                        np.asarray(rec["corrupted"], dtype=np.int8),
                        np.asarray(rec.get("signal", [0] * len(names)), dtype=np.int8),
                    )
                )
        return Dataset(FrameSet.from_frames(parts["train"]), FrameSet.from_frames(parts["test"]), config)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed dataset file: {exc}") from None
