"""Per-frame energy accounting for the four sensing pipelines.

conventional     sense everything, transmit every byte, run the server on every frame
compression      sense, compress each modality, transmit bytes x ratio, server on every frame
unimodal_filter  sense, run a near-sensor filter per modality, transmit only what the
                 filter keeps, run the server only on frames where something arrived
fusion_aware     same dataflow as unimodal_filter; only the filter decisions differ
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import GenConfig, generate_stream
from .errors import ConfigError, UsageError
from .nearsensor import NearSensorModel, decide_frames

PIPELINES = ("conventional", "compression", "unimodal_filter", "fusion_aware")
FILTER_PIPELINES = ("unimodal_filter", "fusion_aware")
COMPONENTS = ("sensing", "near_compute", "compression", "communication", "server_compute")


@dataclass(frozen=True)
class EnergyConfig:
    """Energy constants, in joules (per frame, per byte or per invocation).

    The shipped defaults are a calibration, not a measurement: an 8-bit VGA
    RGB frame and a VGA depth map (3:1 bytes), a Wi-Fi-class uplink at
    ~12.5 nJ/bit, an Edge-TPU-class near-sensor classifier and a desktop
    GPU server.
    """

    modality_names: tuple[str, ...] = ("rgb", "depth")
    bytes_per_frame: tuple[int, ...] = (921_600, 307_200)
    e_sense: tuple[float, ...] = (3.0e-4, 2.0e-4)
    e_nearsensor_infer: tuple[float, ...] = (1.0e-4, 1.0e-4)
    e_compress: tuple[float, ...] = (2.0e-3, 1.0e-3)
    compression_ratio: float = 0.5
    e_tx_per_byte: float = 1.0e-7
    e_server_infer: float = 2.0e-2
    foi_prevalence: float = 0.01

    def __post_init__(self):
        for name in ("modality_names", "bytes_per_frame", "e_sense", "e_nearsensor_infer", "e_compress"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        n = len(self.modality_names)
        for name in ("bytes_per_frame", "e_sense", "e_nearsensor_infer", "e_compress"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} needs one entry per modality ({n})")
        if any(int(b) != b or b < 0 for b in self.bytes_per_frame):
            raise ConfigError("bytes_per_frame must be nonnegative integers")
        values = (*self.e_sense, *self.e_nearsensor_infer, *self.e_compress, self.e_tx_per_byte, self.e_server_infer)
        if any(v < 0 for v in values):
            raise ConfigError("energy constants must be >= 0")
        if not 0 < self.compression_ratio <= 1:
            raise ConfigError("compression_ratio must be in (0, 1]")
        if not 0 < self.foi_prevalence < 1:
            raise ConfigError("foi_prevalence must be in (0, 1)")

    @property
    def n_modalities(self) -> int:
        return len(self.modality_names)

    def scaled(self, factor: float) -> "EnergyConfig":
        """Every energy constant multiplied by ``factor``."""
        return EnergyConfig(
            self.modality_names,
            self.bytes_per_frame,
            tuple(e * factor for e in self.e_sense),
            tuple(e * factor for e in self.e_nearsensor_infer),
            tuple(e * factor for e in self.e_compress),
            self.compression_ratio,
            self.e_tx_per_byte * factor,
            self.e_server_infer * factor,
            self.foi_prevalence,
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyConfig":
        return cls(**d)


@dataclass
class EnergyBreakdown:
    pipeline: str
    components: dict[str, float]
    n_frames: int
    frames_sent: int
    bytes_sent: float
    total: float = field(init=False)
    normalized_total: float = float("nan")

    def __post_init__(self):
        self.total = float(sum(self.components[c] for c in COMPONENTS))

    def fractions(self) -> dict[str, float]:
        """Share of each component in the total (pie-chart ready)."""
        if self.total == 0:
            return {c: 0.0 for c in COMPONENTS}
        return {c: self.components[c] / self.total for c in COMPONENTS}


def account_pipeline(pipeline: str, decisions, config: EnergyConfig, n_frames: int | None = None) -> EnergyBreakdown:
    """Total energy of ``pipeline`` over a stream.

    ``decisions`` is an (n_frames, n_modalities) send-bit matrix for the two
    filter pipelines and is ignored by the others.
    """
    if pipeline not in PIPELINES:
        raise ConfigError(f"unknown pipeline {pipeline!r}; expected one of {PIPELINES}")
    M = config.n_modalities
    if pipeline in FILTER_PIPELINES:
        if decisions is None:
            raise UsageError(f"pipeline {pipeline!r} needs per-frame filter decisions")
        send = np.asarray(decisions).astype(bool)
        if send.ndim != 2 or send.shape[1] != M:
            raise UsageError(f"decisions must be (n_frames, {M}), got {send.shape}")
        if n_frames is not None and send.shape[0] != n_frames:
            raise UsageError(f"{send.shape[0]} decision rows for {n_frames} frames")
        n_frames = send.shape[0]
    elif n_frames is None:
        if decisions is None:
            raise UsageError("n_frames is required when no decisions are given")
        n_frames = np.asarray(decisions).shape[0]
    if n_frames < 0:
        raise UsageError("n_frames must be >= 0")

    sensing = n_frames * sum(config.e_sense)
    near = 0.0
    comp = 0.0
    if pipeline == "conventional":
        n_bytes = n_frames * sum(config.bytes_per_frame)
        comm = config.e_tx_per_byte * n_bytes
        server_runs = n_frames
    elif pipeline == "compression":
        comp = n_frames * sum(config.e_compress)
        n_bytes = n_frames * sum(config.bytes_per_frame) * config.compression_ratio
        comm = config.e_tx_per_byte * n_bytes
        server_runs = n_frames
    else:
        near = n_frames * sum(config.e_nearsensor_infer)
        per_mod = send.sum(axis=0)
        n_bytes = sum(int(per_mod[m]) * int(config.bytes_per_frame[m]) for m in range(M))
        comm = config.e_tx_per_byte * n_bytes
        server_runs = int(np.count_nonzero(send.any(axis=1)))
    components = {
        "sensing": sensing,
        "near_compute": near,
        "compression": comp,
        "communication": comm,
        "server_compute": config.e_server_infer * server_runs,
    }
    return EnergyBreakdown(pipeline, components, int(n_frames), int(server_runs), float(n_bytes))


def account_all(decisions_by_pipeline: dict, config: EnergyConfig, n_frames: int) -> dict[str, EnergyBreakdown]:
    """All four pipelines, normalized to the conventional total."""
    out = {}
    for p in PIPELINES:
        out[p] = account_pipeline(p, decisions_by_pipeline.get(p), config, n_frames)
    base = out["conventional"].total
    for b in out.values():
        b.normalized_total = b.total / base if base > 0 else float("nan")
    return out


@dataclass
class ScenarioRecord:
    prevalence: float
    empirical_foi_rate: float
    breakdown: EnergyBreakdown

    @property
    def savings_ratio(self) -> float:
        return 1.0 / self.breakdown.normalized_total


def scenario_sweep(
    config: EnergyConfig,
    prevalences: Sequence[float],
    gen_config: GenConfig,
    fusion_filters: Sequence[NearSensorModel],
    unimodal_filters: Sequence[NearSensorModel],
    n_frames: int,
    stream_seed=0,
) -> list[ScenarioRecord]:
    """Regenerate a stream at each prevalence and account every pipeline on it."""
    if not prevalences:
        raise UsageError("prevalence list is empty")
    records = []
    for p in prevalences:
        if not 0 < p < 1:
            raise ConfigError(f"prevalence {p} outside (0, 1)")
        frames = generate_stream(gen_config, p, n_frames, stream_seed)
        fa, _ = decide_frames(fusion_filters, frames)
        uni, _ = decide_frames(unimodal_filters, frames)
        results = account_all({"fusion_aware": fa, "unimodal_filter": uni}, config, n_frames)
        rate = float(np.mean(frames.foi))
        for name in PIPELINES:
            records.append(ScenarioRecord(float(p), rate, results[name]))
    return records


def savings_table(records: Sequence[ScenarioRecord]) -> dict[float, dict[str, float]]:
    out: dict[float, dict[str, float]] = {}
    for r in records:
        out.setdefault(r.prevalence, {})[r.breakdown.pipeline] = r.savings_ratio
    return out


def energy_record(r: ScenarioRecord) -> dict:
    b = r.breakdown
    return {
        "prevalence": r.prevalence,
        "empirical_foi_rate": r.empirical_foi_rate,
        "pipeline": b.pipeline,
        "components": b.components,
        "fractions": b.fractions(),
        "total": b.total,
        "normalized_total": b.normalized_total,
        "savings_ratio": r.savings_ratio,
        "frames_sent": b.frames_sent,
        "bytes_sent": b.bytes_sent,
        "n_frames": b.n_frames,
    }


def write_energy_report(records: Sequence[ScenarioRecord], path, provenance: dict | None = None) -> Path:
    """Line-delimited JSON: one record per (prevalence, pipeline)."""
    path = Path(path)
    with path.open("w") as fh:
        for r in records:
            rec = energy_record(r)
            rec.update(provenance or {})
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


ENERGY_CSV_COLUMNS = ["prevalence", "pipeline", *COMPONENTS, "total", "normalized_total", "savings_ratio"]


def energy_cells(r: ScenarioRecord) -> list[str]:
    b = r.breakdown
    return (
        [repr(r.prevalence), b.pipeline]
        + [repr(float(b.components[c])) for c in COMPONENTS]
        + [repr(b.total), repr(b.normalized_total), repr(r.savings_ratio)]
    )


def write_energy_csv(records: Sequence[ScenarioRecord], path, extra: dict | None = None) -> Path:
    extra = extra or {}
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENERGY_CSV_COLUMNS + list(extra))
        for r in records:
            w.writerow(energy_cells(r) + [extra[k] for k in extra])
    return path
