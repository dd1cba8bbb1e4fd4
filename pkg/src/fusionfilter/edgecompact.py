"""Compact edge fusion models fed with near-sensor scores.

The edge model repeats the server's late-fusion architecture at a fraction of
its size. The score-injected variant appends one input per modality to the
fusion head, fed with the near-sensor score; the baseline gets a wider head
instead, so both variants carry the same parameter budget to within 1%.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import Dataset, FrameSet, stack_inputs
from .errors import ConfigError, DataError, UsageError
from .foslabeler import FosRecords
from .fusionmodel import (
    FusionModel,
    FusionSpec,
    fit_fusion,
    init_fusion,
    load_fusion,
    predict_scores,
    save_fusion,
    threshold,
)
from .metrics import macro_f1, quality_loss
from .nearsensor import NearSensorModel, decide_frames
from .nncore import MlpSpec, TrainConfig
from .seeding import derive_seed

PARAM_MATCH_TOLERANCE = 0.01
SCORE_WIRINGS = ("always", "sent_only")


@dataclass
class EdgeFusionModel:
    model: FusionModel
    uses_scores: bool
    size_ratio: float
    target_ratio: float
    score_wiring: str = "always"
    val_loss: float = float("nan")

    @property
    def n_params(self) -> int:
        return self.model.n_params


@dataclass(frozen=True)
class EnergyPerParamMap:
    joules_per_parameter: float
    reference_server_energy: float = 0.0

    def __post_init__(self):
        if not self.joules_per_parameter > 0:
            raise ConfigError("joules_per_parameter must be > 0")

    @classmethod
    def calibrated(cls, server_params: int, server_energy: float) -> "EnergyPerParamMap":
        """Linear map that sends the server's parameter count to ``server_energy``."""
        return cls(server_energy / server_params, server_energy)


def params_to_energy(count: int, energy_map: EnergyPerParamMap) -> float:
    if count < 0:
        raise ConfigError("parameter count must be >= 0")
    return count * energy_map.joules_per_parameter


def _head_params(n_in: int, hidden: int, n_out: int) -> int:
    if hidden == 0:
        return n_in * n_out + n_out
    return n_in * hidden + hidden + hidden * n_out + n_out


def _scaled_extractors(server_spec: FusionSpec, k: float) -> list[MlpSpec]:
    out = []
    for ex in server_spec.extractors:
        w = ex.layer_widths
        out.append(MlpSpec((w[0], *(max(1, round(x * k)) for x in w[1:])), output_activation="relu"))
    return out


def _head_hidden(server_spec: FusionSpec) -> int:
    hidden = server_spec.head.layer_widths[1:-1]
    return hidden[0] if hidden else 0


def edge_pair_specs(server_spec: FusionSpec, size_ratio: float) -> tuple[FusionSpec, FusionSpec]:
    """(score-injected spec, baseline spec) at ``size_ratio`` of the server's parameters.

    All hidden widths (extractors and head) are scaled by one common factor,
    solved so the score-injected model lands nearest the target; input
    widths stay fixed, which is why the factor is not simply sqrt(ratio).
    The head keeps at most one hidden layer. Its width is then searched
    jointly for both variants so the baseline matches the score-injected
    model within 1%. A hidden width of 0 means a single linear head layer.
    """
    if not 0 < size_ratio <= 1:
        raise ConfigError("size_ratio must be in (0, 1]")
    n_mod = server_spec.n_modalities
    n_out = server_spec.n_labels
    target = size_ratio * server_spec.n_params
    h_server = _head_hidden(server_spec)

    def total(k):
        exs = _scaled_extractors(server_spec, k)
        emb = sum(e.n_outputs for e in exs)
        h = round(h_server * k)
        return sum(e.n_params for e in exs) + _head_params(emb + n_mod, h, n_out)

    ks = np.linspace(1e-3, 1.0, 2000)
    k = float(min(ks, key=lambda x: (abs(total(x) - target), -x)))
    extractors = _scaled_extractors(server_spec, k)
    ext_params = sum(e.n_params for e in extractors)
    emb = sum(e.n_outputs for e in extractors)

    best = None
    limit = max(2 * h_server, 8) + 8
    for h in range(0, limit):
        p_with = ext_params + _head_params(emb + n_mod, h, n_out)
        gap, hb = min(
            (abs(ext_params + _head_params(emb, hb, n_out) - p_with), hb)
            for hb in range(0, 2 * limit)
        )
        if gap > PARAM_MATCH_TOLERANCE * p_with:
            continue
        key = (abs(p_with - target), h)
        if best is None or key < best[0]:
            best = (key, h, hb)
    if best is None:
        raise ConfigError(f"no parameter-matched head pair within 1% at size_ratio={size_ratio}")
    _, h, hb = best
    head_with = MlpSpec((emb + n_mod, *((h,) if h else ()), n_out))
    head_base = MlpSpec((emb, *((hb,) if hb else ()), n_out))
    thr = server_spec.decision_threshold
    return (
        FusionSpec(tuple(extractors), head_with, thr, n_mod),
        FusionSpec(tuple(extractors), head_base, thr, 0),
    )


def edge_inputs(
    near_models: Sequence[NearSensorModel],
    frames: FrameSet,
    uses_scores: bool,
    score_wiring: str = "always",
):
    """(masked per-modality features, aux score matrix or None) as seen at the edge."""
    if score_wiring not in SCORE_WIRINGS:
        raise ConfigError(f"score_wiring must be one of {SCORE_WIRINGS}")
    send, scores = decide_frames(near_models, frames)
    xs = stack_inputs(frames, send)
    if not uses_scores:
        return xs, None
    aux = scores if score_wiring == "always" else scores * send
    return xs, aux


def train_edge_fusion(
    dataset: Dataset,
    fos_records: FosRecords | None,
    near_models: Sequence[NearSensorModel],
    spec: FusionSpec,
    tc: TrainConfig,
    uses_scores: bool,
    server_params: int | None = None,
    score_wiring: str = "always",
    score_noise_seed: int | None = None,
    target_ratio: float | None = None,
) -> EdgeFusionModel:
    """Train one edge variant on filtered training frames against the original labels.

    Near-sensor models are only evaluated, never updated. With
    ``score_noise_seed`` the injected scores are replaced by uniform noise
    during training (ablation control).
    """
    if uses_scores != bool(spec.n_aux_inputs):
        raise ConfigError("uses_scores must agree with the FusionSpec's auxiliary input count")
    if uses_scores and spec.n_aux_inputs != len(near_models):
        raise ConfigError("need one score slot per near-sensor model")
    if fos_records is not None and len(fos_records) != len(dataset.train):
        raise ConfigError("FoS records do not cover the training split")
    xs, aux = edge_inputs(near_models, dataset.train, uses_scores, score_wiring)
    if aux is not None and score_noise_seed is not None:
        aux = np.random.default_rng(derive_seed(score_noise_seed, "score-noise")).random(aux.shape)
    # the same init seed for both variants: extractors coincide, heads differ
    model = init_fusion(spec, derive_seed(tc.seed, "edge"))
    model, log = fit_fusion(model, xs, aux, dataset.train.labels, tc)
    ratio = model.n_params / server_params if server_params else float("nan")
    target = ratio if target_ratio is None else float(target_ratio)
    return EdgeFusionModel(model, uses_scores, ratio, target, score_wiring, log.best_val_loss)


def search_edge_fusion(dataset, fos_records, near_models, spec, tc, uses_scores, grid, **kwargs) -> EdgeFusionModel:
    """Train one variant per (batch_size, learning_rate) in ``grid``; keep the lowest validation loss.

    Ties go to the earlier grid entry, so the choice is deterministic.
    """
    best = None
    for batch_size, lr in grid:
        cand = train_edge_fusion(
            dataset,
            fos_records,
            near_models,
            spec,
            replace(tc, batch_size=batch_size, learning_rate=lr),
            uses_scores,
            **kwargs,
        )
        if best is None or cand.val_loss < best.val_loss:
            best = cand
    if best is None:
        raise UsageError("hyperparameter grid is empty")
    return best


def evaluate_edge(edge: EdgeFusionModel, near_models, frames: FrameSet) -> float:
    xs, aux = edge_inputs(near_models, frames, edge.uses_scores, edge.score_wiring)
    scores = predict_scores(edge.model, xs, aux)
    return macro_f1(threshold(scores, edge.model.spec.decision_threshold), frames.labels)


@dataclass
class CompactRun:
    """One seed's paired edge models plus what is needed to score them."""

    seed: int
    target_ratio: float
    with_scores: EdgeFusionModel
    baseline: EdgeFusionModel
    server_f1: float
    near_models: Sequence[NearSensorModel]
    test: FrameSet

    def __post_init__(self):
        a = self.with_scores.n_params
        b = self.baseline.n_params
        if abs(a - b) > PARAM_MATCH_TOLERANCE * max(a, b):
            raise ConfigError(f"edge pair not parameter-matched: {a} vs {b}")


@dataclass
class CompactRow:
    size_ratio: float
    params_with: int
    params_baseline: int
    energy_joules: float
    f1_with_scores: float
    f1_baseline: float
    f1_with_std: float
    f1_baseline_std: float
    quality_loss_with: float
    quality_loss_baseline: float
    quality_loss_with_std: float
    quality_loss_baseline_std: float
    seed_count: int


def quality_loss_curve(runs: Sequence[CompactRun], energy_map: EnergyPerParamMap) -> list[CompactRow]:
    """Aggregate paired runs per size ratio: mean and sample std over seeds."""
    by_ratio: dict[float, list[CompactRun]] = {}
    for r in runs:
        by_ratio.setdefault(r.target_ratio, []).append(r)
    rows = []
    for ratio in sorted(by_ratio, reverse=True):
        group = sorted(by_ratio[ratio], key=lambda r: r.seed)
        if len(group) < 2:
            raise UsageError(f"size_ratio {ratio}: need at least 2 seeds for a spread, got {len(group)}")
        f_with = np.array([evaluate_edge(r.with_scores, r.near_models, r.test) for r in group])
        f_base = np.array([evaluate_edge(r.baseline, r.near_models, r.test) for r in group])
        q_with = np.array([quality_loss(r.server_f1, f) for r, f in zip(group, f_with)])
        q_base = np.array([quality_loss(r.server_f1, f) for r, f in zip(group, f_base)])
        p_with = group[0].with_scores.n_params
        rows.append(
            CompactRow(
                size_ratio=ratio,
                params_with=p_with,
                params_baseline=group[0].baseline.n_params,
                energy_joules=params_to_energy(p_with, energy_map),
                f1_with_scores=float(f_with.mean()),
                f1_baseline=float(f_base.mean()),
                f1_with_std=float(f_with.std(ddof=1)),
                f1_baseline_std=float(f_base.std(ddof=1)),
                quality_loss_with=float(q_with.mean()),
                quality_loss_baseline=float(q_base.mean()),
                quality_loss_with_std=float(q_with.std(ddof=1)),
                quality_loss_baseline_std=float(q_base.std(ddof=1)),
                seed_count=len(group),
            )
        )
    return rows


COMPACT_COLUMNS = [
    "size_ratio",
    "params",
    "params_baseline",
    "energy_joules",
    "f1_with_scores",
    "f1_baseline",
    "quality_loss_with",
    "quality_loss_baseline",
    "quality_loss_with_std",
    "quality_loss_baseline_std",
    "seed_count",
]


def write_compact_csv(rows: Sequence[CompactRow], path, extra: dict | None = None) -> Path:
    extra = extra or {}
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPACT_COLUMNS + list(extra))
        for r in rows:
            w.writerow(
                [
                    repr(r.size_ratio),
                    r.params_with,
                    r.params_baseline,
                    repr(r.energy_joules),
                    repr(r.f1_with_scores),
                    repr(r.f1_baseline),
                    repr(r.quality_loss_with),
                    repr(r.quality_loss_baseline),
                    repr(r.quality_loss_with_std),
                    repr(r.quality_loss_baseline_std),
                    r.seed_count,
                ]
                + [extra[k] for k in extra]
            )
    return path


EDGE_FORMAT = "fusionfilter.edge/1"


def save_edge(edge: EdgeFusionModel, directory, stem: str) -> Path:
    """Fusion model files plus a small JSON record of the edge-only fields."""
    directory = Path(directory)
    fusion_path = save_fusion(edge.model, directory, stem)
    meta = {
        "format": EDGE_FORMAT,
        "fusion": fusion_path.name,
        "uses_scores": bool(edge.uses_scores),
        "size_ratio": edge.size_ratio,
        "target_ratio": edge.target_ratio,
        "score_wiring": edge.score_wiring,
        "val_loss": edge.val_loss,
    }
    path = directory / f"{stem}.edge.json"
    path.write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_edge(path) -> EdgeFusionModel:
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from None
    if meta.get("format") != EDGE_FORMAT:
        raise DataError(f"{path}: not a {EDGE_FORMAT} record")
    model = load_fusion(path.parent / meta["fusion"])
    return EdgeFusionModel(
        model,
        bool(meta["uses_scores"]),
        float(meta["size_ratio"]),
        float(meta["target_ratio"]),
        meta["score_wiring"],
        float(meta["val_loss"]),
    )
