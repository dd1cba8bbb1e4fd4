"""Experiment configuration: one versioned YAML document drives every stage.

Schema (version 1); every key is optional and falls back to the shipped
defaults in ``configs/default.yaml``::

    schema_version: 1
    output_dir: runs/default        # FUSIONFILTER_OUTPUT_DIR overrides
    seeds: [0, 1, 2, 3, 4]          # one dataset + model family per seed
    data:        GenConfig fields (seed excluded: it comes from ``seeds``)
    server:      {extractor_hidden, embedding_width, head_hidden, decision_threshold}
    near_sensor: {hidden, send_threshold}
    fos:         {mode, keep_priority}
    edge:        {size_ratios, score_wiring, search: {batch_size: [..], learning_rate: [..]}}
    train:       {server: TrainConfig, near_sensor: TrainConfig, edge: TrainConfig} (seed excluded)
    tradeoff:    {tau_grid, match_efficiencies}
    energy:      EnergyConfig fields + {prevalences, n_frames, joules_per_parameter}

``output_dir`` does not enter the config hash, so the same experiment written
to two directories carries the same provenance tag.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .datagen import GenConfig
from .edgecompact import SCORE_WIRINGS
from .energymodel import EnergyConfig
from .errors import ConfigError
from .foslabeler import FosPolicy
from .fusionmodel import FusionSpec, make_fusion_spec
from .nearsensor import near_sensor_spec
from .nncore import MlpSpec, TrainConfig

SCHEMA_VERSION = 1
OUTPUT_DIR_ENV = "FUSIONFILTER_OUTPUT_DIR"
TIERS = ("server", "near_sensor", "edge")

_SECTIONS = {
    "schema_version",
    "output_dir",
    "seeds",
    "data",
    "server",
    "near_sensor",
    "fos",
    "edge",
    "train",
    "tradeoff",
    "energy",
}


def default_document() -> dict:
    text = resources.files("fusionfilter").joinpath("configs/default.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {assignment!r}: {exc}") from None
    nested: Any = value
    for p in reversed(parts):
        nested = {p: nested}
    return _merge(doc, nested)


@dataclass(frozen=True)
class EdgeSearch:
    """Optional (batch size x learning rate) grid; the lowest validation loss wins."""

    batch_size: tuple[int, ...] = ()
    learning_rate: tuple[float, ...] = ()

    @property
    def enabled(self) -> bool:
        return bool(self.batch_size or self.learning_rate)


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...]
    data: GenConfig
    server_spec: FusionSpec
    near_spec: MlpSpec
    send_threshold: float
    fos: FosPolicy
    size_ratios: tuple[float, ...]
    score_wiring: str
    edge_search: EdgeSearch
    train: dict[str, TrainConfig]
    tau_grid: tuple[float, ...]
    match_efficiencies: tuple[float, ...]
    energy: EnergyConfig
    prevalences: tuple[float, ...]
    energy_n_frames: int
    joules_per_parameter: float
    output_dir: Path
    document: dict = field(repr=False, compare=False, default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.document)

    def tier(self, name: str, seed: int) -> TrainConfig:
        return replace(self.train[name], seed=seed)

    def dataset_config(self, seed: int) -> GenConfig:
        return replace(self.data, seed=seed)

    @property
    def bytes_per_frame(self) -> tuple[int, ...]:
        return self.energy.bytes_per_frame

    @property
    def modality_names(self) -> tuple[str, ...]:
        return self.data.modality_names


def _hashable(doc: dict) -> dict:
    d = copy.deepcopy(doc)
    d.pop("output_dir", None)
    return d


def config_hash(doc: dict) -> str:
    canon = json.dumps(_hashable(doc), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def section_hash(doc: dict, *keys: str, seed=None) -> str:
    """Hash of selected top-level sections (plus a seed); used for stage skipping."""
    part = {k: doc.get(k) for k in keys}
    part["seed"] = seed
    canon = json.dumps(part, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _tuple(x, name, typ=float) -> tuple:
    if not isinstance(x, (list, tuple)):
        raise ConfigError(f"{name} must be a list")
    try:
        return tuple(typ(v) for v in x)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a list of {typ.__name__}") from None


def _train_config(d: dict, name: str) -> TrainConfig:
    if "seed" in d:
        raise ConfigError(f"train.{name}.seed is not allowed; seeds come from the top-level seed list")
    try:
        return TrainConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"train.{name}: {exc}") from None


def build_config(doc: dict) -> ExperimentConfig:
    """Validate a full document (defaults already merged) into an :class:`ExperimentConfig`."""
    unknown = set(doc) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")
    seeds = _tuple(doc["seeds"], "seeds", int)
    if not seeds:
        raise ConfigError("seeds must be a nonempty list")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")

    data_d = {k: v for k, v in doc["data"].items() if v is not None}
    if "seed" in data_d:
        raise ConfigError("data.seed is not allowed; seeds come from the top-level seed list")
    try:
        data = GenConfig.from_dict(data_d)
    except TypeError as exc:
        raise ConfigError(f"data: {exc}") from None

    s = doc["server"]
    server_spec = make_fusion_spec(
        [data.feature_width] * data.n_modalities,
        data.n_labels,
        extractor_hidden=_tuple(s["extractor_hidden"], "server.extractor_hidden", int),
        embedding_width=int(s["embedding_width"]),
        head_hidden=_tuple(s["head_hidden"], "server.head_hidden", int),
        decision_threshold=float(s["decision_threshold"]),
    )
    if len(server_spec.head.layer_widths) > 3:
        raise ConfigError("server.head_hidden may hold at most one layer")

    n = doc["near_sensor"]
    near_spec = near_sensor_spec(data.feature_width, _tuple(n["hidden"], "near_sensor.hidden", int))
    send_threshold = float(n["send_threshold"])
    if not 0 <= send_threshold <= 1:
        raise ConfigError("near_sensor.send_threshold must be in [0, 1]")

    f = doc["fos"]
    prio = f.get("keep_priority")
    fos = FosPolicy(f["mode"], None if prio is None else _tuple(prio, "fos.keep_priority", int))
    fos.priority(data.n_modalities)
    if fos.mode == "table_verbatim" and data.n_modalities != 2:
        raise ConfigError("fos.mode table_verbatim needs exactly two modalities")

    e = doc["edge"]
    size_ratios = _tuple(e["size_ratios"], "edge.size_ratios")
    if not size_ratios or any(not 0 < r <= 1 for r in size_ratios):
        raise ConfigError("edge.size_ratios must be a nonempty list in (0, 1]")
    if e["score_wiring"] not in SCORE_WIRINGS:
        raise ConfigError(f"edge.score_wiring must be one of {SCORE_WIRINGS}")
    search_d = e.get("search") or {}
    search = EdgeSearch(
        _tuple(search_d.get("batch_size") or [], "edge.search.batch_size", int),
        _tuple(search_d.get("learning_rate") or [], "edge.search.learning_rate"),
    )

    train = {t: _train_config(dict(doc["train"][t]), t) for t in TIERS}

    t = doc["tradeoff"]
    grid = _tuple(t["tau_grid"], "tradeoff.tau_grid")
    if not grid or any(not 0 <= g <= 1 for g in grid):
        raise ConfigError("tradeoff.tau_grid must be a nonempty list in [0, 1]")
    if list(grid) != sorted(set(grid)):
        raise ConfigError("tradeoff.tau_grid must be strictly increasing")
    match = _tuple(t["match_efficiencies"], "tradeoff.match_efficiencies")
    if any(not 0 <= x <= 1 for x in match):
        raise ConfigError("tradeoff.match_efficiencies must lie in [0, 1]")

    en = dict(doc["energy"])
    prevalences = _tuple(en.pop("prevalences"), "energy.prevalences")
    if not prevalences or any(not 0 < p < 1 for p in prevalences):
        raise ConfigError("energy.prevalences must be a nonempty list in (0, 1)")
    n_frames = int(en.pop("n_frames"))
    if n_frames < 1:
        raise ConfigError("energy.n_frames must be >= 1")
    jpp = float(en.pop("joules_per_parameter"))
    if not jpp > 0:
        raise ConfigError("energy.joules_per_parameter must be > 0")
    en.setdefault("modality_names", list(data.modality_names))
    try:
        energy = EnergyConfig.from_dict(en)
    except TypeError as exc:
        raise ConfigError(f"energy: {exc}") from None
    if tuple(energy.modality_names) != data.modality_names:
        raise ConfigError("energy.modality_names must match data.modality_names")

    out = os.environ.get(OUTPUT_DIR_ENV) or doc["output_dir"]
    return ExperimentConfig(
        seeds=seeds,
        data=data,
        server_spec=server_spec,
        near_spec=near_spec,
        send_threshold=send_threshold,
        fos=fos,
        size_ratios=size_ratios,
        score_wiring=e["score_wiring"],
        edge_search=search,
        train=train,
        tau_grid=grid,
        match_efficiencies=match,
        energy=energy,
        prevalences=prevalences,
        energy_n_frames=n_frames,
        joules_per_parameter=jpp,
        output_dir=Path(out),
        document=doc,
    )


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the YAML file at ``path`` (if any), then ``key=value`` overrides."""
    doc = default_document()
    if path is not None:
        path = Path(path)
        try:
            user = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        doc = _merge(doc, user)
    for o in overrides:
        doc = apply_override(doc, o)
    return build_config(doc)
