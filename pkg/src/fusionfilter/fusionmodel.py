"""Late-fusion multi-label classifier with zero-fill modality masking.

One extractor MLP per modality maps features to a ReLU embedding; the
embeddings (plus any auxiliary inputs, used by the compact edge model) are
concatenated and fed to a sigmoid head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .datagen import Dataset, FrameSet, stack_inputs
from .errors import ConfigError, DataError, ShapeError
from .nncore import (
    MlpModel,
    MlpSpec,
    TrainConfig,
    TrainLog,
    bce_loss,
    fit_adam,
    init_model,
    load_model,
    save_model,
)
from .seeding import derive_seed

FUSION_FORMAT = "fusionfilter.fusion/1"


@dataclass(frozen=True)
class FusionSpec:
    extractors: tuple[MlpSpec, ...]
    head: MlpSpec
    decision_threshold: float = 0.5
    n_aux_inputs: int = 0

    def __post_init__(self):
        object.__setattr__(self, "extractors", tuple(self.extractors))
        if not self.extractors:
            raise ConfigError("a fusion model needs at least one extractor")
        for ex in self.extractors:
            if ex.output_activation != "relu":
                raise ConfigError("extractor embeddings must use a relu output layer")
        if self.head.output_activation != "sigmoid":
            raise ConfigError("the fusion head must end in a sigmoid layer")
        need = sum(ex.n_outputs for ex in self.extractors) + self.n_aux_inputs
        if self.head.n_inputs != need:
            raise ConfigError(
                f"head input width {self.head.n_inputs} != sum of embeddings + aux ({need})"
            )
        if not 0 <= self.decision_threshold <= 1:
            raise ConfigError("decision_threshold must be in [0, 1]")

    @property
    def n_modalities(self) -> int:
        return len(self.extractors)

    @property
    def n_labels(self) -> int:
        return self.head.n_outputs

    @property
    def n_params(self) -> int:
        return sum(ex.n_params for ex in self.extractors) + self.head.n_params

    def to_dict(self) -> dict:
        return {
            "extractors": [list(ex.layer_widths) for ex in self.extractors],
            "head": list(self.head.layer_widths),
            "decision_threshold": self.decision_threshold,
            "n_aux_inputs": self.n_aux_inputs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionSpec":
        return cls(
            tuple(MlpSpec(w, output_activation="relu") for w in d["extractors"]),
            MlpSpec(d["head"]),
            d.get("decision_threshold", 0.5),
            d.get("n_aux_inputs", 0),
        )


def make_fusion_spec(
    feature_widths: Sequence[int],
    n_labels: int,
    extractor_hidden: Sequence[int] = (64,),
    embedding_width: int = 32,
    head_hidden: Sequence[int] = (32,),
    n_aux_inputs: int = 0,
    decision_threshold: float = 0.5,
) -> FusionSpec:
    """Build a spec from widths; the default is [F, 64, 32] per modality and a [64, 32, L] head."""
    extractors = tuple(
        MlpSpec((f, *extractor_hidden, embedding_width), output_activation="relu")
        for f in feature_widths
    )
    head_in = embedding_width * len(feature_widths) + n_aux_inputs
    head = MlpSpec((head_in, *head_hidden, n_labels))
    return FusionSpec(extractors, head, decision_threshold, n_aux_inputs)


class FusionModel:
    def __init__(self, spec: FusionSpec, extractors: Sequence[MlpModel], head: MlpModel):
        if len(extractors) != spec.n_modalities:
            raise ConfigError("extractor count does not match spec")
        for ex, es in zip(extractors, spec.extractors):
            if ex.spec != es:
                raise ConfigError("extractor spec mismatch")
        if head.spec != spec.head:
            raise ConfigError("head spec mismatch")
        self.spec = spec
        self.extractors = list(extractors)
        self.head = head

    @property
    def n_params(self) -> int:
        return sum(ex.n_params for ex in self.extractors) + self.head.n_params

    def flat(self) -> np.ndarray:
        return np.concatenate([ex.params for ex in self.extractors] + [self.head.params])

    def with_flat(self, params: np.ndarray) -> "FusionModel":
        parts = _split_flat(self.spec, params)
        exs = [ex.with_params(p) for ex, p in zip(self.extractors, parts[:-1])]
        return FusionModel(self.spec, exs, self.head.with_params(parts[-1]))

    def same_parameters(self, other: "FusionModel") -> bool:
        return self.spec == other.spec and np.array_equal(self.flat(), other.flat())


def fusion_param_count(model_or_spec) -> int:
    spec = model_or_spec.spec if isinstance(model_or_spec, FusionModel) else model_or_spec
    return spec.n_params


def _split_flat(spec: FusionSpec, params: np.ndarray) -> list[np.ndarray]:
    out = []
    p = 0
    for s in (*spec.extractors, spec.head):
        out.append(params[p:p + s.n_params])
        p += s.n_params
    if p != params.size:
        raise ShapeError(f"flat parameter vector has {params.size} entries, spec needs {p}")
    return out


def init_fusion(spec: FusionSpec, seed: int) -> FusionModel:
    exs = [init_model(s, derive_seed(seed, "init", "extractor", m)) for m, s in enumerate(spec.extractors)]
    head = init_model(spec.head, derive_seed(seed, "init", "head"))
    return FusionModel(spec, exs, head)


class _FusionNet:
    """Forward/backward over a flat parameter vector for a fixed spec."""

    def __init__(self, spec: FusionSpec, max_batch: int):
        self.spec = spec
        self.ex_widths = [np.asarray(s.layer_widths, dtype=np.int64) for s in spec.extractors]
        self.head_widths = np.asarray(spec.head.layer_widths, dtype=np.int64)
        self.max_batch = max(max_batch, 1)
        self.ex_acts = [np.empty(self.max_batch * sum(s.layer_widths[1:])) for s in spec.extractors]
        self.head_acts = np.empty(self.max_batch * sum(spec.head.layer_widths[1:]))
        self.emb_cols = []
        c = 0
        for s in spec.extractors:
            self.emb_cols.append((c, c + s.n_outputs))
            c += s.n_outputs
        self.aux_cols = (c, c + spec.n_aux_inputs)

    def _ensure(self, batch):
        if batch > self.max_batch:
            self.__init__(self.spec, batch)

    def forward(self, params, xs, aux):
        batch = xs[0].shape[0]
        self._ensure(batch)
        parts = _split_flat(self.spec, params)
        H = np.empty((batch, self.spec.head.n_inputs))
        for m, x in enumerate(xs):
            emb = kernels.mlp_forward(parts[m], self.ex_widths[m], True, x, self.ex_acts[m])
            a, b = self.emb_cols[m]
            H[:, a:b] = emb
        if self.spec.n_aux_inputs:
            H[:, self.aux_cols[0]:self.aux_cols[1]] = aux
        scores = kernels.mlp_forward(parts[-1], self.head_widths, False, H, self.head_acts)
        return H, scores

    def loss_grad(self, params, xs, aux, Y, grad):
        H, scores = self.forward(params, xs, aux)
        loss = bce_loss(scores, Y)
        dz = (scores - Y) / scores.size
        parts = _split_flat(self.spec, params)
        gparts = _split_flat(self.spec, grad)
        dH = np.empty_like(H)
        kernels.mlp_backward(parts[-1], self.head_widths, H, self.head_acts, dz, gparts[-1], dH)
        for m, x in enumerate(xs):
            a, b = self.emb_cols[m]
            dz_m = np.ascontiguousarray(dH[:, a:b])
            dz_m *= H[:, a:b] > 0.0
            kernels.mlp_backward(parts[m], self.ex_widths[m], x, self.ex_acts[m], dz_m, gparts[m])
        return loss


def _check_inputs(spec: FusionSpec, xs, aux):
    if len(xs) != spec.n_modalities:
        raise ShapeError(f"expected {spec.n_modalities} modalities, got {len(xs)}")
    n = xs[0].shape[0]
    for x, s in zip(xs, spec.extractors):
        if x.ndim != 2 or x.shape[1] != s.n_inputs or x.shape[0] != n:
            raise ShapeError(f"modality input shape {x.shape} does not fit extractor {s.layer_widths}")
    if spec.n_aux_inputs:
        if aux is None or aux.shape != (n, spec.n_aux_inputs):
            raise ShapeError(f"expected aux inputs of shape {(n, spec.n_aux_inputs)}")


def fit_fusion(
    model: FusionModel, xs: Sequence[np.ndarray], aux, Y, tc: TrainConfig
) -> tuple[FusionModel, TrainLog]:
    """Train extractors and head end to end on BCE; returns the best-validation snapshot."""
    xs = [np.ascontiguousarray(x, dtype=np.float64) for x in xs]
    aux = None if aux is None else np.ascontiguousarray(aux, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    _check_inputs(model.spec, xs, aux)
    if Y.shape != (xs[0].shape[0], model.spec.n_labels):
        raise ConfigError(f"label shape {Y.shape} does not fit {model.spec.n_labels} outputs")
    if Y.shape[0] == 0:
        raise ConfigError("training set is empty")
    net = _FusionNet(model.spec, tc.batch_size)

    def loss_grad(params, idx, grad):
        a = None if aux is None else aux[idx]
        return net.loss_grad(params, [x[idx] for x in xs], a, Y[idx], grad)

    def eval_loss(params, idx):
        a = None if aux is None else aux[idx]
        _, scores = _FusionNet(model.spec, idx.size).forward(params, [x[idx] for x in xs], a)
        return bce_loss(scores, Y[idx])

    best, log = fit_adam(model.flat(), Y.shape[0], loss_grad, eval_loss, tc)
    return model.with_flat(best), log


def train_server_fusion(dataset: Dataset, spec: FusionSpec, tc: TrainConfig) -> FusionModel:
    if spec.n_labels != dataset.train.labels.shape[1]:
        raise ConfigError(
            f"spec predicts {spec.n_labels} labels, dataset has {dataset.train.labels.shape[1]}"
        )
    if spec.n_aux_inputs:
        raise ConfigError("the server model takes no auxiliary inputs")
    if spec.n_modalities != dataset.train.n_modalities:
        raise ConfigError("spec and dataset disagree on the number of modalities")
    model = init_fusion(spec, derive_seed(tc.seed, "server"))
    model, _ = fit_fusion(model, dataset.train.features, None, dataset.train.labels, tc)
    return model


def predict_scores(model: FusionModel, xs: Sequence[np.ndarray], aux=None) -> np.ndarray:
    """Scores for a batch given per-modality (n, F_m) arrays (already masked)."""
    xs = [np.ascontiguousarray(x, dtype=np.float64) for x in xs]
    if aux is not None:
        aux = np.ascontiguousarray(aux, dtype=np.float64)
    _check_inputs(model.spec, xs, aux)
    if xs[0].shape[0] == 0:
        return np.zeros((0, model.spec.n_labels))
    _, scores = _FusionNet(model.spec, xs[0].shape[0]).forward(model.flat(), xs, aux)
    return np.array(scores)


def predict_frames(model: FusionModel, frames: FrameSet, keep=None, aux=None):
    """(scores, decisions) for every frame; ``keep`` as in :func:`stack_inputs`."""
    scores = predict_scores(model, stack_inputs(frames, keep), aux)
    return scores, threshold(scores, model.spec.decision_threshold)


def threshold(scores: np.ndarray, tau: float) -> np.ndarray:
    return (scores >= tau).astype(np.int8)


def predict(model: FusionModel, features: Sequence, mask: Sequence[int] | None = None, aux=None):
    """Score one frame. Modalities with ``mask[m] == 0`` are zero-filled."""
    if len(features) != model.spec.n_modalities:
        raise ShapeError(f"expected {model.spec.n_modalities} modality vectors, got {len(features)}")
    if mask is None:
        mask = [1] * model.spec.n_modalities
    if len(mask) != model.spec.n_modalities:
        raise ShapeError(f"mask width {len(mask)} != {model.spec.n_modalities} modalities")
    xs = []
    for f, keep in zip(features, mask):
        f = np.asarray(f, dtype=np.float64)
        if f.ndim != 1:
            raise ShapeError("predict() takes one frame; use predict_frames for batches")
        xs.append((f if keep else np.zeros_like(f))[None, :])
    a = None if aux is None else np.asarray(aux, dtype=np.float64)[None, :]
    scores = predict_scores(model, xs, a)[0]
    return scores, threshold(scores, model.spec.decision_threshold)


def decision_equal(d1, d2) -> int:
    a = np.asarray(d1)
    b = np.asarray(d2)
    if a.shape != b.shape:
        raise ShapeError(f"decision widths differ: {a.shape} vs {b.shape}")
    return int(np.array_equal(a, b))


# -- serialization: a JSON manifest next to one binary file per component ----


def save_fusion(model: FusionModel, directory, stem: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for m, ex in enumerate(model.extractors):
        name = f"{stem}.extractor{m}.mlp"
        save_model(ex, directory / name)
        files.append(name)
    head_name = f"{stem}.head.mlp"
    save_model(model.head, directory / head_name)
    manifest = {
        "format": FUSION_FORMAT,
        "spec": model.spec.to_dict(),
        "extractors": files,
        "head": head_name,
    }
    path = directory / f"{stem}.fusion.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_fusion(path) -> FusionModel:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from None
    if manifest.get("format") != FUSION_FORMAT:
        raise DataError(f"{path}: not a {FUSION_FORMAT} manifest")
    spec = FusionSpec.from_dict(manifest["spec"])
    exs = [load_model(path.parent / f) for f in manifest["extractors"]]
    head = load_model(path.parent / manifest["head"])
    return FusionModel(spec, exs, head)


def component_files(path) -> list[Path]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from None
    return [path.parent / f for f in manifest["extractors"]] + [path.parent / manifest["head"]]
