"""Stage runner behind the command line.

Output layout under ``config.output_dir``::

    manifest.json
    models/seed_<s>/stages.json               stage -> input hash (for skipping)
    models/seed_<s>/server.fusion.json        + per-component .mlp files
    models/seed_<s>/fos.jsonl
    models/seed_<s>/near_<modality>.mlp       fusion-aware filters
    models/seed_<s>/unimodal_<modality>.mlp   FoI-trained baseline filters
    models/seed_<s>/edge_r<ratio>/{with_scores,baseline}.edge.json
    reports/*.csv, reports/energy.jsonl

Datasets are not stored: they are regenerated from the config and seed.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .config import ExperimentConfig
from .datagen import Dataset, generate
from .edgecompact import (
    CompactRow,
    CompactRun,
    EnergyPerParamMap,
    edge_pair_specs,
    load_edge,
    quality_loss_curve,
    save_edge,
    search_edge_fusion,
    train_edge_fusion,
    write_compact_csv,
)
from .energymodel import ENERGY_CSV_COLUMNS, ScenarioRecord, energy_cells, energy_record, scenario_sweep
from .errors import FusionFilterError, UsageError
from .foslabeler import build_fos_dataset, load_fos, save_fos
from .fusionmodel import FusionModel, load_fusion, predict_frames, save_fusion, train_server_fusion
from .metrics import (
    CurveComparison,
    build_tradeoff_curve,
    curve_cells,
    curve_header,
    interpolate_quality_loss,
    macro_f1,
)
from .nearsensor import NearSensorModel, train_near_sensor, train_unimodal_filter
from .nncore import load_model, save_model

log = logging.getLogger("fusionfilter")

MANIFEST_NAME = "manifest.json"
EDGE_VARIANTS = ("with_scores", "baseline")


@dataclass
class RunManifest:
    config_hash: str
    version: str
    models: dict[str, str] = field(default_factory=dict)
    reports: dict[str, str] = field(default_factory=dict)
    wall_clock: dict[str, float] = field(default_factory=dict)
    stages: dict[str, str] = field(default_factory=dict)
    backend: str = kernels.BACKEND  # informational, like the timings

    @property
    def digest(self) -> str:
        """Hash of what was produced; timings and trained/skipped status excluded."""
        body = {"config_hash": self.config_hash, "version": self.version, "models": self.models, "reports": self.reports}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def check_files(self, root: Path):
        for key, rel in {**self.models, **self.reports}.items():
            if not (root / rel).exists():
                raise FusionFilterError(f"manifest entry {key} points at missing file {rel}")

    def write(self, root: Path) -> Path:
        self.check_files(root)
        path = root / MANIFEST_NAME
        body = asdict(self)
        body["digest"] = self.digest
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, root: Path) -> "RunManifest | None":
        path = root / MANIFEST_NAME
        if not path.exists():
            return None
        body = json.loads(path.read_text())
        body.pop("digest", None)
        return cls(**body)


class Layout:
    def __init__(self, root: Path):
        self.root = Path(root)

    def seed_dir(self, seed: int) -> Path:
        return self.root / "models" / f"seed_{seed}"

    def server(self, seed: int) -> Path:
        return self.seed_dir(seed) / "server.fusion.json"

    def fos(self, seed: int) -> Path:
        return self.seed_dir(seed) / "fos.jsonl"

    def near(self, seed: int, name: str) -> Path:
        return self.seed_dir(seed) / f"near_{name}.mlp"

    def unimodal(self, seed: int, name: str) -> Path:
        return self.seed_dir(seed) / f"unimodal_{name}.mlp"

    def edge_dir(self, seed: int, ratio: float) -> Path:
        return self.seed_dir(seed) / f"edge_r{ratio:g}"

    def edge(self, seed: int, ratio: float, variant: str) -> Path:
        return self.edge_dir(seed, ratio) / f"{variant}.edge.json"

    def stages(self, seed: int) -> Path:
        return self.seed_dir(seed) / "stages.json"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def rel(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()


@contextlib.contextmanager
def _stage(tag: str):
    """Re-raise any failure with the stage named in the message."""
    try:
        yield
    except FusionFilterError as exc:
        raise type(exc)(f"[{tag}] {exc}") from exc
    except Exception as exc:
        raise FusionFilterError(f"[{tag}] internal error: {exc!r}") from exc


def _hash(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


def _stage_hashes(cfg: ExperimentConfig, seed: int) -> dict[str, str]:
    doc = cfg.document
    server = _hash("server", doc["data"], doc["server"], doc["train"]["server"], seed)
    near = _hash("near", server, doc["fos"], doc["near_sensor"], doc["train"]["near_sensor"])
    out = {"server": server, "near": near}
    edge = doc["edge"]
    for r in cfg.size_ratios:
        out[f"edge_r{r:g}"] = _hash("edge", near, edge["score_wiring"], edge.get("search"), doc["train"]["edge"], r)
    return out


def _read_json(path: Path) -> dict:
    return json.loads(path.read_text()) if path.exists() else {}


def _start_manifest(cfg: ExperimentConfig) -> RunManifest:
    old = RunManifest.load(cfg.output_dir)
    if old is not None and old.config_hash == cfg.config_hash and old.version == __version__:
        return RunManifest(old.config_hash, old.version, dict(old.models), dict(old.reports))
    return RunManifest(cfg.config_hash, __version__)


def _near_models(cfg: ExperimentConfig, layout: Layout, seed: int, kind: str) -> list[NearSensorModel]:
    out = []
    for m, name in enumerate(cfg.modality_names):
        path = layout.near(seed, name) if kind == "fusion_aware" else layout.unimodal(seed, name)
        out.append(NearSensorModel(m, load_model(path), cfg.send_threshold, kind))
    return out


def _require_models(cfg: ExperimentConfig, layout: Layout, seed: int, need_edges: bool = False):
    paths = [layout.server(seed), layout.fos(seed)]
    for name in cfg.modality_names:
        paths += [layout.near(seed, name), layout.unimodal(seed, name)]
    if need_edges:
        paths += [layout.edge(seed, r, v) for r in cfg.size_ratios for v in EDGE_VARIANTS]
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise UsageError(
            f"trained models missing for seed {seed} under {layout.root} (first: {layout.rel(missing[0])}); "
            "run `fusionfilter train-all` with this config first"
        )
    stages = _read_json(layout.stages(seed))
    want = _stage_hashes(cfg, seed)
    keys = ["server", "near"] + ([f"edge_r{r:g}" for r in cfg.size_ratios] if need_edges else [])
    stale = [k for k in keys if stages.get(k) != want[k]]
    if stale:
        raise UsageError(
            f"models for seed {seed} were trained with a different config (stale: {', '.join(stale)}); "
            "run `fusionfilter train-all` with this config first"
        )


# -- train-all ---------------------------------------------------------------


def _edge_grid(cfg: ExperimentConfig):
    s = cfg.edge_search
    tc = cfg.train["edge"]
    batches = s.batch_size or (tc.batch_size,)
    rates = s.learning_rate or (tc.learning_rate,)
    return [(b, lr) for b in batches for lr in rates]


def _train_seed(cfg: ExperimentConfig, layout: Layout, seed: int, manifest: RunManifest):
    sdir = layout.seed_dir(seed)
    sdir.mkdir(parents=True, exist_ok=True)
    want = _stage_hashes(cfg, seed)
    done = _read_json(layout.stages(seed))
    names = cfg.modality_names
    dataset: Dataset | None = None

    def data() -> Dataset:
        nonlocal dataset
        if dataset is None:
            dataset = generate(cfg.dataset_config(seed))
        return dataset

    def record(key: str, status: str, t0: float):
        manifest.stages[f"seed_{seed}/{key}"] = status
        manifest.wall_clock[f"seed_{seed}/{key}"] = round(time.perf_counter() - t0, 6)

    def mark(key: str):
        done[key] = want[key]
        layout.stages(seed).write_text(json.dumps(done, indent=2, sort_keys=True) + "\n")

    # step 1: server fusion model
    t0 = time.perf_counter()
    with _stage(f"server seed={seed}"):
        if done.get("server") == want["server"] and layout.server(seed).exists():
            server = load_fusion(layout.server(seed))
            record("server", "skipped", t0)
        else:
            done.pop("near", None)
            server = train_server_fusion(data(), cfg.server_spec, cfg.tier("server", seed))
            save_fusion(server, sdir, "server")
            mark("server")
            record("server", "trained", t0)
            log.info("seed %d: server trained in %.1fs", seed, time.perf_counter() - t0)
    manifest.models[f"seed_{seed}/server"] = layout.rel(layout.server(seed))

    # step 2: FoS labels and near-sensor filters (plus the FoI-trained baseline filters)
    t0 = time.perf_counter()
    near_paths = [layout.near(seed, n) for n in names] + [layout.unimodal(seed, n) for n in names]
    with _stage(f"near-sensor seed={seed}"):
        if done.get("near") == want["near"] and all(p.exists() for p in near_paths + [layout.fos(seed)]):
            record("near", "skipped", t0)
        else:
            fos = build_fos_dataset(server, data(), cfg.fos)
            save_fos(fos, layout.fos(seed))
            tc = cfg.tier("near_sensor", seed)
            for m, name in enumerate(names):
                nm = train_near_sensor(fos, data(), m, cfg.near_spec, tc, cfg.send_threshold)
                save_model(nm.model, layout.near(seed, name))
                um = train_unimodal_filter(data(), m, cfg.near_spec, tc, cfg.send_threshold)
                save_model(um.model, layout.unimodal(seed, name))
            for k in [k for k in done if k.startswith("edge_")]:
                done.pop(k)
            mark("near")
            record("near", "trained", t0)
            log.info("seed %d: FoS labels and filters done in %.1fs", seed, time.perf_counter() - t0)
    manifest.models[f"seed_{seed}/fos"] = layout.rel(layout.fos(seed))
    for name in names:
        manifest.models[f"seed_{seed}/near_{name}"] = layout.rel(layout.near(seed, name))
        manifest.models[f"seed_{seed}/unimodal_{name}"] = layout.rel(layout.unimodal(seed, name))

    # step 3: compact edge pairs, one per size ratio
    near_models = None
    fos_records = None
    for ratio in cfg.size_ratios:
        key = f"edge_r{ratio:g}"
        paths = [layout.edge(seed, ratio, v) for v in EDGE_VARIANTS]
        t0 = time.perf_counter()
        with _stage(f"edge ratio={ratio:g} seed={seed}"):
            if done.get(key) == want[key] and all(p.exists() for p in paths):
                record(key, "skipped", t0)
            else:
                if near_models is None:
                    near_models = _near_models(cfg, layout, seed, "fusion_aware")
                    fos_records = load_fos(layout.fos(seed))
                spec_with, spec_base = edge_pair_specs(cfg.server_spec, ratio)
                grid = _edge_grid(cfg)
                common = dict(
                    server_params=server.n_params,
                    score_wiring=cfg.score_wiring,
                    target_ratio=ratio,
                )
                tc = cfg.tier("edge", seed)
                for variant, spec, uses in (("with_scores", spec_with, True), ("baseline", spec_base, False)):
                    if len(grid) > 1:
                        edge = search_edge_fusion(data(), fos_records, near_models, spec, tc, uses, grid, **common)
                    else:
                        edge = train_edge_fusion(data(), fos_records, near_models, spec, tc, uses, **common)
                    save_edge(edge, layout.edge_dir(seed, ratio), variant)
                mark(key)
                record(key, "trained", t0)
                log.info("seed %d: edge pair at ratio %g done in %.1fs", seed, ratio, time.perf_counter() - t0)
        for v, p in zip(EDGE_VARIANTS, paths):
            manifest.models[f"seed_{seed}/{key}/{v}"] = layout.rel(p)


def cmd_train_all(cfg: ExperimentConfig) -> RunManifest:
    """Steps 1 -> 2 -> 3 for every seed; stages whose inputs are unchanged are skipped."""
    layout = Layout(cfg.output_dir)
    layout.root.mkdir(parents=True, exist_ok=True)
    manifest = _start_manifest(cfg)
    manifest.models = {}
    for seed in cfg.seeds:
        _train_seed(cfg, layout, seed, manifest)
    manifest.write(layout.root)
    return manifest


def _finish(cfg: ExperimentConfig, layout: Layout, reports: dict[str, Path], label: str, t0: float) -> RunManifest:
    manifest = _start_manifest(cfg)
    for k, p in reports.items():
        manifest.reports[k] = layout.rel(p)
    manifest.wall_clock[label] = round(time.perf_counter() - t0, 6)
    manifest.write(layout.root)
    return manifest


# -- tradeoff ----------------------------------------------------------------


@dataclass
class TradeoffReport:
    comparisons: list[CurveComparison]
    losses: dict[str, np.ndarray]  # pipeline -> (n_seeds, n_efficiencies) interpolated losses
    paths: dict[str, Path]
    manifest: RunManifest


def _safe_interp(rows, target: float) -> float:
    try:
        return interpolate_quality_loss(rows, target)
    except UsageError:
        return float("nan")


def cmd_tradeoff(cfg: ExperimentConfig) -> TradeoffReport:
    """Fusion-aware and uni-modal curves on one grid, plus matched-efficiency comparison."""
    t0 = time.perf_counter()
    layout = Layout(cfg.output_dir)
    for seed in cfg.seeds:
        _require_models(cfg, layout, seed)
    layout.reports.mkdir(parents=True, exist_ok=True)
    names = cfg.modality_names
    h = cfg.config_hash
    curves: dict[str, list] = {"fusion_aware": [], "unimodal": []}
    for seed in cfg.seeds:
        with _stage(f"tradeoff seed={seed}"):
            ds = generate(cfg.dataset_config(seed))
            server = load_fusion(layout.server(seed))
            for kind, filt in (
                ("fusion_aware", _near_models(cfg, layout, seed, "fusion_aware")),
                ("unimodal", _near_models(cfg, layout, seed, "unimodal")),
            ):
                rows = build_tradeoff_curve(server, filt, ds.test, cfg.tau_grid, cfg.bytes_per_frame, names)
                curves[kind].append((seed, rows))

    paths = {}
    for kind, per_seed in curves.items():
        path = layout.reports / f"tradeoff_{kind}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed"] + curve_header(names) + ["config_hash"])
            for seed, rows in per_seed:
                for r in rows:
                    w.writerow([seed] + curve_cells(r) + [h])
        paths[f"tradeoff_{kind}"] = path

    losses = {
        kind: np.array([[_safe_interp(rows, e) for e in cfg.match_efficiencies] for _, rows in per_seed])
        for kind, per_seed in curves.items()
    }
    comparisons = []
    for j, e in enumerate(cfg.match_efficiencies):
        comparisons.append(
            CurveComparison(e, float(losses["fusion_aware"][:, j].mean()), float(losses["unimodal"][:, j].mean()))
        )
    path = layout.reports / "tradeoff_summary.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["data_efficiency", "quality_loss_fusion_aware", "quality_loss_unimodal", "loss_ratio", "seed_count", "config_hash"]
        )
        for c in comparisons:
            w.writerow(
                [repr(c.efficiency), repr(c.loss_fusion_aware), repr(c.loss_unimodal), repr(c.ratio), len(cfg.seeds), h]
            )
    paths["tradeoff_summary"] = path
    manifest = _finish(cfg, layout, paths, "tradeoff", t0)
    return TradeoffReport(comparisons, losses, paths, manifest)


# -- energy ------------------------------------------------------------------


@dataclass
class EnergyReport:
    records: dict[int, list[ScenarioRecord]]
    mean_savings: dict[float, dict[str, float]]
    paths: dict[str, Path]
    manifest: RunManifest


def cmd_energy(cfg: ExperimentConfig) -> EnergyReport:
    """Per-(seed, prevalence, pipeline) breakdowns and seed-averaged savings ratios."""
    t0 = time.perf_counter()
    layout = Layout(cfg.output_dir)
    for seed in cfg.seeds:
        _require_models(cfg, layout, seed)
    layout.reports.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash
    records: dict[int, list[ScenarioRecord]] = {}
    for seed in cfg.seeds:
        with _stage(f"energy seed={seed}"):
            records[seed] = scenario_sweep(
                cfg.energy,
                cfg.prevalences,
                cfg.dataset_config(seed),
                _near_models(cfg, layout, seed, "fusion_aware"),
                _near_models(cfg, layout, seed, "unimodal"),
                cfg.energy_n_frames,
                stream_seed=seed,
            )

    paths = {"energy_report": layout.reports / "energy.jsonl", "energy": layout.reports / "energy.csv"}
    with paths["energy_report"].open("w") as fh:
        for seed, recs in records.items():
            for r in recs:
                rec = energy_record(r)
                rec.update(seed=seed, config_hash=h)
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with paths["energy"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed"] + ENERGY_CSV_COLUMNS + ["config_hash"])
        for seed, recs in records.items():
            for r in recs:
                w.writerow([seed] + energy_cells(r) + [h])

    grouped: dict[tuple[float, str], list[float]] = {}
    for recs in records.values():
        for r in recs:
            grouped.setdefault((r.prevalence, r.breakdown.pipeline), []).append(r.savings_ratio)
    mean_savings: dict[float, dict[str, float]] = {}
    paths["energy_summary"] = layout.reports / "energy_summary.csv"
    with paths["energy_summary"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prevalence", "pipeline", "savings_ratio_mean", "savings_ratio_min", "savings_ratio_max", "seed_count", "config_hash"])
        for (p, pipe), vals in grouped.items():
            v = np.array(vals)
            mean_savings.setdefault(p, {})[pipe] = float(v.mean())
            w.writerow([repr(p), pipe, repr(float(v.mean())), repr(float(v.min())), repr(float(v.max())), v.size, h])
    manifest = _finish(cfg, layout, paths, "energy", t0)
    return EnergyReport(records, mean_savings, paths, manifest)


# -- compact -----------------------------------------------------------------


@dataclass
class CompactReport:
    rows: list[CompactRow]
    paths: dict[str, Path]
    manifest: RunManifest


def cmd_compact(cfg: ExperimentConfig) -> CompactReport:
    """Edge quality loss vs. size (and energy), with and without injected scores."""
    t0 = time.perf_counter()
    layout = Layout(cfg.output_dir)
    for seed in cfg.seeds:
        _require_models(cfg, layout, seed, need_edges=True)
    if len(cfg.seeds) < 2:
        raise UsageError("the compact curve reports a spread over seeds; configure at least 2 seeds")
    layout.reports.mkdir(parents=True, exist_ok=True)
    runs = []
    server_params = None
    for seed in cfg.seeds:
        with _stage(f"compact seed={seed}"):
            ds = generate(cfg.dataset_config(seed))
            server: FusionModel = load_fusion(layout.server(seed))
            server_params = server.n_params
            _, full = predict_frames(server, ds.test)
            server_f1 = macro_f1(full, ds.test.labels)
            near = _near_models(cfg, layout, seed, "fusion_aware")
            for ratio in cfg.size_ratios:
                runs.append(
                    CompactRun(
                        seed,
                        ratio,
                        load_edge(layout.edge(seed, ratio, "with_scores")),
                        load_edge(layout.edge(seed, ratio, "baseline")),
                        server_f1,
                        near,
                        ds.test,
                    )
                )
    energy_map = EnergyPerParamMap(cfg.joules_per_parameter, server_params * cfg.joules_per_parameter)
    rows = quality_loss_curve(runs, energy_map)
    path = write_compact_csv(rows, layout.reports / "compact.csv", {"config_hash": cfg.config_hash})
    paths = {"compact": path}
    manifest = _finish(cfg, layout, paths, "compact", t0)
    return CompactReport(rows, paths, manifest)
