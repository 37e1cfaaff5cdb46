"""End-to-end continual scenario: concepts -> SSL detector -> replay memory -> result matrix."""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from . import concepts as cpt
from . import features, imaging, mae, memory, metrics, novelty
from .data import DataError, NormStats, StreamSpec, TabularDataset, concat, gen_synthetic_stream, load_csv
from .tsne import TsneParams

CONFIG_SCHEMA = 1
MODES = ("citadel", "static", "ssf_only", "hm_only")

# stable labels for per-phase sub-seeds
_PHASES = {"concepts": 1, "split": 2, "layout": 3, "mae_init": 4, "mae_train": 5, "memory": 6}


class PhaseError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"[{phase}] {cause}")
        self.phase = phase
        self.cause = cause


@contextmanager
def phase(name: str, timings: dict[str, float] | None = None) -> Iterator[None]:
    start = time.perf_counter()
    try:
        yield
    except PhaseError:
        raise
    except Exception as exc:
        raise PhaseError(name, exc) from exc
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


def sub_seed(master: int, task: int, name: str) -> int:
    return int(np.random.SeedSequence([master, task, _PHASES[name]]).generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass
class DataSource:
    stream: dict[str, Any] | None = None
    csv: list[str] = field(default_factory=list)
    label_column: str = "label"
    normal_value: str = "0"
    files_are_concepts: bool = False
    recluster: bool = False

    def __post_init__(self) -> None:
        if self.stream is None and not self.csv:
            self.stream = {}
        if self.stream is not None and self.csv:
            raise DataError("data source must be either a stream spec or CSV paths, not both")


@dataclass
class ScenarioConfig:
    data: DataSource = field(default_factory=DataSource)
    concepts: int = 5
    train_fraction: float = 0.7
    k_features: int = 31
    variance_threshold: float = 0.95
    grid_dim: int = 8
    mask_ratio: float = 0.75
    epochs: int = 20
    latent_dim: int = 16
    batch_size: int = 32
    learning_rate: float = 1e-3
    capacity: int = 5000
    forget_quota: int = 1000
    sample_quota: int = 1000
    bins: int = 20
    alpha: float = 0.05
    lam: float = 5.5
    l_max: int = 10
    gamma: float = 2.0
    lof_neighbors: int = 20
    lof_threshold: float = 1.5
    mode: str = "citadel"
    seed: int = 7

    def __post_init__(self) -> None:
        if isinstance(self.data, dict):
            self.data = DataSource(**self.data)
        if self.mode not in MODES:
            raise DataError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.forget_quota >= self.capacity or self.sample_quota >= self.capacity:
            raise DataError("quotas must be smaller than the memory capacity")
        if self.k_features > self.grid_dim**2:
            raise DataError("k_features must not exceed grid_dim squared")
        if self.concepts < 1:
            raise DataError("need at least one concept")

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "ScenarioConfig":
        payload = dict(payload)
        schema = payload.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise DataError(f"unsupported config schema {schema!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    @classmethod
    def from_json(cls, path: str | Path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict[str, Any]:
        return {"schema": CONFIG_SCHEMA, **asdict(self)}


@dataclass
class PreparedData:
    concept_set: cpt.ConceptSet
    pairs: list[tuple[int, int]]
    tasks: list[cpt.Task]
    norm: NormStats


def _load_concepts(cfg: ScenarioConfig) -> tuple[TabularDataset, TabularDataset, np.ndarray | None, np.ndarray | None]:
    """Pooled normals/anomalies plus known concept memberships when the source provides them."""
    src = cfg.data
    if src.stream is not None:
        spec = StreamSpec(**{"concept_count": cfg.concepts, "seed": cfg.seed, **src.stream})
        parts = gen_synthetic_stream(spec)
    else:
        loaded = [load_csv(p, src.label_column, src.normal_value) for p in src.csv]
        if not src.files_are_concepts:
            pool = concat(loaded)
            return pool.normals(), pool.anomalies(), None, None
        parts = [(ds.normals(), ds.anomalies()) for ds in loaded]
    normals = concat([p[0] for p in parts])
    anomalies = concat([p[1] for p in parts])
    n_lab = np.concatenate([np.full(p[0].n, i) for i, p in enumerate(parts)])
    a_lab = np.concatenate([np.full(p[1].n, i) for i, p in enumerate(parts)])
    return normals, anomalies, n_lab, a_lab


def prepare(cfg: ScenarioConfig) -> PreparedData:
    normals, anomalies, n_lab, a_lab = _load_concepts(cfg)
    # min-max over the whole pool, label-agnostic; only used to put features on one scale
    norm = NormStats.fit(np.vstack([normals.samples, anomalies.samples]))
    normals = normals.with_samples(norm.apply(normals.samples))
    anomalies = anomalies.with_samples(norm.apply(anomalies.samples))
    if n_lab is None or cfg.data.recluster:
        cs = cpt.cluster_concepts(normals, anomalies, cfg.concepts, sub_seed(cfg.seed, 0, "concepts"))
    else:
        cs = cpt.concept_set_from_labels(normals, anomalies, n_lab, a_lab)
    pairs = cpt.match_concepts(cs)
    tasks = [
        cpt.split_task(cs, pair, t, cfg.train_fraction, sub_seed(cfg.seed, t, "split"))
        for t, pair in enumerate(pairs, start=1)
    ]
    return PreparedData(cs, pairs, tasks, norm)


@dataclass
class RunReport:
    R: np.ndarray
    metrics: dict[str, float]
    loss_histories: list[list[float]]
    memory_audits: list[dict]
    drift: list[dict]
    timings: dict[str, float]
    config: dict[str, Any]
    models: list[bytes] = field(default_factory=list, repr=False)
    layout: imaging.FeatureLayout | None = field(default=None, repr=False)
    ranking: features.FeatureRanking | None = field(default=None, repr=False)
    prepared: PreparedData | None = field(default=None, repr=False)
    selected: np.ndarray | None = field(default=None, repr=False)

    def report_dict(self) -> dict[str, Any]:
        return {
            "schema": CONFIG_SCHEMA,
            "config": self.config,
            "R": self.R.tolist(),
            "metrics": self.metrics,
            "loss_histories": self.loss_histories,
            "drift": self.drift,
            "memory_audits": self.memory_audits,
            "selected_features": [] if self.ranking is None or self.selected is None
            else [self.ranking.feature_names[i] for i in self.selected],
            "notes": {
                "detector_training_data": "benign (label 0) samples only; anomaly train splits are never used",
                "feature_layout": "PCA ranking and image layout fitted on task 1 and frozen",
            },
        }


def _make_memory(cfg: ScenarioConfig):
    if cfg.mode == "ssf_only":
        return memory.FlatMemory(cfg.capacity, n_clusters=cfg.concepts)
    return memory.HierarchicalMemory(cfg.capacity, cfg.l_max, cfg.gamma, n_clusters=cfg.concepts)


def _unique_rows(X: np.ndarray) -> np.ndarray:
    _, first = np.unique(X, axis=0, return_index=True)
    return X[np.sort(first)]


def _evaluate(model: mae.MaeModel, lof: novelty.LofModel, layout: imaging.FeatureLayout,
              test_sets: list[tuple[np.ndarray, np.ndarray]]) -> list[float]:
    out = []
    for X, y in test_sets:
        latents = mae.encode_batch(model, imaging.to_images(X, layout))
        out.append(metrics.pr_auc(lof.scores(latents), y))
    return out


def run_scenario(cfg: ScenarioConfig, keep_artifacts: bool = True) -> RunReport:
    timings: dict[str, float] = {}
    with phase("data", timings):
        prep = prepare(cfg)
    cs, tasks = prep.concept_set, prep.tasks
    c = len(tasks)

    with phase("features", timings):
        first_train = cs.normals.subset(tasks[0].normal_train)
        _, ranking = features.rank_features(first_train, cfg.variance_threshold)
        k = min(cfg.k_features, first_train.d)
        selected = features.selected_indices(ranking, k)

    def sel_normals(rows: np.ndarray) -> np.ndarray:
        return cs.normals.samples[np.ix_(rows, selected)]

    def sel_anomalies(rows: np.ndarray) -> np.ndarray:
        return cs.anomalies.samples[np.ix_(rows, selected)]

    with phase("layout", timings):
        layout = imaging.fit_layout(
            features.select_top_k(first_train, ranking, k), cfg.grid_dim, TsneParams(), sub_seed(cfg.seed, 1, "layout")
        )

    test_sets = []
    for task in tasks:
        X = np.vstack([sel_normals(task.normal_test), sel_anomalies(task.anomaly_test)])
        y = np.concatenate([np.zeros(len(task.normal_test)), np.ones(len(task.anomaly_test))])
        test_sets.append((X, y))

    mem = _make_memory(cfg)
    model = mae.init_mae(cfg.grid_dim, cfg.latent_dim, sub_seed(cfg.seed, 0, "mae_init"))
    R = np.full((c, c), np.nan)
    losses: list[list[float]] = []
    audits: list[dict] = []
    drift_log: list[dict] = []
    models: list[bytes] = []
    lof = None

    for t, task in enumerate(tasks, start=1):
        X_new = sel_normals(task.normal_train)
        with phase(f"memory[task {t}]", timings):
            if t == 1:
                mem.initialize(X_new, task_index=1, seed=sub_seed(cfg.seed, 1, "memory"))
                drift_log.append({"task": 1, "drifted": None, "severity": None, "level": 1, "forgotten": 0, "admitted": len(X_new)})
            elif cfg.mode != "static":
                drift_log.append(_update_memory(cfg, mem, X_new, t))
        audits.append(mem.audit())

        if cfg.mode == "static" and t > 1:
            losses.append([])
            R[t - 1] = R[0]
            models.append(models[0])
            continue

        with phase(f"mae[task {t}]", timings):
            mem_samples, _ = mem.flatten()
            images = imaging.to_images(mem_samples, layout)
            train_cfg = mae.TrainConfig(
                epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.learning_rate,
                mask_ratio=cfg.mask_ratio, seed=sub_seed(cfg.seed, t, "mae_train"),
            )
            model, history = mae.train(model, images, train_cfg)
            losses.append(history)
            models.append(model.to_bytes())
        with phase(f"novelty[task {t}]", timings):
            latents = _unique_rows(mae.encode_batch(model, images))
            neighbours = min(cfg.lof_neighbors, len(latents) - 1)
            lof = novelty.fit_lof(latents, neighbours, cfg.lof_threshold)
        with phase(f"evaluate[task {t}]", timings):
            R[t - 1] = _evaluate(model, lof, layout, test_sets)

    summary = metrics.summary(R) if c >= 2 else {"ll_pr_auc": metrics.ll_pr_auc(R), "bwt": None, "fwt": None, "c": c}
    return RunReport(
        R=R, metrics=summary, loss_histories=losses, memory_audits=audits, drift=drift_log,
        timings=timings, config=cfg.to_dict(), models=models, layout=layout, ranking=ranking,
        prepared=prep, selected=selected,
    )


def _update_memory(cfg: ScenarioConfig, mem, X_new: np.ndarray, t: int) -> dict:
    mem_samples, _ = mem.flatten()
    report = memory.detect_drift(X_new, mem_samples, cfg.alpha)
    level = memory.assign_level(report.severity, cfg.lam, 1, cfg.l_max) if cfg.mode != "ssf_only" else 1
    seed = sub_seed(cfg.seed, t, "memory")
    if cfg.mode == "hm_only":
        temp = memory.TempBuffer.from_new(X_new)
        forgotten = 0
    else:
        temp = mem.temp_buffer()
        forget_k = min(cfg.forget_quota, len(temp) - 1)
        forgotten = 0
        if forget_k >= 1:
            _, dropped, temp, _ = memory.strategic_forget(temp, X_new, cfg.bins, forget_k)
            forgotten = len(dropped)
        sample_k = min(cfg.sample_quota, len(X_new))
        _, _, temp, _ = memory.strategic_sample(temp, X_new, cfg.bins, sample_k)
    admitted = int(len(temp.admitted()))
    mem.integrate(temp, level, t, seed)
    return {
        "task": t,
        "drifted": report.drifted,
        "severity": report.severity,
        "level": level,
        "ks_statistics": report.statistics.tolist(),
        "critical_value": report.critical_value,
        "forgotten": forgotten,
        "admitted": admitted,
    }


def write_outputs(report: RunReport, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_matrix(report.R, out / "R.csv")
    (out / "metrics.json").write_text(json.dumps(report.metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "report.json").write_text(json.dumps(report.report_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "timing.json").write_text(json.dumps(report.timings, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    audit_dir = out / "memory_audit"
    audit_dir.mkdir(exist_ok=True)
    for t, audit in enumerate(report.memory_audits, start=1):
        (audit_dir / f"task{t}.json").write_text(json.dumps(audit, indent=2) + "\n", encoding="utf-8")
    for t, blob in enumerate(report.models, start=1):
        (out / f"model_task{t}.bin").write_bytes(blob)
    for t, history in enumerate(report.loss_histories, start=1):
        if history:
            mae.write_loss_history(history, out / f"loss_task{t}.csv")
    if report.layout is not None:
        (out / "layout.json").write_text(report.layout.to_json() + "\n", encoding="utf-8")
    if report.ranking is not None:
        report.ranking.to_csv(out / "ranking.csv")
    if report.prepared is not None:
        prep = report.prepared
        (out / "tasks.json").write_text(cpt.tasks_manifest(prep.tasks, prep.pairs) + "\n", encoding="utf-8")
        preprocess = {
            "schema": CONFIG_SCHEMA,
            "feature_names": list(prep.concept_set.normals.feature_names),
            "norm": prep.norm.to_dict(),
            "selected": [] if report.selected is None else report.selected.tolist(),
        }
        (out / "preprocess.json").write_text(json.dumps(preprocess, indent=2) + "\n", encoding="utf-8")
    return out
