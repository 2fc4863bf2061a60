"""Cross-validated noisy-label experiments for GIN and its loss-corrected variants."""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.model_selection import KFold, StratifiedKFold

from . import autodiff as ad
from .correction import (
    CorrectionMatrix,
    backward_loss,
    cross_entropy,
    estimate_anchor,
    estimate_conservative,
    estimate_exact,
    select_anchors,
)
from .errors import ConfigError, DGNNError, DivergenceError
from .gin import GIN, GinConfig
from .graph import Dataset, FeatureScheme, Graph, GraphBatch, load_dataset
from .noise import build_noise_matrix, inject_noise

logger = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    GIN = "gin"
    DGNN_C = "dgnn-c"
    DGNN_A = "dgnn-a"
    DGNN_E = "dgnn-e"

    @property
    def display(self) -> str:
        return {"gin": "GIN", "dgnn-c": "D-GNN-C", "dgnn-a": "D-GNN-A", "dgnn-e": "D-GNN-E"}[self.value]


class NoiseScope(str, enum.Enum):
    PER_FOLD = "per-fold"
    GLOBAL = "global"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "MUTAG"
    variant: Variant = Variant.GIN
    noise: float = 0.2
    epochs: int = 20
    batch_size: int = 64
    k_folds: int = 10
    seeds: tuple[int, ...] = (0,)
    gin: GinConfig = field(default_factory=GinConfig)
    learning_rate: float = 0.01
    noise_scope: NoiseScope = NoiseScope.PER_FOLD
    split_seed: int = 0
    blend: float = 0.0
    feature_scheme: str = "auto"
    degree_cap: int | None = None
    anchor_ids: tuple[int, ...] | None = None
    data_root: str | None = None
    iters_per_epoch: int = 50

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "noise_scope", NoiseScope(self.noise_scope))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if isinstance(self.gin, dict):
            object.__setattr__(self, "gin", GinConfig.from_dict(self.gin))
        if self.anchor_ids is not None:
            object.__setattr__(self, "anchor_ids", tuple(int(i) for i in self.anchor_ids))
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError(f"noise rate must lie in [0, 1], got {self.noise}")
        if self.k_folds < 2:
            raise ConfigError(f"k_folds must be at least 2, got {self.k_folds}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.iters_per_epoch < 0:
            raise ConfigError("iters_per_epoch must be >= 0 (0 means full passes)")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["noise_scope"] = self.noise_scope.value
        d["gin"] = self.gin.to_dict()
        d["seeds"] = list(self.seeds)
        d["anchor_ids"] = None if self.anchor_ids is None else list(self.anchor_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def scheme(self) -> FeatureScheme | None:
        if self.feature_scheme == "auto":
            return None if self.degree_cap is None else FeatureScheme.degree(self.degree_cap)
        return FeatureScheme.parse(self.feature_scheme, self.degree_cap)


@dataclass
class TrainResult:
    model: GIN
    train_accuracy: list[float]
    losses: list[float]


@dataclass
class FoldRecord:
    fold: int
    seed: int
    train_accuracy: list[float] = field(default_factory=list)
    test_accuracy: float | None = None
    estimator: dict | None = None
    phase1_train_accuracy: list[float] | None = None
    noise_fraction: float | None = None
    error: str | None = None
    error_type: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[FoldRecord]

    @property
    def completed(self) -> list[FoldRecord]:
        return [r for r in self.records if r.ok]

    @property
    def failures(self) -> list[FoldRecord]:
        return [r for r in self.records if not r.ok]

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    @property
    def test_accuracies(self) -> np.ndarray:
        return np.array([r.test_accuracy for r in self.completed], dtype=np.float64)

    @property
    def final_train_accuracies(self) -> np.ndarray:
        return np.array([r.train_accuracy[-1] for r in self.completed if r.train_accuracy])

    @property
    def mean_test_accuracy(self) -> float:
        acc = self.test_accuracies
        return float(acc.mean()) if acc.size else float("nan")

    @property
    def std_test_accuracy(self) -> float:
        """Population standard deviation over per-(fold, seed) test accuracies."""
        acc = self.test_accuracies
        return float(acc.std(ddof=0)) if acc.size else float("nan")

    @property
    def mean_train_accuracy(self) -> float:
        acc = self.final_train_accuracies
        return float(acc.mean()) if acc.size else float("nan")

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "records": [asdict(r) for r in self.records],
            "aggregate": {
                "mean_test_accuracy": self.mean_test_accuracy,
                "std_test_accuracy": self.std_test_accuracy,
                "mean_train_accuracy": self.mean_train_accuracy,
                "completed": len(self.completed),
                "failed": len(self.failures),
                "partial": self.partial,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentResult:
        return cls(ExperimentConfig.from_dict(d["config"]), [FoldRecord(**r) for r in d["records"]])


# --- building blocks ----------------------------------------------------------------


def kfold_split(dataset: Dataset, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold split, stratified by label when every class has >= k members."""
    n = len(dataset)
    if k < 2 or k > n:
        raise ConfigError(f"cannot make {k} folds from {n} graphs")
    labels = dataset.labels
    counts = np.bincount(labels, minlength=dataset.num_classes)
    present = counts[counts > 0]
    index = np.arange(n)
    if present.min() >= k:
        splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
        folds = splitter.split(index, labels)
    else:
        warnings.warn(
            f"{dataset.name}: smallest class has {present.min()} graphs < {k} folds; "
            "falling back to unstratified splits",
            stacklevel=2,
        )
        folds = KFold(n_splits=k, shuffle=True, random_state=seed).split(index)
    return [(np.sort(tr), np.sort(te)) for tr, te in folds]


def evaluate(model, graphs: Sequence[Graph], labels: Sequence[int] | None = None) -> float:
    """Fraction of graphs whose argmax prediction equals the (clean) label."""
    if not len(graphs):
        raise ConfigError("cannot evaluate on an empty graph set")
    truth = np.array([g.label for g in graphs]) if labels is None else np.asarray(labels)
    pred = np.argmax(model.predict_proba(graphs), axis=1)
    return float(np.mean(pred == truth))


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _fit(
    model: GIN,
    graphs: Sequence[Graph],
    labels: np.ndarray,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    shuffle_rng: np.random.Generator,
    inverse: np.ndarray | None = None,
    on_step: Callable[[int, float], None] | None = None,
    iters_per_epoch: int = 0,
) -> TrainResult:
    params = model.parameters()
    state = ad.AdamState(learning_rate=learning_rate)
    curve: list[float] = []
    losses: list[float] = []
    labels = np.asarray(labels, dtype=np.int64)
    for epoch in range(epochs):
        for idx in _batches(len(graphs), batch_size, shuffle_rng, iters_per_epoch):
            batch = GraphBatch([graphs[i] for i in idx])
            with ad.Tape() as tape:
                _, probs = model.forward(batch, training=True, rng=shuffle_rng)
                if inverse is None:
                    per_graph = cross_entropy(probs, labels[idx])
                else:
                    per_graph = backward_loss(probs, labels[idx], inverse)
                loss = per_graph.sum() * (1.0 / len(idx))
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} in epoch {epoch}", epoch=epoch)
            ad.zero_grad(params.values())
            tape.backward(loss)
            ad.adam_step({k: p.data for k, p in params.items()},
                         {k: p.grad for k, p in params.items()}, state)
            losses.append(value)
            if on_step is not None:
                on_step(epoch, value)
        curve.append(evaluate(model, graphs, labels))
    return TrainResult(model, curve, losses)


def _batches(n: int, batch_size: int, rng: np.random.Generator, iters: int):
    """Index batches for one epoch.

    ``iters == 0`` walks a fresh permutation in ``batch_size`` chunks (last
    partial batch kept); otherwise ``iters`` batches are drawn independently,
    each a random subset of ``batch_size`` graphs.
    """
    if iters == 0:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]
    else:
        for _ in range(iters):
            yield rng.permutation(n)[:batch_size]


def train_gin(
    graphs: Sequence[Graph],
    labels: Sequence[int],
    config: ExperimentConfig,
    num_classes: int,
    seed: int = 0,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train a fresh GIN with plain cross-entropy against ``labels``."""
    return _train(graphs, labels, config, num_classes, seed, None, on_step)


def train_dgnn(
    graphs: Sequence[Graph],
    labels: Sequence[int],
    config: ExperimentConfig,
    num_classes: int,
    correction: CorrectionMatrix,
    seed: int = 0,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train a fresh GIN on the backward-corrected loss with a fixed correction matrix.

    Initialization and batch order depend only on ``seed``, so this matches
    :func:`train_gin` step for step when the correction is the identity.
    """
    return _train(graphs, labels, config, num_classes, seed, correction.inverse, on_step)


def _train(graphs, labels, config, num_classes, seed, inverse, on_step) -> TrainResult:
    if not len(graphs):
        raise ConfigError("no training graphs")
    model = GIN(config.gin, graphs[0].feature_dim, num_classes, seed=seed)
    return _fit(model, graphs, np.asarray(labels), config.epochs, config.batch_size,
                config.learning_rate, _rng(seed, 1), inverse, on_step, config.iters_per_epoch)


def estimate_correction(
    source: str,
    config: ExperimentConfig,
    dataset: Dataset,
    train_idx: np.ndarray,
    test_idx: np.ndarray,
    noisy_train: np.ndarray,
    seed: int,
) -> tuple[CorrectionMatrix, TrainResult | None]:
    """Correction matrix for one fold, training the phase-1 model when needed."""
    noise = build_noise_matrix(dataset.num_classes, config.noise)
    if source == "exact":
        return estimate_exact(noise, config.blend), None
    train_graphs = [dataset[i] for i in train_idx]
    phase1 = train_gin(train_graphs, noisy_train, config, dataset.num_classes, seed)
    if source == "conservative":
        return estimate_conservative(phase1.model, train_graphs, config.blend), phase1
    if source == "anchor":
        test_graphs = [dataset[i] for i in test_idx]
        picks = select_anchors(test_graphs, dataset.num_classes, config.anchor_ids)
        return estimate_anchor(phase1.model, [test_graphs[i] for i in picks],
                               dataset.num_classes, config.blend), phase1
    raise ConfigError(f"unknown estimator {source!r}")


_SOURCES = {Variant.DGNN_C: "conservative", Variant.DGNN_A: "anchor", Variant.DGNN_E: "exact"}


def noisy_labels_for(dataset: Dataset, config: ExperimentConfig, train_idx: np.ndarray,
                     fold: int, seed: int) -> np.ndarray:
    """Corrupted labels for the training portion of one fold."""
    noise = build_noise_matrix(dataset.num_classes, config.noise)
    if config.noise_scope is NoiseScope.GLOBAL:
        noisy_all, _ = inject_noise(dataset.labels, noise, _rng(seed, 2))
        return noisy_all[train_idx]
    noisy, _ = inject_noise(dataset.labels[train_idx], noise, _rng(seed, fold, 2))
    return noisy


def run_fold(dataset: Dataset, config: ExperimentConfig, fold: int, seed: int,
             train_idx: np.ndarray, test_idx: np.ndarray) -> FoldRecord:
    record = FoldRecord(fold=fold, seed=seed)
    try:
        noisy = noisy_labels_for(dataset, config, train_idx, fold, seed)
        record.noise_fraction = float(np.mean(noisy != dataset.labels[train_idx]))
        train_graphs = [dataset[i] for i in train_idx]
        test_graphs = [dataset[i] for i in test_idx]
        model_seed = int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])
        if config.variant is Variant.GIN:
            trained = train_gin(train_graphs, noisy, config, dataset.num_classes, model_seed)
        else:
            correction, phase1 = estimate_correction(
                _SOURCES[config.variant], config, dataset, train_idx, test_idx, noisy, model_seed
            )
            record.estimator = correction.diagnostics(
                build_noise_matrix(dataset.num_classes, config.noise)
            )
            if phase1 is not None:
                record.phase1_train_accuracy = phase1.train_accuracy
            trained = train_dgnn(train_graphs, noisy, config, dataset.num_classes,
                                 correction, model_seed)
        record.train_accuracy = trained.train_accuracy
        record.test_accuracy = evaluate(trained.model, test_graphs)
    except DGNNError as exc:
        record.error = str(exc)
        record.error_type = type(exc).__name__
        logger.warning("fold %d seed %d failed: %s: %s", fold, seed, record.error_type, exc)
    return record


def _run_fold_star(args) -> FoldRecord:
    return run_fold(*args)


def run_experiment(config: ExperimentConfig, dataset: Dataset | None = None,
                   jobs: int = 1) -> ExperimentResult:
    """Run every (fold, seed) unit and collect the records in (fold, seed) order."""
    if dataset is None:
        if config.data_root is None:
            raise ConfigError("no dataset given and no data_root configured")
        dataset = load_dataset(config.data_root, config.dataset, config.scheme())
    splits = kfold_split(dataset, config.k_folds, config.split_seed)
    units = [
        (dataset, config, fold, seed, tr, te)
        for fold, (tr, te) in enumerate(splits)
        for seed in config.seeds
    ]
    if jobs > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_fold_star, units))
    else:
        records = [run_fold(*u) for u in units]
    records.sort(key=lambda r: (r.fold, r.seed))
    return ExperimentResult(config, records)


# --- output --------------------------------------------------------------------

CSV_COLUMNS = ["dataset", "variant", "noise", "fold", "seed", "epoch", "split", "accuracy"]


def results_csv(result: ExperimentResult) -> str:
    """Flat CSV: one test row per (fold, seed) followed by per-epoch train rows."""
    cfg = result.config
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    base = [cfg.dataset, cfg.variant.value, repr(cfg.noise)]
    for r in result.completed:
        writer.writerow(base + [r.fold, r.seed, "", "test", repr(r.test_accuracy)])
    for r in result.completed:
        for epoch, acc in enumerate(r.train_accuracy, 1):
            writer.writerow(base + [r.fold, r.seed, epoch, "train", repr(acc)])
    return buf.getvalue()


def summary_markdown(result: ExperimentResult) -> str:
    cfg = result.config
    lines = [
        f"| | {cfg.dataset} |",
        "|---|---|",
        f"| {cfg.variant.display} | {result.mean_test_accuracy:.4f} ± {result.std_test_accuracy:.4f} |",
        "",
        f"noise rate n={cfg.noise}, {cfg.k_folds}-fold CV, seeds {list(cfg.seeds)}, "
        f"{len(result.completed)} completed / {len(result.failures)} failed runs",
    ]
    for r in result.failures:
        lines.append(f"- fold {r.fold} seed {r.seed}: {r.error_type}: {r.error}")
    return "\n".join(lines) + "\n"


def write_results(result: ExperimentResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out / "results.json",
        "csv": out / "results.csv",
        "markdown": out / "summary.md",
    }
    paths["json"].write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    paths["csv"].write_text(results_csv(result))
    paths["markdown"].write_text(summary_markdown(result))
    return paths
