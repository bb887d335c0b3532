"""Metrics and experiment drivers.

Each experiment returns plain row dictionaries and can write them as CSV
(comma separated, header row, UTF-8, ``.`` decimal point), one file per
figure analogue: ``grid_comparison.csv``, ``sweep.csv``, ``latency.csv``,
``circle_pairs.csv`` and ``confusion.csv``.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import neural
from .dsp import Domain
from .locmodel import (
    BACKGROUND_CLASS,
    GridSpec,
    KeypadLayout,
    NearestNeighbors,
    build_grid_classifier,
    build_keypad_classifier,
    build_regressor,
    class_name,
    decode_classification,
    zone_labels,
)
from .neural import Head, ModelCheckpoint, TrainConfig

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    rmse_cm: float
    mean_error_cm: float
    stddev_error_cm: float
    per_sample_errors: np.ndarray
    accuracy: float | None = None
    confusion: np.ndarray | None = None
    latency_median_ms: float = math.nan
    latency_p95_ms: float = math.nan

    def summary(self) -> dict:
        out = {
            "rmse_cm": self.rmse_cm,
            "mean_error_cm": self.mean_error_cm,
            "stddev_error_cm": self.stddev_error_cm,
        }
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        if not math.isnan(self.latency_median_ms):
            out["latency_median_ms"] = self.latency_median_ms
            out["latency_p95_ms"] = self.latency_p95_ms
        return out


def _pairs(predictions, targets):
    p = np.asarray(predictions, dtype=float).reshape(-1, 2)
    t = np.asarray(targets, dtype=float).reshape(-1, 2)
    if len(p) != len(t):
        raise ValueError(f"{len(p)} predictions for {len(t)} targets")
    if len(p) == 0:
        raise ValueError("no samples to score")
    return p, t


def euclidean_errors(predictions, targets) -> np.ndarray:
    p, t = _pairs(predictions, targets)
    return np.linalg.norm(p - t, axis=1)


def rmse(predictions, targets) -> float:
    """Root mean squared Euclidean distance between predicted and true positions."""
    p, t = _pairs(predictions, targets)
    return float(np.sqrt(np.mean(np.sum((p - t) ** 2, axis=1))))


def position_report(predictions, targets) -> EvalReport:
    err = euclidean_errors(predictions, targets)
    return EvalReport(
        rmse_cm=rmse(predictions, targets),
        mean_error_cm=float(err.mean()),
        stddev_error_cm=float(err.std()),  # population spread
        per_sample_errors=err,
    )


def confusion_matrix(predicted, true, n_class: int) -> np.ndarray:
    """``C[p, t]`` counts samples predicted as class ``p`` whose target is ``t`` (0-based)."""
    p = np.asarray(predicted, dtype=np.int64).ravel()
    t = np.asarray(true, dtype=np.int64).ravel()
    if p.shape != t.shape:
        raise ValueError("predicted and true class vectors differ in length")
    for name, v in (("predicted", p), ("true", t)):
        if v.size and (v.min() < 0 or v.max() >= n_class):
            raise ValueError(f"{name} class index out of range [0, {n_class})")
    cm = np.zeros((n_class, n_class), dtype=np.int64)
    np.add.at(cm, (p, t), 1)
    return cm


def accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else math.nan


def key_confusions(cm: np.ndarray) -> int:
    """Off-diagonal counts between two different keys (background excluded)."""
    keys = cm[: BACKGROUND_CLASS - 1, : BACKGROUND_CLASS - 1]
    return int(keys.sum() - np.trace(keys))


def per_class_accuracy(cm: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.diag(cm) / cm.sum(axis=0)


def quantization_floor(n: int, width_cm: float = 20.0) -> float:
    """RMSE of a perfect grid classifier on uniform touches: ``(w/n)/sqrt(6)``."""
    return (width_cm / n) / math.sqrt(6.0)


def perfect_classifier_rmse(n: int, samples: int, seed: int, width_cm: float = 20.0) -> float:
    """Monte-Carlo RMSE of decoding uniform touches to their own zone centres."""
    grid = GridSpec(n, width_cm, width_cm)
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, width_cm, size=(samples, 2))
    k = np.minimum((t[:, 1] // grid.zone_height).astype(int), n - 1) * n
    k += np.minimum((t[:, 0] // grid.zone_width).astype(int), n - 1)
    onehot = np.zeros((samples, grid.n_classes))
    onehot[np.arange(samples), k] = 1.0
    return rmse(decode_classification(onehot, grid), t)


# ---------------------------------------------------------------- inference


def locate(model: ModelCheckpoint, X, grid: GridSpec | None = None) -> np.ndarray:
    """Positions (cm) for a batch of features: raw output for a regressor, zone centres for a grid."""
    out = neural.predict(model, X)
    if model.spec.head is Head.LINEAR_REGRESSOR:
        return out
    if grid is None:
        grid = GridSpec(int(round(math.sqrt(model.spec.output_dim))))
    return decode_classification(out, grid)


def classify(model: ModelCheckpoint, X) -> np.ndarray:
    return np.argmax(neural.predict(model, X), axis=-1)


def latency_benchmark(fn, samples, repetitions: int = 1000, warmup: int = 100) -> tuple[float, float]:
    """Median and 95th-percentile wall-clock milliseconds for ``fn(sample)``.

    Samples are cycled; the first ``warmup`` calls are discarded.
    """
    if repetitions < 1:
        raise ValueError("need at least one timed repetition")
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[None, :]
    m = len(samples)
    for r in range(warmup):
        fn(samples[r % m])
    times = np.empty(repetitions)
    clock = time.perf_counter
    for r in range(repetitions):
        x = samples[r % m]
        t0 = clock()
        fn(x)
        times[r] = clock() - t0
    times *= 1e3
    return float(np.median(times)), float(np.percentile(times, 95))


def model_latency(model: ModelCheckpoint, samples, repetitions=1000, warmup=100):
    return latency_benchmark(lambda x: neural.predict(model, x), samples, repetitions, warmup)


def knn_latency(knn: NearestNeighbors, samples, repetitions=1000, warmup=100):
    return latency_benchmark(knn.classify, samples, repetitions, warmup)


# ---------------------------------------------------------------- experiments


def write_csv(path, rows: list[dict], fieldnames=None):
    path = Path(path)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    tmp.replace(path)


def confusion_rows(cm: np.ndarray) -> list[dict]:
    names = [class_name(c) for c in range(1, cm.shape[0] + 1)] if cm.shape[0] == BACKGROUND_CLASS else [
        str(c) for c in range(cm.shape[0])
    ]
    return [{"predicted": names[p], **{names[t]: int(cm[p, t]) for t in range(cm.shape[1])}} for p in range(cm.shape[0])]


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @classmethod
    def make(cls, n: int, seed: int, fractions=(0.7, 0.2, 0.1)) -> "Split":
        parts = neural.split_indices(n, seed, fractions)
        return cls(parts["train"], parts["val"], parts["test"])


@dataclass
class TrainedModel:
    name: str
    model: ModelCheckpoint
    grid: GridSpec | None = None
    history: list = field(default_factory=list)


def train_locator(features, positions, split: Split, cfg: TrainConfig, grid: GridSpec | None, domain: Domain) -> TrainedModel:
    """Train a grid classifier (``grid`` given) or a regressor on the shared split."""
    X = np.asarray(features, dtype=float)
    P = np.asarray(positions, dtype=float)
    if grid is None:
        spec = build_regressor(domain)
        Y = P
        name = "R"
    else:
        spec = build_grid_classifier(grid, domain)
        Y = zone_labels(P, grid)
        name = f"C-{grid.n}"
    res = neural.fit(spec, X[split.train], Y[split.train], X[split.val], Y[split.val], cfg)
    return TrainedModel(name, res.model, grid, res.history)


def grid_comparison(
    features_by_domain: dict,
    positions,
    split: Split,
    cfg: TrainConfig,
    grids=range(2, 11),
    include_regression=True,
) -> list[dict]:
    """Test RMSE for every grid resolution and regression, in each feature domain.

    A failed training is recorded as a NaN row with its error message and the
    sweep continues.
    """
    P = np.asarray(positions, dtype=float)
    configs = [GridSpec(n) for n in grids] + ([None] if include_regression else [])
    rows = []
    for domain, X in features_by_domain.items():
        for grid in configs:
            name = "R" if grid is None else f"C-{grid.n}"
            try:
                tm = train_locator(X, P, split, cfg, grid, domain)
                rep = position_report(locate(tm.model, X[split.test], grid), P[split.test])
                row = {"config": name, "domain": domain.value, "rmse": rep.rmse_cm,
                       "mean": rep.mean_error_cm, "stddev": rep.stddev_error_cm, "error": ""}
            except (neural.TrainingDiverged, ValueError, FloatingPointError) as exc:
                log.warning("%s/%s failed: %s", name, domain.value, exc)
                row = {"config": name, "domain": domain.value, "rmse": math.nan,
                       "mean": math.nan, "stddev": math.nan, "error": str(exc)}
            log.info("grid comparison %s", row)
            rows.append(row)
    return rows


def subsample(indices, fraction: float, seed: int) -> np.ndarray:
    """Seeded nested subsample: the first ``floor(fraction*n)`` of one fixed permutation."""
    idx = np.asarray(indices)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(2,)))
    order = rng.permutation(len(idx))
    return idx[order[: int(math.floor(fraction * len(idx) + 1e-9))]]


@dataclass
class KeypadResult:
    model: ModelCheckpoint
    confusion: np.ndarray
    accuracy: float


def train_keypad(features, labels, split: Split, cfg: TrainConfig, layout: KeypadLayout, train_idx=None) -> KeypadResult:
    X = np.asarray(features, dtype=float)
    Y = np.asarray(labels, dtype=np.int64)
    tr = split.train if train_idx is None else train_idx
    res = neural.fit(build_keypad_classifier(layout), X[tr], Y[tr], X[split.val], Y[split.val], cfg)
    cm = confusion_matrix(classify(res.model, X[split.test]), Y[split.test], BACKGROUND_CLASS)
    return KeypadResult(res.model, cm, accuracy(cm))


def data_fraction_sweep(
    features,
    labels,
    split: Split,
    cfg: TrainConfig,
    layout: KeypadLayout,
    fractions=(1.0, 0.8, 0.6, 0.4, 0.2),
    repetitions: int = 1000,
    warmup: int = 100,
) -> list[dict]:
    """Keypad accuracy and single-sample latency of the DNN and 1-NN per training fraction."""
    X = np.asarray(features, dtype=float)
    Y = np.asarray(labels, dtype=np.int64)
    probe = X[split.test]
    rows = []
    for frac in fractions:
        tr = subsample(split.train, frac, cfg.seed)
        if len(np.unique(Y[tr])) < BACKGROUND_CLASS:
            raise ValueError(f"fraction {frac} leaves some keypad class without training samples")
        dnn = train_keypad(X, Y, split, cfg, layout, train_idx=tr)
        med, p95 = model_latency(dnn.model, probe, repetitions, warmup)
        rows.append({"method": "DNN", "fraction": frac, "accuracy": dnn.accuracy, "latency_median_ms": med,
                     "latency_p95_ms": p95, "train_size": len(tr)})
        knn = NearestNeighbors(X[tr], Y[tr], k=1)
        cm = confusion_matrix(knn.classify_batch(probe), Y[split.test], BACKGROUND_CLASS)
        med, p95 = knn_latency(knn, probe, repetitions, warmup)
        rows.append({"method": "kNN", "fraction": frac, "accuracy": accuracy(cm), "latency_median_ms": med,
                     "latency_p95_ms": p95, "train_size": len(tr)})
        log.info("sweep D-%d: %s", round(frac * 100), rows[-2:])
    return rows


def circle_eval(models: list[TrainedModel], features, positions) -> tuple[dict, list[dict]]:
    """Per-model reports on a trajectory plus (baseline, prediction) point pairs."""
    X = np.asarray(features, dtype=float)
    P = np.asarray(positions, dtype=float)
    reports, pairs = {}, []
    for tm in models:
        pred = locate(tm.model, X, tm.grid)
        reports[tm.name] = position_report(pred, P)
        for k, (t, p) in enumerate(zip(P, pred)):
            pairs.append({"model": tm.name, "index": k, "x": float(t[0]), "y": float(t[1]),
                          "x_pred": float(p[0]), "y_pred": float(p[1])})
    return reports, pairs
