"""Mini-batch SGD training with early stopping, evaluation and imputation."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError
from .models import Adam, CompletionModel, Samples, grad_step
from .sparse import SparseTensor3, Standardizer

__all__ = [
    "TrainConfig", "EpochRecord", "TrainResult", "MetricsReport",
    "train", "evaluate", "impute", "compute_metrics", "validation_rmse",
    "write_history", "write_metrics", "epoch_order",
]

log = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    deterministic: bool = False
    optimizer: str = "sgd"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if int(self.batch_size) < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if int(self.max_epochs) < 1:
            raise ConfigError(f"max_epochs must be positive, got {self.max_epochs}")
        if int(self.patience) < 1:
            raise ConfigError(f"patience must be positive, got {self.patience}")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) exceeds max_epochs ({self.max_epochs})")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float
    seconds_elapsed: float


@dataclass
class TrainResult:
    model: CompletionModel
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_rmse: float = math.inf
    stopped_early: bool = False

    @property
    def epochs_run(self):
        return len(self.history)


def _to_samples(data):
    if isinstance(data, Samples):
        return data
    if isinstance(data, SparseTensor3):
        return Samples.from_tensor(data, "X")
    if isinstance(data, (tuple, list)) and all(isinstance(t, SparseTensor3) or t is None for t in data):
        return Samples.from_tensors(*data)
    if isinstance(data, dict):
        return Samples.from_tensors(data.get("X"), data.get("Y"))
    raise UsageError(f"cannot interpret {type(data).__name__} as a training stream")


def epoch_order(n, seed, epoch):
    """Permutation of ``n`` samples used in ``epoch`` (seeded by run seed and epoch index)."""
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def validation_rmse(model: CompletionModel, val: Samples):
    """Unweighted RMSE over the whole validation stream, in training units."""
    e = model.predict_samples(val) - val.values
    return float(np.sqrt(e @ e / len(e)))


def train(model: CompletionModel, train_set, val_set, cfg: TrainConfig = TrainConfig(),
          monitor=None, clock=time.perf_counter) -> TrainResult:
    """Shuffled mini-batch SGD with patience-based early stopping.

    Parameters
    ----------
    model : CompletionModel
        Trained in place; the returned result holds a separate copy of the
        best-validation parameters.
    train_set, val_set : Samples, SparseTensor3, (x, y) tuple or {"X": x, "Y": y}
        For coupled models the stream mixes both tensors' entries.
    cfg : TrainConfig
    monitor : callable, optional
        ``monitor(model, epoch) -> float`` replaces validation RMSE as the
        early-stopping criterion.

    Returns
    -------
    TrainResult
        ``history[e - 1]`` describes epoch ``e``. Training stops after
        ``cfg.patience`` epochs without an improvement of at least 1e-7.
    """
    stream = _to_samples(train_set)
    val = _to_samples(val_set)
    if len(stream) == 0 or len(val) == 0:
        raise UsageError("training and validation sets must be non-empty")
    optimizer = Adam() if cfg.optimizer == "adam" else None
    bs = int(cfg.batch_size)
    result = TrainResult(model.copy())
    since_best = 0
    start = clock()
    for epoch in range(1, int(cfg.max_epochs) + 1):
        order = epoch_order(len(stream), cfg.seed, epoch)
        total = 0.0
        for lo in range(0, len(order), bs):
            total += grad_step(model, stream[order[lo:lo + bs]], cfg.lr, optimizer)
        score = monitor(model, epoch) if monitor is not None else validation_rmse(model, val)
        elapsed = 0.0 if cfg.deterministic else clock() - start
        result.history.append(EpochRecord(epoch, total / len(stream), float(score), elapsed))
        if score < result.best_val_rmse - IMPROVEMENT_TOL:
            result.best_val_rmse = float(score)
            result.best_epoch = epoch
            result.model = model.copy()
            since_best = 0
        else:
            since_best += 1
        log.debug("epoch %d loss %.6g val %.6g", epoch, total / len(stream), score)
        if since_best >= cfg.patience:
            result.stopped_early = True
            break
    return result


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    mae: float
    mape: float
    n_total: int
    n_mape_included: int

    @property
    def n_mape_excluded(self):
        return self.n_total - self.n_mape_included

    def as_row(self):
        return {"rmse": self.rmse, "mae": self.mae, "mape": self.mape,
                "n_total": self.n_total, "n_mape_included": self.n_mape_included}


def compute_metrics(y_true, y_pred, mape_epsilon=1e-6) -> MetricsReport:
    """RMSE, MAE and MAPE (percent); MAPE skips targets with ``|y| < mape_epsilon``."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise UsageError("metrics need two non-empty arrays of equal shape")
    e = y_pred - y_true
    scale = float(np.max(np.abs(e)))
    # scaled so tiny or huge residuals neither underflow nor overflow when squared
    rmse = scale * float(np.sqrt(np.mean((e / scale) ** 2))) if scale > 0 else 0.0
    mae = float(np.mean(np.abs(e)))
    keep = np.abs(y_true) >= mape_epsilon
    n_keep = int(keep.sum())
    mape = float(100.0 * np.mean(np.abs(e[keep]) / np.abs(y_true[keep]))) if n_keep else math.nan
    return MetricsReport(rmse, mae, mape, int(e.size), n_keep)


def evaluate(model: CompletionModel, test_set: SparseTensor3, standardizer: Standardizer | None = None,
             tensor="X", mape_epsilon=1e-6) -> MetricsReport:
    """Metrics on ``test_set`` (training units) after mapping back to original units."""
    if len(test_set) == 0:
        raise UsageError("empty test set")
    s = standardizer or Standardizer(applied=False)
    pred = model.predict_many(tensor, test_set.indices)
    return compute_metrics(s.inverse_transform(test_set.values), s.inverse_transform(pred), mape_epsilon)


def impute(model: CompletionModel, triples, standardizer: Standardizer | None = None, tensor="X"):
    """``[((i, j, k), value), ...]`` with values in original units."""
    idx = np.asarray(list(triples), dtype=np.int64).reshape(-1, 3)
    s = standardizer or Standardizer(applied=False)
    vals = s.inverse_transform(model.predict_many(tensor, idx))
    return [((int(i), int(j), int(k)), float(v)) for (i, j, k), v in zip(idx, vals)]


def write_history(path, history):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_rmse", "seconds_elapsed"])
        for rec in history:
            w.writerow([rec.epoch, repr(float(rec.train_loss)), repr(float(rec.val_rmse)), f"{rec.seconds_elapsed:.6f}"])
    return path


METRIC_COLUMNS = ["dataset", "model", "rank", "rmse", "mae", "mape", "n_total", "n_mape_included"]


def write_metrics(path, rows):
    """One row per (dataset, model, rank); ``rows`` are dicts with :data:`METRIC_COLUMNS` keys."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, METRIC_COLUMNS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in row.items()})
    return path
