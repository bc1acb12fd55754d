"""Loss, Adam, early stopping, threshold metrics and per-frame prediction."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import tensor_autograd as ta
from .network import Model
from .optical_flow import FlowParams, estimate_flow, flow_to_color
from .pipeline import FIRST_USABLE_INDEX, FLOW_LAGS, Dataset, fuse_inputs
from .tensor_autograd import Parameter, Tape, Tensor

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
SWEEP_THRESHOLDS = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_adam: float = 1e-8
    max_epochs: int = 100
    early_stop_patience: int = 20
    batch_size: int = 64
    threshold: float = 0.5
    seed: int = 0
    monitor: str = "val_loss"
    pos_weight: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.early_stop_patience < self.max_epochs:
            raise ValueError("early_stop_patience must be smaller than max_epochs")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.monitor not in ("val_loss", "train_loss"):
            raise ValueError(f"monitor must be val_loss or train_loss, got {self.monitor!r}")
        if self.pos_weight <= 0:
            raise ValueError("pos_weight must be positive")


# ---------------------------------------------------------------------------
# loss


def binary_cross_entropy(probs: Tensor, targets, pos_weight: float = 1.0) -> Tensor:
    """Mean of -[t log y + (1 - t) log(1 - y)] with y clamped to [1e-7, 1 - 1e-7]."""
    if not isinstance(targets, Tensor):
        targets = Tensor(np.asarray(targets, dtype=probs.dtype))
    y = ta.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = targets * ta.log(y)
    if pos_weight != 1.0:
        pos = pos * pos_weight
    neg = (1.0 - targets) * ta.log(1.0 - y)
    return ta.mean(-(pos + neg))


def bce_value(probs: np.ndarray, targets: np.ndarray) -> float:
    y = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.asarray(targets, dtype=np.float64)
    return float(np.mean(-(t * np.log(y) + (1 - t) * np.log(1 - y)))) if y.size else 0.0


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with bias correction; only trainable parameters are touched."""

    def __init__(self, params: Iterable[Parameter], learning_rate=0.001, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr, self.beta1, self.beta2, self.epsilon = learning_rate, beta1, beta2, epsilon
        self.steps = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    @classmethod
    def from_config(cls, params, config: TrainConfig) -> "Adam":
        return cls(params, config.learning_rate, config.beta1, config.beta2, config.epsilon_adam)

    def step(self) -> None:
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for p in self.params:
            g = p.grad
            m, v = self.m[id(p)], self.v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
            p.data -= update.astype(p.dtype, copy=False)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, probs, labels, threshold: float = 0.5) -> "ConfusionCounts":
        pred = np.asarray(probs) >= threshold
        truth = np.asarray(labels).astype(bool)
        return cls(tp=int((pred & truth).sum()), tn=int((~pred & ~truth).sum()),
                   fp=int((pred & ~truth).sum()), fn=int((~pred & truth).sum()))


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    false_positive_rate: float
    f1: float
    loss: float = 0.0
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)
    threshold: float = 0.5

    @classmethod
    def from_counts(cls, counts: ConfusionCounts, loss: float = 0.0,
                    threshold: float = 0.5) -> "MetricsReport":
        # undefined ratios (empty denominators) are reported as 0
        precision = _ratio(counts.tp, counts.tp + counts.fp)
        recall = _ratio(counts.tp, counts.tp + counts.fn)
        return cls(accuracy=_ratio(counts.tp + counts.tn, counts.total),
                   precision=precision,
                   recall=recall,
                   false_positive_rate=_ratio(counts.fp, counts.fp + counts.tn),
                   f1=f1_score(precision, recall),
                   loss=loss, counts=counts, threshold=threshold)

    def as_dict(self) -> dict:
        out = asdict(self)
        out.update(out.pop("counts"))
        return out

    def format(self) -> str:
        c = self.counts
        return "\n".join([
            f"threshold\t{self.threshold:g}",
            f"samples\t{c.total}",
            f"tp\t{c.tp}", f"tn\t{c.tn}", f"fp\t{c.fp}", f"fn\t{c.fn}",
            f"accuracy\t{self.accuracy:.6f}",
            f"precision\t{self.precision:.6f}",
            f"recall\t{self.recall:.6f}",
            f"false_positive_rate\t{self.false_positive_rate:.6f}",
            f"f1\t{self.f1:.6f}",
            f"loss\t{self.loss:.6f}",
        ])


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def threshold_sweep(probs, labels, thresholds: Sequence[float] = SWEEP_THRESHOLDS) -> list[MetricsReport]:
    loss = bce_value(probs, labels)
    return [MetricsReport.from_counts(ConfusionCounts.from_predictions(probs, labels, t), loss, t)
            for t in thresholds]


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


class EarlyStopping:
    """Stop once the monitored loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, value: float, epoch: int) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if value < self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


@dataclass
class TrainState:
    epoch: int = 0
    best_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    stopped_early: bool = False
    history: list[EpochRecord] = field(default_factory=list)
    best_weights: Optional[dict] = None
    optimizer: Optional[Adam] = None


def run_epochs(fit_epoch: Callable[[int], tuple[float, float]],
               validate: Callable[[int], tuple[float, float]],
               config: TrainConfig,
               on_improve: Optional[Callable[[int], None]] = None) -> TrainState:
    """The epoch loop with early stopping, independent of what is being trained."""
    state = TrainState()
    stopper = EarlyStopping(config.early_stop_patience)
    for epoch in range(1, config.max_epochs + 1):
        train_loss, train_acc = fit_epoch(epoch)
        val_loss, val_acc = validate(epoch)
        state.epoch = epoch
        state.history.append(EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc))
        monitored = val_loss if config.monitor == "val_loss" else train_loss
        improved, stop = stopper.update(monitored, epoch)
        state.best_loss, state.best_epoch = stopper.best, stopper.best_epoch
        state.epochs_since_improvement = stopper.wait
        if improved and on_improve is not None:
            on_improve(epoch)
        log.info("epoch %d: train loss %.4f acc %.3f, val loss %.4f acc %.3f%s", epoch,
                 train_loss, train_acc, val_loss, val_acc, " *" if improved else "")
        if stop:
            state.stopped_early = True
            break
    return state


def predict_batches(model: Model, batches) -> tuple[np.ndarray, np.ndarray, list]:
    probs, labels, keys = [], [], []
    for x, y, chunk in batches:
        probs.append(model.forward(x, training=False).data.astype(np.float64))
        labels.append(y)
        keys.extend(chunk)
    if not probs:
        return np.zeros(0), np.zeros(0), []
    return np.concatenate(probs), np.concatenate(labels), keys


def train(model: Model, dataset: Dataset, config: TrainConfig = TrainConfig()) -> TrainState:
    """Fit ``model`` on the training split, restoring the best monitored weights at the end."""
    if not dataset.split.train:
        raise ValueError("training split is empty")
    if not dataset.split.val and config.monitor == "val_loss":
        raise ValueError("validation split is empty")
    optimizer = Adam.from_config(model.parameters(), config)
    rng = np.random.default_rng(config.seed)
    best: dict = {}

    def fit_epoch(epoch: int) -> tuple[float, float]:
        total_loss, correct, count = 0.0, 0, 0
        for x, y, _ in dataset.batches("train", epoch, config.batch_size):
            model.zero_grad()
            with Tape() as tape:
                probs = model.forward(x, training=True, rng=rng)
                loss = binary_cross_entropy(probs, y, config.pos_weight)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}; "
                                    "check the learning rate and input ranges")
            tape.backward(loss)
            optimizer.step()
            total_loss += value * len(y)
            correct += int(((probs.data >= config.threshold) == (y >= 0.5)).sum())
            count += len(y)
        return total_loss / count, correct / count

    def validate(epoch: int) -> tuple[float, float]:
        if not dataset.split.val:
            return float("nan"), float("nan")
        probs, labels, _ = predict_batches(model, dataset.batches("val", batch_size=config.batch_size))
        acc = float(((probs >= config.threshold) == (labels >= 0.5)).mean())
        return bce_value(probs, labels), acc

    def remember(epoch: int) -> None:
        best["weights"] = model.state()

    state = run_epochs(fit_epoch, validate, config, remember)
    if "weights" in best:
        model.load_state(best["weights"])
        state.best_weights = best["weights"]
    state.optimizer = optimizer
    return state


@dataclass
class PredictionRecord:
    clip_id: str
    frame_index: int
    probability: float
    predicted: int
    label: Optional[int] = None


def evaluate(model: Model, dataset: Dataset, split: str = "test", threshold: float = 0.5,
             batch_size: Optional[int] = None) -> tuple[MetricsReport, list[PredictionRecord]]:
    """Metrics and the per-frame probability table for one split."""
    if not dataset.split[split]:
        raise ValueError(f"{split} split is empty")
    probs, labels, keys = predict_batches(model, dataset.batches(split, batch_size=batch_size))
    counts = ConfusionCounts.from_predictions(probs, labels, threshold)
    report = MetricsReport.from_counts(counts, bce_value(probs, labels), threshold)
    records = [PredictionRecord(c, i, float(p), int(p >= threshold), int(t))
               for (c, i), p, t in zip(keys, probs, labels)]
    return report, records


def predict_clip(model: Model, frames: Sequence[np.ndarray], threshold: float = 0.5,
                 clip_id: str = "clip", flow_params: FlowParams = FlowParams(),
                 batch_size: int = 64) -> list[PredictionRecord]:
    """Per-frame predictions for a clip of resized [0, 1] RGB frames, from index 4 on."""
    if len(frames) <= FIRST_USABLE_INDEX:
        warnings.warn(f"clip {clip_id} has {len(frames)} frames; at least "
                      f"{FIRST_USABLE_INDEX + 1} are needed for a prediction")
        return []
    colors = [None] + [flow_to_color(estimate_flow(frames[t - 1], frames[t], flow_params))
                       for t in range(1, len(frames))]
    indices = list(range(FIRST_USABLE_INDEX, len(frames)))
    records = []
    for start in range(0, len(indices), batch_size):
        chunk = indices[start:start + batch_size]
        x = np.stack([fuse_inputs(frames[t], [colors[t - k] for k in range(FLOW_LAGS)])
                      for t in chunk])
        probs = model.forward(x, training=False).data
        records.extend(PredictionRecord(clip_id, t, float(p), int(p >= threshold))
                       for t, p in zip(chunk, probs))
    return records


def predicted_intervals(records: Sequence[PredictionRecord]) -> list[tuple[int, int]]:
    """Inclusive (first, last) frame-index runs predicted as near misses."""
    intervals: list[list[int]] = []
    for r in records:
        if not r.predicted:
            continue
        if intervals and intervals[-1][1] == r.frame_index - 1:
            intervals[-1][1] = r.frame_index
        else:
            intervals.append([r.frame_index, r.frame_index])
    return [tuple(i) for i in intervals]


# ---------------------------------------------------------------------------
# delimited outputs


def write_predictions(path, records: Sequence[PredictionRecord]) -> None:
    with_labels = any(r.label is not None for r in records)
    header = ["clip_id", "frame_index", "probability", "predicted"] + (["label"] if with_labels else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in records:
            row = [r.clip_id, r.frame_index, f"{r.probability:.6f}", r.predicted]
            if with_labels:
                row.append("" if r.label is None else r.label)
            writer.writerow(row)


def write_history(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for r in history:
            writer.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.train_acc:.6f}",
                             f"{r.val_loss:.6f}", f"{r.val_acc:.6f}"])


def write_sweep(path, reports: Sequence[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "accuracy", "precision", "recall", "false_positive_rate", "f1",
                         "tp", "tn", "fp", "fn"])
        for r in reports:
            c = r.counts
            writer.writerow([f"{r.threshold:.2f}", f"{r.accuracy:.6f}", f"{r.precision:.6f}",
                             f"{r.recall:.6f}", f"{r.false_positive_rate:.6f}", f"{r.f1:.6f}",
                             c.tp, c.tn, c.fp, c.fn])
