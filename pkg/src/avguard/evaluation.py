"""
Metrics on normal (matched), attack (anomaly) and mixed validation sets.

Predictions are always over all five classes; on the attack set a pair
counts as a caught attack only when it is predicted ``anomaly``.
"""

import json
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import torch
from sklearn import metrics

from .dataset import PairedDataset, subset_indices
from .errors import FormatError, InputError
from .labels import N_CLASSES, Target
from .workspace import write_json

log = logging.getLogger(__name__)

SUBSETS = ("normal", "attack", "mixed")
PREDICT_BATCH = 512


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise InputError(f"Cannot merge {self.counts.shape} and {other.counts.shape} confusion matrices")
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    __hash__ = None


def confusion_matrix(
    predictions: Sequence[int] | np.ndarray, labels: Sequence[int] | np.ndarray, n_classes: int = N_CLASSES
) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if predictions.shape != labels.shape:
        raise InputError(f"{predictions.size} predictions for {labels.size} labels")
    for name, values in (("label", labels), ("prediction", predictions)):
        if values.size and (values.min() < 0 or values.max() >= n_classes):
            raise InputError(f"{name} out of range [0, {n_classes}): {values[(values < 0) | (values >= n_classes)][:5].tolist()}")

    counts = metrics.confusion_matrix(labels, predictions, labels=np.arange(n_classes))
    return ConfusionMatrix(counts.astype(np.int64))


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class EvalReport:
    subset: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: dict[str, ClassMetrics]
    confusion: ConfusionMatrix
    attack_success_rate: float | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "subset": self.subset,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "attack_success_rate": self.attack_success_rate,
            "per_class": {name: asdict(m) for name, m in self.per_class.items()},
            "confusion": self.confusion.counts.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EvalReport":
        return cls(
            subset=data["subset"],
            accuracy=data["accuracy"],
            precision=data["precision"],
            recall=data["recall"],
            f1=data["f1"],
            attack_success_rate=data.get("attack_success_rate"),
            per_class={name: ClassMetrics(**m) for name, m in data["per_class"].items()},
            confusion=ConfusionMatrix(np.asarray(data["confusion"], dtype=np.int64)),
            metadata=data.get("metadata", {}),
        )


def weighted_metrics(cm: ConfusionMatrix, subset: str = "mixed") -> EvalReport:
    """
    Accuracy plus support-weighted precision, recall and F1.

    Any per-class ratio with a zero denominator is 0.
    """
    total = cm.total
    if total == 0:
        raise InputError("Cannot compute metrics from an empty confusion matrix")

    # Back to label vectors, one entry per counted pair.
    classes = np.arange(cm.n_classes)
    true_idx, pred_idx = np.nonzero(cm.counts)
    weights = cm.counts[true_idx, pred_idx]
    y_true = np.repeat(true_idx, weights)
    y_pred = np.repeat(pred_idx, weights)

    precision, recall, f1, support = metrics.precision_recall_fscore_support(
        y_true, y_pred, labels=classes, average=None, zero_division=0
    )
    per_class = {
        Target(int(k)).word if k < len(Target) else str(k): ClassMetrics(
            precision=float(precision[k]), recall=float(recall[k]), f1=float(f1[k]), support=int(support[k])
        )
        for k in classes
    }
    w_precision, w_recall, w_f1, _ = metrics.precision_recall_fscore_support(
        y_true, y_pred, labels=classes, average="weighted", zero_division=0
    )

    return EvalReport(
        subset=subset,
        accuracy=float(metrics.accuracy_score(y_true, y_pred)),
        precision=float(w_precision),
        recall=float(w_recall),
        f1=float(w_f1),
        per_class=per_class,
        confusion=cm,
    )


def attack_success_rate(cm: ConfusionMatrix) -> float:
    """Fraction of anomaly pairs not predicted ``anomaly``; the matrix must hold anomaly pairs only."""
    anomaly = int(Target.ANOMALY)
    support = int(cm.counts[anomaly].sum())
    if support == 0:
        raise InputError("No anomaly pairs to measure attack success on")
    if support != cm.total:
        raise InputError(f"{cm.total - support} non-anomaly pairs in an attack-only evaluation")
    recall = int(cm.counts[anomaly, anomaly]) / support
    return 1.0 - recall


def predict_logits(
    model: torch.nn.Module, images: torch.Tensor, audio: torch.Tensor, batch_size: int = PREDICT_BATCH
) -> torch.Tensor:
    """Inference-mode logits, computed in fixed-size chunks."""
    model.eval()
    with torch.no_grad():
        starts = range(0, len(images), batch_size)
        return torch.cat([model(images[i : i + batch_size], audio[i : i + batch_size]) for i in starts])


def _inputs(model: torch.nn.Module, dataset: PairedDataset, indices: np.ndarray) -> tuple[torch.Tensor, torch.Tensor, np.ndarray]:
    spec = getattr(model, "spec", None)
    if spec is None:
        raise InputError(f"{type(model).__name__} is not a fusion model")
    images, audio, targets = dataset.arrays(indices)
    if audio.shape[1] != spec.audio_dim or images.shape[1] != spec.image_size:
        raise InputError(f"Model expects {spec.image_size}px images and {spec.audio_dim} audio features")
    dtype = next(model.parameters()).dtype
    return torch.from_numpy(images).to(dtype), torch.from_numpy(audio).to(dtype), targets


def evaluate(
    model: torch.nn.Module, dataset: PairedDataset, indices: Sequence[int] | np.ndarray, subset: str = "mixed"
) -> EvalReport:
    """Metrics of ``model`` on the ``subset`` pairs among ``indices``."""
    selected = subset_indices(dataset, indices, subset)
    if selected.size == 0:
        raise InputError(f"No {subset} pairs among the {len(indices)} selected")
    images, audio, targets = _inputs(model, dataset, selected)
    predictions = predict_logits(model, images, audio).argmax(dim=1).numpy()

    cm = confusion_matrix(predictions, targets)
    report = weighted_metrics(cm, subset)
    if subset == "attack":
        report = replace(report, attack_success_rate=attack_success_rate(cm))
    log.info("%s set: accuracy %.4f over %d pairs", subset, report.accuracy, cm.total)
    return report


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    values: np.ndarray
    labels: np.ndarray


def embed_penultimate(
    model: torch.nn.Module, dataset: PairedDataset, indices: Sequence[int] | np.ndarray | None = None
) -> EmbeddingSet:
    """Inference-mode activations feeding the classifier, one row per pair."""
    selected = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    images, audio, targets = _inputs(model, dataset, selected)
    model.eval()
    with torch.no_grad():
        starts = range(0, len(images), PREDICT_BATCH)
        chunks = [model.embed(images[i : i + PREDICT_BATCH], audio[i : i + PREDICT_BATCH]) for i in starts]
    values = torch.cat(chunks).double().numpy()
    if not np.isfinite(values).all():
        raise InputError("Model produced non-finite embeddings")
    return EmbeddingSet(values=values, labels=targets)


def save_report(path: Path, report: EvalReport) -> Path:
    return write_json(path, report.to_dict())


def load_report(path: Path) -> EvalReport:
    try:
        return EvalReport.from_dict(json.loads(path.read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: not an evaluation report: {e}") from e


def report_table(reports: dict[str, dict[str, EvalReport]]) -> pd.DataFrame:
    """One row per architecture with accuracy, precision, recall and F1 for each evaluated set."""
    rows = []
    for arch, by_subset in sorted(reports.items()):
        row: dict[str, Any] = {"network": arch}
        for subset in SUBSETS:
            report = by_subset.get(subset)
            if report is None:
                continue
            for metric in ("accuracy", "precision", "recall", "f1"):
                row[f"{subset}_{metric}"] = getattr(report, metric)
            if report.attack_success_rate is not None:
                row["attack_success_rate"] = report.attack_success_rate
        rows.append(row)
    return pd.DataFrame(rows)
