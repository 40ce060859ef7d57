import copy
import json
import logging
import math
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import FoldAssignment, PairedDataset
from .errors import ConfigurationError, DivergenceError, InputError
from .evaluation import predict_logits
from .models import Checkpoint, FusionNet, ModelSpec, build_model, save_checkpoint

log = logging.getLogger(__name__)

HISTORY_FILE = "history.jsonl"
BEST_CHECKPOINT = "best.pt"


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings; defaults are the full protocol, smaller values give desk-scale runs."""

    batch_size: int = 128
    epochs: int = 300
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    keep_checkpoints: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be positive, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigurationError(f"betas must be two values in [0, 1), got {self.betas}")


@dataclass(frozen=True, eq=False)
class Split:
    train: np.ndarray
    validation: np.ndarray

    @classmethod
    def from_folds(cls, folds: FoldAssignment, fold: int) -> "Split":
        return cls(train=folds.train_indices(fold), validation=folds.validation_indices(fold))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    validation_accuracy: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def validation_accuracies(self) -> list[float]:
        return [r.validation_accuracy for r in self.records]


@dataclass(frozen=True)
class TrainResult:
    history: TrainHistory
    best_epoch: int
    best_validation_accuracy: float
    checkpoints: tuple[Path, ...] = ()


def select_best_epoch(history: TrainHistory) -> int:
    """Epoch with the highest validation accuracy, the earliest on ties."""
    if not len(history):
        raise InputError("Cannot select a best epoch from an empty history")
    accuracies = history.validation_accuracies
    return accuracies.index(max(accuracies))


def _batches(order: torch.Tensor, batch_size: int) -> list[torch.Tensor]:
    batches = list(torch.split(order, batch_size))
    # batch norm cannot normalize a single sample in training mode
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = torch.cat(batches[-2:])
        batches.pop()
    return batches


def _accuracy(logits: torch.Tensor, targets: torch.Tensor) -> float:
    return float((logits.argmax(dim=1) == targets).double().mean())


def train(
    model: FusionNet,
    dataset: PairedDataset,
    split: Split,
    cfg: TrainConfig,
    run_dir: Path | None = None,
    fold: int | None = None,
) -> TrainResult:
    """
    Fit ``model`` in place on ``split.train`` and validate after every epoch.

    When ``run_dir`` is given, one JSON line per epoch goes to ``history.jsonl``
    and a checkpoint is written for every epoch that improves validation
    accuracy. On return the model holds the parameters of the best epoch.

    Raises:
        ConfigurationError: the training split has fewer than two pairs or the validation split is empty
        DivergenceError: the loss became NaN or infinite
    """
    if len(split.train) < 2:
        raise ConfigurationError(f"Training split needs at least 2 pairs, got {len(split.train)}")
    if len(split.validation) == 0:
        raise ConfigurationError("Validation split is empty")

    dtype = next(model.parameters()).dtype
    np_dtype = np.float64 if dtype == torch.float64 else np.float32
    images, audio, targets = (torch.from_numpy(a) for a in dataset.arrays(split.train, np_dtype))
    val_images, val_audio, val_targets = (torch.from_numpy(a) for a in dataset.arrays(split.validation, np_dtype))

    history = TrainHistory()
    checkpoints: list[Path] = []
    best_accuracy, best_state = -math.inf, None
    history_path = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        history_path = run_dir / HISTORY_FILE
        history_path.write_text("")

    log.info(
        "Training %s on %d pairs (%d validation) for %d epochs",
        model.spec.arch.value, len(split.train), len(split.validation), cfg.epochs,
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    generator = torch.Generator().manual_seed(cfg.seed)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            model.train()
            loss_sum, correct = 0.0, 0
            for step, idx in enumerate(_batches(torch.randperm(len(targets), generator=generator), cfg.batch_size)):
                logits = model(images[idx], audio[idx])
                loss = F.cross_entropy(logits, targets[idx])
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        f"Loss became {loss.item()} at epoch {epoch}, batch {step}; "
                        f"last epoch loss {history.train_losses[-1] if len(history) else 'n/a'}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                loss_sum += loss.item() * len(idx)
                correct += int((logits.argmax(dim=1) == targets[idx]).sum())

            validation_accuracy = _accuracy(predict_logits(model, val_images, val_audio), val_targets)
            record = EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / len(targets),
                train_accuracy=correct / len(targets),
                validation_accuracy=validation_accuracy,
                seconds=time.perf_counter() - start,
            )
            history.records.append(record)
            log.debug("epoch %d: %s", epoch, record)

            if history_path is not None:
                line = {**asdict(record), "timestamp": datetime.now(timezone.utc).isoformat()}
                with history_path.open("a") as f:
                    f.write(json.dumps(line) + "\n")

            if validation_accuracy > best_accuracy:
                best_accuracy = validation_accuracy
                best_state = copy.deepcopy(model.state_dict())
                if run_dir is not None and cfg.keep_checkpoints:
                    checkpoint = Checkpoint(
                        spec=model.spec, seed=cfg.seed, epoch=epoch, fold=fold,
                        metrics={"validation_accuracy": validation_accuracy},
                    )
                    checkpoints.append(save_checkpoint(run_dir / f"epoch-{epoch:03d}.pt", model, checkpoint))
                    save_checkpoint(run_dir / BEST_CHECKPOINT, model, checkpoint)

    model.load_state_dict(best_state)
    model.eval()
    best_epoch = select_best_epoch(history)
    log.info("Best epoch %d with validation accuracy %.4f", best_epoch, best_accuracy)
    if run_dir is not None and cfg.keep_checkpoints:
        checkpoints.append(run_dir / BEST_CHECKPOINT)
    return TrainResult(
        history=history, best_epoch=best_epoch, best_validation_accuracy=best_accuracy, checkpoints=tuple(checkpoints)
    )


@dataclass(frozen=True)
class CrossValidationResult:
    fold_results: tuple[TrainResult, ...]

    @property
    def accuracies(self) -> list[float]:
        return [r.best_validation_accuracy for r in self.fold_results]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def cross_validate(
    spec: ModelSpec,
    dataset: PairedDataset,
    folds: FoldAssignment,
    cfg: TrainConfig,
    run_dir: Callable[[int], Path] | None = None,
) -> CrossValidationResult:
    """Train one fresh model per fold and collect the best-epoch validation accuracies."""
    results = []
    for fold in range(folds.k):
        model = build_model(spec, cfg.seed)
        results.append(train(model, dataset, Split.from_folds(folds, fold), cfg, run_dir(fold) if run_dir else None, fold=fold))
    result = CrossValidationResult(tuple(results))
    log.info("%d-fold validation accuracy %.4f ± %.4f", folds.k, result.mean, result.std)
    return result
