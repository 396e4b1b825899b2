"""Training loop, saliency caching and batch prediction."""
from __future__ import annotations

import copy
import csv
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .data import ImageSet, batches
from .errors import ConfigError
from .metrics import EvalReport, PredictionSet, evaluate
from .model import ModelConfig, SVSECModel, loss_fn, make_optimizer, probabilities, save_checkpoint, scorer_config
from .saliency import compute_saliency

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_f1", "val_accuracy", "val_auc", "val_recall", "val_precision")


@dataclass
class TrainHyper:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0

    def validate(self) -> "TrainHyper":
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError(f"invalid training hyperparameters {asdict(self)}")
        return self


class SaliencyCache:
    """Saliency maps keyed by (image id, scorer checksum), in memory and optionally on disk."""

    def __init__(self, scorer, directory=None):
        self.scorer = scorer
        self.tag = scorer.checksum() if hasattr(scorer, "checksum") else "custom"
        self.directory = Path(directory) if directory else None
        self._mem = {}
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def _file(self, key: str) -> Path:
        digest = hashlib.sha1(key.encode("utf-8")).hexdigest()[:20]
        return self.directory / f"{digest}_{self.tag}.npy"

    def get(self, key: str, image: np.ndarray) -> np.ndarray:
        if key in self._mem:
            return self._mem[key]
        path = self._file(key) if self.directory is not None else None
        if path is not None and path.exists():
            values = np.load(path)
        else:
            values = compute_saliency(image[None], self.scorer, key).values
            if path is not None:
                np.save(path, values)
        self._mem[key] = values
        return values

    def batch(self, ids, images: np.ndarray) -> np.ndarray:
        return np.concatenate([self.get(k, im) for k, im in zip(ids, images)], axis=0)

    def warm(self, dataset: ImageSet) -> None:
        for i in range(len(dataset)):
            self.get(dataset.ids[i], dataset.image(i))


def default_scorer(cfg: ModelConfig) -> SVSECModel:
    """Randomly initialised plain CNN classifier at half resolution."""
    return SVSECModel(scorer_config(cfg))


@dataclass
class TrainResult:
    model: SVSECModel  # best-validation-accuracy weights
    best_epoch: int
    log: list = field(default_factory=list)
    final_params: dict = field(default_factory=dict)
    optimizer: object = None  # optimiser state at the best epoch


def predict(model: SVSECModel, dataset: ImageSet, cache: SaliencyCache | None = None,
            batch_size: int = 16) -> PredictionSet:
    probs = []
    for images, _, ids in batches(dataset, batch_size, 0, 0, shuffle=False):
        maps = cache.batch(ids, images) if model.cfg.uses_saliency else None
        probs.append(probabilities(model(images, maps), model.cfg.loss))
    return PredictionSet(dataset.labels, np.concatenate(probs, axis=0))


def evaluate_model(model, dataset, cache=None, batch_size: int = 16) -> EvalReport:
    return evaluate(predict(model, dataset, cache, batch_size), allow_missing_auc=True)


def train(train_set: ImageSet, val_set: ImageSet, cfg: ModelConfig, hyper: TrainHyper,
          scorer=None, cache: SaliencyCache | None = None, on_epoch=None) -> TrainResult:
    """Train from scratch, keeping the weights of the best validation-accuracy epoch.

    Each log row has the :data:`LOG_COLUMNS` keys. ``on_epoch(epoch, model,
    row)`` is called after every epoch; returning True ends training early.
    """
    hyper.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation splits must be non-empty")
    model = SVSECModel(cfg)
    params = model.parameters()
    opt = make_optimizer(hyper.optimizer, hyper.lr)
    criterion = loss_fn(cfg)
    if cfg.uses_saliency and cache is None:
        cache = SaliencyCache(scorer if scorer is not None else default_scorer(cfg))
    if cache is not None and cfg.uses_saliency:
        cache.warm(train_set)
        cache.warm(val_set)

    best_acc, best_epoch, best_state, best_opt = -1.0, -1, None, None
    rows = []
    for epoch in range(hyper.epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for images, labels, ids in batches(train_set, hyper.batch_size, hyper.seed, epoch):
            maps = cache.batch(ids, images) if cfg.uses_saliency else None
            with tc.Tape() as tape:
                loss = criterion(model(images, maps), labels)
            tc.backward(loss, tape, leaves=params.values())
            opt.step(params)
            total += float(loss.data) * len(labels)
            count += len(labels)
        report = evaluate_model(model, val_set, cache, hyper.batch_size)
        row = {
            "epoch": epoch,
            "train_loss": total / count,
            "val_f1": report.f1,
            "val_accuracy": report.accuracy,
            "val_auc": report.auc,
            "val_recall": report.recall,
            "val_precision": report.precision,
        }
        rows.append(row)
        log.info("epoch %d loss %.4f val acc %.4f (%.1fs)", epoch, row["train_loss"],
                 report.accuracy, time.perf_counter() - t0)
        if report.accuracy > best_acc:
            best_acc, best_epoch = report.accuracy, epoch
            best_state = {k: p.data.copy() for k, p in params.items()}
            best_opt = copy.deepcopy(opt)
        if on_epoch is not None and on_epoch(epoch, model, row):
            break

    final = {k: p.data.copy() for k, p in params.items()}
    best = SVSECModel(cfg, init=False)
    for k, p in best.parameters().items():
        p.data = best_state[k].copy()
    return TrainResult(best, best_epoch, rows, final, best_opt)


def write_log(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"]] + [f"{r[c]:.6f}" for c in LOG_COLUMNS[1:]])


def save_result(result: TrainResult, path, hyper: TrainHyper, extra: dict | None = None) -> None:
    save_checkpoint(path, result.model, optimizer=result.optimizer, epoch=result.best_epoch,
                    rng_state={"seed": hyper.seed, "epoch": result.best_epoch},
                    extra={"hyper": asdict(hyper), "best_epoch": result.best_epoch, **(extra or {})})
