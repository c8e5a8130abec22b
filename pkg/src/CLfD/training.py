import copy
import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional

import numpy as np
import pandas as pd
import torch

from CLfD.backbone import AdamOptimizer, ParameterSet, adam_step, backward, load_archive, save_archive
from CLfD.evaluation import alignment_suite
from CLfD.exceptions import CheckpointError, ConfigError, DivergenceError
from CLfD.losses import DEFAULT_MARGIN, DEFAULT_TAU, nt_xent_batch, sample_negatives, triplet_batch_loss
from CLfD.models import CLfDModel, build_model, frames_to_tensor
from CLfD.scene import ALL_VIEWS
from CLfD.synth_data import ContrastiveBatch, Dataset, load_dataset, sample_contrastive_batch
from CLfD.utils import rng_for

logger = logging.getLogger(__name__)

OBJECTIVES = ("ntxent", "triplet")
METRIC_COLUMNS = ["epoch", "train_loss", "val_alignment_error", "wall_time_s"]
PREFETCH_CAPACITY = 2


@dataclass
class TrainConfig:
    dataset: str = ""
    objective: str = "ntxent"
    batch_size: int = 32
    epochs: int = 200
    tau: float = DEFAULT_TAU
    margin: float = DEFAULT_MARGIN
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    validation_every: int = 25
    seed: int = 0
    encoder: str = "desk_cnn"
    use_projection_head: Optional[bool] = None
    train_views: List[int] = field(default_factory=lambda: list(ALL_VIEWS))
    batches_per_epoch: Optional[int] = None
    record_wall_time: bool = False

    def resolved(self) -> "TrainConfig":
        """Copy with the projection-head default filled in for the chosen objective."""
        if self.use_projection_head is not None:
            return self
        # the triplet baseline trains f directly
        return replace(self, use_projection_head=self.objective == "ntxent")

    def validate(self) -> None:
        if not self.dataset:
            raise ConfigError("dataset path is required")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.objective == "triplet" and self.batch_size < 2:
            raise ConfigError("triplet objective needs batch_size >= 2")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.validation_every < 1:
            raise ConfigError(f"validation_every must be >= 1, got {self.validation_every}")
        if len(set(self.train_views)) < 2:
            raise ConfigError(f"train_views needs at least two distinct cameras, got {self.train_views}")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ConfigError(f"batches_per_epoch must be >= 1, got {self.batches_per_epoch}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class ModelCheckpoint:
    model: CLfDModel
    config: TrainConfig
    epoch: int = 0
    best_val_error: Optional[float] = None
    best_epoch: Optional[int] = None
    dataset_hash: str = ""
    optimizer_step: int = 0
    optimizer_state: Dict[str, torch.Tensor] = field(default_factory=dict)
    best_state: Optional[Dict[str, torch.Tensor]] = None
    metrics: List[Dict[str, Any]] = field(default_factory=list)

    def tensors(self) -> Dict[str, torch.Tensor]:
        tensors: Dict[str, torch.Tensor] = {}
        for name, p in self.model.named_parameters():
            tensors[f"model.{name}"] = p.detach()
        tensors.update(self.optimizer_state)
        if self.best_state is not None:
            for name, p in self.best_state.items():
                tensors[f"best.{name}"] = p
        return tensors

    def metadata(self) -> Dict[str, Any]:
        return {
            "kind": "encoder",
            "encoder": self.model.encoder_name,
            "use_projection_head": self.model.use_projection_head,
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "best_val_error": self.best_val_error,
            "best_epoch": self.best_epoch,
            "dataset_hash": self.dataset_hash,
            "optimizer_step": self.optimizer_step,
            "metrics": self.metrics,
        }

    def save(self, path: Path) -> str:
        """Write the checkpoint archive; returns its sha256."""
        return save_archive(path, self.tensors(), self.metadata(), precision="float32")

    @classmethod
    def load(cls, path: Path) -> "ModelCheckpoint":
        tensors, meta = load_archive(path)
        if meta.get("kind") != "encoder":
            raise CheckpointError(f"{path}: not an encoder checkpoint")
        try:
            config = TrainConfig.from_dict(meta["config"])
            model = CLfDModel(encoder=meta["encoder"], use_projection_head=meta["use_projection_head"])
            state = {name[len("model."):]: t for name, t in tensors.items() if name.startswith("model.")}
            model.load_state_dict(state, strict=True)
        except (KeyError, RuntimeError, TypeError) as e:
            logger.error(f"Failed to restore checkpoint {path}: {e}")
            raise CheckpointError(f"{path}: incompatible checkpoint: {e}") from e
        best = {name[len("best."):]: t for name, t in tensors.items() if name.startswith("best.")}
        return cls(
            model=model,
            config=config,
            epoch=int(meta["epoch"]),
            best_val_error=meta.get("best_val_error"),
            best_epoch=meta.get("best_epoch"),
            dataset_hash=meta.get("dataset_hash", ""),
            optimizer_step=int(meta.get("optimizer_step", 0)),
            optimizer_state={name: t for name, t in tensors.items() if name.startswith("adam.")},
            best_state=best or None,
            metrics=list(meta.get("metrics", [])),
        )

    def best_model(self) -> CLfDModel:
        """Model at the lowest validation alignment error (the current one if never validated)."""
        if self.best_state is None:
            return self.model
        model = copy.deepcopy(self.model)
        model.load_state_dict(self.best_state)
        return model


def load_encoder(path: Path, best: bool = True) -> CLfDModel:
    checkpoint = ModelCheckpoint.load(path)
    model = checkpoint.best_model() if best else checkpoint.model
    model.eval()
    return model


@dataclass
class TrainResult:
    last: ModelCheckpoint
    metrics: pd.DataFrame

    @property
    def best_val_error(self) -> Optional[float]:
        return self.last.best_val_error


def prefetch(iterable: Iterable, capacity: int = PREFETCH_CAPACITY) -> Iterator:
    """Produce items on a background thread through a bounded FIFO queue; order is preserved."""
    items: "queue.Queue" = queue.Queue(maxsize=capacity)
    sentinel = object()
    stop = threading.Event()

    def produce():
        try:
            for item in iterable:
                if stop.is_set():
                    return
                items.put(item)
            items.put(sentinel)
        except BaseException as e:  # re-raised in the consumer
            items.put(e)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = items.get()
            if item is sentinel:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while worker.is_alive():
            try:
                items.get_nowait()
            except queue.Empty:
                worker.join(timeout=0.01)


class Trainer:
    """Runs contrastive (or triplet baseline) training epochs on a dataset."""

    def __init__(self, config: TrainConfig, dataset: Optional[Dataset] = None, out_dir: Optional[Path] = None):
        config.validate()
        self.config = config = config.resolved()
        self.dataset = dataset if dataset is not None else load_dataset(Path(config.dataset))
        self.out_dir = Path(out_dir) if out_dir is not None else None
        available = self.dataset.manifest.view_count
        if any(not 0 <= v < available for v in config.train_views):
            raise ConfigError(f"train_views {config.train_views} outside the dataset's {available} cameras")
        train_pairs = sum(self.dataset.manifest.frames[d] for d in self.dataset.split("train"))
        self.batches_per_epoch = config.batches_per_epoch or max(1, train_pairs // config.batch_size)
        self.loss_history: List[float] = []

    def fresh_checkpoint(self) -> ModelCheckpoint:
        init_seed = int(rng_for(self.config.seed, "init").integers(0, 2**62))
        model = build_model(init_seed, self.config.encoder, bool(self.config.use_projection_head))
        return ModelCheckpoint(model=model, config=self.config, dataset_hash=self.dataset.manifest.content_hash)

    def batches(self, epoch: int) -> Iterator[ContrastiveBatch]:
        rng = rng_for(self.config.seed, "batch", epoch)
        for _ in range(self.batches_per_epoch):
            yield sample_contrastive_batch(
                self.dataset, "train", self.config.batch_size, rng, views=self.config.train_views
            )

    def batch_loss(self, model: CLfDModel, batch: ContrastiveBatch, negatives_rng: np.random.Generator) -> torch.Tensor:
        h = model.encode(frames_to_tensor(batch.images))
        if self.config.objective == "ntxent":
            return nt_xent_batch(model.project(h), self.config.tau)
        features = model.project(h) if model.use_projection_head else h
        negatives = sample_negatives(batch.size, negatives_rng)
        return triplet_batch_loss(features, negatives, self.config.margin)

    def run(self, checkpoint: ModelCheckpoint, epochs: int) -> TrainResult:
        model = checkpoint.model
        model.train()
        params = ParameterSet.from_module(model)
        optimizer = AdamOptimizer(params, self.config.lr, self.config.beta1, self.config.beta2, self.config.eps)
        optimizer.load_state_tensors(checkpoint.optimizer_state, checkpoint.optimizer_step)
        first_epoch = checkpoint.epoch + 1
        last_epoch = checkpoint.epoch + epochs
        logger.info(
            f"Training {self.config.objective} epochs {first_epoch}-{last_epoch}, "
            f"{self.batches_per_epoch} batches of {self.config.batch_size} pairs"
        )

        for epoch in range(first_epoch, last_epoch + 1):
            started = time.perf_counter()
            negatives_rng = rng_for(self.config.seed, "negatives", epoch)
            losses = []
            for batch_index, batch in enumerate(prefetch(self.batches(epoch))):
                loss = self.batch_loss(model, batch, negatives_rng)
                value = float(loss.item())
                self.loss_history.append(value)
                if not math.isfinite(value):
                    tail = ", ".join(f"{v:.4f}" for v in self.loss_history[-10:])
                    logger.error(f"Non-finite loss at epoch {epoch}, batch {batch_index}")
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, batch {batch_index}; recent losses: [{tail}]"
                    )
                adam_step(optimizer, backward(loss, params))
                losses.append(value)
                logger.debug(f"epoch {epoch} batch {batch_index} loss {value:.6f}")

            val_error = float("nan")
            if epoch % self.config.validation_every == 0:
                model.eval()
                val_error = alignment_suite(model, self.dataset, "val").mean
                model.train()
                if checkpoint.best_val_error is None or val_error < checkpoint.best_val_error:
                    checkpoint.best_val_error = val_error
                    checkpoint.best_epoch = epoch
                    checkpoint.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                logger.info(f"Epoch {epoch}: validation alignment error {val_error * 100:.2f}%")

            wall_time = time.perf_counter() - started if self.config.record_wall_time else 0.0
            checkpoint.metrics.append(
                {
                    "epoch": epoch,
                    "train_loss": float(np.mean(losses)),
                    "val_alignment_error": None if math.isnan(val_error) else val_error,
                    "wall_time_s": wall_time,
                }
            )
            checkpoint.epoch = epoch
            checkpoint.optimizer_step = optimizer.step_count
            checkpoint.optimizer_state = dict(optimizer.state_tensors())
            if epoch % 10 == 0 or epoch == last_epoch:
                logger.info(f"Epoch {epoch}/{last_epoch}: train loss {np.mean(losses):.4f}")
            if self.out_dir is not None:
                write_metrics(checkpoint.metrics, self.out_dir / "metrics.csv")

        model.eval()
        if self.out_dir is not None:
            self.save_outputs(checkpoint)
        return TrainResult(last=checkpoint, metrics=metrics_frame(checkpoint.metrics))

    def save_outputs(self, checkpoint: ModelCheckpoint) -> None:
        assert self.out_dir is not None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        digest = checkpoint.save(self.out_dir / "last.ckpt")
        logger.info(f"Saved checkpoint {self.out_dir / 'last.ckpt'} (sha256 {digest})")
        best = ModelCheckpoint(
            model=checkpoint.best_model(),
            config=checkpoint.config,
            epoch=checkpoint.best_epoch if checkpoint.best_epoch is not None else checkpoint.epoch,
            best_val_error=checkpoint.best_val_error,
            best_epoch=checkpoint.best_epoch,
            dataset_hash=checkpoint.dataset_hash,
        )
        best.save(self.out_dir / "best.ckpt")
        write_metrics(checkpoint.metrics, self.out_dir / "metrics.csv")


def metrics_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def write_metrics(rows: List[Dict[str, Any]], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics_frame(rows).to_csv(path, index=False)


def train(config: TrainConfig, dataset: Optional[Dataset] = None, out_dir: Optional[Path] = None) -> TrainResult:
    """Train f and g from scratch for config.epochs epochs."""
    trainer = Trainer(config, dataset, out_dir)
    return trainer.run(trainer.fresh_checkpoint(), config.epochs)


def resume(
    checkpoint: ModelCheckpoint,
    extra_epochs: int,
    dataset: Optional[Dataset] = None,
    out_dir: Optional[Path] = None,
) -> TrainResult:
    """Continue a run with its restored optimizer state; train(k) + resume(m) equals train(k + m)."""
    if extra_epochs < 0:
        raise ConfigError(f"extra_epochs must be >= 0, got {extra_epochs}")
    trainer = Trainer(checkpoint.config, dataset, out_dir)
    if checkpoint.dataset_hash and checkpoint.dataset_hash != trainer.dataset.manifest.content_hash:
        raise CheckpointError(
            f"checkpoint was trained on dataset {checkpoint.dataset_hash}, "
            f"got {trainer.dataset.manifest.content_hash}"
        )
    if extra_epochs == 0:
        if out_dir is not None:
            trainer.save_outputs(checkpoint)
        return TrainResult(last=checkpoint, metrics=metrics_frame(checkpoint.metrics))
    return trainer.run(checkpoint, extra_epochs)
