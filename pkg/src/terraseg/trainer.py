"""Training loop: composite loss, epoch/validation cycle, best-checkpoint retention."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import DatasetManifest, ManifestEntry, batches, split_dataset
from .errors import ConfigurationError, DataError, TrainingError
from .losses import composite_loss
from .metrics import ConfusionMatrix, MetricsReport, build_report, mean_iou, total_pa
from .model import SegmentationModel
from .nn import Parameter

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 2e-5
    split_ratio: float = 0.8
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: Optional[float] = 1.0  # None disables clipping
    checkpoint_dir: str = "checkpoints"
    ablate_channels: tuple = ()

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigurationError(f"split_ratio must be in (0, 1), got {self.split_ratio}")
        self.betas = tuple(self.betas)
        self.ablate_channels = tuple(self.ablate_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["ablate_channels"] = list(self.ablate_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class AdamW:
    """Adaptive-moment update with decoupled weight decay and bias correction.

    ``step`` consumes the accumulated gradients and clears them; a trainable
    parameter with no gradient is treated as a broken graph and rejected.
    """

    def __init__(self, params: Sequence[Parameter], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise TrainingError(f"parameter {p.name or '<unnamed>'} has no gradient; graph is broken")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update
            p.grad = None


def clip_gradient_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_total_pa: Optional[float]
    val_mean_iou: Optional[float]
    wall_time: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    @property
    def best_epoch(self) -> int:
        losses = [r.val_loss for r in self.records]
        return int(np.argmin(losses))

    def save(self, path) -> None:
        with Path(path).open("w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r)) + "\n")

    @classmethod
    def load(cls, path) -> "TrainLog":
        records = []
        with Path(path).open() as fh:
            for line in fh:
                if line.strip():
                    records.append(EpochRecord(**json.loads(line)))
        return cls(records=records)


def dataset_loss(model: SegmentationModel, entries: Sequence[ManifestEntry], manifest: DatasetManifest,
                 batch_size: int = 8, ablate_channels: Sequence[int] = ()) -> float:
    """Frame-weighted mean composite loss over entries, parameters frozen."""
    if not entries:
        raise DataError("no entries to compute a loss over")
    total = 0.0
    frames = 0
    with T.no_grad():
        for batch in batches(entries, manifest, batch_size, seed=0, epoch=0, shuffle=False,
                             ablate_channels=ablate_channels):
            loss = composite_loss(model(batch.inputs), batch.labels, manifest.class_set)
            n = batch.inputs.shape[0]
            total += loss.item() * n
            frames += n
    return total / frames


def evaluate(model: SegmentationModel, entries: Sequence[ManifestEntry], manifest: DatasetManifest,
             batch_size: int = 8, ablate_channels: Sequence[int] = (),
             tn_inclusive_pa: bool = False, ignore_void_pixels: bool = False) -> MetricsReport:
    """Confusion-matrix metrics over labeled entries with frozen parameters."""
    if not entries:
        raise DataError("no entries to evaluate")
    conf = ConfusionMatrix(len(manifest.class_set))
    for batch in batches(entries, manifest, batch_size, seed=0, epoch=0, shuffle=False,
                         ablate_channels=ablate_channels):
        pred = model.predict(batch.inputs)
        conf.add(pred, batch.labels)
    return build_report(conf, manifest.class_set, tn_inclusive_pa=tn_inclusive_pa,
                        ignore_void_pixels=ignore_void_pixels)


def _val_stats(model, entries, manifest, cfg) -> tuple:
    loss = dataset_loss(model, entries, manifest, cfg.batch_size, cfg.ablate_channels)
    conf = ConfusionMatrix(len(manifest.class_set))
    for batch in batches(entries, manifest, cfg.batch_size, seed=0, epoch=0, shuffle=False,
                         ablate_channels=cfg.ablate_channels):
        conf.add(model.predict(batch.inputs), batch.labels)
    return loss, total_pa(conf), mean_iou(conf, (manifest.class_set.void_index,))


def train(model: SegmentationModel, manifest: DatasetManifest, cfg: TrainConfig,
          train_entries: Optional[Sequence[ManifestEntry]] = None,
          val_entries: Optional[Sequence[ManifestEntry]] = None) -> tuple:
    """Run the full protocol; returns (best checkpoint path, TrainLog).

    Checkpoints go to ``cfg.checkpoint_dir``: ``best.ckpt`` is refreshed
    whenever the validation loss improves, ``last.ckpt`` always holds the
    final epoch. When the split leaves validation empty (tiny overfit
    datasets), validation runs on the training set itself.
    """
    if train_entries is None or val_entries is None:
        labeled = manifest.labeled_entries()
        if not labeled:
            raise DataError("manifest has no labeled entries to train on")
        train_entries, val_entries = split_dataset(labeled, cfg.split_ratio, cfg.seed)
    train_entries = list(train_entries)
    val_entries = list(val_entries)
    if not train_entries:
        raise DataError("training split is empty")
    if not val_entries:
        log.warning("validation split is empty; validating on the training set")
        val_entries = train_entries

    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    best_path = ckpt_dir / "best.ckpt"
    last_path = ckpt_dir / "last.ckpt"

    optimizer = AdamW(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas,
                      eps=cfg.eps, weight_decay=cfg.weight_decay)
    train_log = TrainLog()
    best_loss = np.inf

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        loss_sum = 0.0
        frame_count = 0
        for batch in batches(train_entries, manifest, cfg.batch_size, seed=cfg.seed, epoch=epoch,
                             ablate_channels=cfg.ablate_channels):
            logits = model(batch.inputs)
            loss = composite_loss(logits, batch.labels, manifest.class_set)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} on batch {list(batch.ids)} (epoch {epoch})")
            T.backward(loss)
            if cfg.clip_norm:
                clip_gradient_norm(optimizer.params, cfg.clip_norm)
            optimizer.step()
            n = batch.inputs.shape[0]
            loss_sum += value * n
            frame_count += n

        val_loss, val_pa, val_miou = _val_stats(model, val_entries, manifest, cfg)
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / frame_count,
            val_loss=val_loss,
            val_total_pa=val_pa,
            val_mean_iou=val_miou,
            wall_time=time.perf_counter() - started,
        )
        train_log.append(record)
        log.info("epoch %d: train %.4f val %.4f pa %s", epoch, record.train_loss, val_loss,
                 "n/a" if val_pa is None else f"{val_pa:.3f}")

        if val_loss < best_loss:
            best_loss = val_loss
            save_checkpoint(best_path, model.cfg, model.state_dict(),
                            metadata={"epoch": epoch, "val_loss": val_loss, "seed": cfg.seed})

    save_checkpoint(last_path, model.cfg, model.state_dict(),
                    metadata={"epoch": cfg.epochs - 1, "val_loss": train_log.records[-1].val_loss,
                              "seed": cfg.seed})
    return best_path, train_log
