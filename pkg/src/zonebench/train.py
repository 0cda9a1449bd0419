"""Categorical cross-entropy training, prediction and deterministic mode."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import NUM_CLASSES, DatasetManifest, LabelMap, SliceImage, load_arrays
from .errors import ConfigError, DivergenceError, InputError, ShapeError
from .models import ModelHandle, forward, to_tensor

log = logging.getLogger(__name__)

EPS = 1e-7
DETERMINISTIC_ENV = "ZONEBENCH_DETERMINISTIC"
OPTIMIZER = {"name": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}

__all__ = [
    "TrainConfig",
    "TrainingHistory",
    "cce_loss",
    "train",
    "fit_arrays",
    "predict",
    "predict_classes",
    "save_checkpoint",
    "load_checkpoint",
    "deterministic_mode",
]


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") in ("1", "true", "yes")


def enable_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 6
    learning_rate: float = 1e-4
    train_fraction: float = 0.9
    shuffle_seed: int = 0
    checkpoint_dir: Path | None = None
    # stop once an epoch's mean training loss falls below this; None trains all epochs
    stop_loss: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.stop_loss is not None and not self.stop_loss > 0:
            raise ConfigError("stop_loss must be > 0")
        if self.checkpoint_dir is not None:
            self.checkpoint_dir = Path(self.checkpoint_dir)


@dataclass
class EpochRecord:
    epoch: int
    mean_train_loss: float
    mean_train_dsc: float
    seconds: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def final_loss(self) -> float:
        return self.records[-1].mean_train_loss

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_train_loss", "mean_train_dsc", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.mean_train_loss:.8f}", f"{r.mean_train_dsc:.6f}", f"{r.seconds:.3f}"])
        return path


def cce_loss(pred, target):
    """Mean over batch and pixels of ``-sum_c target_c * log(clamp(pred_c, eps, 1))``.

    Channel axis is last for numpy input and 1 (NCHW) for torch tensors;
    numpy in gives a float out, tensors stay differentiable.
    """
    if isinstance(pred, torch.Tensor):
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
        return -(target * torch.log(pred.clamp(EPS, 1.0))).sum(dim=1).mean()
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    return float(np.mean(-(target * np.log(np.clip(pred, EPS, 1.0))).sum(axis=-1)))


def _onehot_nchw(masks: np.ndarray, dtype) -> torch.Tensor:
    m = torch.from_numpy(masks.astype(np.int64))
    return torch.nn.functional.one_hot(m, NUM_CLASSES).permute(0, 3, 1, 2).to(dtype)


def fit_arrays(model: ModelHandle, images: np.ndarray, masks: np.ndarray, config: TrainConfig):
    """Train on in-memory ``(N, H, W, 1)`` images and ``(N, H, W)`` masks."""
    from .evaluation import mean_dsc_batch

    if len(images) == 0:
        raise InputError("training set is empty")
    enable_determinism(config.shuffle_seed)
    net = model.net
    dtype = next(net.parameters()).dtype
    x_all = to_tensor(images, model.config.input_size, dtype)
    y_all = _onehot_nchw(masks, dtype)
    opt = torch.optim.Adam(
        net.parameters(),
        lr=config.learning_rate,
        betas=(OPTIMIZER["beta1"], OPTIMIZER["beta2"]),
        eps=OPTIMIZER["eps"],
    )
    rng = np.random.default_rng(config.shuffle_seed)
    history = TrainingHistory(meta={"optimizer": dict(OPTIMIZER, lr=config.learning_rate), "epochs": config.epochs})
    ckpt_dir = config.checkpoint_dir
    best = math.inf
    n = len(x_all)
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        net.train()
        order = rng.permutation(n)
        loss_sum, dsc_vals = 0.0, []
        for step, lo in enumerate(range(0, n, config.batch_size)):
            idx = torch.from_numpy(order[lo : lo + config.batch_size])
            xb, yb = x_all[idx], y_all[idx]
            probs = net(xb)
            loss = cce_loss(probs, yb)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach()) * len(idx)
            pred = probs.detach().argmax(dim=1).numpy()
            dsc_vals.extend(mean_dsc_batch(pred, masks[order[lo : lo + config.batch_size]]))
        dsc = [d for d in dsc_vals if not math.isnan(d)]
        rec = EpochRecord(epoch, loss_sum / n, float(np.mean(dsc)) if dsc else math.nan, time.perf_counter() - start)
        history.records.append(rec)
        log.debug("epoch %d loss %.5f dsc %.4f", epoch, rec.mean_train_loss, rec.mean_train_dsc)
        if ckpt_dir is not None and rec.mean_train_loss < best:
            best = rec.mean_train_loss
            save_checkpoint(model, ckpt_dir / "best.ckpt", meta={"epoch": epoch, "loss": best})
        if config.stop_loss is not None and rec.mean_train_loss < config.stop_loss:
            break
    net.eval()
    if ckpt_dir is not None:
        save_checkpoint(model, ckpt_dir / "final.ckpt", meta={"epoch": len(history.records), "history": history.meta})
        history.to_csv(ckpt_dir / "history.csv")
    return model, history


def train(model: ModelHandle, train_set: DatasetManifest, config: TrainConfig):
    if not len(train_set):
        raise InputError("training set is empty")
    images, masks = load_arrays(train_set)
    return fit_arrays(model, images, masks, config)


def predict_classes(probs: np.ndarray) -> np.ndarray:
    """Channel-last argmax; ``np.argmax`` keeps the first maximum, i.e. the lowest class."""
    return np.argmax(probs, axis=-1).astype(np.uint8)


def predict(model: ModelHandle, images) -> list[LabelMap]:
    images = list(images)
    if not images:
        return []
    batch = np.stack([im.pixels if isinstance(im, SliceImage) else np.asarray(im) for im in images])
    classes = predict_classes(forward(model, batch[..., None].astype(np.float32)))
    return [
        LabelMap(c, getattr(im, "patient_id", ""), getattr(im, "slice_index", 0)) for im, c in zip(images, classes)
    ]
