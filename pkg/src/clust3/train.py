"""Joint source training of classifier and clustering projectors."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import losses
from . import tensor as T
from .data import Dataset
from .errors import ContractError, StructureError, TrainingDivergedError
from .nn import ModelBundle, select_trainable
from .optim import SGD

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (0.4, 0.7)  # fractions of the epoch budget
    decay: float = 0.1
    im_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if any(not 0 < f < 1 for f in self.milestones) or list(self.milestones) != sorted(set(self.milestones)):
            raise ContractError("milestones must be strictly increasing fractions in (0, 1)")


def milestone_epochs(cfg: TrainConfig):
    """0-based epochs at which the learning rate is decayed."""
    epochs = sorted({math.ceil(f * cfg.epochs) for f in cfg.milestones})
    return [e for e in epochs if 0 < e < cfg.epochs]


def lr_at(cfg: TrainConfig, epoch):
    return cfg.lr * cfg.decay ** sum(1 for m in milestone_epochs(cfg) if epoch >= m)


@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray
    predictions: np.ndarray


def predict(model: ModelBundle, images, batch_size=256, bn_mode="eval"):
    preds = []
    for start in range(0, len(images), batch_size):
        out = model.forward(images[start:start + batch_size], bn_mode, with_projectors=False)
        preds.append(np.argmax(out.logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: ModelBundle, dataset: Dataset, batch_size=256, bn_mode="eval") -> EvalResult:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    preds = predict(model, dataset.images, batch_size, bn_mode)
    correct = preds == dataset.labels
    per_class = np.array([
        correct[dataset.labels == k].mean() if np.any(dataset.labels == k) else np.nan
        for k in range(dataset.num_classes)
    ])
    return EvalResult(float(correct.mean()) if len(correct) else 0.0, per_class, preds)


def projector_entropies(model: ModelBundle, dataset: Dataset, batch_size=128):
    """Mean per-head ``(H(Z|X), H(Z))`` over eval-mode batches."""
    hc, hm = [], []
    for x, _ in dataset.batches(batch_size):
        out = model.forward(x, "eval")
        for z in out.z.values():
            c, m = losses.entropy_terms(z)
            hc.append(np.atleast_1d(c.data))
            hm.append(np.atleast_1d(m.data))
    if not hc:
        return float("nan"), float("nan")
    return float(np.concatenate(hc).mean()), float(np.concatenate(hm).mean())


def _layer_weights(model, cfg):
    return {layer: cfg.im_weight for layer in model.projectors_by_layer()}


def train_epoch(model, optimizer, train: Dataset, cfg: TrainConfig, epoch):
    optimizer.lr = lr_at(cfg, epoch)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
    sums = {"ce": 0.0, "im_mean": 0.0, "total": 0.0, "h_marg_mean": 0.0}
    correct = seen = steps = 0
    lam = _layer_weights(model, cfg)
    for x, y in train.batches(cfg.batch_size, order):
        if len(y) < 2:
            continue
        try:
            out = model.forward(x, "train")
            report = losses.total_loss(out.logits, y, out.z, lam)
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"epoch {epoch}, step {steps}: {exc}") from exc
        stats = report.floats()
        if not np.isfinite(stats["total"]):
            raise TrainingDivergedError(f"epoch {epoch}, step {steps}: loss is {stats['total']}")
        optimizer.zero_grad()
        T.backward(report.total)
        optimizer.step()
        for k in sums:
            sums[k] += stats[k]
        correct += int((np.argmax(out.logits.data, axis=1) == y).sum())
        seen += len(y)
        steps += 1
    means = {k: v / max(steps, 1) for k, v in sums.items()}
    means["train_acc"] = correct / max(seen, 1)
    return means


def make_optimizer(model, cfg: TrainConfig):
    names = select_trainable(model, "joint")
    model.set_trainable(names)
    params = [p for n, p in model.parameters().items() if n in names]
    return SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def save_training_state(path, model: ModelBundle, optimizer: SGD, epoch):
    """Model arrays plus SGD momentum buffers and the next epoch index."""
    extra = {"train.epoch": np.array(float(epoch)), "optimizer.step_count": np.array(float(optimizer.step_count))}
    for name, buf in optimizer.buffers.items():
        if buf is not None:
            extra[f"optimizer.momentum.{name}"] = buf
    model.save(path, extra)


def load_training_state(path, model: ModelBundle, cfg: TrainConfig):
    arrays = model.load(path)
    optimizer = make_optimizer(model, cfg)
    if "train.epoch" not in arrays:
        raise StructureError(f"{path} holds no training state")
    optimizer.step_count = int(arrays["optimizer.step_count"])
    for name in optimizer.buffers:
        key = f"optimizer.momentum.{name}"
        optimizer.buffers[name] = arrays[key].copy() if key in arrays else None
    return optimizer, int(arrays["train.epoch"])


def joint_train(model: ModelBundle, train: Dataset, test: Dataset, cfg: TrainConfig,
                checkpoint_path=None, log_path=None, optimizer=None, start_epoch=0):
    """Minimize ``L_CE + Σ L_IM`` with SGD and a step learning-rate schedule.

    Returns ``(model, log)`` where ``log`` holds one dict per epoch.
    """
    if len(train) == 0:
        raise ContractError("empty training set")
    optimizer = optimizer or make_optimizer(model, cfg)
    log = []
    for epoch in range(start_epoch, cfg.epochs):
        stats = train_epoch(model, optimizer, train, cfg, epoch)
        entry = {"epoch": epoch, "lr": optimizer.lr}
        entry.update({f"loss_{k}" if k in ("ce", "total") else k: v for k, v in stats.items()})
        entry["test_acc"] = evaluate(model, test).accuracy if test is not None and len(test) else float("nan")
        if model.projectors and test is not None and len(test):
            entry["test_h_cond"], entry["test_h_marg"] = projector_entropies(model, test)
        log.append(entry)
        logger.info("epoch %d: %s", epoch, entry)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if checkpoint_path is not None:
            save_training_state(checkpoint_path, model, optimizer, epoch + 1)
    if checkpoint_path is not None and start_epoch >= cfg.epochs:
        save_training_state(checkpoint_path, model, optimizer, cfg.epochs)
    model.set_trainable(())
    return model, log

