"""SGD training recipe and evaluation loops.

Optimization is classical momentum SGD with weight decay folded into the
gradient (g + wd * param) before the momentum buffer update; batch-norm
scales/shifts and biases are decay-exempt by default. The learning rate is
flat for ``decay_start_epoch`` epochs and then decays exponentially.

Evaluation scores one image at a time: either a single center crop or the
ten-crop ensemble (averaging softmax probabilities, arg-max tie going to the
lowest class index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import tensor
from .autodiff import GradGraph, GradMap
from .metrics import ConfusionMatrix, challenge_score, metrics_report, summarize
from .network import (NetworkConfig, ParamStore, network_loss_graph,
                      network_forward, save_checkpoint)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 256
    decay_start_epoch: int = 60
    decay_rate: float = 0.9
    max_epochs: int = 60
    seed: int = 0
    decay_exempt_norm_bias: bool = True

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 < self.decay_rate <= 1.0:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1 or self.decay_start_epoch < 0:
            raise ValueError("batch_size/max_epochs must be >= 1, decay_start_epoch >= 0")


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Flat until the decay epoch, then base_lr * rate^(epoch - start + 1)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < cfg.decay_start_epoch:
        return cfg.base_lr
    return cfg.base_lr * cfg.decay_rate ** (epoch - cfg.decay_start_epoch + 1)


class OptimizerState:
    """Momentum buffers mirroring the trainable parameters, plus step/epoch counters."""

    def __init__(self, store: ParamStore, cfg: TrainConfig):
        self.momentum = cfg.momentum
        self.weight_decay = cfg.weight_decay
        self.exempt_flagged = cfg.decay_exempt_norm_bias
        self.buffers = {p.name: np.zeros_like(p.value) for p in store.trainable()}
        self.step_count = 0
        self.epoch = 0


def sgd_step(store: ParamStore, grads: GradMap, state: OptimizerState, lr: float) -> None:
    """g = grad + wd*param; buf = momentum*buf + g; param -= lr*buf (in place)."""
    for p in store.trainable():
        if p.name not in grads:
            raise ValueError(f"gradient missing for trainable parameter {p.name!r}")
        g = grads[p.name]
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.value.shape} "
                             f"for {p.name!r}")
        if state.weight_decay and not (state.exempt_flagged and p.decay_exempt):
            g = g + state.weight_decay * p.value
        buf = state.buffers[p.name]
        buf *= state.momentum
        buf += g
        p.value -= lr * buf
    state.step_count += 1


# -- in-memory dataset -----------------------------------------------------------


class LoadedDataset:
    """All images of a manifest decoded into memory, in manifest order."""

    def __init__(self, records, images, labels):
        self.records = list(records)
        self.images = list(images)
        self.labels = np.asarray(labels, dtype=np.int64)

    @classmethod
    def from_manifest(cls, manifest: data_mod.DatasetManifest, root) -> "LoadedDataset":
        root = Path(root)
        images = [data_mod.load_image(root / r.image_path) for r in manifest]
        return cls(manifest.records, images, [r.label for r in manifest])

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class Normalization:
    mean: tuple
    std: tuple


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    pad: int = 8


def _batch_tensor(images, norm: Normalization) -> np.ndarray:
    return np.concatenate([data_mod.to_tensor(img, norm.mean, norm.std) for img in images])


# -- epoch loop ------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    accuracy: float


def train_epoch(store: ParamStore, state: OptimizerState, dataset: LoadedDataset,
                net_cfg: NetworkConfig, train_cfg: TrainConfig, norm: Normalization,
                augment: AugmentConfig | None, rng: np.random.Generator,
                epoch: int) -> EpochStats:
    """One shuffled pass: forward (train mode) -> backward -> SGD step per batch."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    lr = lr_at_epoch(epoch, train_cfg)
    order = rng.permutation(len(dataset))
    loss_sum = 0.0
    correct = 0
    for start in range(0, len(order), train_cfg.batch_size):
        idx = order[start:start + train_cfg.batch_size]
        imgs = []
        for i in idx:
            img = dataset.images[i]
            if augment is not None and augment.enabled:
                img = data_mod.augment_train(img, img.height, augment.pad, rng)
            imgs.append(img)
        x = _batch_tensor(imgs, norm)
        labels = dataset.labels[idx]
        graph = GradGraph()
        trace, loss = network_loss_graph(graph, x, labels, store, net_cfg, train=True)
        grads = graph.backward(loss)
        sgd_step(store, grads, state, lr)
        loss_sum += float(loss.value) * len(idx)
        correct += int((np.argmax(trace.logits.value, axis=1) == labels).sum())
    state.epoch = epoch + 1
    return EpochStats(epoch=epoch, lr=lr, loss=loss_sum / len(dataset),
                      accuracy=correct / len(dataset))


# -- evaluation ------------------------------------------------------------------


@dataclass
class Prediction:
    record: data_mod.SampleRecord
    label: int
    predicted: int
    probabilities: np.ndarray


def evaluate(store: ParamStore, dataset: LoadedDataset, net_cfg: NetworkConfig,
             norm: Normalization, crop_size: int | None = None,
             use_tencrop: bool = False) -> tuple[ConfusionMatrix, list[Prediction]]:
    """Score every image once; ten-crop averages softmax probabilities."""
    cm = ConfusionMatrix(net_cfg.num_classes)
    predictions = []
    for rec, img, label in zip(dataset.records, dataset.images, dataset.labels):
        size = crop_size or data_mod.default_eval_crop(min(img.height, img.width))
        if use_tencrop:
            crops = data_mod.ten_crop(img, size)
        else:
            crops = [data_mod.center_crop(img, size)]
        logits = network_forward(_batch_tensor(crops, norm), store, net_cfg, mode="eval")
        probs = tensor.softmax(logits).mean(axis=0)
        pred = int(np.argmax(probs))
        cm.update(int(label), pred)
        predictions.append(Prediction(rec, int(label), pred, probs))
    return cm, predictions


# -- full fit loop ---------------------------------------------------------------


@dataclass
class FitResult:
    history: list[dict]
    best_epoch: int
    best_score: float
    best_val_report: dict
    final_train: EpochStats
    checkpoint_path: Path | None


def fit(store: ParamStore, net_cfg: NetworkConfig, train_cfg: TrainConfig,
        train_data: LoadedDataset, val_data: LoadedDataset, norm: Normalization,
        augment: AugmentConfig | None, out_dir=None, eval_crop: int | None = None,
        tencrop_val: bool = False, log_stream=None) -> FitResult:
    """Train for max_epochs, keeping the checkpoint with the best challenge score.

    Writes one JSON line per epoch to ``log_stream`` with the keys
    {epoch, lr, train_loss, train_acc, val_acc, val_f1, val_score}.
    """
    state = OptimizerState(store, train_cfg)
    rng = np.random.default_rng([train_cfg.seed, 1])
    ckpt_path = None if out_dir is None else Path(out_dir) / "best.ckpt"
    history = []
    best_epoch, best_score, best_report = -1, -np.inf, None
    stats = None
    for epoch in range(train_cfg.max_epochs):
        stats = train_epoch(store, state, train_data, net_cfg, train_cfg, norm,
                            augment, rng, epoch)
        cm, _ = evaluate(store, val_data, net_cfg, norm, crop_size=eval_crop,
                         use_tencrop=tencrop_val)
        s = summarize(cm)
        score = challenge_score(s.accuracy, s.macro_f1)
        entry = {
            "epoch": epoch,
            "lr": stats.lr,
            "train_loss": stats.loss,
            "train_acc": stats.accuracy,
            "val_acc": s.accuracy,
            "val_f1": s.macro_f1,
            "val_score": score,
        }
        history.append(entry)
        if log_stream is not None:
            log_stream.write(json.dumps(entry) + "\n")
            log_stream.flush()
        if score > best_score:
            best_epoch, best_score, best_report = epoch, score, metrics_report(cm)
            if ckpt_path is not None:
                save_checkpoint(ckpt_path, store, net_cfg)
    return FitResult(history=history, best_epoch=best_epoch, best_score=best_score,
                     best_val_report=best_report, final_train=stats,
                     checkpoint_path=ckpt_path)
