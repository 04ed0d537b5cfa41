"""Optimization loop: Adam, cosine-annealed learning rate, evaluation.

One epoch shuffles the training set by a seeded permutation, then for each
batch records a tape, runs the multiscale forward, builds the mask pyramid,
combines the six level losses with the auto-weighted loss, backpropagates
and takes one Adam step (which also clears the gradients).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataValidationError, NonFiniteError
from .losses import AutoWeightedLoss, level_loss, mask_pyramid
from .metrics import SegmentationTotals, binarize_logits
from .nn import Module
from .tensor import Graph, Parameter, Tensor


def cosine_lr(epoch: int, total_epochs: int, lr0: float = 1e-3, lr_min: float = 1e-5) -> float:
    """Cosine annealing from lr0 (epoch 0) to lr_min (epoch == total)."""
    if epoch < 0:
        raise DataValidationError(f"epoch must be >= 0, got {epoch}")
    if epoch >= total_epochs:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


class Adam:
    """Bias-corrected Adam over a named parameter dict (network + sigmas)."""

    def __init__(self, params: dict[str, Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = {name: p for name, p in params.items() if p.requires_grad}
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr: float) -> None:
        if lr < 0:
            raise DataValidationError(f"learning rate must be >= 0, got {lr}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def _level_kinds(loss_mode, levels: int) -> list[str]:
    if isinstance(loss_mode, str):
        return [loss_mode] * levels
    kinds = list(loss_mode)
    if len(kinds) != levels:
        raise DataValidationError(f"loss_mode list must have {levels} entries, got {len(kinds)}")
    return kinds


@dataclass
class EpochReport:
    epoch: int
    lr: float
    train_loss: float
    sigmas: list[float]
    miou: float = float("nan")
    dsc: float = float("nan")

    def tsv(self) -> str:
        cols = [str(self.epoch), f"{self.lr:.8g}", f"{self.train_loss:.6f}",
                f"{self.miou:.6f}", f"{self.dsc:.6f}"]
        cols += [f"{s:.6f}" for s in self.sigmas]
        return "\t".join(cols)


RUN_TSV_HEADER = "epoch\tlr\ttrain_loss\teval_miou\teval_dsc\t" + "\t".join(
    f"sigma_{i}" for i in range(6))


def train_epoch(net, awl: AutoWeightedLoss, optim: Adam, images: np.ndarray,
                masks: np.ndarray, batch_size: int, lr: float,
                rng: np.random.Generator, loss_mode="bce_dice") -> tuple[float, list[float]]:
    """One pass over the training set; returns (mean loss, sigma snapshot)."""
    n = images.shape[0]
    if n == 0:
        raise DataValidationError("training set is empty")
    kinds = _level_kinds(loss_mode, awl.levels)
    order = rng.permutation(n)
    net.train(True)
    total = 0.0
    seen = 0
    for b_idx, start in enumerate(range(0, n, batch_size)):
        take = order[start:start + batch_size]
        x = Tensor(images[take])
        y = Tensor(masks[take])
        pyramid = mask_pyramid(y, levels=awl.levels)
        graph = Graph()
        with graph:
            logits = net.forward_multiscale(x)
            levels = [level_loss(lg, mk, kind=k)
                      for lg, mk, k in zip(logits, pyramid, kinds)]
            try:
                combined = awl(levels)
            except NonFiniteError as e:
                raise NonFiniteError(
                    f"batch {b_idx}: {e}; level losses = "
                    f"{[float(l.data) for l in levels]}") from e
        value = combined.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"batch {b_idx}: non-finite combined loss {value}")
        graph.backward(combined)
        optim.step(lr)
        total += value * len(take)
        seen += len(take)
    return total / seen, awl.sigma_values()


def evaluate(model, images: np.ndarray, masks: np.ndarray, batch_size: int = 16,
             pooling: str = "dataset", binarize_mode: str = "multilabel") -> tuple[float, float]:
    """Eval-mode metrics from the full-resolution logits only."""
    n = images.shape[0]
    if n == 0:
        raise DataValidationError("evaluation set is empty")
    was_training = getattr(model, "training", False)
    if isinstance(model, Module):
        model.eval()
    preds, targets = [], []
    for start in range(0, n, batch_size):
        x = Tensor(images[start:start + batch_size])
        logits = model.forward_multiscale(x)[0]
        preds.append(binarize_logits(logits, mode=binarize_mode))
        targets.append(masks[start:start + batch_size])
    if isinstance(model, Module):
        model.train(was_training)
    from .metrics import pooled_metrics

    return pooled_metrics(preds, targets, pooling=pooling)


@dataclass
class TrainRun:
    """History of a training run; one EpochReport per completed epoch."""

    total_epochs: int
    batch_size: int
    seed: int
    history: list[EpochReport] = field(default_factory=list)
    best_dsc: float = float("-inf")
    best_epoch: int = -1

    def record(self, report: EpochReport) -> bool:
        """Appends a report; True when it sets a new best eval DSC."""
        self.history.append(report)
        if report.dsc > self.best_dsc:
            self.best_dsc = report.dsc
            self.best_epoch = report.epoch
            return True
        return False


def fit(net, awl: AutoWeightedLoss, train_images, train_masks, eval_images, eval_masks,
        epochs: int = 100, batch_size: int = 16, lr0: float = 1e-3, lr_min: float = 1e-5,
        seed: int = 0, loss_mode="bce_dice", pooling: str = "dataset",
        binarize_mode: str = "multilabel", on_epoch=None, on_best=None) -> TrainRun:
    """Full training recipe; callbacks receive each EpochReport."""
    params = dict(net.named_parameters())
    params.update({f"awl.{name}": p for name, p in awl.named_parameters()})
    optim = Adam(params)
    rng = np.random.default_rng(seed)
    run = TrainRun(total_epochs=epochs, batch_size=batch_size, seed=seed)
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, lr0, lr_min)
        loss, sigmas = train_epoch(net, awl, optim, train_images, train_masks,
                                   batch_size, lr, rng, loss_mode=loss_mode)
        m, d = evaluate(net, eval_images, eval_masks, batch_size=batch_size,
                        pooling=pooling, binarize_mode=binarize_mode)
        report = EpochReport(epoch=epoch, lr=lr, train_loss=loss, sigmas=sigmas,
                             miou=m, dsc=d)
        is_best = run.record(report)
        if on_epoch is not None:
            on_epoch(report)
        if is_best and on_best is not None:
            on_best(report)
    return run
