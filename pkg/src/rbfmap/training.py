"""Joint mini-batch Adam training of CNN and RBF parameters."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .errors import ConfigError, DataError, DimensionError, NumericalError
from .models import Model
from .rbf import metric, project_betas

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-3
    epochs: int = 3
    seed: int = 0
    learn_A: bool = True
    learn_beta: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of every trainable parameter, in place.

    Parameters carrying a ``lower`` bound are projected onto it afterwards.
    """
    params = [p for p in params if p.trainable]
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.count_nonzero(~np.isfinite(p.grad)))
            raise NumericalError(f"non-finite gradient in {p.name} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad ** 2
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if p.lower is not None:
            np.maximum(p.data, p.lower, out=p.data)


def psi_delta(prev_A, curr_A) -> float:
    """Frobenius norm of the change in ``A A^T`` between two snapshots of A."""
    prev_A, curr_A = np.asarray(prev_A, dtype=np.float64), np.asarray(curr_A, dtype=np.float64)
    if prev_A.shape != curr_A.shape:
        raise DimensionError(f"psi_delta: shapes {prev_A.shape} and {curr_A.shape} differ")
    return float(np.linalg.norm(metric(curr_A) - metric(prev_A), "fro"))


@dataclass
class ConvergenceTrace:
    epochs: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    psi_deltas: list = field(default_factory=list)  # one list per epoch, one entry per RBF block

    def append(self, epoch: int, loss: float, acc: float, deltas) -> None:
        self.epochs.append(epoch)
        self.loss.append(loss)
        self.accuracy.append(acc)
        self.psi_deltas.append(list(deltas))

    def rows(self) -> list[list]:
        return [[e, l, a, *d] for e, l, a, d in zip(self.epochs, self.loss, self.accuracy, self.psi_deltas)]

    def header(self) -> list[str]:
        n = len(self.psi_deltas[0]) if self.psi_deltas else 0
        return ["epoch", "loss", "acc"] + [f"psi_delta_block{i}" for i in range(n)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            for row in self.rows():
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def apply_ablation(model: Model, learn_A: bool, learn_beta: bool) -> None:
    """Freeze the metric factor (reset to identity) and/or the widths."""
    for block in model.rbf_blocks:
        if not learn_A:
            block.A.data[...] = np.eye(block.K)
        block.A.trainable = learn_A
        block.betas.trainable = learn_beta


def _snapshot(model: Model) -> dict:
    return {name: p.data.copy() for name, p in model.params.items()}


def _restore(model: Model, snap: dict) -> None:
    for name, value in snap.items():
        model.params[name].data[...] = value


def train(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    on_epoch=None,
):
    """Shuffled mini-batch Adam on mean softmax cross-entropy.

    Returns the (in-place) trained model and a :class:`ConvergenceTrace`
    holding per-epoch mean loss, training accuracy and the Frobenius change
    of every block's metric.  ``on_epoch(epoch, model)`` is called after each
    epoch.  On a non-finite loss the model is rolled back to the parameters
    from the start of the failing epoch and :class:`NumericalError` raised.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise DataError("training set is empty")
    if len(images) != n:
        raise DataError(f"{len(images)} images but {n} labels")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise DataError(f"labels outside [0, {model.num_classes})")

    apply_ablation(model, config.learn_A, config.learn_beta)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    trace = ConvergenceTrace()
    params = model.parameters()
    prev_A = [b.A.data.copy() for b in model.rbf_blocks]

    for epoch in range(1, config.epochs + 1):
        good = _snapshot(model)
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            model.zero_grad()
            with Tape() as tape:
                logits = model.forward(Tensor(images[idx]))
                loss = ad.softmax_cross_entropy(logits, labels[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                _restore(model, good)
                raise NumericalError(
                    f"loss became {value} in epoch {epoch} at batch offset {start}; "
                    "parameters rolled back to the start of the epoch"
                )
            tape.backward(loss)
            try:
                adam_step(params, state, config.learning_rate)
            except NumericalError:
                _restore(model, good)
                raise
            total_loss += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        for block in model.rbf_blocks:
            project_betas(block)
        deltas = [psi_delta(p, b.A.data) for p, b in zip(prev_A, model.rbf_blocks)]
        prev_A = [b.A.data.copy() for b in model.rbf_blocks]
        trace.append(epoch, total_loss / n, correct / n, deltas)
        log.info(
            "%s epoch %d loss %.4f acc %.4f psi %s",
            model.name, epoch, total_loss / n, correct / n, ["%.4g" % d for d in deltas],
        )
        if on_epoch is not None:
            on_epoch(epoch, model)
    model.zero_grad()
    return model, trace
