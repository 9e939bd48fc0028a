"""White-box (FGSM, BIM, PGD, MIM) and gradient-free (GN, SPSA) attacks.

Attacks only need three things from a model: ``predict(x)``,
``input_gradient(x, labels)`` and ``loss_per_sample(x, labels)``.  Inputs
live in [0, 1] and every L-inf attack keeps ``|x' - x| <= epsilon``.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import backward_call_count
from .errors import ConfigError, DimensionError

KINDS = ("fgsm", "bim", "pgd", "mim", "gn", "spsa")
LINF_KINDS = ("fgsm", "bim", "pgd", "mim", "spsa")


@dataclass
class AttackConfig:
    kind: str
    epsilon: float
    iterations: int = 1
    step_size: float | None = None  # None picks the per-kind default
    decay: float = 1.0
    spsa_samples: int = 128  # perturbation pairs per estimate
    spsa_delta: float = 0.01
    random_start: bool = True
    seed: int = 0
    target: int | None = None  # targeted mode when set

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.kind in ("bim", "pgd", "mim", "spsa") and self.iterations < 1:
            raise ConfigError(f"{self.kind} needs iterations >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigError("step_size must be > 0")
        if self.decay < 0:
            raise ConfigError("decay must be >= 0")
        if self.spsa_samples < 1 or self.spsa_delta <= 0:
            raise ConfigError("spsa needs spsa_samples >= 1 and spsa_delta > 0")

    @property
    def label(self) -> str:
        return f"{self.kind}@{self.epsilon:g}"

    def to_dict(self) -> dict:
        return asdict(self)


# Standard MNIST attack suite.
MNIST_ATTACKS = {
    "fgsm": AttackConfig("fgsm", 0.3),
    "bim": AttackConfig("bim", 0.3, iterations=5),
    "mim": AttackConfig("mim", 0.3, iterations=10, decay=1.0),
    "pgd": AttackConfig("pgd", 0.1, iterations=40),
    "gn": AttackConfig("gn", 20.0),
    "spsa": AttackConfig("spsa", 0.3, iterations=20),
}


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    pred_before: np.ndarray
    pred_after: np.ndarray
    linf: np.ndarray = field(init=False)
    l2: np.ndarray = field(init=False)

    def __post_init__(self):
        diff = (self.perturbed - self.originals).reshape(len(self.originals), -1)
        self.linf = np.abs(diff).max(axis=1) if diff.size else np.zeros(len(diff))
        self.l2 = np.sqrt((diff ** 2).sum(axis=1))

    def export(self, directory) -> None:
        """Write ``perturbed.npy`` and a per-sample ``norms.csv`` into ``directory``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        np.save(out / "perturbed.npy", self.perturbed)
        with open(out / "norms.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "label", "pred_before", "pred_after", "linf", "l2"])
            for i in range(len(self.labels)):
                writer.writerow([i, int(self.labels[i]), int(self.pred_before[i]), int(self.pred_after[i]),
                                 repr(float(self.linf[i])), repr(float(self.l2[i]))])

    @property
    def clean_accuracy(self) -> float:
        return float(np.mean(self.pred_before == self.labels))

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.pred_after == self.labels))

    @property
    def success_rate(self) -> float:
        """Fraction of samples misclassified after the attack."""
        return 1.0 - self.accuracy


def _sign_direction(model, x, labels, target):
    if target is None:
        return np.sign(model.input_gradient(x, labels))
    goal = np.full(len(x), target)
    return -np.sign(model.input_gradient(x, goal))


def _project(x, x0, eps):
    return np.clip(np.clip(x, x0 - eps, x0 + eps), 0.0, 1.0)


def _finish(model, x0, xadv, labels, pred_before=None) -> AdversarialBatch:
    if pred_before is None:
        pred_before = model.predict(x0)
    return AdversarialBatch(x0, xadv, np.asarray(labels), pred_before, model.predict(xadv))


def _check(x, labels):
    x = np.asarray(x, dtype=np.float64)
    if len(x) != len(labels):
        raise DimensionError(f"{len(x)} images but {len(labels)} labels")
    return x


def fgsm(model, x, labels, epsilon, target=None) -> AdversarialBatch:
    x = _check(x, labels)
    xadv = np.clip(x + epsilon * _sign_direction(model, x, labels, target), 0.0, 1.0)
    return _finish(model, x, xadv, labels)


def _iterate(model, x0, start, labels, epsilon, iterations, step, target):
    x = start
    for _ in range(iterations):
        x = _project(x + step * _sign_direction(model, x, labels, target), x0, epsilon)
    return x


def bim(model, x, labels, epsilon, iterations=5, step=None, target=None) -> AdversarialBatch:
    x = _check(x, labels)
    if step is None:
        step = min(1.25 * epsilon / iterations, epsilon)
    if step <= 0 and epsilon > 0:
        raise ConfigError("bim step must be > 0")
    xadv = _iterate(model, x, x, labels, epsilon, iterations, step, target)
    return _finish(model, x, xadv, labels)


def pgd(model, x, labels, epsilon, iterations=40, step=None, random_start=True, seed=0, target=None):
    x = _check(x, labels)
    if step is None:
        step = min(2.5 * epsilon / iterations, epsilon)
    start = x
    if random_start and epsilon > 0:
        rng = np.random.default_rng(seed)
        start = np.clip(x + rng.uniform(-epsilon, epsilon, size=x.shape), 0.0, 1.0)
    xadv = _iterate(model, x, start, labels, epsilon, iterations, step, target)
    return _finish(model, x, xadv, labels)


def mim(model, x, labels, epsilon, iterations=10, decay=1.0, step=None, target=None):
    """Momentum iterative attack with per-sample L1-normalized gradients.

    A sample whose gradient is exactly zero keeps its momentum unchanged.
    """
    x0 = _check(x, labels)
    step = epsilon / iterations if step is None else step
    x = x0
    momentum = np.zeros_like(x0)
    axes = tuple(range(1, x0.ndim))
    for _ in range(iterations):
        if target is None:
            grad = model.input_gradient(x, labels)
        else:
            grad = -model.input_gradient(x, np.full(len(x), target))
        norm = np.abs(grad).sum(axis=axes, keepdims=True)
        normalized = np.divide(grad, norm, out=np.zeros_like(grad), where=norm > 0)
        momentum = np.where(norm > 0, decay * momentum + normalized, momentum)
        x = _project(x + step * np.sign(momentum), x0, epsilon)
    return _finish(model, x0, x, labels)


def gaussian_noise(model, x, labels, epsilon, seed=0) -> AdversarialBatch:
    """Additive Gaussian noise with sigma = epsilon / 255 (epsilon on the 0-255 scale)."""
    x = _check(x, labels)
    rng = np.random.default_rng(seed)
    xadv = np.clip(x + (epsilon / 255.0) * rng.standard_normal(x.shape), 0.0, 1.0)
    return _finish(model, x, xadv, labels)


def spsa_gradient(loss_fn, x, delta, samples, rng) -> np.ndarray:
    """SPSA estimate of d loss / dx for one sample using Rademacher directions.

    ``loss_fn`` maps a stack of inputs (B, ...) to B losses.
    """
    u = rng.choice(np.array([-1.0, 1.0]), size=(samples,) + x.shape)
    losses = loss_fn(np.concatenate([x + delta * u, x - delta * u]))
    diff = (losses[:samples] - losses[samples:]) / (2.0 * delta)
    return np.tensordot(diff, u, axes=1) / samples


def spsa(
    model, x, labels, epsilon, iterations=20, spsa_samples=128, spsa_delta=0.01,
    step=None, seed=0, target=None,
) -> AdversarialBatch:
    """Gradient-free sign ascent on an SPSA loss estimate (forward passes only)."""
    x0 = _check(x, labels)
    labels = np.asarray(labels)
    step = min(2.5 * epsilon / iterations, epsilon) if step is None else step
    rng = np.random.default_rng(seed)
    before = backward_call_count()
    xadv = x0.copy()
    for i in range(len(x0)):
        cls = labels[i] if target is None else target
        sgn = 1.0 if target is None else -1.0

        def loss_fn(batch, cls=cls, sgn=sgn):
            return sgn * model.loss_per_sample(batch, np.full(len(batch), cls))

        xi = x0[i]
        cur = xi
        for _ in range(iterations):
            g = spsa_gradient(loss_fn, cur, spsa_delta, spsa_samples, rng)
            cur = _project(cur + step * np.sign(g), xi, epsilon)
        xadv[i] = cur
    if backward_call_count() != before:
        raise RuntimeError("SPSA requested analytic gradients")
    return _finish(model, x0, xadv, labels)


def run_attack(model, x, labels, config: AttackConfig) -> AdversarialBatch:
    kind = config.kind
    if kind == "fgsm":
        return fgsm(model, x, labels, config.epsilon, target=config.target)
    if kind == "bim":
        return bim(model, x, labels, config.epsilon, config.iterations, config.step_size, config.target)
    if kind == "pgd":
        return pgd(model, x, labels, config.epsilon, config.iterations, config.step_size,
                   config.random_start, config.seed, config.target)
    if kind == "mim":
        return mim(model, x, labels, config.epsilon, config.iterations, config.decay,
                   config.step_size, config.target)
    if kind == "gn":
        return gaussian_noise(model, x, labels, config.epsilon, config.seed)
    return spsa(model, x, labels, config.epsilon, config.iterations, config.spsa_samples,
                config.spsa_delta, config.step_size, config.seed, config.target)


@dataclass
class TransferReport:
    attack: str
    source: str
    target: str
    source_accuracy: float  # white-box accuracy of the source model
    target_accuracy: float  # accuracy of the target on the transferred examples
    target_clean_accuracy: float


def transfer_attack(source, target, x, labels, config: AttackConfig) -> TransferReport:
    """Craft examples on ``source`` and score them on ``target``."""
    if tuple(source.input_shape) != tuple(target.input_shape):
        raise DimensionError(
            f"source input {source.input_shape} differs from target input {target.input_shape}"
        )
    adv = run_attack(source, x, labels, config)
    labels = np.asarray(labels)
    return TransferReport(
        attack=config.label,
        source=getattr(source, "name", "source"),
        target=getattr(target, "name", "target"),
        source_accuracy=adv.accuracy,
        target_accuracy=float(np.mean(target.predict(adv.perturbed) == labels)),
        target_clean_accuracy=float(np.mean(target.predict(adv.originals) == labels)),
    )
