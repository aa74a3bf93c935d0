"""Target normalisation and minibatch momentum SGD on mean squared error."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from factored_tts.errors import DegenerateDimension, InvalidConfig, NumericalError, ShapeError
from factored_tts.factor_encoding import Architecture
from factored_tts.network import Network

log = logging.getLogger(__name__)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def as_extras(self) -> Dict[str, np.ndarray]:
        return {"norm_mean": self.mean, "norm_std": self.std}

    @classmethod
    def from_extras(cls, extras) -> Optional["NormStats"]:
        if "norm_mean" not in extras:
            return None
        return cls(np.array(extras["norm_mean"]), np.array(extras["norm_std"]))


def compute_norm_stats(targets) -> NormStats:
    """Per-dimension mean and population standard deviation."""
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] < 2:
        raise DegenerateDimension("need at least two samples to estimate normalisation statistics")
    mean = y.mean(axis=0)
    std = y.std(axis=0)
    flat = np.flatnonzero(~(std > 0))
    if flat.size:
        raise DegenerateDimension(f"zero variance in target dimension(s) {flat.tolist()}")
    return NormStats(mean, std)


def mse_loss(pred, target) -> float:
    """Mean over dimensions (and over rows, for batches) of squared error."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ")
    return float(np.mean((p - t) ** 2))


def mse_grad(pred, target) -> np.ndarray:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ")
    return 2.0 * (p - t) / p.size


def momentum_sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                      velocity: Dict[str, np.ndarray], lr: float, momentum: float):
    """v <- momentum * v - lr * g; theta <- theta + v. Updates in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    for name, theta in params.items():
        g = grads[name]
        if theta.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {name} {theta.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        v = momentum * v - lr * g
        velocity[name] = v
        theta += v
    return params, velocity


@dataclass
class TrainConfig:
    learning_rate: float = 0.16
    momentum: float = 0.9
    minibatch_size: int = 64
    epochs: int = 20
    shuffle_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidConfig("momentum must lie in [0, 1)")
        if int(self.minibatch_size) < 1:
            raise InvalidConfig("minibatch_size must be a positive integer")
        if int(self.epochs) < 0:
            raise InvalidConfig("epochs must be non-negative")

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {k: d[k] for k in ("learning_rate", "momentum", "minibatch_size", "epochs", "shuffle_seed")
                 if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise InvalidConfig(f"unknown train options: {sorted(unknown)}")
        return cls(**known)


def published_train_config(arch, task: str, epochs: int = 20, shuffle_seed: int = 0) -> TrainConfig:
    """Learning rate, momentum and minibatch size used for the published models."""
    arch = Architecture.parse(arch)
    if task == "duration":
        lr = 0.08 if arch is Architecture.AIM else 0.16
        batch = 16 if arch is Architecture.SED else 64
    elif task == "acoustic":
        lr, batch = 1.28, 128
    else:
        raise InvalidConfig(f"unknown task {task!r}")
    return TrainConfig(lr, 0.9, batch, epochs, shuffle_seed)


@dataclass
class Samples:
    """Row-aligned training samples: input, emotion ID, speaker ID, target."""

    x: np.ndarray
    e: np.ndarray
    s: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        n = len(self.x)
        if not (len(self.e) == len(self.s) == len(self.y) == n):
            raise ShapeError("sample arrays have different lengths")

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "Samples":
        return Samples(self.x[idx], self.e[idx], self.s[idx], self.y[idx])

    def with_targets(self, y) -> "Samples":
        return Samples(self.x, self.e, self.s, np.asarray(y, dtype=np.float64))


@dataclass
class TrainReport:
    train_loss: List[float] = field(default_factory=list)
    valid_loss: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    snapshot_id: str = ""
    stats: Optional[NormStats] = None

    def write_curves(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "valid_mse"])
            for i, tr in enumerate(self.train_loss):
                va = self.valid_loss[i] if i < len(self.valid_loss) else ""
                w.writerow([i + 1, repr(tr), repr(va) if va != "" else ""])


def parameter_snapshot_id(net: Network) -> str:
    return hashlib.sha256(net.get_flat().astype("<f8").tobytes()).hexdigest()[:16]


def minibatch_gradients(net: Network, batch: Samples):
    """Loss and parameter gradients of the batch-mean MSE."""
    pred = net.forward(batch.x, batch.e, batch.s, keep_cache=True)
    loss = mse_loss(pred, batch.y)
    grads = net.backward(batch.x, batch.e, batch.s, mse_grad(pred, batch.y))
    return loss, grads


def evaluate_loss(net: Network, samples: Samples, chunk: int = 4096) -> float:
    total = 0.0
    for start in range(0, len(samples), chunk):
        part = samples.subset(slice(start, start + chunk))
        pred = net.forward(part.x, part.e, part.s)
        total += float(np.sum((pred - part.y) ** 2))
    return total / (len(samples) * samples.y.shape[1])


def train(net: Network, train_set: Samples, valid_set: Optional[Samples], cfg: TrainConfig,
          stats: Optional[NormStats] = None) -> TrainReport:
    """Minibatch momentum SGD for ``cfg.epochs`` epochs.

    Targets must already be normalised. Each epoch visits a fresh random
    permutation; the final short minibatch is kept. When a validation set is
    given, the parameters of the epoch with the lowest validation loss are
    restored at the end.
    """
    report = TrainReport(stats=stats)
    n = len(train_set)
    if n == 0:
        raise InvalidConfig("empty training set")
    if cfg.minibatch_size > n:
        raise InvalidConfig(f"minibatch size {cfg.minibatch_size} exceeds training-set size {n}")
    rng = np.random.default_rng(cfg.shuffle_seed)
    params = net.param_dict()
    velocity: Dict[str, np.ndarray] = {}
    best_loss, best_flat = np.inf, None
    bs = int(cfg.minibatch_size)

    for epoch in range(int(cfg.epochs)):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, bs):
            batch = train_set.subset(order[start:start + bs])
            # divergence is caught by the finiteness checks below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = minibatch_gradients(net, batch)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss in epoch {epoch + 1}", epoch=epoch + 1)
            try:
                momentum_sgd_step(params, grads, velocity, cfg.learning_rate, cfg.momentum)
            except NumericalError as exc:
                raise NumericalError(f"{exc} in epoch {epoch + 1}", epoch=epoch + 1) from None
            net.mark_modified()
            running += loss * len(batch)
        train_loss = running / n
        if not np.isfinite(train_loss):
            raise NumericalError(f"non-finite training loss in epoch {epoch + 1}", epoch=epoch + 1)
        report.train_loss.append(train_loss)
        if valid_set is not None and len(valid_set):
            vloss = evaluate_loss(net, valid_set)
            if not np.isfinite(vloss):
                raise NumericalError(f"non-finite validation loss in epoch {epoch + 1}", epoch=epoch + 1)
            report.valid_loss.append(vloss)
            if vloss < best_loss:
                best_loss, best_flat, report.best_epoch = vloss, net.get_flat(), epoch + 1
        log.debug("epoch %d train %.6g valid %s", epoch + 1, train_loss,
                  report.valid_loss[-1] if report.valid_loss else "-")

    if best_flat is not None:
        net.set_flat(best_flat)
    elif cfg.epochs:
        report.best_epoch = int(cfg.epochs)
    report.snapshot_id = parameter_snapshot_id(net)
    return report
