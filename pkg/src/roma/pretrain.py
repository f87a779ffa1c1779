"""Robust proxy pre-training.

Each mini-batch first searches for a worst-case weight offset ``phi`` inside
the relative Frobenius ball around the current weights (normalised PGD
ascent on the noisy regression loss), then takes one adaptive-moment step
on the weights using the gradient evaluated at ``theta + phi``.  Inputs are
perturbed with Gaussian noise drawn once per batch.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .optim import Adam
from .proxy import ProxyNet, WeightDelta, forward, regression_loss_and_gradient
from .tasks import LabeledDataset

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e3
DIVERGENCE_PATIENCE = 5


class UnstableTrainingError(RuntimeError):
    """Validation loss blew up; the chosen epsilon is too large."""

    code = "unstable-at-epsilon"

    def __init__(self, epsilon: float, epoch: int, log_: "TrainingLog | None" = None):
        super().__init__(f"unstable-at-epsilon: eps={epsilon:g} diverged by epoch {epoch}")
        self.epsilon = epsilon
        self.epoch = epoch
        self.log = log_


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    epsilon: float = 0.005
    inner_steps: int = 20
    inner_step_size: float | None = None
    outer_lr: float = 0.001
    input_noise_std: float = 0.1
    batch_size: int = 128
    grad_clip_norm: float = 1.0
    epochs: int = 200
    seed: int = 0
    resample_noise_per_step: bool = False
    hidden: int = 64
    depth: int = 3

    def __post_init__(self):
        if self.epsilon < 0 or self.input_noise_std < 0:
            raise ValueError("epsilon and input_noise_std must be non-negative")
        if self.inner_steps < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("inner_steps and batch_size must be positive, epochs >= 0")
        if self.outer_lr <= 0 or self.grad_clip_norm <= 0:
            raise ValueError("rates must be positive")
        if self.inner_step_size is not None and self.inner_step_size <= 0:
            raise ValueError("inner_step_size must be positive")

    @property
    def gamma1(self) -> float:
        if self.inner_step_size is not None:
            return self.inner_step_size
        return self.epsilon / self.inner_steps

    def resolved(self) -> dict:
        d = asdict(self)
        d["inner_step_size"] = self.gamma1
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    inner_gain: float
    grad_norm: float
    seconds: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_epoch: int = -1
    aborted_epochs: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path) -> None:
        cols = ["epoch", "train_loss", "val_loss", "inner_gain", "grad_norm", "seconds"]
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in cols[1:]])


def draw_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray | None:
    # sigma = 0 draws nothing so the stream matches plain regression
    if sigma == 0.0:
        return None
    return rng.normal(0.0, sigma, size=shape)


def inner_maximize(net: ProxyNet, X, y, noise, config: PretrainConfig,
                   rng: np.random.Generator | None = None,
                   monitor: Callable[[np.ndarray, np.ndarray], None] | None = None):
    """Normalised PGD ascent on the noisy batch loss over the weight ball.

    Args:
        net: Current weights ``theta``.
        X: Standardised inputs ``(n, d)``.
        y: Standardised targets ``(n,)``.
        noise: Input noise for the batch (``None`` for none); held fixed
            across steps unless ``config.resample_noise_per_step``.
        config: Supplies ``epsilon``, ``inner_steps`` and ``gamma1``.
        rng: Needed only when resampling noise per step.
        monitor: Called after every step with the per-layer offset norms and
            the ball radii.

    Returns:
        ``(delta, loss_at_theta, loss_at_theta_plus_phi)``.
    """
    delta = WeightDelta.zeros(net)
    ref = delta.reference_norms
    radii = config.epsilon * ref
    loss0, grad = regression_loss_and_gradient(net, X, y, noise)
    if config.epsilon == 0.0:
        return delta, loss0, loss0
    phi = delta.offsets
    offs = net.offsets
    theta = net.params
    loss = loss0
    for m in range(config.inner_steps):
        if m > 0:
            if config.resample_noise_per_step and noise is not None:
                noise = rng.normal(0.0, config.input_noise_std, size=np.shape(X))
            loss, grad = regression_loss_and_gradient(net.with_params(theta + phi), X, y, noise)
        for k in range(net.depth):
            sl = slice(offs[k], offs[k + 1])
            gn = np.sqrt(np.dot(grad[sl], grad[sl]))
            if gn == 0.0 or not np.isfinite(gn):
                continue
            phi[sl] += config.gamma1 * ref[k] * grad[sl] / gn
            n = np.sqrt(np.dot(phi[sl], phi[sl]))
            if n > radii[k]:
                phi[sl] *= radii[k] / n
        if monitor is not None:
            monitor(delta.norms(), radii)
    final = regression_loss_and_gradient(delta.apply(net), X, y, noise)[0]
    return delta, loss0, final


def outer_step(net: ProxyNet, delta: WeightDelta, X, y, noise, config: PretrainConfig,
               opt: Adam | None = None):
    """One clipped adaptive-moment descent step using the gradient at ``theta + phi``.

    Returns:
        ``(new_net, opt, loss_at_perturbed, grad_norm_before_clipping)``.
    """
    if opt is None:
        opt = Adam(net.params.shape)
    loss, grad = regression_loss_and_gradient(delta.apply(net), X, y, noise)
    gn = float(np.sqrt(np.dot(grad, grad)))
    if not np.isfinite(gn):
        raise NonFiniteGradientError("non-finite gradient in outer step")
    if gn > config.grad_clip_norm:
        grad = grad * (config.grad_clip_norm / gn)
    step = opt.direction(grad)
    return net.with_params(net.params - config.outer_lr * step), opt, loss, gn


def mse(net: ProxyNet, X, y) -> float:
    if len(y) == 0:
        return float("nan")
    r = forward(net, X) - y
    return float(np.mean(r * r))


def _streams(seed: int):
    init, shuffle, noise = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(shuffle),
            np.random.default_rng(noise))


def pretrain(dataset: LabeledDataset, config: PretrainConfig,
             monitor: Callable[[np.ndarray, np.ndarray], None] | None = None):
    """Train a proxy on ``dataset`` (standardised inputs and outputs).

    Returns the weights with the best validation loss and the training log.
    Raises :class:`UnstableTrainingError` if the validation loss exceeds
    1000x its initial value for five consecutive epochs.
    """
    init_rng, shuffle_rng, noise_rng = _streams(config.seed)
    Xs = dataset.standardize_x(dataset.inputs)
    ys = dataset.standardize_y(dataset.scores)
    Xtr, ytr = Xs[dataset.train_idx], ys[dataset.train_idx]
    Xva, yva = Xs[dataset.val_idx], ys[dataset.val_idx]
    if len(Xva) == 0:  # tiny datasets validate on the training rows
        Xva, yva = Xtr, ytr

    net = ProxyNet.init(dataset.input_dim, init_rng, hidden=config.hidden, depth=config.depth)
    tlog = TrainingLog(initial_val_loss=mse(net, Xva, yva))
    if config.epochs == 0:
        return net, tlog
    opt = Adam(net.params.shape)
    best_net, best_loss = net, np.inf
    bad_epochs = 0
    n = len(Xtr)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        losses, gains, norms = [], [], []
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            Xb, yb = Xtr[idx], ytr[idx]
            noise = draw_noise(noise_rng, Xb.shape, config.input_noise_std)
            delta, l0, l1 = inner_maximize(net, Xb, yb, noise, config, noise_rng, monitor)
            try:
                net, opt, loss, gn = outer_step(net, delta, Xb, yb, noise, config, opt)
            except NonFiniteGradientError:
                log.warning("non-finite gradient at epoch %d; skipping rest of epoch", epoch)
                tlog.aborted_epochs.append(epoch)
                break
            losses.append(loss)
            gains.append(l1 - l0)
            norms.append(gn)
        val = mse(net, Xva, yva)
        tlog.records.append(EpochRecord(
            epoch, float(np.mean(losses)) if losses else float("nan"), val,
            float(np.mean(gains)) if gains else 0.0,
            float(np.mean(norms)) if norms else 0.0, time.perf_counter() - t0))
        if np.isfinite(val) and val < best_loss:
            best_net, best_loss, tlog.best_epoch = net, val, epoch
        if not np.isfinite(val) or val > DIVERGENCE_FACTOR * tlog.initial_val_loss:
            bad_epochs += 1
            if bad_epochs >= DIVERGENCE_PATIENCE:
                raise UnstableTrainingError(config.epsilon, epoch, tlog)
        else:
            bad_epochs = 0
    return best_net, tlog
