"""Candidate search with per-round proxy adaptation and trust-region steps.

Every round first adapts the proxy weights at the current candidate (PGD
descent, inside the ball around the pretrained anchor, on
``||grad_x f(x; w)|| + alpha * (f(x; w) - f(x; w_prev))^2``), then moves the
candidate along the Adam-filtered input gradient of the adapted proxy with
a step that shrinks linearly as the proxy score rises above its starting
value, reaching zero ``trust_N`` output standard deviations above it.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .optim import Adam
from .proxy import EPS_NUM, ProxyNet, adapt_objective_terms, block_norms
from .tasks import LabeledDataset, UsageError

log = logging.getLogger(__name__)

SCOPES = ("per-candidate", "shared-batch")


@dataclass(frozen=True)
class SolveConfig:
    steps: int = 300
    alpha: float = 1.0
    adapt_steps: int = 100
    adapt_step_size: float | None = None
    eta0: float = 0.003
    trust_N: float = 4.0
    candidate_count: int = 128
    adapt_scope: str = "per-candidate"
    seed: int = 0
    epsilon: float = 0.005
    adapt: bool = True
    grad_weight: float = 1.0
    sigma_out: float = 1.0
    reset_moments: bool = False
    record_trajectory: bool = False
    backend: str | None = None

    def __post_init__(self):
        if self.steps < 0 or self.adapt_steps < 1 or self.candidate_count < 1:
            raise UsageError("steps >= 0, adapt_steps >= 1 and candidate_count >= 1 required")
        if self.eta0 < 0 or not self.trust_N > 0 or not self.sigma_out > 0:
            raise UsageError("eta0 >= 0, trust_N > 0 and sigma_out > 0 required")
        if self.epsilon < 0:
            raise UsageError("epsilon must be non-negative")
        if self.adapt_scope not in SCOPES:
            raise UsageError(f"adapt_scope must be one of {SCOPES}")

    @property
    def gamma(self) -> float:
        if self.adapt_step_size is not None:
            return self.adapt_step_size
        return self.epsilon / self.adapt_steps

    def resolved(self) -> dict:
        d = asdict(self)
        d["adapt_step_size"] = self.gamma
        return d


@dataclass(eq=False)
class CandidateState:
    x: np.ndarray
    adapted_net: ProxyNet
    prev_net_score_anchor: float
    y0: float
    step_index: int = 0
    frozen: bool = False
    proxy_score: float = float("nan")
    trajectory: list | None = None


@dataclass
class AdaptResult:
    params: np.ndarray
    j_start: np.ndarray
    j_best: np.ndarray
    status: np.ndarray
    max_excess: np.ndarray


def select_initial_candidates(dataset: LabeledDataset, k: int) -> np.ndarray:
    """Inputs of the ``k`` best-scoring rows (ties: lower index first)."""
    n = len(dataset)
    if not 1 <= k <= n:
        raise UsageError(f"cannot select {k} candidates from {n} rows")
    order = np.lexsort((np.arange(n), -dataset.scores))
    return dataset.inputs[order[:k]].copy()


def step_size(eta0: float, current_proxy_score: float, y0: float, N: float,
              sigma_out: float):
    """Trust-region rate ``eta0 * (1 - (f - y0) / (N sigma))`` clamped at 0."""
    if not np.all(np.asarray(sigma_out) > 0):
        raise UsageError("sigma_out must be positive")
    raw = eta0 * (1.0 - (np.asarray(current_proxy_score) - y0) / (N * sigma_out))
    out = np.maximum(raw, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def adapt_batch(anchor: ProxyNet, prev: np.ndarray, X: np.ndarray, config: SolveConfig,
                f_prev: np.ndarray | None = None, track: bool = False) -> AdaptResult:
    """Per-candidate adaptation: one PGD problem per row of ``X``.

    Args:
        anchor: Pretrained weights defining the ball centre.
        prev: ``(C, P)`` warm-start weights ``theta_{t-1}``.
        X: ``(C, d)`` current candidates.
        config: Supplies ``alpha``, ``grad_weight``, ``epsilon`` and the PGD schedule.
        f_prev: ``f(x; theta_{t-1})`` if already known.
        track: Also report the largest ball excess seen during PGD.
    """
    if f_prev is None:
        f_prev = kernels.value_input_grad(prev, anchor.sizes, X, backend=config.backend)[0]
    out, j0, j1, status, excess = kernels.adapt_pgd(
        anchor.params, anchor.sizes, prev, X, f_prev, config.alpha, config.grad_weight,
        config.epsilon, config.gamma, config.adapt_steps, EPS_NUM, track,
        backend=config.backend)
    return AdaptResult(out, j0, j1, status, excess)


def adapt(anchor: ProxyNet, prev: ProxyNet, x, config: SolveConfig) -> ProxyNet:
    """Adapt the proxy to a single candidate ``x`` starting from ``prev``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (anchor.input_dim,) or not np.all(np.isfinite(x)):
        raise UsageError("x must be a finite vector of the proxy's input size")
    res = adapt_batch(anchor, prev.params[None, :], x[None, :], config)
    if res.status[0]:
        log.warning("non-finite adaptation objective; keeping the warm start")
        return prev
    return anchor.with_params(res.params[0])


def shared_adapt(anchor: ProxyNet, prev: np.ndarray, X: np.ndarray, config: SolveConfig,
                 track: bool = False) -> AdaptResult:
    """One set of weights fit to the mean adaptation objective over all rows of ``X``."""
    offs = anchor.offsets
    ref = anchor.layer_norms()
    radii = config.epsilon * ref
    f_prev = kernels.value_input_grad(np.broadcast_to(prev, (len(X), prev.size)),
                                      anchor.sizes, X, backend=config.backend)[0]

    def objective(params):
        J, dJ = adapt_objective_terms(anchor.with_params(params), X, f_prev, config.alpha,
                                      config.grad_weight)
        return float(J.mean()), dJ.mean(axis=0)

    cur = prev.copy()
    j_start, grad = objective(cur)
    if not np.isfinite(j_start):
        return AdaptResult(prev.copy(), np.array([j_start]), np.array([j_start]),
                           np.array([1], np.int8), np.array([-np.inf]))
    best, j_best = cur.copy(), j_start
    max_excess = -np.inf
    for _ in range(config.adapt_steps):
        for k in range(anchor.depth):
            sl = slice(offs[k], offs[k + 1])
            gn = np.sqrt(np.dot(grad[sl], grad[sl]))
            if gn == 0.0:
                continue
            phi = cur[sl] - anchor.params[sl] - config.gamma * ref[k] * grad[sl] / gn
            n = np.sqrt(np.dot(phi, phi))
            if n > radii[k]:
                phi *= radii[k] / n
            cur[sl] = anchor.params[sl] + phi
            if track:
                d = cur[sl] - anchor.params[sl]
                max_excess = max(max_excess, np.sqrt(np.dot(d, d)) - radii[k])
        j, grad = objective(cur)
        if not np.isfinite(j):
            break
        if j < j_best:
            best, j_best = cur.copy(), j
    return AdaptResult(best, np.array([j_start]), np.array([j_best]),
                       np.array([0], np.int8), np.array([max_excess]))


def optimize_candidates(anchor: ProxyNet, initials, config: SolveConfig,
                        monitor: Callable[[dict], None] | None = None) -> list[CandidateState]:
    """Run ``config.steps`` rounds of adapt-then-ascend from ``initials``.

    Args:
        anchor: Pretrained proxy (inputs and outputs in its own units).
        initials: ``(C, d)`` starting candidates.
        config: Solver settings.
        monitor: Optional callback receiving a dict of per-round diagnostics
            (``t``, ``active``, ``j_start``, ``j_best``, ``status``,
            ``max_excess``, ``gnorm_warm``, ``gnorm_new``, ``eta``, ``theta``).

    Returns:
        Final :class:`CandidateState` per candidate, in input order.
    """
    X = np.array(initials, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] != anchor.input_dim:
        raise UsageError("initials must be a non-empty (C, input_dim) array")
    if not np.all(np.isfinite(X)):
        raise UsageError("initial candidates must be finite")
    C = X.shape[0]
    be = config.backend
    sizes = anchor.sizes
    theta = np.tile(anchor.params, (C, 1))
    shared = config.adapt_scope == "shared-batch"
    f, g = kernels.value_input_grad(theta, sizes, X, backend=be)
    y0 = f.copy()
    prev_score = f.copy()
    frozen = np.zeros(C, dtype=bool)
    opt = Adam(X.shape, rows=True)
    traj = [[] for _ in range(C)] if config.record_trajectory else None
    steps_taken = np.zeros(C, dtype=np.int64)
    for t in range(config.steps):
        active = ~frozen
        if not np.any(active):
            break
        diag = {"t": t, "active": active.copy()}
        if config.adapt:
            Xa = X[active]
            f_prev, g_prev = kernels.value_input_grad(theta[active], sizes, Xa, backend=be)
            if shared:
                res = shared_adapt(anchor, theta[active][0], Xa, config, track=monitor is not None)
                theta[active] = res.params
            else:
                res = adapt_batch(anchor, theta[active], Xa, config, f_prev,
                                  track=monitor is not None)
                theta[active] = res.params
                if np.any(res.status):
                    log.warning("round %d: %d candidates kept their warm start "
                                "(non-finite objective)", t, int(res.status.sum()))
            prev_score[active] = f_prev
            diag.update(j_start=res.j_start, j_best=res.j_best, status=res.status,
                        max_excess=res.max_excess, gnorm_warm=np.linalg.norm(g_prev, axis=1))
        f, g = kernels.value_input_grad(theta, sizes, X, backend=be)
        eta = step_size(config.eta0, f, y0, config.trust_N, config.sigma_out)
        eta = np.where(active, eta, 0.0)
        bad = active & ~(np.isfinite(f) & np.all(np.isfinite(g), axis=1))
        if config.reset_moments:
            opt.reset()
        d = opt.direction(np.where(bad[:, None], 0.0, g), mask=active & ~bad)
        X_new = X + eta[:, None] * d
        bad |= active & ~np.all(np.isfinite(X_new), axis=1)
        move = active & ~bad
        if traj is not None:
            for i in np.flatnonzero(active):
                traj[i].append((X[i].copy(), float(f[i]), float(eta[i])))
        X[move] = X_new[move]
        steps_taken[move] += 1
        frozen |= bad
        if monitor is not None:
            diag.update(gnorm_new=np.linalg.norm(g[active], axis=1), eta=eta[active],
                        theta=theta, anchor=anchor.params, frozen=frozen.copy())
            monitor(diag)
    finite = np.all(np.isfinite(theta), axis=1)
    f = kernels.value_input_grad(np.where(finite[:, None], theta, anchor.params), sizes, X,
                                 backend=be)[0]
    states = []
    for i in range(C):
        net = anchor.with_params(theta[i]) if finite[i] else anchor
        states.append(CandidateState(X[i].copy(), net, float(prev_score[i]), float(y0[i]),
                                     int(steps_taken[i]), bool(frozen[i]), float(f[i]),
                                     traj[i] if traj is not None else None))
    return states


def ball_excess(theta: np.ndarray, anchor: ProxyNet, epsilon: float) -> np.ndarray:
    """Per-row, per-layer ``||theta_l - anchor_l|| - eps ||anchor_l||``."""
    return block_norms(theta - anchor.params, anchor.offsets) - epsilon * anchor.layer_norms()


def write_candidate_table(states: list[CandidateState], path) -> None:
    """CSV of ``candidate_id, step, proxy_score, step_size, frozen_flag``.

    One row per recorded trajectory step when trajectories exist, plus a
    final row per candidate (step size empty).
    """
    try:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["candidate_id", "step", "proxy_score", "step_size", "frozen_flag"])
            for i, s in enumerate(states):
                for t, (_, score, eta) in enumerate(s.trajectory or []):
                    w.writerow([i, t, repr(score), repr(eta), 0])
                w.writerow([i, s.step_index, repr(s.proxy_score), "", int(s.frozen)])
    except OSError as exc:
        raise OSError(f"cannot write candidate table {path}: {exc}") from exc


def candidate_finals(states: list[CandidateState]) -> np.ndarray:
    return np.stack([s.x for s in states])


def ensemble_ascent(nets: list[ProxyNet], initials, config: SolveConfig) -> list[CandidateState]:
    """Adam-filtered ascent on the mean of several proxies (no adaptation)."""
    X = np.array(initials, dtype=np.float64)
    C = X.shape[0]
    be = config.backend

    def value_grad(Xc):
        fs, gs = zip(*(kernels.value_input_grad(np.tile(n.params, (C, 1)), n.sizes, Xc,
                                                backend=be) for n in nets))
        return np.mean(fs, axis=0), np.mean(gs, axis=0)

    f, _ = value_grad(X)
    y0 = f.copy()
    frozen = np.zeros(C, dtype=bool)
    steps = np.zeros(C, dtype=np.int64)
    opt = Adam(X.shape, rows=True)
    for _ in range(config.steps):
        active = ~frozen
        if not np.any(active):
            break
        f, g = value_grad(X)
        eta = np.where(active, step_size(config.eta0, f, y0, config.trust_N, config.sigma_out), 0.0)
        bad = active & ~(np.isfinite(f) & np.all(np.isfinite(g), axis=1))
        d = opt.direction(np.where(bad[:, None], 0.0, g), mask=active & ~bad)
        X_new = X + eta[:, None] * d
        bad |= active & ~np.all(np.isfinite(X_new), axis=1)
        move = active & ~bad
        X[move] = X_new[move]
        steps[move] += 1
        frozen |= bad
    f, _ = value_grad(X)
    return [CandidateState(X[i].copy(), nets[0], float("nan"), float(y0[i]), int(steps[i]),
                           bool(frozen[i]), float(f[i])) for i in range(C)]
