"""Synthetic offline-MBO tasks with analytic oracles.

Every built-in task documents its closed form and a known global optimum.
Datasets are drawn uniformly from the task's sampling region, scored by the
oracle, and then have their top ``truncate_top_percent`` rows removed so
the optimiser never sees the best region.

Built-in tasks (``x`` is the raw input, ``d`` its dimension):

``quadratic-bowl``
    ``f(x) = -sum_i (x_i - c_i)^2`` on ``[-2, 2]^4`` with
    ``c = (0.5, -0.5, 0.5, -0.5)``; maximum 0 at ``c``.

``rough-ridge``
    ``f(x) = sum_i [ t(x_i) + A * sin(w * x_i) ]`` on ``[-1, 1]^4`` with the
    concave trend ``t(u) = u - u^2 / (2 * p)``.  The trend peaks at ``u = p``
    (outside the sampling box) and the sinusoid adds roughness of amplitude
    ``A`` and angular frequency ``w``.  The optimum is separable and is found
    per coordinate on a fine 1-D grid refined by bisection on the derivative.

``plateau-cliff``
    With ``u = mean(x)`` on ``[-1, 1]^4``: ``f = u`` for ``u <= u1``, a flat
    plateau ``f = u1`` up to ``u2`` and a linear cliff ``f = u1 - k (u - u2)``
    beyond.  The maximum ``u1`` is attained on the whole plateau; ``x* =
    (u1, ..., u1)`` is the documented maximiser.

``motif-seq``
    Sequences of 8 symbols over a 4-letter alphabet; the score is the
    weighted count of (possibly overlapping) occurrences of the motifs
    ``MOTIFS``.  The optimum is found by exhaustive enumeration.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

DATASET_MAGIC = b"ROMADAT1"


class UsageError(ValueError):
    """Invalid arguments to a task-suite operation."""


class OracleSealedError(RuntimeError):
    """The oracle was queried before the final candidates were fixed."""


@dataclass(frozen=True)
class SequenceSpec:
    positions: int
    alphabet_size: int

    @property
    def length(self) -> int:
        return self.positions * self.alphabet_size

    def one_hot(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        tokens = np.atleast_2d(tokens)
        if tokens.shape[1] != self.positions or tokens.min() < 0 or tokens.max() >= self.alphabet_size:
            raise UsageError("token array does not match the sequence spec")
        out = np.zeros((tokens.shape[0], self.positions, self.alphabet_size))
        np.put_along_axis(out, tokens[:, :, None], 1.0, axis=2)
        out = out.reshape(tokens.shape[0], self.length)
        return out[0] if single else out

    def tokens(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        self.validate(X)
        tok = X.reshape(X.shape[0], self.positions, self.alphabet_size).argmax(axis=2)
        return tok[0] if single else tok

    def is_valid(self, x) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if X.shape[1] != self.length:
            return np.zeros(X.shape[0], dtype=bool)
        blocks = X.reshape(X.shape[0], self.positions, self.alphabet_size)
        binary = np.all((blocks == 0.0) | (blocks == 1.0), axis=(1, 2))
        one_each = np.all(blocks.sum(axis=2) == 1.0, axis=1)
        return binary & one_each

    def validate(self, x) -> None:
        if not np.all(self.is_valid(x)):
            raise UsageError("input is not a valid one-hot encoding")


class Oracle:
    """Ground-truth scorer handed out by :func:`make_task`.

    The handle starts sealed; calling it raises until :meth:`release` is
    called, which the harness does only once the final candidates are
    fixed.  ``calls`` counts scored rows.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], name: str):
        self._fn = fn
        self.name = name
        self.sealed = True
        self.calls = 0

    def release(self) -> None:
        self.sealed = False

    def seal(self) -> None:
        self.sealed = True

    def __call__(self, X) -> np.ndarray:
        if self.sealed:
            raise OracleSealedError(f"oracle for {self.name!r} queried during optimisation")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.calls += X.shape[0]
        return self._fn(X)

    def __reduce__(self):
        raise TypeError("oracle handles are in-process only and cannot be serialised")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    oracle: Callable[[np.ndarray], np.ndarray]
    input_dim: int
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    sequence: SequenceSpec | None = None
    dataset_size: int = 1000
    truncate_top_percent: float = 20.0
    optimum_x: np.ndarray | None = None
    optimum_value: float | None = None
    formula: str = ""
    eta0: float = 0.003
    epsilon: float = 0.005
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("continuous", "discrete"):
            raise UsageError(f"unknown task kind {self.kind!r}")
        if self.kind == "discrete" and self.sequence is None:
            raise UsageError("discrete tasks need a sequence spec")


@dataclass(frozen=True)
class DatasetStats:
    y_mean: float
    y_std: float
    y_min: float
    y_max: float

    @classmethod
    def of(cls, y: np.ndarray) -> "DatasetStats":
        y = np.asarray(y, dtype=np.float64)
        return cls(float(y.mean()), float(y.std()), float(y.min()), float(y.max()))


def validation_size(n: int) -> int:
    if n > 10000:
        return 500
    if n >= 2000:
        return 200
    return max(1, int(round(0.1 * n))) if n > 1 else 0


@dataclass(eq=False)
class LabeledDataset:
    """Static ``(x_i, y_i)`` pairs with statistics and a train/validation split."""

    inputs: np.ndarray
    scores: np.ndarray
    stats: DatasetStats
    train_idx: np.ndarray
    val_idx: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    provenance: dict
    sequence: SequenceSpec | None = None

    @classmethod
    def build(cls, inputs, scores, *, seed: int, provenance: dict | None = None,
              sequence: SequenceSpec | None = None) -> "LabeledDataset":
        inputs = np.array(inputs, dtype=np.float64)
        scores = np.array(scores, dtype=np.float64).reshape(-1)
        if inputs.ndim != 2 or inputs.shape[0] != scores.shape[0]:
            raise UsageError("inputs and scores must have the same number of rows")
        if inputs.shape[0] == 0:
            raise UsageError("dataset is empty")
        n = inputs.shape[0]
        perm = np.random.default_rng(seed).permutation(n)
        n_val = validation_size(n)
        x_std = inputs.std(axis=0)
        x_std = np.where(x_std > 0, x_std, 1.0)
        prov = {"seed": int(seed)}
        prov.update(provenance or {})
        return cls(inputs, scores, DatasetStats.of(scores),
                   np.sort(perm[n_val:]), np.sort(perm[:n_val]),
                   inputs.mean(axis=0), x_std, prov, sequence)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def standardize_x(self, X):
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std

    def destandardize_x(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.x_std + self.x_mean

    def standardize_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.stats.y_mean) / self._y_scale

    def destandardize_y(self, z):
        return np.asarray(z, dtype=np.float64) * self._y_scale + self.stats.y_mean

    @property
    def _y_scale(self) -> float:
        return self.stats.y_std if self.stats.y_std > 0 else 1.0

    def subset(self, keep: np.ndarray, provenance: dict) -> "LabeledDataset":
        return LabeledDataset.build(self.inputs[keep], self.scores[keep],
                                    seed=self.provenance.get("seed", 0),
                                    provenance=provenance, sequence=self.sequence)

    # -- files ---------------------------------------------------------------
    # Layout: magic "ROMADAT1", uint32 LE header length, UTF-8 JSON header,
    # then float64 LE payload: inputs (rows x dims, row-major), scores (rows),
    # train indices and validation indices (as float64 integers).

    def save(self, path) -> None:
        header = {
            "format": "roma-dataset", "version": 1,
            "rows": len(self), "dims": self.input_dim,
            "n_train": int(self.train_idx.size), "n_val": int(self.val_idx.size),
            "stats": self.stats.__dict__,
            "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
            "provenance": self.provenance,
            "sequence": None if self.sequence is None else self.sequence.__dict__,
        }
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        payload = np.concatenate([self.inputs.reshape(-1), self.scores,
                                  self.train_idx.astype(np.float64),
                                  self.val_idx.astype(np.float64)])
        try:
            with open(Path(path), "wb") as fh:
                fh.write(DATASET_MAGIC)
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(payload.astype("<f8").tobytes())
        except OSError as exc:
            raise OSError(f"cannot write dataset to {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "LabeledDataset":
        data = Path(path).read_bytes()
        if data[:8] != DATASET_MAGIC:
            raise UsageError(f"{path}: not a roma dataset file")
        (hlen,) = struct.unpack("<I", data[8:12])
        h = json.loads(data[12:12 + hlen].decode("utf-8"))
        payload = np.frombuffer(data[12 + hlen:], dtype="<f8").astype(np.float64)
        n, d = h["rows"], h["dims"]
        pos = 0
        inputs = payload[pos:pos + n * d].reshape(n, d); pos += n * d
        scores = payload[pos:pos + n]; pos += n
        train = payload[pos:pos + h["n_train"]].astype(np.int64); pos += h["n_train"]
        val = payload[pos:pos + h["n_val"]].astype(np.int64); pos += h["n_val"]
        seq = SequenceSpec(**h["sequence"]) if h["sequence"] else None
        return cls(inputs.copy(), scores.copy(), DatasetStats(**h["stats"]), train, val,
                   np.array(h["x_mean"]), np.array(h["x_std"]), h["provenance"], seq)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.input_dim)] + ["y", "split"])
            val = set(self.val_idx.tolist())
            for i in range(len(self)):
                w.writerow([repr(float(v)) for v in self.inputs[i]]
                           + [repr(float(self.scores[i])), "val" if i in val else "train"])


def truncate_top_percentile(dataset: LabeledDataset, p: float) -> LabeledDataset:
    """Drop the ``ceil(p% * n)`` highest-scoring rows.

    Ties at the threshold are removed starting from the highest index.
    Statistics and the split are recomputed.
    """
    if not 0 <= p < 100:
        raise UsageError(f"truncation percent must lie in [0, 100), got {p}")
    n = len(dataset)
    k = math.ceil(p / 100.0 * n - 1e-9)
    if k == 0:
        return dataset
    idx = np.arange(n)
    order = np.lexsort((-idx, -dataset.scores))  # score desc, then index desc
    keep = np.sort(order[k:])
    prov = dict(dataset.provenance)
    prov["truncations"] = list(prov.get("truncations", [])) + [float(p)]
    return dataset.subset(keep, prov)


def normalize_score(y, y_min: float, y_max: float):
    """Affine map sending ``y_min`` to 0 and ``y_max`` to 1 (no clamping)."""
    if not y_max > y_min:
        raise UsageError("normalisation needs y_max > y_min")
    return (np.asarray(y, dtype=np.float64) - y_min) / (y_max - y_min)


def make_task(spec: TaskSpec, seed: int = 0) -> tuple[LabeledDataset, Oracle]:
    """Sample, score and truncate a dataset; return it with a sealed oracle."""
    if spec.dataset_size <= 0:
        raise UsageError("dataset_size must be positive")
    rng = np.random.default_rng(seed)
    if spec.kind == "continuous":
        lo, hi = np.asarray(spec.lower, float), np.asarray(spec.upper, float)
        if lo.shape != (spec.input_dim,) or hi.shape != lo.shape or np.any(hi <= lo):
            raise UsageError(f"task {spec.name!r} has a degenerate sampling region")
        X = rng.uniform(lo, hi, size=(spec.dataset_size, spec.input_dim))
        seq = None
    else:
        seq = spec.sequence
        tok = rng.integers(0, seq.alphabet_size, size=(spec.dataset_size, seq.positions))
        X = seq.one_hot(tok)
    y = spec.oracle(X)
    ds = LabeledDataset.build(X, y, seed=seed, sequence=seq,
                              provenance={"task": spec.name, "raw_size": spec.dataset_size,
                                          "truncations": []})
    ds = truncate_top_percentile(ds, spec.truncate_top_percent)
    return ds, Oracle(spec.oracle, spec.name)


# -- built-in oracles ------------------------------------------------------------

BOWL_CENTER = np.array([0.5, -0.5, 0.5, -0.5])


def quadratic_bowl(X):
    X = np.atleast_2d(X)
    return -np.sum((X - BOWL_CENTER) ** 2, axis=1)


RIDGE = {"peak": 1.1, "amplitude": 0.08, "omega": 9.0}


def _ridge_1d(u, peak, amplitude, omega):
    return u - u * u / (2.0 * peak) + amplitude * np.sin(omega * u)


def rough_ridge(X):
    X = np.atleast_2d(X)
    return np.sum(_ridge_1d(X, **RIDGE), axis=1)


def rough_ridge_base(X):
    """The smooth trend alone (roughness removed)."""
    X = np.atleast_2d(X)
    p = RIDGE["peak"]
    return np.sum(X - X * X / (2.0 * p), axis=1)


def _ridge_argmax_1d(peak, amplitude, omega, lo=-5.0, hi=5.0):
    u = np.linspace(lo, hi, 200001)
    i = int(np.argmax(_ridge_1d(u, peak, amplitude, omega)))
    a, b = u[max(i - 1, 0)], u[min(i + 1, u.size - 1)]

    def deriv(t):
        return 1.0 - t / peak + amplitude * omega * np.cos(omega * t)

    for _ in range(80):
        m = 0.5 * (a + b)
        if deriv(a) * deriv(m) <= 0:
            b = m
        else:
            a = m
    return 0.5 * (a + b)


PLATEAU = {"rise_end": 0.35, "cliff_start": 1.3, "cliff_slope": 6.0}


def plateau_cliff(X):
    X = np.atleast_2d(X)
    u = X.mean(axis=1)
    u1, u2, k = PLATEAU["rise_end"], PLATEAU["cliff_start"], PLATEAU["cliff_slope"]
    return np.where(u <= u1, u, np.where(u <= u2, u1, u1 - k * (u - u2)))


MOTIF_SPEC = SequenceSpec(positions=8, alphabet_size=4)
MOTIFS = {(0, 1, 2): 1.0, (3, 3): 0.6, (2, 0): 0.4}


def motif_counts(tokens: np.ndarray) -> np.ndarray:
    tokens = np.atleast_2d(tokens)
    n, L = tokens.shape
    score = np.zeros(n)
    for motif, weight in MOTIFS.items():
        m = len(motif)
        for start in range(L - m + 1):
            hit = np.ones(n, dtype=bool)
            for j, sym in enumerate(motif):
                hit &= tokens[:, start + j] == sym
            score += weight * hit
    return score


def motif_seq(X):
    return motif_counts(MOTIF_SPEC.tokens(X))


def _motif_optimum():
    allseq = np.array(list(itertools.product(range(MOTIF_SPEC.alphabet_size),
                                             repeat=MOTIF_SPEC.positions)))
    scores = motif_counts(allseq)
    i = int(np.argmax(scores))
    return MOTIF_SPEC.one_hot(allseq[i]), float(scores[i])


def _build_tasks() -> dict[str, TaskSpec]:
    tasks = {}
    tasks["quadratic-bowl"] = TaskSpec(
        name="quadratic-bowl", kind="continuous", oracle=quadratic_bowl, input_dim=4,
        lower=np.full(4, -2.0), upper=np.full(4, 2.0), dataset_size=1000,
        optimum_x=BOWL_CENTER.copy(), optimum_value=0.0,
        formula="-sum((x - c)^2), c = (0.5, -0.5, 0.5, -0.5)",
        eta0=0.02, epsilon=0.005,
    )
    u_star = _ridge_argmax_1d(**RIDGE)
    x_r = np.full(4, u_star)
    tasks["rough-ridge"] = TaskSpec(
        name="rough-ridge", kind="continuous", oracle=rough_ridge, input_dim=4,
        lower=np.full(4, -1.0), upper=np.full(4, 1.0), dataset_size=1000,
        optimum_x=x_r, optimum_value=float(rough_ridge(x_r)[0]),
        formula="sum(u - u^2/(2p) + A sin(w u)) over coordinates u",
        eta0=0.01, epsilon=0.005, params=dict(RIDGE),
    )
    x_p = np.full(4, PLATEAU["rise_end"])
    tasks["plateau-cliff"] = TaskSpec(
        name="plateau-cliff", kind="continuous", oracle=plateau_cliff, input_dim=4,
        lower=np.full(4, -1.0), upper=np.full(4, 1.0), dataset_size=1000,
        optimum_x=x_p, optimum_value=PLATEAU["rise_end"],
        formula="u = mean(x); u if u <= u1; u1 if u <= u2; u1 - k(u - u2) otherwise",
        eta0=0.01, epsilon=0.005, params=dict(PLATEAU),
    )
    x_m, v_m = _motif_optimum()
    tasks["motif-seq"] = TaskSpec(
        name="motif-seq", kind="discrete", oracle=motif_seq, input_dim=MOTIF_SPEC.length,
        sequence=MOTIF_SPEC, dataset_size=2000,
        optimum_x=x_m, optimum_value=v_m,
        formula="weighted count of motif occurrences",
        eta0=0.002, epsilon=0.0005,
        params={"motifs": {"".join(map(str, k)): v for k, v in MOTIFS.items()},
                "vae_kl_weight": 0.5},
    )
    return tasks


TASKS = _build_tasks()


def get_task(name: str, **overrides) -> TaskSpec:
    try:
        spec = TASKS[name]
    except KeyError:
        raise UsageError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None
    return replace(spec, **overrides) if overrides else spec
