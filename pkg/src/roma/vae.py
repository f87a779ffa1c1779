"""Variational autoencoder for one-hot sequences.

The encoder maps a flattened one-hot sequence through one leaky-ReLU hidden
layer to a latent mean and log-variance; the decoder maps a latent vector
through one leaky-ReLU hidden layer to per-position categorical logits.
Training maximises the evidence lower bound with the reparameterisation
trick, with gradients written out by hand.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .optim import Adam
from .proxy import layer_offsets, read_blocks, split_layer, write_blocks
from .tasks import SequenceSpec, UsageError


@dataclass(frozen=True)
class VaeConfig:
    hidden_dim: int = 50
    latent_dim: int = 32
    kl_weight: float = 1.0
    lr: float = 0.001
    epochs: int = 100
    batch_size: int = 128
    negative_slope: float = 0.01
    seed: int = 0

    def resolved(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class VaeModel:
    spec: SequenceSpec
    enc_params: np.ndarray
    dec_params: np.ndarray
    hidden_dim: int = 50
    latent_dim: int = 32
    negative_slope: float = 0.01
    kl_weight: float = 1.0
    enc_sizes: tuple = field(init=False)
    dec_sizes: tuple = field(init=False)

    def __post_init__(self):
        D, H, Z = self.spec.length, self.hidden_dim, self.latent_dim
        object.__setattr__(self, "enc_sizes", (D, H, 2 * Z))
        object.__setattr__(self, "dec_sizes", (Z, H, D))
        for name, sizes in (("enc_params", self.enc_sizes), ("dec_params", self.dec_sizes)):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if arr.size != layer_offsets(sizes)[-1]:
                raise UsageError(f"{name} has {arr.size} values, expected {layer_offsets(sizes)[-1]}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def init(cls, spec: SequenceSpec, config: VaeConfig, rng: np.random.Generator):
        def glorot(sizes):
            parts = []
            for k in range(len(sizes) - 1):
                b = np.sqrt(6.0 / (sizes[k] + sizes[k + 1]))
                parts += [rng.uniform(-b, b, sizes[k] * sizes[k + 1]), np.zeros(sizes[k + 1])]
            return np.concatenate(parts)

        D, H, Z = spec.length, config.hidden_dim, config.latent_dim
        return cls(spec, glorot((D, H, 2 * Z)), glorot((Z, H, D)), H, Z,
                   config.negative_slope, config.kl_weight)

    def layers(self, which: str):
        params, sizes = ((self.enc_params, self.enc_sizes) if which == "enc"
                         else (self.dec_params, self.dec_sizes))
        offs = layer_offsets(sizes)
        return [split_layer(params, sizes, offs, k) for k in range(2)]

    def save(self, path) -> None:
        common = {"activation": "leaky_relu", "negative_slope": self.negative_slope}
        write_blocks(path, [
            ({"name": "encoder", "kind": "vae-encoder", "sizes": list(self.enc_sizes), **common},
             self.enc_params),
            ({"name": "decoder", "kind": "vae-decoder", "sizes": list(self.dec_sizes), **common},
             self.dec_params),
        ], meta={"positions": self.spec.positions, "alphabet_size": self.spec.alphabet_size,
                 "hidden_dim": self.hidden_dim, "latent_dim": self.latent_dim,
                 "kl_weight": self.kl_weight})

    @classmethod
    def load(cls, path) -> "VaeModel":
        header, blocks = read_blocks(path)
        m = header["meta"]
        by_kind = {b["kind"]: arr for b, arr in blocks}
        if set(by_kind) != {"vae-encoder", "vae-decoder"}:
            raise ValueError(f"{path}: not a VAE checkpoint")
        return cls(SequenceSpec(m["positions"], m["alphabet_size"]), by_kind["vae-encoder"],
                   by_kind["vae-decoder"], m["hidden_dim"], m["latent_dim"],
                   blocks[0][0]["negative_slope"], m["kl_weight"])


def _lrelu(a, s):
    return np.where(a > 0, a, s * a)


def _lrelu_grad(a, s):
    return np.where(a > 0, 1.0, s)


def log_softmax_blocks(logits, spec: SequenceSpec):
    L = logits.reshape(logits.shape[0], spec.positions, spec.alphabet_size)
    m = L.max(axis=2, keepdims=True)
    return L - m - np.log(np.exp(L - m).sum(axis=2, keepdims=True))


def kl_divergence(mu, logvar):
    """Per-row KL of ``N(mu, exp(logvar))`` from the standard normal."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)


def _encode_raw(vae: VaeModel, X):
    (W1, b1), (W2, b2) = vae.layers("enc")
    a1 = X @ W1.T + b1
    h1 = _lrelu(a1, vae.negative_slope)
    o = h1 @ W2.T + b2
    Z = vae.latent_dim
    return a1, h1, o[:, :Z], o[:, Z:]


def _decode_raw(vae: VaeModel, z):
    (W3, b3), (W4, b4) = vae.layers("dec")
    a3 = z @ W3.T + b3
    h3 = _lrelu(a3, vae.negative_slope)
    return a3, h3, h3 @ W4.T + b4


def elbo_loss_and_grad(vae: VaeModel, X, eps, kl_weight=None):
    """Negative ELBO (batch mean) and gradients ``(d_enc, d_dec)`` for noise ``eps``."""
    beta = vae.kl_weight if kl_weight is None else kl_weight
    s = vae.negative_slope
    n = X.shape[0]
    a1, h1, mu, lv = _encode_raw(vae, X)
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    a3, h3, logits = _decode_raw(vae, z)
    logp = log_softmax_blocks(logits, vae.spec)
    Xb = X.reshape(logp.shape)
    rec = -np.sum(Xb * logp) / n
    kl = np.sum(kl_divergence(mu, lv)) / n
    loss = rec + beta * kl

    (W1, _), (W2, _) = vae.layers("enc")
    (W3, _), (W4, _) = vae.layers("dec")
    dlog = ((np.exp(logp) - Xb) / n).reshape(n, -1)
    dW4 = dlog.T @ h3
    db4 = dlog.sum(axis=0)
    da3 = (dlog @ W4) * _lrelu_grad(a3, s)
    dW3 = da3.T @ z
    db3 = da3.sum(axis=0)
    dz = da3 @ W3
    dmu = dz + beta * mu / n
    dlv = dz * eps * 0.5 * std + beta * 0.5 * (np.exp(lv) - 1.0) / n
    do = np.concatenate([dmu, dlv], axis=1)
    dW2 = do.T @ h1
    db2 = do.sum(axis=0)
    da1 = (do @ W2) * _lrelu_grad(a1, s)
    dW1 = da1.T @ X
    db1 = da1.sum(axis=0)
    d_enc = np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])
    d_dec = np.concatenate([dW3.ravel(), db3, dW4.ravel(), db4])
    return loss, rec, kl, d_enc, d_dec


def train_vae(sequences, spec: SequenceSpec, config: VaeConfig = VaeConfig()):
    """Fit a VAE to one-hot ``sequences``; returns ``(model, per-epoch losses)``."""
    X = np.array(sequences, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise UsageError("need a non-empty (n, positions * alphabet) array")
    spec.validate(X)
    rng = np.random.default_rng(config.seed)
    vae = VaeModel.init(spec, config, rng)
    enc, dec = vae.enc_params.copy(), vae.dec_params.copy()
    opt_e, opt_d = Adam(enc.shape), Adam(dec.shape)
    history = []
    n = X.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        tot = 0.0
        for s in range(0, n, config.batch_size):
            Xb = X[order[s:s + config.batch_size]]
            eps = rng.standard_normal((Xb.shape[0], config.latent_dim))
            loss, _, _, ge, gd = elbo_loss_and_grad(vae, Xb, eps)
            enc -= config.lr * opt_e.direction(ge)
            dec -= config.lr * opt_d.direction(gd)
            vae = VaeModel(spec, enc, dec, vae.hidden_dim, vae.latent_dim,
                           vae.negative_slope, vae.kl_weight)
            tot += loss * Xb.shape[0]
        history.append(tot / n)
    return vae, history


def encode(vae: VaeModel, x) -> np.ndarray:
    """Posterior mean for one sequence ``(D,)`` or a batch ``(n, D)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    vae.spec.validate(X)
    mu = _encode_raw(vae, X)[2]
    return mu[0] if single else mu


def decode_logits(vae: VaeModel, z) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return _decode_raw(vae, z)[2].reshape(z.shape[0], vae.spec.positions, vae.spec.alphabet_size)


def decode_argmax(vae: VaeModel, z) -> np.ndarray:
    """Per-position argmax of the decoder logits as one-hot (lowest index wins ties)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    if not np.all(np.isfinite(z)):
        raise UsageError("latent vectors must be finite")
    tok = decode_logits(vae, z).argmax(axis=2)
    out = vae.spec.one_hot(tok)
    return out[0] if single else out


def token_accuracy(vae: VaeModel, X) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    rec = decode_argmax(vae, encode(vae, X))
    return float(np.mean(vae.spec.tokens(rec) == vae.spec.tokens(X)))
