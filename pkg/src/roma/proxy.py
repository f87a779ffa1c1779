"""Dense softplus perceptron proxy with hand-written derivatives.

Parameters of a net live in one flat float64 vector.  Layer ``k`` maps
``sizes[k]`` inputs to ``sizes[k + 1]`` outputs and occupies a contiguous
block holding its weight matrix (row-major, ``out x in``) followed by its
bias vector.  The same layout is used by the compiled kernels, by
checkpoints and by the per-layer Frobenius ball, so a layer's "parameter
block" always means weights and bias together.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

EPS_NUM = 1e-12
ACTIVATIONS = ("softplus",)
CHECKPOINT_MAGIC = b"ROMANET1"


class ShapeError(ValueError):
    """Array shapes are not compatible with the network."""


class DomainError(ValueError):
    """Input contains non-finite values."""


def softplus(a):
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


def sigmoid(a):
    # exp of a non-positive argument only; matches the compiled kernel
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def layer_offsets(sizes: Sequence[int]) -> np.ndarray:
    """Start offset of every layer block plus the total length at the end."""
    blocks = [sizes[k + 1] * (sizes[k] + 1) for k in range(len(sizes) - 1)]
    return np.concatenate([[0], np.cumsum(blocks)]).astype(np.int64)


@dataclass(frozen=True, eq=False)
class ProxyNet:
    """Immutable multilayer perceptron ``f(x; theta)`` with a scalar output.

    Hidden layers use softplus, the last layer is linear.  ``sizes`` is the
    chain of layer widths ``(input_dim, hidden..., 1)``.
    """

    sizes: tuple[int, ...]
    params: np.ndarray
    activation: str = "softplus"
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ShapeError(f"invalid layer sizes {sizes}")
        if sizes[-1] != 1:
            raise ShapeError("final layer must have output dimension 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        offsets = layer_offsets(sizes)
        params = np.array(self.params, dtype=np.float64).reshape(-1)
        if params.size != offsets[-1]:
            raise ShapeError(
                f"expected {offsets[-1]} parameters for sizes {sizes}, got {params.size}"
            )
        if not np.all(np.isfinite(params)):
            raise DomainError("network parameters must be finite")
        params.setflags(write=False)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def init(cls, input_dim: int, rng: np.random.Generator, *,
             hidden: int = 64, depth: int = 3) -> "ProxyNet":
        """Glorot-uniform weights, zero biases."""
        if depth < 1:
            raise ShapeError("depth must be at least 1")
        sizes = (input_dim,) + (hidden,) * (depth - 1) + (1,)
        blocks = []
        for k in range(depth):
            n_in, n_out = sizes[k], sizes[k + 1]
            bound = np.sqrt(6.0 / (n_in + n_out))
            blocks.append(rng.uniform(-bound, bound, size=n_out * n_in))
            blocks.append(np.zeros(n_out))
        return cls(sizes, np.concatenate(blocks))

    @property
    def depth(self) -> int:
        return len(self.sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def n_params(self) -> int:
        return int(self.offsets[-1])

    def layer(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Views ``(W, b)`` of layer ``k``."""
        return split_layer(self.params, self.sizes, self.offsets, k)

    def block(self, k: int) -> slice:
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    def layer_norms(self) -> np.ndarray:
        return block_norms(self.params, self.offsets)

    def with_params(self, params: np.ndarray) -> "ProxyNet":
        return ProxyNet(self.sizes, params, self.activation)

    def scaled_output(self, c: float) -> "ProxyNet":
        """Same net with the final layer multiplied by ``c``."""
        p = self.params.copy()
        p[self.block(self.depth - 1)] *= c
        return self.with_params(p)

    def save(self, path) -> None:
        save_checkpoint(path, [("proxy", self)])

    @classmethod
    def load(cls, path) -> "ProxyNet":
        blocks = load_checkpoint(path)
        return blocks["proxy"]


def split_layer(params, sizes, offsets, k):
    n_in, n_out = sizes[k], sizes[k + 1]
    start = int(offsets[k])
    w = params[..., start:start + n_out * n_in]
    b = params[..., start + n_out * n_in:start + n_out * (n_in + 1)]
    return w.reshape(w.shape[:-1] + (n_out, n_in)), b


def block_norms(params: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Per-layer Frobenius norms; works on ``(..., P)`` stacks."""
    return np.stack(
        [np.sqrt(np.sum(params[..., offsets[k]:offsets[k + 1]] ** 2, axis=-1))
         for k in range(len(offsets) - 1)],
        axis=-1,
    )


@dataclass(frozen=True, eq=False)
class WeightDelta:
    """Offset ``phi = theta_tilde - theta`` relative to an anchor network."""

    offsets: np.ndarray
    reference_norms: np.ndarray
    sizes: tuple[int, ...]

    @classmethod
    def zeros(cls, anchor: ProxyNet) -> "WeightDelta":
        return cls(np.zeros(anchor.n_params), anchor.layer_norms(), anchor.sizes)

    @classmethod
    def between(cls, anchor: ProxyNet, perturbed: ProxyNet) -> "WeightDelta":
        _check_congruent(anchor, perturbed)
        return cls(perturbed.params - anchor.params, anchor.layer_norms(), anchor.sizes)

    def __post_init__(self):
        offs = layer_offsets(self.sizes)
        if np.shape(self.offsets) != (offs[-1],):
            raise ShapeError("offset vector does not match the anchor layout")
        if np.shape(self.reference_norms) != (len(self.sizes) - 1,):
            raise ShapeError("one reference norm per layer is required")

    def norms(self) -> np.ndarray:
        return block_norms(self.offsets, layer_offsets(self.sizes))

    def apply(self, anchor: ProxyNet) -> ProxyNet:
        return anchor.with_params(anchor.params + self.offsets)

    def inside_ball(self, epsilon: float, atol: float = 1e-9) -> bool:
        return bool(np.all(self.norms() <= epsilon * self.reference_norms + atol))


def project_to_ball(delta: WeightDelta, epsilon: float) -> WeightDelta:
    """Rescale every layer offset onto the ``epsilon``-relative Frobenius ball."""
    out = delta.offsets.copy()
    offs = layer_offsets(delta.sizes)
    norms = delta.norms()
    for k, (n, ref) in enumerate(zip(norms, delta.reference_norms)):
        radius = epsilon * ref
        if n > radius:
            out[offs[k]:offs[k + 1]] *= radius / n
    return WeightDelta(out, delta.reference_norms, delta.sizes)


def project_stack(phi: np.ndarray, offsets: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """In-place ball projection of a ``(..., P)`` offset stack; returns it."""
    for k in range(len(offsets) - 1):
        blk = phi[..., offsets[k]:offsets[k + 1]]
        n = np.sqrt(np.sum(blk * blk, axis=-1))
        over = n > radii[k]
        if np.any(over):
            scale = np.where(over, radii[k] / np.where(over, n, 1.0), 1.0)
            blk *= scale[..., None]
    return phi


def _check_congruent(a: ProxyNet, b: ProxyNet):
    if a.sizes != b.sizes:
        raise ShapeError(f"networks differ in shape: {a.sizes} vs {b.sizes}")


def _as_batch(net: ProxyNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ShapeError(f"expected inputs of length {net.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(X)):
        raise DomainError("inputs must be finite")
    return X, single


def _forward_pass(net: ProxyNet, X: np.ndarray):
    """Returns hidden pre-activations, hidden outputs (with X first) and f."""
    pre, hs = [], [X]
    h = X
    for k in range(net.depth - 1):
        w, b = net.layer(k)
        a = h @ w.T + b
        pre.append(a)
        h = softplus(a)
        hs.append(h)
    w, b = net.layer(net.depth - 1)
    f = (h @ w.T + b)[:, 0]
    return pre, hs, f


def _forward_with_slopes(net: ProxyNet, X: np.ndarray):
    """Like :func:`_forward_pass` but returns softplus slopes instead of pre-activations."""
    sig, hs = [], [X]
    h = X
    for k in range(net.depth - 1):
        w, b = net.layer(k)
        a = h @ w.T + b
        e = np.exp(-np.abs(a))
        r = 1.0 / (1.0 + e)
        sig.append(np.where(a >= 0, r, e * r))
        h = np.maximum(a, 0.0) + np.log1p(e)
        hs.append(h)
    w, b = net.layer(net.depth - 1)
    return sig, hs, (h @ w.T + b)[:, 0]


def _output_sensitivities(net: ProxyNet, pre):
    """``rho[k] = df/da_k`` for each hidden layer plus the sigmoid factors."""
    n = pre[0].shape[0] if pre else None
    L = net.depth
    sig = [sigmoid(a) for a in pre]
    rho = [None] * (L - 1)
    qs = [None] * (L - 1)
    w_last, _ = net.layer(L - 1)
    upstream = np.broadcast_to(w_last, (n, w_last.shape[1])) if n is not None else None
    for k in range(L - 2, -1, -1):
        q = upstream
        qs[k] = q
        rho[k] = q * sig[k]
        if k > 0:
            w, _ = net.layer(k)
            upstream = rho[k] @ w
    return sig, qs, rho


def forward(net: ProxyNet, x):
    """Proxy score for one input (scalar) or a batch of inputs (vector)."""
    X, single = _as_batch(net, x)
    f = _forward_pass(net, X)[2]
    return float(f[0]) if single else f


def input_gradient(net: ProxyNet, x):
    """Exact ``d f / d x``; shape follows ``x``."""
    X, single = _as_batch(net, x)
    g = _value_and_input_grad(net, X)[1]
    return g[0] if single else g


def value_and_input_gradient(net: ProxyNet, X: np.ndarray):
    X, _ = _as_batch(net, X)
    return _value_and_input_grad(net, X)


def _value_and_input_grad(net, X):
    pre, _, f = _forward_pass(net, X)
    w0, _ = net.layer(0)
    if net.depth == 1:
        return f, np.broadcast_to(w0[0], X.shape).copy()
    _, _, rho = _output_sensitivities(net, pre)
    return f, rho[0] @ w0


def regression_loss_and_gradient(net: ProxyNet, X, y, noise=None):
    """Mean squared error on ``X + noise`` and its gradient w.r.t. all parameters."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("regression gradient needs a non-empty batch")
    if y.shape[0] != X.shape[0]:
        raise ShapeError("inputs and targets differ in length")
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != X.shape:
            raise ShapeError("noise must match the batch shape")
        X = X + noise
    X, _ = _as_batch(net, X)
    n = X.shape[0]
    sig, hs, f = _forward_with_slopes(net, X)
    r = f - y
    loss = float(np.mean(r * r))
    grad = np.empty(net.n_params)
    delta = (2.0 / n) * r[:, None]  # d loss / d output pre-activation
    for k in range(net.depth - 1, -1, -1):
        w, _ = net.layer(k)
        blk = grad[net.block(k)]
        n_out, n_in = w.shape
        blk[:n_out * n_in] = (delta.T @ hs[k]).reshape(-1)
        blk[n_out * n_in:] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ w) * sig[k - 1]
    return loss, grad


def regression_weight_gradient(net: ProxyNet, X, y, noise=None) -> np.ndarray:
    """Gradient of ``mean((f(x_i + noise_i) - y_i) ** 2)`` in the flat layout."""
    return regression_loss_and_gradient(net, X, y, noise)[1]


def adapt_objective_terms(net: ProxyNet, X, f_prev, alpha: float,
                          grad_weight: float = 1.0, eps_num: float = EPS_NUM):
    """Per-input adaptation objective and its parameter gradient.

    For every row ``x``::

        J(x) = grad_weight * sqrt(|d f/d x|^2 + eps_num) + alpha * (f(x) - f_prev)^2

    The norm term is differentiated by running the reverse pass of the
    input gradient backwards a second time.  Returns ``(J (n,), dJ (n, P))``.
    """
    X, _ = _as_batch(net, X)
    n = X.shape[0]
    L = net.depth
    f_prev = np.broadcast_to(np.asarray(f_prev, dtype=np.float64), (n,))
    pre, hs, f = _forward_pass(net, X)
    grad = np.zeros((n, net.n_params))
    w0, _ = net.layer(0)

    if L == 1:
        rho, sig, qs = [], [], []
        g = np.broadcast_to(w0[0], X.shape)
    else:
        sig, qs, rho = _output_sensitivities(net, pre)
        g = rho[0] @ w0
    nrm = np.sqrt(np.sum(g * g, axis=1) + eps_num)
    c = 2.0 * alpha * (f - f_prev)
    value = grad_weight * nrm + alpha * (f - f_prev) ** 2

    def wgrad(k):
        n_out, n_in = net.sizes[k + 1], net.sizes[k]
        blk = grad[:, net.block(k)]
        w = blk[:, :n_out * n_in].reshape(n, n_out, n_in)
        assert np.shares_memory(w, grad)
        return w, blk[:, n_out * n_in:]

    if grad_weight != 0.0:
        v = (grad_weight / nrm)[:, None] * g
        gw0, _ = wgrad(0)
        if L == 1:
            gw0[:, 0, :] += v
        else:
            gw0 += rho[0][:, :, None] * v[:, None, :]
            psi = v @ w0.T
            direct = [None] * (L - 1)
            for k in range(L - 1):
                chi = psi * sig[k]
                direct[k] = psi * qs[k] * sig[k] * (1.0 - sig[k])
                gw_next, _ = wgrad(k + 1)
                w_next, _ = net.layer(k + 1)
                if k + 1 == L - 1:
                    gw_next[:, 0, :] += chi
                else:
                    gw_next += rho[k + 1][:, :, None] * chi[:, None, :]
                    psi = chi @ w_next.T
            dh = np.zeros_like(pre[-1])
            for k in range(L - 2, -1, -1):
                beta = dh * sig[k] + direct[k]
                gw, gb = wgrad(k)
                gw += beta[:, :, None] * hs[k][:, None, :]
                gb += beta
                if k > 0:
                    w, _ = net.layer(k)
                    dh = beta @ w

    if alpha != 0.0:
        gw, gb = wgrad(L - 1)
        gw[:, 0, :] += c[:, None] * hs[L - 1]
        gb[:, 0] += c
        for k in range(L - 2, -1, -1):
            gw, gb = wgrad(k)
            cr = c[:, None] * rho[k]
            gw += cr[:, :, None] * hs[k][:, None, :]
            gb += cr
    return value, grad


def adapt_objective_gradient(net_tilde: ProxyNet, net_prev: ProxyNet, x, alpha: float,
                             grad_weight: float = 1.0):
    """Adaptation objective at one input and its gradient w.r.t. ``net_tilde``."""
    _check_congruent(net_tilde, net_prev)
    X, _ = _as_batch(net_tilde, x)
    if X.shape[0] != 1:
        raise ShapeError("adapt_objective_gradient takes a single input")
    f_prev = forward(net_prev, X)
    value, grad = adapt_objective_terms(net_tilde, X, f_prev, alpha, grad_weight)
    return float(value[0]), grad[0]


# -- checkpoints --------------------------------------------------------------
#
# Layout: 8-byte magic "ROMANET1", little-endian uint32 header length, UTF-8
# JSON header, then the float64 little-endian payload of every block in header
# order.  Each header block entry carries ``name``, ``kind``, ``sizes``,
# ``activation``, ``count`` (number of float64 values) and free-form ``meta``.

def write_blocks(path, entries: list[tuple[dict, np.ndarray]], meta: dict | None = None) -> None:
    """Write labelled float64 blocks; each entry dict gets its ``count`` filled in."""
    blocks = []
    for info, arr in entries:
        info = dict(info)
        info["count"] = int(np.size(arr))
        blocks.append(info)
    header = {"format": "roma-checkpoint", "version": 1, "meta": meta or {}, "blocks": blocks}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(Path(path), "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            for _, arr in entries:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def read_blocks(path) -> tuple[dict, list[tuple[dict, np.ndarray]]]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a roma checkpoint")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    out = []
    for blk in header["blocks"]:
        nbytes = 8 * blk["count"]
        if pos + nbytes > len(data):
            raise ValueError(f"{path}: truncated payload")
        out.append((blk, np.frombuffer(data[pos:pos + nbytes], dtype="<f8").astype(np.float64)))
        pos += nbytes
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after payload")
    return header, out


def save_checkpoint(path, blocks: list[tuple[str, ProxyNet]], meta: dict | None = None) -> None:
    write_blocks(path, [({"name": name, "kind": "mlp", "sizes": list(net.sizes),
                          "activation": net.activation}, net.params)
                         for name, net in blocks], meta)


def read_checkpoint(path) -> tuple[dict, dict[str, ProxyNet]]:
    header, blocks = read_blocks(path)
    nets = {}
    for blk, params in blocks:
        if blk["kind"] != "mlp":
            raise ValueError(f"{path}: block {blk['name']!r} is not a proxy network")
        nets[blk["name"]] = ProxyNet(tuple(blk["sizes"]), params, blk["activation"])
    return header, nets


def load_checkpoint(path) -> dict[str, ProxyNet]:
    return read_checkpoint(path)[1]
