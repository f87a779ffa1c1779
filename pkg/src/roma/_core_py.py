"""Pure-numpy implementation of the per-candidate kernels.

Mirrors :mod:`roma._core` function for function and is selected when the
compiled module is unavailable (or ``ROMA_PURE_PYTHON=1``).  Candidates are
vectorised along the leading axis instead of looped over.
"""
from __future__ import annotations

import numpy as np

from .proxy import layer_offsets, sigmoid, softplus


def _layers(theta, sizes, offsets):
    C = theta.shape[0]
    out = []
    for k in range(len(sizes) - 1):
        n_in, n_out = sizes[k], sizes[k + 1]
        s = offsets[k]
        w = theta[:, s:s + n_out * n_in].reshape(C, n_out, n_in)
        b = theta[:, s + n_out * n_in:offsets[k + 1]]
        out.append((w, b))
    return out


def _mv(w, h):
    # batched matrix-vector product: (C, o, i) x (C, i) -> (C, o)
    return np.einsum("coi,ci->co", w, h)


def _mtv(w, r):
    # batched transposed product: (C, o, i) x (C, o) -> (C, i)
    return np.einsum("coi,co->ci", w, r)


def _forward_backward(theta, sizes, offsets, X):
    layers = _layers(theta, sizes, offsets)
    L = len(layers)
    hs, sig = [X], []
    h = X
    for k in range(L - 1):
        w, b = layers[k]
        a = _mv(w, h) + b
        h = softplus(a)
        hs.append(h)
        sig.append(sigmoid(a))
    w, b = layers[L - 1]
    f = _mv(w, h)[:, 0] + b[:, 0]
    if L == 1:
        return layers, hs, sig, [], [], f, w[:, 0, :].copy()
    qs = [None] * (L - 1)
    rho = [None] * (L - 1)
    q = layers[L - 1][0][:, 0, :]
    for k in range(L - 2, -1, -1):
        qs[k] = q
        rho[k] = q * sig[k]
        if k > 0:
            q = _mtv(layers[k][0], rho[k])
    g = _mtv(layers[0][0], rho[0])
    return layers, hs, sig, qs, rho, f, g


def value_input_grad(theta, sizes, X):
    """Per-candidate proxy score and input gradient: ``(f (C,), G (C, d))``."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    sizes = tuple(int(s) for s in sizes)
    offsets = layer_offsets(sizes)
    if theta.shape[1] != offsets[-1] or X.shape != (theta.shape[0], sizes[0]):
        raise ValueError("shape mismatch between parameters, sizes and inputs")
    _, _, _, _, _, f, g = _forward_backward(theta, sizes, offsets, X)
    return f, g


def _adapt_eval(theta, sizes, offsets, X, f_prev, alpha, grad_weight, eps_num):
    layers, hs, sig, qs, rho, f, g = _forward_backward(theta, sizes, offsets, X)
    L = len(layers)
    C = theta.shape[0]
    nrm = np.sqrt(np.sum(g * g, axis=1) + eps_num)
    c = 2.0 * alpha * (f - f_prev)
    value = grad_weight * nrm + alpha * (f - f_prev) ** 2
    grad = np.zeros_like(theta)
    gl = []
    for k in range(L):
        n_in, n_out = sizes[k], sizes[k + 1]
        s = offsets[k]
        gl.append([grad[:, s:s + n_out * n_in].reshape(C, n_out, n_in),
                   grad[:, s + n_out * n_in:offsets[k + 1]]])
    beta = [np.zeros((C, sizes[k + 1])) for k in range(L - 1)]
    if grad_weight != 0.0:
        v = (grad_weight / nrm)[:, None] * g
        if L == 1:
            gl[0][0][:, 0, :] += v
        else:
            gl[0][0] += rho[0][:, :, None] * v[:, None, :]
            psi = _mv(layers[0][0], v)
            direct = [None] * (L - 1)
            for k in range(L - 1):
                chi = psi * sig[k]
                direct[k] = psi * qs[k] * sig[k] * (1.0 - sig[k])
                if k + 1 == L - 1:
                    gl[k + 1][0][:, 0, :] += chi
                else:
                    gl[k + 1][0] += rho[k + 1][:, :, None] * chi[:, None, :]
                    psi = _mv(layers[k + 1][0], chi)
            dh = np.zeros((C, sizes[L - 1]))
            for k in range(L - 2, -1, -1):
                beta[k] = dh * sig[k] + direct[k]
                if k > 0:
                    dh = _mtv(layers[k][0], beta[k])
    if alpha != 0.0:
        gl[L - 1][0][:, 0, :] += c[:, None] * hs[L - 1]
        gl[L - 1][1][:, 0] += c
    if L > 1 and (grad_weight != 0.0 or alpha != 0.0):
        for k in range(L - 1):
            e = beta[k] + c[:, None] * rho[k]
            gl[k][0] += e[:, :, None] * hs[k][:, None, :]
            gl[k][1] += e
    return value, grad


def adapt_value_grad(theta, sizes, X, f_prev, alpha, grad_weight, eps_num):
    """Adaptation objective and its gradient for every candidate."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    sizes = tuple(int(s) for s in sizes)
    offsets = layer_offsets(sizes)
    if theta.shape[1] != offsets[-1] or X.shape != (theta.shape[0], sizes[0]):
        raise ValueError("shape mismatch between parameters, sizes and inputs")
    return _adapt_eval(theta, sizes, offsets, X, np.asarray(f_prev, dtype=np.float64),
                       alpha, grad_weight, eps_num)


def adapt_pgd(anchor, sizes, start, X, f_prev, alpha, grad_weight, epsilon, step,
              n_steps, eps_num, track=False):
    """Projected descent on the adaptation objective; see the compiled twin."""
    # overflowing candidates are flagged and frozen, so the warnings carry no news
    with np.errstate(over="ignore", invalid="ignore"):
        return _adapt_pgd(anchor, sizes, start, X, f_prev, alpha, grad_weight, epsilon, step,
                          n_steps, eps_num, track)


def _adapt_pgd(anchor, sizes, start, X, f_prev, alpha, grad_weight, epsilon, step,
               n_steps, eps_num, track):
    anchor = np.ascontiguousarray(anchor, dtype=np.float64)
    start = np.ascontiguousarray(start, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    f_prev = np.asarray(f_prev, dtype=np.float64)
    sizes = tuple(int(s) for s in sizes)
    offsets = layer_offsets(sizes)
    C, P = start.shape
    if anchor.shape != (P,) or P != offsets[-1] or X.shape != (C, sizes[0]):
        raise ValueError("shape mismatch between parameters, sizes and inputs")
    L = len(sizes) - 1
    ref = np.array([np.sqrt(np.sum(anchor[offsets[k]:offsets[k + 1]] ** 2)) for k in range(L)])
    radii = epsilon * ref

    cur = start.copy()
    out = start.copy()
    active = np.ones(C, dtype=bool)
    status = np.zeros(C, dtype=np.int8)
    j_start = np.empty(C)
    j_best = np.empty(C)
    max_excess = np.full(C, -np.inf)
    for it in range(n_steps + 1):
        J, grad = _adapt_eval(cur, sizes, offsets, X, f_prev, alpha, grad_weight, eps_num)
        bad = active & ~np.isfinite(J)
        if np.any(bad):
            status[bad] = 1
            out[bad] = start[bad]
            j_best[bad] = J[bad]
            if it == 0:
                j_start[bad] = J[bad]
            active &= ~bad
        if it == 0:
            j_start[active] = J[active]
            j_best[active] = J[active]
        else:
            better = active & (J < j_best)
            j_best[better] = J[better]
            out[better] = cur[better]
        if it == n_steps or not np.any(active):
            break
        for k in range(L):
            sl = slice(offsets[k], offsets[k + 1])
            gk = grad[:, sl]
            gn = np.sqrt(np.sum(gk * gk, axis=1))
            move = active & (gn != 0.0)
            if not np.any(move):
                continue
            coef = step * ref[k] / np.where(move, gn, 1.0)
            phi = (cur[:, sl] - anchor[sl]) - coef[:, None] * gk
            nphi = np.sqrt(np.sum(phi * phi, axis=1))
            over = nphi > radii[k]
            scale = np.where(over, radii[k] / np.where(over, nphi, 1.0), 1.0)
            phi = np.where(over[:, None], phi * scale[:, None], phi)
            new = anchor[sl] + phi
            cur[:, sl] = np.where(move[:, None], new, cur[:, sl])
            if track:
                dk = cur[:, sl] - anchor[sl]
                excess = np.sqrt(np.sum(dk * dk, axis=1)) - radii[k]
                max_excess = np.where(move, np.maximum(max_excess, excess), max_excess)
    return out, j_start, j_best, status, max_excess
