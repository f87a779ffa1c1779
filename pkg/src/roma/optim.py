"""Adaptive-moment (Adam) update directions."""
from __future__ import annotations

import numpy as np


class Adam:
    """Moment state for an array of parameters.

    ``direction`` returns the bias-corrected ``m / (sqrt(v) + eps)``; callers
    apply their own rate and sign.  With ``rows=True`` the leading axis
    indexes independent problems, each with its own step counter, and a
    boolean ``mask`` restricts which rows advance.
    """

    def __init__(self, shape, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, rows: bool = False):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.rows = rows
        self.t = np.zeros(shape[0], dtype=np.int64) if rows else 0

    def direction(self, grad: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        b1, b2 = self.beta1, self.beta2
        if not self.rows:
            self.t += 1
            self.m = b1 * self.m + (1 - b1) * grad
            self.v = b2 * self.v + (1 - b2) * grad * grad
            mhat = self.m / (1 - b1 ** self.t)
            vhat = self.v / (1 - b2 ** self.t)
            return mhat / (np.sqrt(vhat) + self.eps)
        sel = np.ones(self.m.shape[0], dtype=bool) if mask is None else np.asarray(mask, bool)
        out = np.zeros_like(self.m)
        if not np.any(sel):
            return out
        g = grad[sel]
        self.t[sel] += 1
        self.m[sel] = b1 * self.m[sel] + (1 - b1) * g
        self.v[sel] = b2 * self.v[sel] + (1 - b2) * g * g
        t = self.t[sel].astype(np.float64)[:, None]
        mhat = self.m[sel] / (1 - b1 ** t)
        vhat = self.v[sel] / (1 - b2 ** t)
        out[sel] = mhat / (np.sqrt(vhat) + self.eps)
        return out

    def reset(self) -> None:
        self.m[...] = 0.0
        self.v[...] = 0.0
        if self.rows:
            self.t[...] = 0
        else:
            self.t = 0
