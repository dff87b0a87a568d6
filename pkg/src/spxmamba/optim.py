"""Adam with optional global-norm gradient clipping.

Operates on plain dicts of numpy arrays keyed by parameter name, so the
same code drives both the training loop (float32 model parameters) and
small float64 verification problems. State is two moment dicts plus the
step counter; all updates are in-place on the parameter arrays.
"""

from __future__ import annotations

import numpy as np


class Adam:
    """First/second-moment adaptive steps with bias correction.

    update rule per parameter, with t the 1-based step count:

        m = b1*m + (1-b1)*g
        v = b2*v + (1-b2)*g^2
        mhat = m / (1 - b1^t);  vhat = v / (1 - b2^t)
        p -= lr * mhat / (sqrt(vhat) + eps)

    If any gradient in the step is non-finite the whole step is skipped
    (state and parameters untouched) and ``step`` returns False.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = None):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.clip_norm = clip_norm
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> bool:
        """Apply one update in-place. Returns False if skipped on non-finite grads."""
        for name in params:
            g = grads.get(name)
            if g is not None and not np.all(np.isfinite(g)):
                return False
        if self.clip_norm is not None:
            grads = clip_global_norm(grads, self.clip_norm)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = np.asarray(g, dtype=p.dtype)
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)
        return True

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


def global_norm(grads: dict[str, np.ndarray]) -> float:
    """L2 norm over the concatenation of every gradient in the dict."""
    total = 0.0
    for g in grads.values():
        if g is None:
            continue
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients by max_norm/norm when norm exceeds max_norm."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: (None if g is None else (g * scale).astype(g.dtype, copy=False))
            for k, g in grads.items()}
