"""Adam optimizer with bias correction, keyed to network parameters.

Moment slots are addressed by ``(layer_index, param_name)`` so that the
pruning machinery can shrink them in lockstep with the weight tensors.
Updates are in-place and deterministic.
"""

from __future__ import annotations

import numpy as np


class Adam:
    """``lr_overrides`` assigns specific parameter keys their own rate
    (e.g. faster adaptation for variational gate parameters)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, lr_overrides: dict | None = None):
        if not (lr > 0.0 and 0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0 and eps > 0.0):
            raise ValueError("Adam: hyperparameters out of range")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_overrides = dict(lr_overrides or {})
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        """One update over ``{key: array}`` parameters with matching grads.

        Parameters are modified in place; keys missing from ``grads`` are
        left untouched (their moments do not advance either).
        """
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key in sorted(grads, key=repr):
            g = grads[key]
            p = params[key]
            if g.shape != p.shape:
                raise ValueError(f"Adam: gradient shape mismatch for {key!r}")
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            step_size = self.lr_overrides.get(key, self.lr) / bc1
            p -= step_size * m / (np.sqrt(v / bc2) + self.eps)

    def narrow(self, key, axis: int, keep: np.ndarray) -> None:
        """Shrink one slot along ``axis`` to the ``keep`` indices.

        Called when the corresponding parameter tensor is physically pruned.
        """
        if key in self.m:
            self.m[key] = np.take(self.m[key], keep, axis=axis)
            self.v[key] = np.take(self.v[key], keep, axis=axis)
