"""Multiplicative noise gates over prunable structures.

A gate layer owns one truncated log-normal posterior per structure (neuron
or convolutional channel) of the layer it follows.  In training mode each
structure's pre-activation is scaled by a reparameterized draw from its
posterior; in eval mode by the posterior mean; pruned structures are scaled
by exactly zero, forever.

The gate contributes one KL(q || log-uniform prior) term per alive structure
to the training objective.  ``sigma`` is stored as ``log_sigma`` and clamped
into [1e-4, 10] at read time; the clamp's subgradient is zero, so parameters
parked on a clamp boundary stop receiving that gradient component.
"""

from __future__ import annotations

import numpy as np

from .distributions import (
    TruncatedLogNormal,
    tln_kl_to_uniform,
    tln_kl_to_uniform_grad,
    tln_moment,
    tln_sample_with_grad,
)

SIGMA_MIN = 1e-4
SIGMA_MAX = 10.0


class PruneError(ValueError):
    """Attempt to prune a structure that is not alive."""


class NoiseGateLayer:
    """Per-structure variational gate with an alive mask.

    ``labels`` carries each structure's index in the freshly built network,
    so records stay meaningful after physical shrinking renumbers the rows.
    """

    def __init__(
        self,
        n_structures: int,
        log_lo: float = -20.0,
        log_hi: float = 0.0,
        mu_init: float = 0.0,
        sigma_init: float = 1.0,
    ):
        if not (log_lo < log_hi):
            raise ValueError("NoiseGateLayer: requires log_lo < log_hi")
        self.mu = np.full(n_structures, float(mu_init))
        self.log_sigma = np.full(n_structures, float(np.log(sigma_init)))
        self.log_lo = float(log_lo)
        self.log_hi = float(log_hi)
        self.alive = np.ones(n_structures, dtype=bool)
        self.labels = np.arange(n_structures, dtype=np.int64)

    @property
    def n_structures(self) -> int:
        return self.mu.shape[0]

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    def sigma(self) -> np.ndarray:
        """Read-time clamped scale."""
        return np.clip(np.exp(self.log_sigma), SIGMA_MIN, SIGMA_MAX)

    def _sigma_and_gate(self):
        """Clamped sigma plus d(sigma)/d(log_sigma) (zero where clamped)."""
        raw = np.exp(self.log_sigma)
        sig = np.clip(raw, SIGMA_MIN, SIGMA_MAX)
        gate = np.where((raw > SIGMA_MIN) & (raw < SIGMA_MAX), sig, 0.0)
        return sig, gate

    def params(self):
        return {"mu": self.mu, "log_sigma": self.log_sigma}

    def posterior(self, index: int) -> TruncatedLogNormal:
        """Scalar view of one structure's variational posterior."""
        return TruncatedLogNormal(
            mu=float(self.mu[index]),
            sigma=float(self.sigma()[index]),
            log_lo=self.log_lo,
            log_hi=self.log_hi,
        )

    def posterior_means(self) -> np.ndarray:
        """E[theta] per structure (zero where pruned)."""
        means = tln_moment(self.mu, self.sigma(), self.log_lo, self.log_hi, 1)
        return np.where(self.alive, means, 0.0)

    def multipliers(self, mode: str, u=None) -> tuple[np.ndarray, dict]:
        """Scale factors shaped (rows, n_structures), plus backward caches.

        In train mode ``u`` holds one uniform draw per *alive* structure:
        shape ``(n_alive,)`` for a single draw shared across the minibatch,
        or ``(batch, n_alive)`` for per-example draws.  Eval mode takes no
        draws and scales by the posterior mean.  Dead structures scale by
        exactly zero either way.
        """
        n = self.n_structures
        if mode == "eval":
            if u is not None:
                raise ValueError("eval mode takes no noise draws")
            return self.posterior_means().reshape(1, n), {}
        if mode != "train":
            raise ValueError(f"unknown mode {mode!r}")
        u = np.asarray(u, dtype=float)
        if u.ndim not in (1, 2) or u.shape[-1] != self.n_alive:
            raise ValueError(
                f"expected noise draws shaped ({self.n_alive},) or (batch, "
                f"{self.n_alive}), got {u.shape}"
            )
        rows = 1 if u.ndim == 1 else u.shape[0]
        u2 = u.reshape(rows, self.n_alive)
        sig, sig_gate = self._sigma_and_gate()
        m = np.zeros((rows, n))
        d_mu = np.zeros((rows, n))
        d_logsig = np.zeros((rows, n))
        if self.n_alive:
            idx = np.flatnonzero(self.alive)
            theta, g_mu, g_sigma = tln_sample_with_grad(
                self.mu[idx][None, :], sig[idx][None, :], self.log_lo, self.log_hi, u2
            )
            m[:, idx] = theta
            d_mu[:, idx] = g_mu
            d_logsig[:, idx] = g_sigma * sig_gate[idx][None, :]
        return m, {"d_mu": d_mu, "d_logsig": d_logsig}

    def forward(self, x, mode: str = "eval", u=None, ctx=None):
        """Scale the structure axis (axis 1) of ``x`` by the gate multipliers."""
        if x.shape[1] != self.n_structures:
            raise ValueError(
                f"gate over {self.n_structures} structures got axis length {x.shape[1]}"
            )
        m, caches = self.multipliers(mode, u)
        if m.shape[0] not in (1, x.shape[0]):
            raise ValueError(
                f"per-example draws rows ({m.shape[0]}) do not match batch {x.shape[0]}"
            )
        m_b = m.reshape(m.shape + (1,) * (x.ndim - 2))
        if ctx is not None:
            ctx["x"] = x
            ctx["m_b"] = m_b
            ctx.update(caches)
        return x * m_b

    def backward(self, ctx, grad_out):
        """Gradient w.r.t. the input and the (mu, log_sigma) parameters."""
        x = ctx["x"]
        grad_in = grad_out * ctx["m_b"]
        spatial_axes = tuple(range(2, x.ndim))
        d_theta = grad_out * x
        if spatial_axes:
            d_theta = np.sum(d_theta, axis=spatial_axes)  # -> (batch, n)
        return grad_in, {
            "mu": np.einsum("bn,bn->n", d_theta, np.broadcast_to(ctx["d_mu"], d_theta.shape)),
            "log_sigma": np.einsum(
                "bn,bn->n", d_theta, np.broadcast_to(ctx["d_logsig"], d_theta.shape)
            ),
        }

    def kl(self) -> float:
        """Sum of per-structure KL(q || log-uniform prior) over alive structures."""
        if not self.n_alive:
            return 0.0
        idx = np.flatnonzero(self.alive)
        kl = tln_kl_to_uniform(self.mu[idx], self.sigma()[idx], self.log_lo, self.log_hi)
        return float(np.sum(kl))

    def kl_grads(self):
        """(total KL, d/d mu, d/d log_sigma); pruned entries contribute zeros."""
        n = self.n_structures
        g_mu = np.zeros(n)
        g_logsig = np.zeros(n)
        if not self.n_alive:
            return 0.0, g_mu, g_logsig
        sig, sig_gate = self._sigma_and_gate()
        idx = np.flatnonzero(self.alive)
        kl, d_mu, d_sigma = tln_kl_to_uniform_grad(
            self.mu[idx], sig[idx], self.log_lo, self.log_hi
        )
        g_mu[idx] = d_mu
        g_logsig[idx] = d_sigma * sig_gate[idx]
        return float(np.sum(kl)), g_mu, g_logsig

    def prune_indices(self, indices) -> dict:
        """Mark structures dead and return a removal descriptor.

        The descriptor lists the local indices (into the current layout) and
        their original labels; the network uses it to physically shrink the
        neighboring weight tensors.  Raises :class:`PruneError` for indices
        that are already pruned.
        """
        indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        if indices.size != np.unique(indices).size:
            raise PruneError("duplicate structure indices in prune request")
        if np.any(indices < 0) or np.any(indices >= self.n_structures):
            raise PruneError("structure index out of range")
        if not np.all(self.alive[indices]):
            raise PruneError(f"structures already pruned: {indices[~self.alive[indices]]}")
        self.alive[indices] = False
        return {
            "indices": indices.copy(),
            "labels": self.labels[indices].copy(),
        }

    def output_shape(self, in_shape):
        if in_shape[0] != self.n_structures:
            raise ValueError(
                f"gate over {self.n_structures} structures got feature axis {in_shape[0]}"
            )
        return in_shape
