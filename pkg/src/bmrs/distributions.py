"""Truncated log-normal / log-uniform kernels.

Everything the pruning criteria and the training objective need from these
two families is collected here: standard-normal primitives, CDF/sampling of
the truncated distributions, truncated moments, signal-to-noise ratio, and
the KL divergence between the variational posterior (truncated log-normal)
and the sparsity prior (truncated log-uniform on the same support).

Conventions
-----------
A truncated log-normal is parameterized by the location ``mu`` and scale
``sigma`` of ``log(theta)`` together with the log-space support bounds
``log_lo = log(a)`` and ``log_hi = log(b)``.  The standardized bounds are

    alpha = (log_lo - mu) / sigma,   beta = (log_hi - mu) / sigma,

and ``Z = Phi(beta) - Phi(alpha)`` is the truncation mass.  ``Z`` can be
minuscule (the reduced prior uses ``sigma ~ 1e-6``), so every quantity that
divides by ``Z`` is computed from log-CDF differences, switching to the
complementary CDF on the right half-line to avoid cancellation.

The ``tln_*`` functions are the array core used by the noise-gate layers
(vectors of per-structure ``mu`` / ``sigma`` with shared bounds); the
:class:`TruncatedLogNormal` dataclass provides the scalar view of the same
math.  All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

_LOG_2PI = math.log(2.0 * math.pi)
_LOG_HALF = -math.log(2.0)


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


# ---------------------------------------------------------------------------
# Standard normal primitives
# ---------------------------------------------------------------------------

def norm_pdf(t):
    """Standard normal density ``phi(t)``."""
    t = np.asarray(t, dtype=float)
    return np.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)


def norm_log_pdf(t):
    """``log phi(t)``, exact for any finite argument."""
    t = np.asarray(t, dtype=float)
    return -0.5 * t * t - 0.5 * _LOG_2PI


def norm_cdf(t):
    """Standard normal CDF ``Phi(t)`` via the erf rational approximation."""
    return special.ndtr(t)


def norm_log_cdf(t):
    """``log Phi(t)``, accurate deep into the left tail."""
    return special.log_ndtr(t)


def norm_inv_cdf(u):
    """Quantile function ``Phi^{-1}(u)`` for ``u`` in (0, 1)."""
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0.0) | (u >= 1.0)):
        raise DomainError("norm_inv_cdf requires u in the open interval (0, 1)")
    out = special.ndtri(u)
    return float(out) if out.ndim == 0 else out


def log_gauss_mass(alpha, beta):
    """``log(Phi(beta) - Phi(alpha))`` without cancellation.

    Uses ``log Phi`` on whichever half-line keeps both endpoints in the same
    tail (through the complement on the right), and the erf difference in the
    straddling case where it is well conditioned.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if np.any(alpha > beta):
        raise DomainError("log_gauss_mass requires alpha <= beta")

    a, b = np.broadcast_arrays(alpha, beta)
    out = np.empty(a.shape, dtype=float)

    left = b <= 0.0
    right = a >= 0.0
    mid = ~(left | right)

    with np.errstate(divide="ignore"):
        if np.any(left):
            la, lb = special.log_ndtr(a[left]), special.log_ndtr(b[left])
            out[left] = lb + np.log1p(-np.exp(np.minimum(la - lb, 0.0)))
        if np.any(right):
            # Phi(b) - Phi(a) = Phi(-a) - Phi(-b)
            la, lb = special.log_ndtr(-a[right]), special.log_ndtr(-b[right])
            out[right] = la + np.log1p(-np.exp(np.minimum(lb - la, 0.0)))
        if np.any(mid):
            am, bm = a[mid], b[mid]
            out[mid] = np.log(
                0.5 * (special.erf(bm / math.sqrt(2.0)) - special.erf(am / math.sqrt(2.0)))
            )

    if out.ndim == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# Truncated normal CDF (the log-space workhorse behind both families)
# ---------------------------------------------------------------------------

def trunc_normal_cdf(x, mu, sigma, lo, hi):
    """CDF of a normal(mu, sigma^2) truncated to [lo, hi].

    Returns 0 for ``x <= lo`` and 1 for ``x >= hi``.  Inputs must be finite;
    ``sigma > 0`` and ``lo < hi``.
    """
    for name, v in (("x", x), ("mu", mu), ("sigma", sigma), ("lo", lo), ("hi", hi)):
        if not np.all(np.isfinite(v)):
            raise DomainError(f"trunc_normal_cdf: non-finite argument {name!r}")
    if not np.all(np.asarray(sigma) > 0.0):
        raise DomainError("trunc_normal_cdf: sigma must be positive")
    if not np.all(np.asarray(lo) < np.asarray(hi)):
        raise DomainError("trunc_normal_cdf: requires lo < hi")

    x = np.asarray(x, dtype=float)
    xc = np.clip(x, lo, hi)
    alpha = (np.asarray(lo) - mu) / sigma
    beta = (np.asarray(hi) - mu) / sigma
    t = (xc - mu) / sigma
    log_num = log_gauss_mass(alpha, np.maximum(alpha, t))
    log_den = log_gauss_mass(alpha, beta)
    out = np.exp(np.minimum(np.asarray(log_num) - log_den, 0.0))
    out = np.where(xc <= np.asarray(lo), 0.0, out)
    out = np.where(xc >= np.asarray(hi), 1.0, out)
    if out.ndim == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# Array core over per-structure (mu, sigma) with shared bounds
# ---------------------------------------------------------------------------

def _standardized_bounds(mu, sigma, log_lo, log_hi):
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return (log_lo - mu) / sigma, (log_hi - mu) / sigma


def _interior_quantile(alpha, beta, u):
    """Standardized quantile ``s`` with ``Phi(s) = Phi(alpha) + u Z``.

    Evaluated through ``ndtri_exp(log y)`` (or the complementary branch when
    ``y > 1/2``) so that draws remain exact even when the truncation mass
    sits many sigmas into a tail.
    """
    log_u = np.log(u)
    log_1mu = np.log1p(-u)
    # y = (1-u) Phi(alpha) + u Phi(beta); 1-y = (1-u) Phi(-alpha) + u Phi(-beta)
    log_y = np.logaddexp(log_1mu + special.log_ndtr(alpha), log_u + special.log_ndtr(beta))
    log_1my = np.logaddexp(log_1mu + special.log_ndtr(-alpha), log_u + special.log_ndtr(-beta))
    return np.where(
        log_y <= log_1my,
        special.ndtri_exp(np.minimum(log_y, _LOG_HALF)),
        -special.ndtri_exp(np.minimum(log_1my, _LOG_HALF)),
    )


def _check_u(u):
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0.0) | (u >= 1.0)):
        raise DomainError("uniform noise u must lie in the open interval (0, 1)")
    return u


def tln_sample(mu, sigma, log_lo, log_hi, u):
    """Reparameterized draws: exp(mu + sigma Phi^{-1}(Phi(alpha) + u Z))."""
    u = _check_u(u)
    alpha, beta = _standardized_bounds(mu, sigma, log_lo, log_hi)
    s = np.clip(_interior_quantile(alpha, beta, u), alpha, beta)
    return np.exp(np.asarray(mu) + np.asarray(sigma) * s)


def tln_sample_with_grad(mu, sigma, log_lo, log_hi, u):
    """Draws plus d(theta)/d(mu) and d(theta)/d(sigma) at fixed ``u``.

    With ``s`` the standardized quantile of the draw:

        d theta / d mu    = theta (1 - [(1-u) phi(alpha) + u phi(beta)] / phi(s))
        d theta / d sigma = theta (s - [(1-u) alpha phi(alpha) + u beta phi(beta)] / phi(s))

    The phi-ratios are evaluated as ``exp(log phi(.) - log phi(s))`` with the
    u-weights folded into the exponent, which keeps them finite over the
    whole float range of the gate parameters.
    """
    u = _check_u(u)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    alpha, beta = _standardized_bounds(mu, sigma, log_lo, log_hi)
    s = np.clip(_interior_quantile(alpha, beta, u), alpha, beta)
    theta = np.exp(mu + sigma * s)

    log_phi_s = norm_log_pdf(s)
    w_lo = np.exp(np.log1p(-u) + norm_log_pdf(alpha) - log_phi_s)
    w_hi = np.exp(np.log(u) + norm_log_pdf(beta) - log_phi_s)
    d_mu = theta * (1.0 - (w_lo + w_hi))
    d_sigma = theta * (s - (alpha * w_lo + beta * w_hi))
    return theta, d_mu, d_sigma


def tln_moment(mu, sigma, log_lo, log_hi, k: int):
    """E[theta^k] = exp(k mu + k^2 sigma^2 / 2) * Z_shifted / Z (log-space ratio)."""
    if k < 1 or int(k) != k:
        raise DomainError("tln_moment requires integer k >= 1")
    k = int(k)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    alpha, beta = _standardized_bounds(mu, sigma, log_lo, log_hi)
    shift = log_gauss_mass(alpha - k * sigma, beta - k * sigma) - log_gauss_mass(alpha, beta)
    return np.exp(k * mu + 0.5 * k * k * sigma * sigma + shift)


def tln_mean_var(mu, sigma, log_lo, log_hi):
    m1 = tln_moment(mu, sigma, log_lo, log_hi, 1)
    m2 = tln_moment(mu, sigma, log_lo, log_hi, 2)
    return m1, np.maximum(m2 - m1 * m1, 0.0)


def tln_snr(mu, sigma, log_lo, log_hi):
    """E[theta]/sqrt(Var[theta]); +inf where the variance underflows to 0."""
    mean, var = tln_mean_var(mu, sigma, log_lo, log_hi)
    with np.errstate(divide="ignore"):
        return np.where(var > 0.0, mean / np.sqrt(np.where(var > 0.0, var, 1.0)), np.inf)


def tln_kl_to_uniform(mu, sigma, log_lo, log_hi):
    """KL(q || p) against the log-uniform density on the same support.

    In log(theta)-space the 1/theta Jacobians of the two densities cancel,
    leaving the KL between a truncated normal and a uniform on
    [log_lo, log_hi]:

        KL = log(width) - log(sqrt(2 pi e) sigma Z)
             - (alpha phi(alpha) - beta phi(beta)) / (2 Z)
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    alpha, beta = _standardized_bounds(mu, sigma, log_lo, log_hi)
    log_z = log_gauss_mass(alpha, beta)
    r_lo = np.exp(norm_log_pdf(alpha) - log_z)
    r_hi = np.exp(norm_log_pdf(beta) - log_z)
    kl = (
        math.log(log_hi - log_lo)
        - 0.5 * math.log(2.0 * math.pi * math.e)
        - np.log(sigma)
        - log_z
        - 0.5 * (alpha * r_lo - beta * r_hi)
    )
    return np.maximum(kl, 0.0)


def tln_kl_to_uniform_grad(mu, sigma, log_lo, log_hi):
    """(KL, d KL / d mu, d KL / d sigma) for :func:`tln_kl_to_uniform`."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    alpha, beta = _standardized_bounds(mu, sigma, log_lo, log_hi)
    log_z = log_gauss_mass(alpha, beta)
    r_lo = np.exp(norm_log_pdf(alpha) - log_z)   # phi(alpha)/Z
    r_hi = np.exp(norm_log_pdf(beta) - log_z)    # phi(beta)/Z
    g = alpha * r_lo - beta * r_hi               # (alpha phi(alpha) - beta phi(beta))/Z
    kl = np.maximum(
        math.log(log_hi - log_lo)
        - 0.5 * math.log(2.0 * math.pi * math.e)
        - np.log(sigma)
        - log_z
        - 0.5 * g,
        0.0,
    )
    d_mu = (
        -(r_lo - r_hi)
        - 0.5 * (r_hi * (1.0 - beta * beta) - r_lo * (1.0 - alpha * alpha))
        + 0.5 * g * (r_lo - r_hi)
    ) / sigma
    d_sigma = (
        -1.0
        - g
        - 0.5 * (beta * r_hi * (1.0 - beta * beta) - alpha * r_lo * (1.0 - alpha * alpha))
        + 0.5 * g * g
    ) / sigma
    return kl, d_mu, d_sigma


# ---------------------------------------------------------------------------
# The two families (scalar views of the array core)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TruncatedLogNormal:
    """log(theta) ~ Normal(mu, sigma^2) restricted to [log_lo, log_hi]."""

    mu: float
    sigma: float
    log_lo: float
    log_hi: float

    def __post_init__(self):
        if not (self.sigma > 0.0):
            raise DomainError("TruncatedLogNormal: sigma must be positive")
        if not (self.log_lo < self.log_hi):
            raise DomainError("TruncatedLogNormal: requires log_lo < log_hi")
        for name in ("mu", "sigma", "log_lo", "log_hi"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"TruncatedLogNormal: non-finite field {name!r}")

    @property
    def alpha(self) -> float:
        return (self.log_lo - self.mu) / self.sigma

    @property
    def beta(self) -> float:
        return (self.log_hi - self.mu) / self.sigma

    @property
    def log_z(self) -> float:
        """Log truncation mass ``log(Phi(beta) - Phi(alpha))``."""
        return log_gauss_mass(self.alpha, self.beta)

    @property
    def z(self) -> float:
        return math.exp(self.log_z)

    def log_pdf(self, theta):
        """Log density in theta-space; -inf outside the support."""
        theta = np.asarray(theta, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            x = np.log(theta)
            t = (x - self.mu) / self.sigma
            val = norm_log_pdf(t) - math.log(self.sigma) - self.log_z - x
        inside = (theta > 0.0) & (x >= self.log_lo) & (x <= self.log_hi)
        out = np.where(inside, val, -np.inf)
        if out.ndim == 0:
            return float(out)
        return out

    def pdf(self, theta):
        return np.exp(self.log_pdf(theta))

    def log_pdf_logspace(self, x):
        """Log density of ``log(theta)`` (a truncated normal density)."""
        x = np.asarray(x, dtype=float)
        t = (x - self.mu) / self.sigma
        val = norm_log_pdf(t) - math.log(self.sigma) - self.log_z
        out = np.where((x >= self.log_lo) & (x <= self.log_hi), val, -np.inf)
        if out.ndim == 0:
            return float(out)
        return out

    def cdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        x = np.where(theta > 0.0, np.log(np.maximum(theta, np.finfo(float).tiny)), -np.inf)
        x = np.clip(x, self.log_lo, self.log_hi)
        return trunc_normal_cdf(x, self.mu, self.sigma, self.log_lo, self.log_hi)

    def log_mass_between(self, x_lo, x_hi):
        """``log P(x_lo <= log theta <= x_hi)`` for log-space endpoints."""
        x_lo = max(float(x_lo), self.log_lo)
        x_hi = min(float(x_hi), self.log_hi)
        if x_lo >= x_hi:
            return -np.inf
        t_lo = (x_lo - self.mu) / self.sigma
        t_hi = (x_hi - self.mu) / self.sigma
        return log_gauss_mass(t_lo, t_hi) - self.log_z


@dataclass(frozen=True)
class TruncatedLogUniform:
    """Density proportional to 1/theta on [exp(log_lo), exp(log_hi)].

    Equivalently: ``log(theta)`` is uniform on [log_lo, log_hi].
    """

    log_lo: float
    log_hi: float

    def __post_init__(self):
        if not (self.log_lo < self.log_hi):
            raise DomainError("TruncatedLogUniform: requires log_lo < log_hi")
        for name in ("log_lo", "log_hi"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"TruncatedLogUniform: non-finite field {name!r}")

    @property
    def log_width(self) -> float:
        return self.log_hi - self.log_lo

    def log_pdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            x = np.log(theta)
            val = -x - math.log(self.log_width)
        inside = (theta > 0.0) & (x >= self.log_lo) & (x <= self.log_hi)
        out = np.where(inside, val, -np.inf)
        if out.ndim == 0:
            return float(out)
        return out

    def pdf(self, theta):
        return np.exp(self.log_pdf(theta))

    def sample(self, u):
        """Inverse-CDF sample: log(theta) uniform on the support."""
        u = _check_u(u)
        out = np.exp(self.log_lo + u * self.log_width)
        if out.ndim == 0:
            return float(out)
        return out


# ---------------------------------------------------------------------------
# Scalar operations on the dataclasses
# ---------------------------------------------------------------------------

def sample_trunc_log_normal(d: TruncatedLogNormal, u):
    """Deterministic reparameterized draw from ``d`` given uniform ``u``."""
    out = tln_sample(d.mu, d.sigma, d.log_lo, d.log_hi, u)
    return float(out) if np.ndim(out) == 0 else out


def sample_trunc_log_normal_with_grad(d: TruncatedLogNormal, u):
    """Draw theta together with d(theta)/d(mu) and d(theta)/d(sigma)."""
    theta, d_mu, d_sigma = tln_sample_with_grad(d.mu, d.sigma, d.log_lo, d.log_hi, u)
    if np.ndim(theta) == 0:
        return float(theta), float(d_mu), float(d_sigma)
    return theta, d_mu, d_sigma


def trunc_log_normal_moment(d: TruncatedLogNormal, k: int) -> float:
    """E[theta^k] for integer k >= 1."""
    return float(tln_moment(d.mu, d.sigma, d.log_lo, d.log_hi, k))


def trunc_log_normal_mean_var(d: TruncatedLogNormal) -> tuple[float, float]:
    mean, var = tln_mean_var(d.mu, d.sigma, d.log_lo, d.log_hi)
    return float(mean), float(var)


def snr(d: TruncatedLogNormal) -> float:
    """Signal-to-noise ratio E[theta]/sqrt(Var[theta]) (exact truncated moments).

    Returns ``inf`` when the variance underflows to zero (degenerate sigma).
    """
    return float(tln_snr(d.mu, d.sigma, d.log_lo, d.log_hi))


def kl_q_p(q: TruncatedLogNormal, p: TruncatedLogUniform) -> float:
    """KL(q || p) for a truncated log-normal q and a truncated log-uniform p
    sharing the same support."""
    if not (q.log_lo == p.log_lo and q.log_hi == p.log_hi):
        raise ValueError("kl_q_p: q and p must share (log_lo, log_hi)")
    return float(tln_kl_to_uniform(q.mu, q.sigma, q.log_lo, q.log_hi))


def kl_q_p_grad(q: TruncatedLogNormal, p: TruncatedLogUniform) -> tuple[float, float]:
    """(d KL / d mu, d KL / d sigma) for the divergence in :func:`kl_q_p`."""
    if not (q.log_lo == p.log_lo and q.log_hi == p.log_hi):
        raise ValueError("kl_q_p_grad: q and p must share (log_lo, log_hi)")
    _, d_mu, d_sigma = tln_kl_to_uniform_grad(q.mu, q.sigma, q.log_lo, q.log_hi)
    return float(d_mu), float(d_sigma)
