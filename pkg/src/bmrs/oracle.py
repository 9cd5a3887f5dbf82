"""Brute-force verifiers for the closed forms used elsewhere.

Two independent routes are provided: adaptive Gauss-Kronrod quadrature (via
QUADPACK) and seeded Monte-Carlo estimation.  Nothing here shares code with
the closed-form implementations it certifies; agreement between the two
routes is what the test suite and the ``verify`` command assert.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .distributions import TruncatedLogNormal, TruncatedLogUniform


class ConvergenceError(RuntimeError):
    """Quadrature failed to reach the requested tolerance.

    Carries the best available estimate and its error bound.
    """

    def __init__(self, message: str, estimate: float, abs_error: float):
        super().__init__(message)
        self.estimate = estimate
        self.abs_error = abs_error


@dataclass
class QuadratureSpec:
    """One definite integral to evaluate adaptively.

    ``breakpoints`` marks locations the subdivision should honor (sharp
    spikes); they must lie inside (lo, hi).
    """

    integrand: Callable[[float], float]
    lo: float
    hi: float
    rel_tol: float = 1e-10
    max_subdivisions: int = 200
    breakpoints: Sequence[float] = field(default_factory=tuple)

    def __post_init__(self):
        if not (self.lo < self.hi):
            raise ValueError("QuadratureSpec: requires lo < hi")
        if not (0.0 < self.rel_tol <= 1e-2):
            raise ValueError("QuadratureSpec: rel_tol must be in (0, 1e-2]")
        if self.max_subdivisions < 1:
            raise ValueError("QuadratureSpec: max_subdivisions must be positive")


def quad_integrate(spec: QuadratureSpec) -> float:
    """Adaptive Gauss-Kronrod estimate of the integral described by ``spec``.

    Raises :class:`ConvergenceError` (with the best estimate attached) if the
    achieved relative error exceeds ``spec.rel_tol``.
    """
    points = [p for p in spec.breakpoints if spec.lo < p < spec.hi] or None
    with np.errstate(all="ignore"):
        value, abs_err = integrate.quad(
            spec.integrand,
            spec.lo,
            spec.hi,
            epsabs=0.0,
            epsrel=spec.rel_tol,
            limit=spec.max_subdivisions,
            points=points,
        )
    scale = max(abs(value), np.finfo(float).tiny)
    if not math.isfinite(value) or abs_err / scale > spec.rel_tol * 10.0:
        raise ConvergenceError(
            f"quadrature did not converge: estimate={value!r} abs_err={abs_err!r}",
            estimate=value,
            abs_error=abs_err,
        )
    return value


def log_quad_integrate(
    log_integrand: Callable[[np.ndarray], np.ndarray],
    lo: float,
    hi: float,
    rel_tol: float = 1e-10,
    max_subdivisions: int = 200,
    breakpoints: Sequence[float] = (),
    n_scan: int = 4001,
) -> float:
    """``log of the integral of exp(log_integrand)`` over [lo, hi].

    The integrand is rescaled by its maximum over a dense scan (plus the
    breakpoints) before quadrature so that integrals as small as
    ``exp(-1e6)`` remain representable.  Returns ``-inf`` for an integrand
    that is zero everywhere on the interval.
    """
    grid = np.linspace(lo, hi, n_scan)
    if len(breakpoints) > 0:
        extra = np.asarray([p for p in breakpoints if lo < p < hi], dtype=float)
        grid = np.unique(np.concatenate([grid, extra]))
    with np.errstate(invalid="ignore"):
        values = np.asarray(log_integrand(grid), dtype=float)
    peak = np.max(values)
    if not np.isfinite(peak):
        return -math.inf

    def scaled(x):
        v = log_integrand(np.asarray(x, dtype=float)) - peak
        return float(np.exp(v))

    spec = QuadratureSpec(
        integrand=scaled,
        lo=lo,
        hi=hi,
        rel_tol=rel_tol,
        max_subdivisions=max_subdivisions,
        breakpoints=tuple(breakpoints) + (float(grid[int(np.argmax(values))]),),
    )
    return peak + math.log(quad_integrate(spec))


@dataclass(frozen=True)
class McEstimate:
    """Monte-Carlo mean with its standard error."""

    mean: float
    std_error: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 1_000:
            raise ValueError("McEstimate: n_samples must be >= 1000")
        if self.std_error < 0.0:
            raise ValueError("McEstimate: std_error must be nonnegative")

    def within(self, value: float, n_sigma: float = 3.0) -> bool:
        """Whether ``value`` lies inside the ``n_sigma`` band around the mean.

        A small relative floor absorbs float rounding when the sampler is
        effectively deterministic (std_error == 0).
        """
        floor = 1e-9 * (abs(self.mean) + abs(value)) + 1e-300
        return abs(value - self.mean) <= n_sigma * self.std_error + floor


def mc_delta_f(
    q: TruncatedLogNormal,
    p: TruncatedLogUniform,
    p_tilde,
    n: int,
    seed: int,
) -> McEstimate:
    """Monte-Carlo estimate of E_{p_tilde}[ q(theta) / p(theta) ].

    The log of the returned mean estimates the change in log evidence when
    the prior ``p`` is swapped for the reduced prior ``p_tilde``.  Draws use
    inverse-CDF sampling from a counter-based generator, so a given seed
    always produces the same estimate.
    """
    if n < 1_000:
        raise ValueError("mc_delta_f: n must be >= 1000 for a usable std error")
    rng = np.random.Generator(np.random.Philox(seed))
    u = rng.random(n)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    if isinstance(p_tilde, TruncatedLogNormal):
        from .distributions import sample_trunc_log_normal

        theta = sample_trunc_log_normal(p_tilde, u)
    elif isinstance(p_tilde, TruncatedLogUniform):
        theta = p_tilde.sample(u)
    else:
        raise TypeError(f"mc_delta_f: unsupported reduced prior {type(p_tilde)!r}")

    with np.errstate(over="ignore"):
        ratio = np.exp(q.log_pdf(theta) - p.log_pdf(theta))
    mean = float(np.mean(ratio))
    std = float(np.std(ratio, ddof=1))
    return McEstimate(mean=mean, std_error=std / math.sqrt(n), n_samples=n)
