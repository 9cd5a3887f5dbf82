"""Oracle suites certifying every closed form against brute force.

Each suite draws random distribution parameters and compares a closed-form
implementation against an independent route: adaptive quadrature in
log-theta coordinates, Monte-Carlo estimation, or direct sampling
statistics.  The functions under test are injectable so that a deliberately
broken implementation can be shown to fail (mutation testing); by default
the package's own implementations are checked.

``run_verification`` returns a machine-readable report: per-suite pass/fail
counts plus the first few failure details.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import criteria as _criteria
from . import distributions as _dist
from .distributions import TruncatedLogNormal, TruncatedLogUniform, trunc_normal_cdf
from .oracle import log_quad_integrate, mc_delta_f

BOUNDS = (-20.0, 0.0)

#: draw counts / tolerances per profile
PROFILES = {
    "default": dict(n_random=500, n_kl=200, n_mc=100_000, mc_every=25,
                    tol_bmrs_n=1e-5, tol_bmrs_u=1e-6, tol_kl=1e-6, ks_limit=0.01),
    "quick": dict(n_random=40, n_kl=40, n_mc=20_000, mc_every=10,
                  tol_bmrs_n=1e-5, tol_bmrs_u=1e-6, tol_kl=1e-6, ks_limit=0.02),
}


@dataclass
class SuiteResult:
    suite: str
    n_checks: int = 0
    n_failed: int = 0
    failures: list = field(default_factory=list)

    def check(self, ok: bool, detail: str):
        self.n_checks += 1
        if not ok:
            self.n_failed += 1
            if len(self.failures) < 5:
                self.failures.append(detail)

    @property
    def passed(self) -> bool:
        return self.n_failed == 0


def _random_posteriors(rng, n):
    mu = rng.uniform(-19.0, -0.1, size=n)
    sigma = rng.uniform(0.05, 3.0, size=n)
    return mu, sigma


def _quad_delta_f_lognormal(q: TruncatedLogNormal, prior) -> float:
    """log E_ptilde[q/p] by quadrature in log-theta coordinates."""
    st = math.sqrt(prior.sigma2_tilde_p)
    p_tilde = TruncatedLogNormal(prior.mu_tilde_p, st, q.log_lo, q.log_hi)
    width = q.log_hi - q.log_lo

    def log_integrand(x):
        return p_tilde.log_pdf_logspace(x) + q.log_pdf_logspace(x) + math.log(width)

    marks = [prior.mu_tilde_p + k * st for k in (1.0, 10.0, 1e2, 1e4, 1e6)]
    return log_quad_integrate(
        log_integrand, q.log_lo, q.log_hi, rel_tol=1e-10,
        breakpoints=[m for m in marks if q.log_lo < m < q.log_hi],
    )


def _quad_delta_f_loguniform(q: TruncatedLogNormal, prior) -> float:
    width = q.log_hi - q.log_lo
    red_width = prior.log_hi - prior.log_lo

    def log_integrand(x):
        return -math.log(red_width) + q.log_pdf_logspace(x) + math.log(width)

    return log_quad_integrate(log_integrand, prior.log_lo, prior.log_hi, rel_tol=1e-10)


def _quad_kl(q: TruncatedLogNormal, p: TruncatedLogUniform) -> float:
    """KL by quadrature of q log(q/p) in log-theta coordinates."""
    from .oracle import QuadratureSpec, quad_integrate

    log_p = -math.log(p.log_width)

    def integrand(x):
        lq = q.log_pdf_logspace(np.asarray(x))
        return float(np.exp(lq) * (lq - log_p))

    spec = QuadratureSpec(integrand, q.log_lo, q.log_hi, rel_tol=1e-12,
                          breakpoints=(max(q.log_lo, min(q.mu, q.log_hi)),))
    return quad_integrate(spec)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-300)


def verify_bmrs_n(profile: dict, seed: int = 0, delta_f_fn=None) -> SuiteResult:
    """Closed-form log-normal-reduction score vs quadrature and Monte-Carlo."""
    fn = delta_f_fn or _criteria.delta_f_lognormal
    res = SuiteResult("bmrs_n_closed_form")
    rng = np.random.Generator(np.random.Philox(seed))
    mu, sigma = _random_posteriors(rng, profile["n_random"])
    prior = _criteria.ReducedLogNormalPrior()
    p = TruncatedLogUniform(*BOUNDS)
    p_tilde = TruncatedLogNormal(prior.mu_tilde_p, math.sqrt(prior.sigma2_tilde_p), *BOUNDS)
    for i in range(mu.size):
        q = TruncatedLogNormal(mu[i], sigma[i], *BOUNDS)
        closed = fn(q, prior)
        quad = _quad_delta_f_lognormal(q, prior)
        res.check(
            _rel_err(closed, quad) <= profile["tol_bmrs_n"],
            f"quad mismatch at mu={mu[i]:.4f} sigma={sigma[i]:.4f}: {closed} vs {quad}",
        )
        if i % profile["mc_every"] == 0:
            est = mc_delta_f(q, p, p_tilde, profile["n_mc"], seed=seed + i)
            with np.errstate(over="ignore"):
                res.check(
                    est.within(math.exp(closed) if closed < 700 else math.inf),
                    f"mc mismatch at mu={mu[i]:.4f} sigma={sigma[i]:.4f}: "
                    f"exp({closed}) vs {est.mean} +- {est.std_error}",
                )
    # prior-recovery limit: a very wide reduced prior changes no evidence
    wide = _criteria.ReducedLogNormalPrior(mu_tilde_p=BOUNDS[0], sigma2_tilde_p=1e12)
    for i in range(0, mu.size, max(1, mu.size // 10)):
        q = TruncatedLogNormal(mu[i], sigma[i], *BOUNDS)
        val = fn(q, wide)
        res.check(abs(val) < 1e-3, f"recovery limit violated: dF={val} at mu={mu[i]:.4f}")
    return res


def verify_bmrs_u(profile: dict, seed: int = 1, delta_f_fn=None) -> SuiteResult:
    """Closed-form log-uniform-reduction score vs quadrature and Monte-Carlo."""
    fn = delta_f_fn or _criteria.delta_f_loguniform
    res = SuiteResult("bmrs_u_closed_form")
    rng = np.random.Generator(np.random.Philox(seed))
    mu, sigma = _random_posteriors(rng, profile["n_random"])
    p = TruncatedLogUniform(*BOUNDS)
    for i in range(mu.size):
        q = TruncatedLogNormal(mu[i], sigma[i], *BOUNDS)
        prior = _criteria.ReducedLogUniformPrior(p1=int(rng.integers(0, 16)), p2=23)
        closed = fn(q, prior)
        quad = _quad_delta_f_loguniform(q, prior)
        res.check(
            _rel_err(closed, quad) <= profile["tol_bmrs_u"],
            f"quad mismatch at mu={mu[i]:.4f} sigma={sigma[i]:.4f} p1={prior.p1}: "
            f"{closed} vs {quad}",
        )
        if i % profile["mc_every"] == 0:
            p_tilde = TruncatedLogUniform(prior.log_lo, prior.log_hi)
            est = mc_delta_f(q, p, p_tilde, profile["n_mc"], seed=seed + i)
            with np.errstate(over="ignore"):
                res.check(
                    est.within(math.exp(closed) if closed < 700 else math.inf),
                    f"mc mismatch at mu={mu[i]:.4f} sigma={sigma[i]:.4f}: "
                    f"exp({closed}) vs {est.mean} +- {est.std_error}",
                )
    # identity limit: reduced support equal to the full support
    q = TruncatedLogNormal(-3.0, 1.0, *BOUNDS)
    full = _FullSupport(*BOUNDS)
    res.check(fn(q, full) == 0.0, f"identity prior gave dF={fn(q, full)!r}, want exact 0")
    return res


@dataclass(frozen=True)
class _FullSupport:
    log_lo: float
    log_hi: float


def verify_kl(profile: dict, seed: int = 2, kl_fn=None) -> SuiteResult:
    """KL closed form vs quadrature; nonnegativity."""
    fn = kl_fn or _dist.kl_q_p
    res = SuiteResult("kl_closed_form")
    rng = np.random.Generator(np.random.Philox(seed))
    p = TruncatedLogUniform(*BOUNDS)
    mu = rng.uniform(-19.0, -0.1, size=profile["n_kl"])
    sigma = rng.uniform(0.05, 3.0, size=profile["n_kl"])
    for i in range(mu.size):
        q = TruncatedLogNormal(mu[i], sigma[i], *BOUNDS)
        closed = fn(q, p)
        res.check(closed >= 0.0, f"negative KL {closed} at mu={mu[i]:.4f}")
        quad = _quad_kl(q, p)
        res.check(
            _rel_err(closed, quad) <= profile["tol_kl"],
            f"quad mismatch at mu={mu[i]:.4f} sigma={sigma[i]:.4f}: {closed} vs {quad}",
        )
    # flat limit: enormous sigma makes q log-uniform and the KL vanish
    res.check(
        fn(TruncatedLogNormal(-5.0, 1e4, *BOUNDS), p) < 1e-3,
        "KL does not vanish in the sigma -> inf limit",
    )
    return res


def verify_sampler(profile: dict, seed: int = 3, n_draws: int = 100_000) -> SuiteResult:
    """Kolmogorov-Smirnov test of reparameterized draws vs the analytic CDF."""
    res = SuiteResult("sampler_ks")
    rng = np.random.Generator(np.random.Philox(seed))
    configs = [(-3.0, 1.0), (-10.0, 2.5), (-0.5, 0.3), (-19.0, 0.8)]
    for mu, sigma in configs:
        q = TruncatedLogNormal(mu, sigma, *BOUNDS)
        u = np.clip(rng.random(n_draws), np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
        theta = _dist.tln_sample(q.mu, q.sigma, q.log_lo, q.log_hi, u)
        x = np.sort(np.log(theta))
        cdf = trunc_normal_cdf(x, q.mu, q.sigma, q.log_lo, q.log_hi)
        i = np.arange(1, n_draws + 1)
        ks = max(
            float(np.max(i / n_draws - cdf)),
            float(np.max(cdf - (i - 1) / n_draws)),
        )
        res.check(
            ks < profile["ks_limit"],
            f"KS={ks:.5f} exceeds {profile['ks_limit']} at mu={mu} sigma={sigma}",
        )
    return res


def verify_moments(profile: dict, seed: int = 4) -> SuiteResult:
    """Truncated-moment formula (k = 1, 2) vs quadrature; variance >= 0."""
    res = SuiteResult("moments")
    rng = np.random.Generator(np.random.Philox(seed))
    mu, sigma = _random_posteriors(rng, profile["n_kl"])
    for i in range(mu.size):
        q = TruncatedLogNormal(mu[i], sigma[i], *BOUNDS)
        for k in (1, 2):
            closed = _dist.trunc_log_normal_moment(q, k)
            quad = math.exp(
                log_quad_integrate(
                    lambda x, kk=k: kk * x + q.log_pdf_logspace(x),
                    q.log_lo, q.log_hi, rel_tol=1e-10,
                )
            )
            res.check(
                _rel_err(closed, quad) <= 1e-8,
                f"moment k={k} mismatch at mu={mu[i]:.4f} sigma={sigma[i]:.4f}: "
                f"{closed} vs {quad}",
            )
        mean, var = _dist.trunc_log_normal_mean_var(q)
        res.check(var >= 0.0, f"negative variance {var}")
    return res


def run_verification(
    profile: str = "default",
    seed: int = 0,
    delta_f_lognormal_fn=None,
    delta_f_loguniform_fn=None,
    kl_fn=None,
) -> dict:
    """Run every oracle suite; returns a machine-readable report dict."""
    if profile not in PROFILES:
        raise ValueError(f"unknown tolerance profile {profile!r}; have {sorted(PROFILES)}")
    p = PROFILES[profile]
    suites = [
        verify_bmrs_n(p, seed=seed, delta_f_fn=delta_f_lognormal_fn),
        verify_bmrs_u(p, seed=seed + 1, delta_f_fn=delta_f_loguniform_fn),
        verify_kl(p, seed=seed + 2, kl_fn=kl_fn),
        verify_sampler(p, seed=seed + 3),
        verify_moments(p, seed=seed + 4),
    ]
    return {
        "profile": profile,
        "passed": all(s.passed for s in suites),
        "suites": [
            {
                "suite": s.suite,
                "passed": s.passed,
                "n_checks": s.n_checks,
                "n_failed": s.n_failed,
                "failures": s.failures,
            }
            for s in suites
        ],
    }
