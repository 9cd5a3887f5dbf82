"""Pruning scores: change-in-evidence criteria and classical baselines.

Each criterion maps a structure's variational posterior (and, for the L2
baseline, its incoming weights) to a scalar score plus a prune/keep verdict:

* ``bmrs_n``  — change in log evidence when the log-uniform prior is swapped
  for a narrow truncated log-normal spike at the lower support bound.
  Prune when the score (Delta F) is >= 0.
* ``bmrs_u``  — change in log evidence under a log-uniform prior with support
  reduced to the high-precision band [2^-p2, 2^-p1].  Prune when >= 0.
* ``snr``     — posterior mean / posterior std; prune when below threshold.
* ``mean_theta`` — posterior mean; prune when below threshold.
* ``l2``      — Euclidean norm of the structure's incoming weights; used for
  rank-based baselines (one-shot pruning to a target compression).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .distributions import (
    TruncatedLogNormal,
    log_gauss_mass,
    snr as snr_of,
    trunc_log_normal_moment,
)

LOG2 = math.log(2.0)

CRITERION_NAMES = ("bmrs_n", "bmrs_u", "snr", "mean_theta", "l2", "none")


@dataclass(frozen=True)
class ReducedLogNormalPrior:
    """Near-Dirac truncated log-normal reduced prior.

    ``mu_tilde_p`` is the location of log(theta); the default sits on the
    lower support bound with variance 1e-12, collapsing theta to the smallest
    representable gate value.
    """

    mu_tilde_p: float = -20.0
    sigma2_tilde_p: float = 1e-12

    def __post_init__(self):
        if not (self.sigma2_tilde_p > 0.0):
            raise ValueError("ReducedLogNormalPrior: sigma2_tilde_p must be positive")


@dataclass(frozen=True)
class ReducedLogUniformPrior:
    """Log-uniform reduced prior on [2^-p2, 2^-p1] (mantissa-precision band)."""

    p1: int = 8
    p2: int = 23

    def __post_init__(self):
        if self.p1 < 0 or self.p2 <= self.p1:
            raise ValueError("ReducedLogUniformPrior: requires 0 <= p1 < p2")

    @property
    def log_lo(self) -> float:
        return -self.p2 * LOG2

    @property
    def log_hi(self) -> float:
        return -self.p1 * LOG2


@dataclass(frozen=True)
class CriterionScore:
    structure_id: int
    score: float
    prune: bool


def delta_f_lognormal(q: TruncatedLogNormal, prior: ReducedLogNormalPrior) -> float:
    """Change in log evidence under the truncated log-normal reduced prior.

    With sigma_t^2 = (1/sigma_q^2 + 1/sigma_p~^2)^-1 and
    mu_t = sigma_t^2 (mu_q/sigma_q^2 + mu_p~/sigma_p~^2):

        dF = log[Z_qt (log b - log a) / (Z_pt Z_q)]
             + 0.5 log[sigma_t^2 / (2 pi sigma_p~^2 sigma_q^2)]
             - 0.5 (mu_q^2/sigma_q^2 + mu_p~^2/sigma_p~^2 - mu_t^2/sigma_t^2)

    The last two terms are evaluated through the algebraically identical

        -0.5 log(2 pi (sigma_q^2 + sigma_p~^2)) - (mu_q - mu_p~)^2 / (2 (sigma_q^2 + sigma_p~^2))

    which stays exact when sigma_p~^2 is as small as 1e-12 (the direct
    difference of mu^2/sigma^2 terms loses all precision there).  Z factors
    are log-CDF differences.
    """
    s2q = q.sigma * q.sigma
    s2p = prior.sigma2_tilde_p
    mu_p = prior.mu_tilde_p
    lo, hi = q.log_lo, q.log_hi

    s2t = 1.0 / (1.0 / s2q + 1.0 / s2p)
    mu_t = s2t * (q.mu / s2q + mu_p / s2p)
    st = math.sqrt(s2t)

    log_z_q = q.log_z
    log_z_pt = log_gauss_mass((lo - mu_p) / math.sqrt(s2p), (hi - mu_p) / math.sqrt(s2p))
    log_z_qt = log_gauss_mass((lo - mu_t) / st, (hi - mu_t) / st)

    s2_sum = s2q + s2p
    diff = q.mu - mu_p
    value = (
        log_z_qt
        + math.log(hi - lo)
        - log_z_pt
        - log_z_q
        - 0.5 * math.log(2.0 * math.pi * s2_sum)
        - 0.5 * diff * diff / s2_sum
    )
    if not math.isfinite(value):
        raise FloatingPointError(
            f"delta_f_lognormal: non-finite result for q={q!r}, prior={prior!r}"
        )
    return value


def delta_f_loguniform(q: TruncatedLogNormal, prior: ReducedLogUniformPrior) -> float:
    """Change in log evidence under the reduced-support log-uniform prior.

        dF = log[(log b - log a) / (log b' - log a')] + log q(a' <= theta <= b')

    The posterior mass over [a', b'] is a truncated-normal CDF difference in
    log space, so scores remain finite (large negative) when the posterior
    sits entirely outside the reduced support.  Requires
    log a <= log a' < log b' <= log b; equal outer bounds give dF = 0 exactly.
    """
    lo_r, hi_r = prior.log_lo, prior.log_hi
    if not (q.log_lo <= lo_r < hi_r <= q.log_hi):
        raise ValueError(
            "delta_f_loguniform: reduced support must nest inside the gate support"
        )
    log_width_ratio = math.log(q.log_hi - q.log_lo) - math.log(hi_r - lo_r)
    return log_width_ratio + q.log_mass_between(lo_r, hi_r)


def loguniform_prune_decision(q: TruncatedLogNormal, prior: ReducedLogUniformPrior) -> bool:
    """CDF comparison form of the reduced log-uniform rule.

    Prune when (log b' - log a')/(log b - log a) <= q(a' <= theta <= b').
    Equivalent to ``delta_f_loguniform(q, prior) >= 0``.
    """
    lhs = math.log((prior.log_hi - prior.log_lo) / (q.log_hi - q.log_lo))
    return lhs <= q.log_mass_between(prior.log_lo, prior.log_hi)


def score_snr(q: TruncatedLogNormal, threshold: float = 1.0) -> tuple[float, bool]:
    """SNR score; prune on strict ``snr < threshold``."""
    value = snr_of(q)
    return value, value < threshold


def score_mean_theta(q: TruncatedLogNormal, threshold: float = 0.1) -> tuple[float, bool]:
    """Posterior-mean score; prune on strict ``E[theta] < threshold``."""
    value = trunc_log_normal_moment(q, 1)
    return value, value < threshold


def score_l2(net, structure_id: int) -> float:
    """Euclidean norm of the incoming weights of one prunable structure.

    Dense structures contribute their weight row; convolutional structures
    the full filter kernel.  Biases are excluded.  ``net`` must expose
    ``prunable_sites()`` and ``structure_weight(site, index)`` (see
    :mod:`bmrs.network`); ``structure_id`` indexes the network-wide flat
    enumeration of prunable structures.
    """
    site, index = net.locate_structure(structure_id)
    w = net.structure_weight(site, index)
    return float(np.sqrt(np.sum(w * w)))


@dataclass(frozen=True)
class CriterionConfig:
    """Which score to compute, plus its knobs.

    ``threshold`` applies to the snr / mean_theta baselines; the bmrs
    criteria prune on score >= 0 and ignore it.
    """

    criterion: str = "bmrs_n"
    p1: int = 8
    p2: int = 23
    threshold: float | None = None
    mu_tilde_p: float = -20.0
    sigma2_tilde_p: float = 1e-12

    def __post_init__(self):
        if self.criterion not in CRITERION_NAMES:
            raise ValueError(
                f"unknown criterion {self.criterion!r}; expected one of {CRITERION_NAMES}"
            )
        if self.criterion == "bmrs_u":
            ReducedLogUniformPrior(self.p1, self.p2)  # validate

    def default_threshold(self) -> float:
        return {"snr": 1.0, "mean_theta": 0.1}.get(self.criterion, 0.0)

    def score_gate(self, q: TruncatedLogNormal, structure_id: int) -> CriterionScore:
        """Score one gate posterior under this configuration."""
        thr = self.threshold if self.threshold is not None else self.default_threshold()
        if self.criterion == "bmrs_n":
            prior_n = ReducedLogNormalPrior(self.mu_tilde_p, self.sigma2_tilde_p)
            value = delta_f_lognormal(q, prior_n)
            return CriterionScore(structure_id, value, value >= 0.0)
        if self.criterion == "bmrs_u":
            prior_u = ReducedLogUniformPrior(self.p1, self.p2)
            value = delta_f_loguniform(q, prior_u)
            return CriterionScore(structure_id, value, value >= 0.0)
        if self.criterion == "snr":
            value, prune = score_snr(q, thr)
            return CriterionScore(structure_id, value, prune)
        if self.criterion == "mean_theta":
            value, prune = score_mean_theta(q, thr)
            return CriterionScore(structure_id, value, prune)
        raise ValueError(f"criterion {self.criterion!r} does not score gate posteriors")

    def prunability(self, score: float) -> float:
        """Orient a raw score so that larger always means 'prune sooner'."""
        if self.criterion in ("bmrs_n", "bmrs_u"):
            return score
        return -score
