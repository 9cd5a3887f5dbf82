"""Bayesian model reduction for structured pruning.

Train small networks with truncated log-normal multiplicative noise gates
via stochastic variational inference, then prune whole structures (neurons,
conv channels) using closed-form change-in-evidence scores or classical
baselines, with every closed form certified against independent numerical
oracles.
"""

from .criteria import (
    CriterionConfig,
    CriterionScore,
    ReducedLogNormalPrior,
    ReducedLogUniformPrior,
    delta_f_lognormal,
    delta_f_loguniform,
    score_l2,
    score_mean_theta,
    score_snr,
)
from .data import Dataset, load_idx, load_mnist_dataset, save_idx, split, synth_blobs
from .distributions import (
    TruncatedLogNormal,
    TruncatedLogUniform,
    kl_q_p,
    sample_trunc_log_normal,
    snr,
    trunc_log_normal_moment,
    trunc_normal_cdf,
)
from .gates import NoiseGateLayer
from .network import (
    NetworkGraph,
    accuracy,
    build_lenet5,
    build_mlp,
    load_checkpoint,
    save_checkpoint,
)
from .optim import Adam
from .oracle import McEstimate, QuadratureSpec, mc_delta_f, quad_integrate
from .runner import (
    CurvePoint,
    RunRecord,
    TrainSchedule,
    compression_percent,
    continuous_prune,
    post_training_prune,
    spearman_rank_correlation,
)
from .verify import run_verification

__version__ = "0.1.0"
