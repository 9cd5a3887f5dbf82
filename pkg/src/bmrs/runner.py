"""Training / pruning orchestration and run bookkeeping.

Two protocols are provided:

* :func:`continuous_prune` — train for ``epochs_train`` epochs; after every
  ``prune_interval`` epochs score all alive structures and physically remove
  those the criterion rejects; finish with ``fine_tune_epochs`` epochs with
  pruning disabled.  Emits one :class:`RunRecord` per epoch.
* :func:`post_training_prune` — rank all structures of a trained network once
  (most prunable first), then repeatedly remove the next chunk and fine-tune
  for one epoch, tracing the accuracy/compression curve.  For the
  change-in-evidence criteria the stop point (first structure with a
  negative score) is marked on the curve while the full curve is still
  traced.

Both protocols are deterministic functions of (network, data, schedule seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .criteria import CriterionConfig, score_l2
from .data import Dataset
from .distributions import TruncatedLogNormal
from .network import NetworkGraph, accuracy, draw_noise
from .optim import Adam


@dataclass(frozen=True)
class TrainSchedule:
    """Epoch counts, pruning cadence, optimizer settings, and the seed.

    ``noise_per_example`` draws fresh gate noise for every minibatch row
    (the lower-variance estimator of the stochastic objective); turning it
    off shares a single draw per structure across the minibatch.

    ``gate_lr_scale`` multiplies the learning rate of the gate parameters
    (mu, log_sigma) relative to the weights.  Gate posteriors of prunable
    structures have to travel many units in log space within the training
    budget; at the shared rate they cannot, and no structure ever reaches
    the pruning region.
    """

    epochs_train: int
    fine_tune_epochs: int = 10
    prune_interval: int = 1
    seed: int = 0
    batch_size: int = 128
    lr: float = 1e-3
    kl_scale: float = 1.0
    noise_per_example: bool = True
    gate_lr_scale: float = 20.0

    def __post_init__(self):
        if self.epochs_train < 1 or self.prune_interval < 1 or self.fine_tune_epochs < 0:
            raise ValueError("TrainSchedule: epochs_train >= 1, prune_interval >= 1, "
                             "fine_tune_epochs >= 0")
        if self.batch_size < 1 or self.lr <= 0.0:
            raise ValueError("TrainSchedule: batch_size >= 1 and lr > 0 required")


@dataclass(frozen=True)
class PruneEvent:
    site: int          # ordinal among prunable sites
    label: int         # structure index in the freshly built network
    score: float


@dataclass(frozen=True)
class RunRecord:
    epoch: int
    test_accuracy: float       # percent
    compression: float         # percent
    n_alive: tuple
    events: tuple = ()
    degenerate: bool = False
    phase: str = "train"       # train | fine_tune


@dataclass(frozen=True)
class CurvePoint:
    compression: float         # percent
    accuracy: float            # percent
    past_stop: bool = False    # beyond the criterion's own stopping point


def _rng_streams(seed: int):
    order_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    return (
        np.random.Generator(np.random.Philox(order_ss)),
        np.random.Generator(np.random.Philox(noise_ss)),
    )


def _make_adam(net: NetworkGraph, schedule: TrainSchedule) -> Adam:
    overrides = {}
    if schedule.gate_lr_scale != 1.0:
        for g in net.gate_indices():
            overrides[(g, "mu")] = schedule.lr * schedule.gate_lr_scale
            overrides[(g, "log_sigma")] = schedule.lr * schedule.gate_lr_scale
    return Adam(lr=schedule.lr, lr_overrides=overrides)


def train_epoch(
    net: NetworkGraph,
    train: Dataset,
    adam: Adam,
    order_rng: np.random.Generator,
    noise_rng: np.random.Generator,
    batch_size: int,
    kl_scale: float,
    noise_per_example: bool = True,
) -> float:
    """One pass over the training split; returns the mean step loss."""
    perm = order_rng.permutation(train.n)
    losses = []
    params = net.params()
    for start in range(0, train.n, batch_size):
        idx = perm[start : start + batch_size]
        noise = draw_noise(net, noise_rng,
                           batch_size=len(idx) if noise_per_example else None)
        loss, _, _, grads = net.loss_and_grads(
            train.images[idx], train.labels[idx], noise,
            n_train=train.n, kl_scale=kl_scale,
        )
        adam.step(params, grads)
        losses.append(loss)
    return float(np.mean(losses))


def _score_sites(net: NetworkGraph, criterion: CriterionConfig):
    """Score every alive structure; returns [(site_ordinal, local_idx, label, score, prune)]."""
    results = []
    for site_ord, site in enumerate(net.prunable_sites()):
        if criterion.criterion == "l2":
            for j in range(site.width):
                value = score_l2_at(net, site, j)
                results.append((site_ord, j, _label_of(net, site, j), value, False))
            continue
        if site.gate_idx is None:
            raise ValueError(
                f"criterion {criterion.criterion!r} needs gate layers; site "
                f"{site.producer_idx} has none"
            )
        gate = net.layers[site.gate_idx]
        sig = gate.sigma()
        for j in range(site.width):
            if not gate.alive[j]:
                continue
            q = TruncatedLogNormal(float(gate.mu[j]), float(sig[j]), gate.log_lo, gate.log_hi)
            s = criterion.score_gate(q, int(gate.labels[j]))
            results.append((site_ord, j, int(gate.labels[j]), s.score, s.prune))
    return results


def score_l2_at(net: NetworkGraph, site, local_idx: int) -> float:
    return score_l2(net, _flat_id(net, site, local_idx))


def _flat_id(net: NetworkGraph, site, local_idx: int) -> int:
    offset = 0
    for s in net.prunable_sites():
        if s.producer_idx == site.producer_idx:
            return offset + local_idx
        offset += s.width
    raise IndexError("site not found")


def _label_of(net: NetworkGraph, site, j: int) -> int:
    if site.gate_idx is not None:
        return int(net.layers[site.gate_idx].labels[j])
    return j


def continuous_prune(
    net: NetworkGraph,
    train: Dataset,
    test: Dataset,
    criterion: CriterionConfig | None,
    schedule: TrainSchedule,
) -> tuple[NetworkGraph, list[RunRecord]]:
    """Train with pruning every ``prune_interval`` epochs, then fine-tune.

    The network is modified in place (structures are physically removed,
    shrinking the weight tensors and the optimizer state).  Pass
    ``criterion=None`` for plain training with no pruning.
    """
    if criterion is not None and criterion.criterion in ("l2", "none"):
        criterion = None if criterion.criterion == "none" else criterion
    if criterion is not None and criterion.criterion == "l2":
        raise ValueError("the l2 baseline is rank-based; use post-training pruning")
    if criterion is not None and not net.gate_indices():
        raise ValueError("continuous pruning requires at least one gate layer")

    order_rng, noise_rng = _rng_streams(schedule.seed)
    adam = _make_adam(net, schedule)
    params_before = net.count_parameters()
    records: list[RunRecord] = []

    def record(epoch: int, events, phase: str):
        comp = 100.0 * (1.0 - net.count_parameters() / params_before)
        n_alive = tuple(net.alive_counts())
        degenerate = any(n == 0 for n in n_alive)
        records.append(
            RunRecord(
                epoch=epoch,
                test_accuracy=100.0 * accuracy(net, test.images, test.labels),
                compression=comp,
                n_alive=n_alive,
                events=tuple(events),
                degenerate=degenerate,
                phase=phase,
            )
        )

    epoch = 0
    for _ in range(schedule.epochs_train):
        train_epoch(net, train, adam, order_rng, noise_rng,
                    schedule.batch_size, schedule.kl_scale,
                    noise_per_example=schedule.noise_per_example)
        epoch += 1
        events = []
        if criterion is not None and epoch % schedule.prune_interval == 0:
            scored = _score_sites(net, criterion)
            to_prune: dict[int, list[int]] = {}
            for site_ord, local_idx, label, score, prune in scored:
                if prune:
                    to_prune.setdefault(site_ord, []).append(local_idx)
                    events.append(PruneEvent(site_ord, label, score))
            for site_ord in sorted(to_prune):
                site = net.prunable_sites()[site_ord]
                net.prune_structures(site, np.asarray(to_prune[site_ord]), adam=adam)
        record(epoch, events, "train")

    for _ in range(schedule.fine_tune_epochs):
        train_epoch(net, train, adam, order_rng, noise_rng,
                    schedule.batch_size, schedule.kl_scale,
                    noise_per_example=schedule.noise_per_example)
        epoch += 1
        record(epoch, (), "fine_tune")

    return net, records


def post_training_prune(
    net: NetworkGraph,
    train: Dataset,
    test: Dataset,
    criterion: CriterionConfig,
    schedule: TrainSchedule,
    chunk_fraction: float = 0.05,
) -> list[CurvePoint]:
    """Rank-based progressive pruning of a trained network.

    Structures are ranked once (most prunable first).  Each step removes the
    next chunk, fine-tunes for one epoch, and records the test accuracy.
    Points past the criterion's own stopping point (the first ranked
    structure it would keep) are flagged.  The curve starts at compression 0
    with the unpruned accuracy.
    """
    if criterion.criterion == "none":
        raise ValueError("post-training pruning needs a ranking criterion")
    if not (0.0 < chunk_fraction <= 1.0):
        raise ValueError("chunk_fraction must lie in (0, 1]")

    order_rng, noise_rng = _rng_streams(schedule.seed)
    adam = _make_adam(net, schedule)
    params_before = net.count_parameters()

    scored = _score_sites(net, criterion)
    if not scored:
        return [CurvePoint(0.0, 100.0 * accuracy(net, test.images, test.labels))]
    # most prunable first; ties broken by (site, structure label) ascending
    ranked = sorted(
        scored,
        key=lambda r: (-criterion.prunability(r[3]), r[0], r[2]),
    )
    if criterion.criterion in ("bmrs_n", "bmrs_u"):
        n_stop = sum(1 for r in ranked if r[4])
    else:
        n_stop = sum(1 for r in ranked if r[4]) or len(ranked)

    # track original structure indices per site so ranks survive renumbering
    sites = net.prunable_sites()
    site_labels = [np.arange(site.width) for site in sites]

    points = [CurvePoint(0.0, 100.0 * accuracy(net, test.images, test.labels), False)]
    chunk = max(1, int(round(chunk_fraction * len(ranked))))
    removed = 0
    for start in range(0, len(ranked), chunk):
        batch = ranked[start : start + chunk]
        per_site: dict[int, list[int]] = {}
        for site_ord, local_idx, _label, _score, _prune in batch:
            per_site.setdefault(site_ord, []).append(local_idx)
        for site_ord, originals in per_site.items():
            current = np.searchsorted(site_labels[site_ord], np.asarray(originals))
            site = net.prunable_sites()[site_ord]
            net.prune_structures(site, current, adam=adam)
            site_labels[site_ord] = np.delete(site_labels[site_ord], current)
        removed += len(batch)
        train_epoch(net, train, adam, order_rng, noise_rng,
                    schedule.batch_size, schedule.kl_scale,
                    noise_per_example=schedule.noise_per_example)
        points.append(
            CurvePoint(
                compression=100.0 * (1.0 - net.count_parameters() / params_before),
                accuracy=100.0 * accuracy(net, test.images, test.labels),
                past_stop=removed > n_stop,
            )
        )
    return points


def prune_to_target(
    net: NetworkGraph,
    criterion: CriterionConfig,
    target_compression: float,
) -> float:
    """One-shot removal of ranked structures until the target compression.

    Removes the most prunable structures (per the criterion's ranking) until
    the parameter compression percentage reaches ``target_compression``.
    Returns the achieved compression.  Used by the magnitude baseline, which
    is given the compression rate another criterion reached.
    """
    params_before = net.count_parameters()
    scored = _score_sites(net, criterion)
    ranked = sorted(scored, key=lambda r: (-criterion.prunability(r[3]), r[0], r[2]))
    sites = net.prunable_sites()
    site_labels = [np.arange(site.width) for site in sites]

    compression = 0.0
    for site_ord, local_idx, _label, _score, _prune in ranked:
        if compression >= target_compression:
            break
        current = int(np.searchsorted(site_labels[site_ord], local_idx))
        site = net.prunable_sites()[site_ord]
        net.prune_structures(site, [current], adam=None)
        site_labels[site_ord] = np.delete(site_labels[site_ord], current)
        compression = 100.0 * (1.0 - net.count_parameters() / params_before)
    return compression


def compression_percent(net_before: NetworkGraph, net_after: NetworkGraph) -> float:
    """Percentage of weight+bias scalars removed by pruning (gates excluded)."""
    before = net_before.count_parameters()
    after = net_after.count_parameters()
    return 100.0 * (1.0 - after / before)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties assigned their average rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    ranks[order] = np.arange(1, x.size + 1, dtype=float)
    _, inverse = np.unique(x, return_inverse=True)
    sums = np.bincount(inverse, weights=ranks)
    counts = np.bincount(inverse)
    return (sums / counts)[inverse]


def spearman_rank_correlation(a, b) -> float:
    """Spearman rho with average ranks for ties.

    Returns ``nan`` (the flagged undefined sentinel) when either input is
    constant.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("spearman_rank_correlation needs two equal-length vectors (n >= 2)")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        return math.nan
    return float(ra @ rb) / denom


def criterion_rank_matrix(net: NetworkGraph, criteria: dict[str, CriterionConfig]):
    """Spearman matrix of pruning orders across criteria on one network.

    Scores are oriented most-prunable-first before correlating, so two
    criteria that would prune in the same order correlate at +1.
    """
    names = list(criteria)
    prunability = {}
    for name, cfg in criteria.items():
        scored = _score_sites(net, cfg)
        prunability[name] = np.array([cfg.prunability(s[3]) for s in scored])
    matrix = np.ones((len(names), len(names)))
    for i, ni in enumerate(names):
        for j, nj in enumerate(names):
            if i < j:
                rho = spearman_rank_correlation(prunability[ni], prunability[nj])
                matrix[i, j] = matrix[j, i] = rho
    return names, matrix
