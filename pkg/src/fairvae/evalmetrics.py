"""Utility and fairness metrics: NDCG@k, latent probe AUC, chi-square@k, Kendall-Tau@k.

Metrics that aggregate over users accept optional non-negative user ``weights``;
integer weights drawn from a multinomial implement the user bootstrap without
materializing resampled copies.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from fairvae import numerics as nx
from fairvae.errors import MetricError, UndefinedMetricError

logger = logging.getLogger(__name__)

PAD = -1


# NDCG ---------------------------------------------------------------------------------

def _discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2))


def ndcg_at_k(ranked: Sequence[int], holdout, k: int = 10) -> float:
    """Binary-gain NDCG of one ranked list against a non-empty holdout set."""
    holdout = set(int(i) for i in holdout)
    if not holdout:
        raise MetricError("ndcg_at_k needs a non-empty holdout set")
    ranked = [int(i) for i in ranked[:k] if int(i) != PAD]
    disc = _discounts(k)
    dcg = sum(disc[r] for r, item in enumerate(ranked) if item in holdout)
    idcg = disc[: min(len(holdout), k)].sum()
    return float(dcg / idcg)


def ndcg_scores(recs: np.ndarray, holdouts: Sequence[np.ndarray], k: int = 10) -> np.ndarray:
    """Per-user NDCG@k; users with an empty holdout get NaN and are counted as skipped."""
    out = np.full(len(holdouts), np.nan)
    for u, hold in enumerate(holdouts):
        if len(hold):
            out[u] = ndcg_at_k(recs[u], hold, k)
    skipped = int(np.isnan(out).sum())
    if skipped:
        logger.info("ndcg: %d users with empty holdout skipped", skipped)
    return out


# AUC ----------------------------------------------------------------------------------

def auc_score(scores, labels, weights=None) -> float:
    """Rank-statistic AUC with ties counted as one half; optional per-sample weights."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    w = np.ones_like(scores) if weights is None else np.asarray(weights, dtype=np.float64)
    w_pos, w_neg = w[labels].sum(), w[~labels].sum()
    if w_pos <= 0 or w_neg <= 0:
        raise UndefinedMetricError("AUC is undefined with a single class")
    values, inverse = np.unique(scores, return_inverse=True)
    pos_at = np.bincount(inverse, weights=w * labels, minlength=len(values))
    neg_at = np.bincount(inverse, weights=w * ~labels, minlength=len(values))
    neg_below = np.cumsum(neg_at) - neg_at
    concordant = (pos_at * (neg_below + 0.5 * neg_at)).sum()
    return float(concordant / (w_pos * w_neg))


@dataclass
class ProbeResult:
    auc: float
    scores: np.ndarray
    labels: np.ndarray


def probe_scores(features: np.ndarray, labels, n_folds: int = 5, C: float = 1.0,
                 seed: int = 0) -> ProbeResult:
    """Cross-validated L2-regularized logistic probe; pooled held-out decision scores."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    counts = np.bincount(y, minlength=2)
    if counts.min() < 2 or len(counts) > 2:
        raise UndefinedMetricError(f"probe needs >= 2 users per class, got {counts.tolist()}")
    folds = min(n_folds, int(counts.min()))
    scores = np.zeros(len(y))
    if np.allclose(x, x[:1]):
        return ProbeResult(0.5, scores, y)
    cv = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    for train, held in cv.split(x, y):
        probe = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=2000))
        probe.fit(x[train], y[train])
        scores[held] = probe.decision_function(x[held])
    return ProbeResult(auc_score(scores, y), scores, y)


def probe_auc(features: np.ndarray, labels, n_folds: int = 5, C: float = 1.0,
              seed: int = 0) -> float:
    """AUC of a linear probe predicting a binary attribute from latent means (0.5 = no leakage)."""
    return probe_scores(features, labels, n_folds, C, seed).auc


# Chi-square ---------------------------------------------------------------------------

@dataclass
class Chi2Result:
    statistic: float
    n_items: int
    items: np.ndarray = field(repr=False)


def _occurrence(recs: np.ndarray, n_items: int) -> sp.csr_matrix:
    rows = np.repeat(np.arange(recs.shape[0]), recs.shape[1])
    cols = recs.reshape(-1)
    keep = cols != PAD
    return sp.csr_matrix((np.ones(keep.sum()), (rows[keep], cols[keep])),
                         shape=(recs.shape[0], n_items))


def chi2_at_k(recs: np.ndarray, foldin: sp.spmatrix, groups, k: int = 100,
              min_expected: float = 3.0, weights=None, items=None) -> Chi2Result:
    """Chi-square statistic of item occurrences in top-k lists across two user groups.

    Expectations are split by each group's share of *eligible* users (users who have
    not interacted with the item). Items enter in order of total occurrences and
    selection stops before the first item with a cell expectation below
    ``min_expected``. Passing ``items`` fixes the item set instead.
    """
    recs = np.asarray(recs)[:, :k]
    groups = np.asarray(groups).astype(bool)
    n_users, n_items = foldin.shape
    w = np.ones(n_users) if weights is None else np.asarray(weights, dtype=np.float64)
    occ = _occurrence(recs, n_items)
    interacted = (sp.csr_matrix(foldin) > 0).astype(np.float64)
    wg = np.stack([w * ~groups, w * groups])  # (2, users)
    observed = np.asarray((occ.T @ wg.T))  # (items, 2)
    eligible = wg.sum(axis=1)[None, :] - np.asarray(interacted.T @ wg.T)
    eligible = np.maximum(eligible, 0.0)
    total = observed.sum(axis=1)
    elig_total = eligible.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        expected = np.where(elig_total[:, None] > 0,
                            total[:, None] * eligible / elig_total[:, None], 0.0)
    if items is None:
        order = np.lexsort((np.arange(n_items), -total))
        order = order[total[order] > 0]
        ok = np.all(expected[order] >= min_expected, axis=1)
        n_sel = len(order) if ok.all() else int(np.argmin(ok))
        items = order[:n_sel]
    items = np.asarray(items, dtype=np.int64)
    if len(items) == 0:
        raise MetricError(f"no item reaches the expected cell count {min_expected}")
    e = expected[items]
    o = observed[items]
    with np.errstate(invalid="ignore", divide="ignore"):
        cells = np.where(e > 0, (o - e) ** 2 / e, 0.0)
    return Chi2Result(float(cells.sum()), len(items), items)


# Kendall-Tau --------------------------------------------------------------------------

def extended_kendall_tau(list_a: Sequence[int], list_b: Sequence[int], p: float = 0.5) -> float:
    """Kendall-Tau agreement between two top-k lists that may hold different items.

    Pairs are scored as in the top-k Kendall distance with penalty ``p``: an item
    missing from a list ranks below everything in it, and a pair missing from one
    list entirely costs ``p``. The distance is rescaled so identical lists give 1
    and disjoint lists give -1.
    """
    a = [int(i) for i in list_a]
    b = [int(i) for i in list_b]
    if len(set(a)) != len(a) or len(set(b)) != len(b):
        raise MetricError("ranked lists must not contain duplicates")
    if not a or not b:
        raise MetricError("Kendall-Tau needs two non-empty lists")
    union = sorted(set(a) | set(b))
    pos = {item: i for i, item in enumerate(union)}
    missing = len(union) + 1
    ra = np.full(len(union), missing, dtype=np.int64)
    rb = np.full(len(union), missing, dtype=np.int64)
    ra[[pos[i] for i in a]] = np.arange(len(a))
    rb[[pos[i] for i in b]] = np.arange(len(b))
    iu, ju = np.triu_indices(len(union), k=1)
    da = np.sign(ra[iu] - ra[ju])
    db = np.sign(rb[iu] - rb[ju])
    prod = da * db
    distance = float((prod < 0).sum()) + p * float((prod == 0).sum())
    n_a, n_b = len(a), len(b)
    worst = n_a * n_b + p * (n_a * (n_a - 1) / 2 + n_b * (n_b - 1) / 2)
    if worst == 0:
        return 1.0
    return 1.0 - 2.0 * distance / worst


def group_ranking(recs: np.ndarray, members, k: int = 100, weights=None, n_items=None) -> np.ndarray:
    """Top-k items of a group by summed rank discount 1/log2(rank+1) over its users' lists."""
    recs = np.asarray(recs)[:, :k]
    members = np.asarray(members).astype(bool)
    n_items = int(recs.max()) + 1 if n_items is None else n_items
    w = np.ones(len(recs)) if weights is None else np.asarray(weights, dtype=np.float64)
    disc = np.broadcast_to(_discounts(recs.shape[1]), recs.shape) * (w * members)[:, None]
    valid = recs != PAD
    score = np.bincount(recs[valid], weights=disc[valid], minlength=n_items)
    order = np.lexsort((np.arange(n_items), -score))
    return order[score[order] > 0][:k]


def kendall_tau_at_k(recs: np.ndarray, groups, k: int = 100, p: float = 0.5,
                     weights=None, n_items=None) -> float:
    """Kendall-Tau@k between the two groups' aggregated top-k rankings."""
    groups = np.asarray(groups).astype(bool)
    w = np.ones(len(groups)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w[groups].sum() <= 0 or w[~groups].sum() <= 0:
        raise MetricError("Kendall-Tau needs users in both groups")
    top_a = group_ranking(recs, ~groups, k, w, n_items)
    top_b = group_ranking(recs, groups, k, w, n_items)
    return extended_kendall_tau(top_a, top_b, p)


# Recommendation -----------------------------------------------------------------------

def recommend_top_k(recommender, foldin, k: int, mode: str = "deterministic", seed: int = 0,
                    chunk: int = 1024) -> np.ndarray:
    """Top-k item indices per fold-in row, best first, padded with -1.

    Fold-in items are masked before ranking; ties go to the lower item index.
    ``recommender`` is anything with ``item_scores(rows, mode, rng)``.
    """
    foldin = sp.csr_matrix(foldin)
    rng = nx.make_rng([seed, 7])
    out = np.full((foldin.shape[0], k), PAD, dtype=np.int64)
    for start in range(0, foldin.shape[0], chunk):
        rows = foldin[start:start + chunk].toarray()
        scores = np.array(recommender.item_scores(rows, mode=mode, rng=rng), dtype=np.float64)
        scores[rows > 0] = -np.inf
        order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        top = np.take_along_axis(scores, order, axis=1)
        order[~np.isfinite(top) & (top < 0)] = PAD
        out[start:start + len(rows), : order.shape[1]] = order
    return out


# Bootstrap ----------------------------------------------------------------------------

def bootstrap_weights(n: int, n_resamples: int, seed: int) -> np.ndarray:
    rng = nx.make_rng([seed, 11])
    return rng.multinomial(n, np.full(n, 1.0 / n), size=n_resamples).astype(np.float64)


def bootstrap_std(metric, n: int, n_resamples: int = 1000, seed: int = 0) -> float:
    """Standard deviation of ``metric(weights)`` over user-bootstrap resamples."""
    if n_resamples <= 0:
        return float("nan")
    values = []
    for w in bootstrap_weights(n, n_resamples, seed):
        try:
            values.append(metric(w))
        except MetricError:
            continue
    return float(np.std(values, ddof=1)) if len(values) > 1 else float("nan")


def weighted_mean(values: np.ndarray, weights=None) -> float:
    values = np.asarray(values, dtype=np.float64)
    ok = ~np.isnan(values)
    w = np.ones_like(values) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w[ok].sum()
    return float((values[ok] * w[ok]).sum() / total) if total > 0 else math.nan


# Evaluation report --------------------------------------------------------------------

@dataclass
class EvalConfig:
    k_ndcg: int = 10
    k_fair: int = 100
    probe_folds: int = 5
    probe_C: float = 1.0
    bootstrap: int = 1000
    kt_penalty: float = 0.5
    chi2_min_expected: float = 3.0
    seed: int = 0


ATTRIBUTES = ("gender", "age")


def _entry(value: float, std: float, **extra) -> dict:
    return {"value": float(value), "std": float(std), **extra}


def evaluate_mode(recommender, foldin: sp.csr_matrix, holdouts, labels, cfg: EvalConfig,
                  mode: str = "deterministic") -> dict:
    """All metrics for one inference mode; ``labels`` maps attribute -> 0/1 array."""
    n = foldin.shape[0]
    k = max(cfg.k_fair, cfg.k_ndcg)
    recs = recommend_top_k(recommender, foldin, k, mode=mode, seed=cfg.seed)
    weights = bootstrap_weights(n, cfg.bootstrap, cfg.seed) if cfg.bootstrap > 0 else np.zeros((0, n))

    def spread(metric):
        values = []
        for w in weights:
            try:
                values.append(metric(w))
            except MetricError:
                continue
        return float(np.std(values, ddof=1)) if len(values) > 1 else float("nan")

    out: dict = {}
    per_user = ndcg_scores(recs[:, : cfg.k_ndcg], holdouts, cfg.k_ndcg)
    out[f"ndcg@{cfg.k_ndcg}"] = _entry(weighted_mean(per_user), spread(lambda w: weighted_mean(per_user, w)))
    if hasattr(recommender, "representations"):
        reps = recommender.representations(foldin.toarray(), mode=mode, rng=nx.make_rng([cfg.seed, 19]))
        for attr in ATTRIBUTES:
            probe = probe_scores(reps, labels[attr], cfg.probe_folds, cfg.probe_C, cfg.seed)
            out[f"auc_{attr}"] = _entry(probe.auc, spread(lambda w: auc_score(probe.scores, probe.labels, w)))
    for attr in ATTRIBUTES:
        groups = labels[attr]
        chi = chi2_at_k(recs, foldin, groups, cfg.k_fair, cfg.chi2_min_expected)
        out[f"chi2@{cfg.k_fair}_{attr}"] = _entry(
            chi.statistic,
            spread(lambda w: chi2_at_k(recs, foldin, groups, cfg.k_fair, cfg.chi2_min_expected,
                                       weights=w, items=chi.items).statistic),
            n_items=chi.n_items)
        n_items = foldin.shape[1]
        out[f"kendall_tau@{cfg.k_fair}_{attr}"] = _entry(
            kendall_tau_at_k(recs, groups, cfg.k_fair, cfg.kt_penalty, n_items=n_items),
            spread(lambda w: kendall_tau_at_k(recs, groups, cfg.k_fair, cfg.kt_penalty, w, n_items)))
    return out


def evaluate(recommender, data, users, cfg: EvalConfig, foldin_fraction: float = 0.8,
             modes: Sequence[str] = ("deterministic",)) -> dict:
    """EvaluationReport body for ``users`` of a prepared dataset."""
    from fairvae import dataio

    part = dataio.make_eval_partition(data.interactions, users, foldin_fraction, cfg.seed)
    labels = {a: data.labels.subset(part.users).attribute(a) for a in ATTRIBUTES}
    report = {
        "n_users": int(len(part.users)),
        "n_users_excluded": int(len(part.excluded)),
        "modes": {m: evaluate_mode(recommender, part.foldin, part.holdout, labels, cfg, m) for m in modes},
    }
    return report
