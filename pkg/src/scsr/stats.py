"""Evaluation statistics: AUC, rank correlation, rank tests, corrections."""

import itertools

import numpy as np
from scipy.special import ndtr
from scipy.stats import norm, rankdata

from .errors import ShapeError, UndefinedMetricError

ORDINAL = {"CN": 0, "MCI": 1, "AD": 2}
EXACT_MAX_N = 12


def roc_auc(scores, labels):
    """P(score_pos > score_neg) + P(tie) / 2, via the Mann-Whitney statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError("scores and labels must have equal lengths")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def multiclass_auc(scores, labels, ordinal_map=ORDINAL):
    """Unweighted mean of pairwise AUCs; the higher-ordinal class is positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = list(labels)
    present = sorted({l for l in labels}, key=lambda l: ordinal_map[l])
    if len(present) < 2:
        raise UndefinedMetricError("multiclass AUC needs at least two classes")
    aucs = []
    for lo, hi in itertools.combinations(present, 2):
        keep = np.array([l in (lo, hi) for l in labels])
        aucs.append(roc_auc(scores[keep], np.array([l == hi for l in labels])[keep]))
    return float(np.mean(aucs))


def pairwise_aucs(scores, labels, ordinal_map=ORDINAL):
    scores = np.asarray(scores, dtype=np.float64)
    labels = list(labels)
    present = sorted(set(labels), key=lambda l: ordinal_map[l])
    out = {}
    for lo, hi in itertools.combinations(present, 2):
        keep = np.array([l in (lo, hi) for l in labels])
        out[(lo, hi)] = roc_auc(scores[keep], np.array([l == hi for l in labels])[keep])
    return out


def spearman(x, y):
    """Pearson correlation of midranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError("x and y must have equal lengths")
    if x.size < 3:
        raise UndefinedMetricError("Spearman correlation needs n >= 3")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if den == 0:
        raise UndefinedMetricError("Spearman correlation undefined for constant input")
    return float(np.clip((rx * ry).sum() / den, -1.0, 1.0))


def _subset_sum_counts(weights, size=None):
    """Counts of subsets by (integer) weight sum, optionally of fixed size.

    Returns an array indexed by sum (size=None) or by [size, sum].
    """
    total = int(sum(weights))
    if size is None:
        counts = np.zeros(total + 1, dtype=object)
        counts[0] = 1
        for w in weights:
            counts[w:] = counts[w:] + counts[:total + 1 - w].copy()
        return counts
    counts = np.zeros((size + 1, total + 1), dtype=object)
    counts[0, 0] = 1
    for w in weights:
        for j in range(size, 0, -1):
            counts[j, w:] = counts[j, w:] + counts[j - 1, :total + 1 - w]
    return counts[size]


def wilcoxon_rank_sum(a, b, method="auto"):
    """Mann-Whitney U of ``a`` and two-sided p.

    Exact (permutation distribution over midranks) when ``len(a) + len(b)``
    is at most 12, otherwise the normal approximation with tie and
    continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = a.size, b.size
    if na == 0 or nb == 0:
        raise UndefinedMetricError("rank-sum test needs two non-empty groups")
    n = na + nb
    ranks = rankdata(np.concatenate([a, b]))
    u = float(ranks[:na].sum() - na * (na + 1) / 2.0)
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "approx"
    if method == "exact":
        r2 = [int(round(2 * r)) for r in ranks]
        counts = _subset_sum_counts(r2, na)
        u2_obs = int(round(2 * u))
        off = na * (na + 1)
        dev_obs = abs(u2_obs - na * nb)
        hits = 0
        for s2, c in enumerate(counts):
            if c and abs((s2 - off) - na * nb) >= dev_obs:
                hits += c
        total = sum(counts)
        return u, float(hits / total)
    _, t = np.unique(ranks, return_counts=True)
    tie = (t ** 3 - t).sum()
    var = na * nb / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return u, 1.0
    z = max(abs(u - na * nb / 2.0) - 0.5, 0.0) / np.sqrt(var)
    return u, float(min(1.0, 2.0 * norm.sf(z)))


def wilcoxon_signed_rank(diffs, method="auto"):
    """Signed-rank statistic W (sum of positive ranks) and two-sided p.

    Zero differences are dropped. Exact over all sign assignments when at
    most 12 non-zero differences remain.
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise UndefinedMetricError("signed-rank test needs a non-zero difference")
    ranks = rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "approx"
    if method == "exact":
        r2 = [int(round(2 * r)) for r in ranks]
        t2 = sum(r2)
        counts = _subset_sum_counts(r2)
        w2 = int(round(2 * w))
        dev_obs = abs(2 * w2 - t2)
        hits = sum(c for s2, c in enumerate(counts) if c and abs(2 * s2 - t2) >= dev_obs)
        return w, float(hits / 2 ** n)
    _, t = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (t ** 3 - t).sum() / 48.0
    if var <= 0:
        return w, 1.0
    z = max(abs(w - n * (n + 1) / 4.0) - 0.5, 0.0) / np.sqrt(var)
    return w, float(min(1.0, 2.0 * norm.sf(z)))


def bonferroni(p_values):
    p = np.asarray(p_values, dtype=np.float64)
    return np.minimum(1.0, p * p.size)


def benjamini_hochberg(p_values):
    """Step-up FDR adjusted p-values."""
    p = np.asarray(p_values, dtype=np.float64)
    k = p.size
    if k == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = p[order] * k / np.arange(1, k + 1)
    adj = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(k)
    out[order] = np.minimum(adj, 1.0)
    return out


def permutation_median_diff(a, b, n_perm=10000, seed=0, block=1000):
    """median(a) - median(b) with a two-sided add-one permutation p-value.

    Permutations are generated in blocks, each from its own child seed.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise UndefinedMetricError("both groups must be non-empty")
    obs = float(np.median(a) - np.median(b))
    pooled = np.concatenate([a, b])
    na = a.size
    exceed = 0
    children = np.random.SeedSequence(seed).spawn((n_perm + block - 1) // block)
    done = 0
    for child in children:
        nb = min(block, n_perm - done)
        rng = np.random.default_rng(child)
        perm = rng.permuted(np.broadcast_to(pooled, (nb, pooled.size)), axis=1)
        stat = np.median(perm[:, :na], axis=1) - np.median(perm[:, na:], axis=1)
        exceed += int(np.count_nonzero(np.abs(stat) >= abs(obs) - 1e-12))
        done += nb
    return obs, (1 + exceed) / (n_perm + 1)


def z_to_centile(z):
    """Standard normal CDF."""
    out = ndtr(np.asarray(z, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def reconstruction_error(y, r, level="vertex", parcellation=None, kind="mse"):
    """MSE (or MAE) between actual and reconstructed thickness.

    At parcel level both maps are first averaged within each parcel.
    """
    y = np.asarray(y, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if y.shape != r.shape:
        raise ShapeError("Y and R must have equal lengths")
    if level == "parcel":
        if parcellation is None:
            raise ShapeError("parcel-level error needs a parcellation")
        y, r = parcellation.parcel_means(y), parcellation.parcel_means(r)
    elif level != "vertex":
        raise ValueError(f"unknown level {level!r}")
    d = y - r
    if kind == "mse":
        return float(np.mean(d * d, axis=-1)) if d.ndim == 1 else np.mean(d * d, axis=-1)
    if kind == "mae":
        return float(np.mean(np.abs(d), axis=-1)) if d.ndim == 1 else np.mean(np.abs(d), axis=-1)
    raise ValueError(f"unknown kind {kind!r}")
