"""Numpy implementations of the hot kernels.

These are the reference versions; the Cython module ``_ckernels`` must agree
with them bit for bit.
"""

import numpy as np


def centile_rows(values, q):
    """Per-row linear-interpolation quantile ignoring NaN.

    Returns ``(centiles, uncovered)``; rows without any finite value get 0.0
    and are flagged in ``uncovered``.
    """
    values = np.asarray(values, dtype=np.float64)
    n_rows = values.shape[0]
    ordered = np.sort(values, axis=1)  # NaN sorts last
    k = np.count_nonzero(~np.isnan(values), axis=1)
    uncovered = k == 0
    kk = np.where(uncovered, 1, k)
    r = q * (kk - 1)
    lo = np.floor(r).astype(np.int64)
    hi = np.minimum(lo + 1, kk - 1)
    frac = r - lo
    rows = np.arange(n_rows)
    a = ordered[rows, lo]
    b = ordered[rows, hi]
    out = a + frac * (b - a)
    out[uncovered] = 0.0
    return out, uncovered


def hop_voronoi(indptr, indices, seeds):
    """Multi-source BFS labelling each vertex with its nearest seed (hop count).

    Ties go to the lower seed position. ``indptr``/``indices`` are CSR
    adjacency arrays.
    """
    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    seeds = np.asarray(seeds, dtype=np.int64)
    n = indptr.size - 1
    labels = np.full(n, -1, dtype=np.int64)
    labels[seeds] = np.arange(seeds.size)
    frontier = seeds
    degree = np.diff(indptr)
    while frontier.size:
        counts = degree[frontier]
        src = np.repeat(frontier, counts)
        starts = np.repeat(indptr[frontier], counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        dst = indices[starts + offsets]
        free = labels[dst] == -1
        src, dst = src[free], dst[free]
        if not dst.size:
            break
        claim = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(claim, dst, labels[src])
        frontier = np.unique(dst)
        labels[frontier] = claim[frontier]
    return labels
