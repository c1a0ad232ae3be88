"""Reconstruction distributions, centile references and deviation maps."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import kernels
from .errors import ConfigurationError, InsufficientDataError, ShapeError
from .masks import MaskSampler
from .neural import predict
from .stats import roc_auc

SIGMA_FLOOR = 1e-6
CHUNK = 128


def iteration_rng(base_seed, i):
    """Counter-based generator for reconstruction iteration ``i``."""
    return np.random.Generator(np.random.Philox(int(base_seed) ^ int(i)))


@dataclass(eq=False)
class ReconstructionDistribution:
    values: np.ndarray  # (p, m) mm, NaN where the vertex was an input
    seeds: list
    rate: float
    strategy: str = "vertex"

    @property
    def m(self):
        return self.values.shape[1]

    @property
    def uncovered(self):
        return np.isnan(self.values).all(axis=1)


@dataclass(eq=False)
class DeviationMap:
    thickness: np.ndarray
    reference: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    q: float
    s: float
    m: int
    base_seed: int
    roi_means: dict = field(default_factory=dict)
    uncovered: np.ndarray = None
    subject_id: str = ""


def make_sampler(model, s, strategy="vertex", parcellation=None, excluded_roi=None):
    return MaskSampler(model.p, s, strategy, parcellation, excluded_roi)


def reconstruct_distribution(model, y, s, m, base_seed, strategy="vertex", parcellation=None,
                             excluded_roi=None, sampler=None):
    """Run ``m`` masked reconstructions of thickness map ``y`` (mm).

    Column ``i`` uses the generator seeded with ``base_seed ^ i`` and keeps
    predictions only where the vertex was not revealed.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (model.p,):
        raise ShapeError(f"thickness map has shape {y.shape}, model expects ({model.p},)")
    if m < 1:
        raise ConfigurationError("m must be >= 1")
    if sampler is None:
        sampler = make_sampler(model, s, strategy, parcellation, excluded_roi)
    elif sampler.p != model.p:
        raise ShapeError("sampler and model dimensions disagree")
    seeds = [int(base_seed) ^ i for i in range(m)]
    sampled = np.concatenate([sampler.draw_batch(1, iteration_rng(base_seed, i)) for i in range(m)])
    x_std = model.scaler.transform(y)
    values = np.empty((m, model.p), dtype=np.float64)
    for start in range(0, m, CHUNK):
        sm = sampled[start:start + CHUNK]
        x_in = np.where(sm, x_std, 0.0).astype(model.dtype)
        out = predict(model, x_in, chunk=CHUNK)
        values[start:start + CHUNK] = model.scaler.inverse(out)
    values[sampled] = np.nan
    return ReconstructionDistribution(values.T.copy(), seeds, float(s), sampler.strategy)


def centile_select(dist, q, fallback=None):
    """Per-vertex q-centile of the non-missing reconstructions.

    Linear interpolation at rank ``q * (k - 1)`` over the ``k`` sorted values.
    Rows never predicted take ``fallback`` (e.g. the scaler mean) and are
    flagged. Returns ``(reference, uncovered)``.
    """
    if not 0.0 < q < 1.0:
        raise ConfigurationError(f"centile q must be in (0, 1), got {q}")
    values = dist.values if isinstance(dist, ReconstructionDistribution) else dist
    ref, uncovered = kernels.centile_rows(values, q)
    if uncovered.any():
        fb = np.zeros(values.shape[0]) if fallback is None else np.broadcast_to(fallback, ref.shape)
        ref = np.where(uncovered, fb, ref)
    return ref, uncovered


def _references(model, y, s, m, qs, base_seed, sampler):
    dist = reconstruct_distribution(model, y, s, m, base_seed, sampler=sampler)
    return [centile_select(dist, q, fallback=model.scaler.mean) for q in qs]


def _map_subjects(fn, n, threads):
    """Apply ``fn`` to subject indices; results do not depend on ``threads``."""
    # single-threaded BLAS inside workers keeps per-subject arithmetic fixed
    with threadpool_limits(limits=1):
        if threads <= 1:
            return [fn(i) for i in range(n)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(n)))


def residual_sigma(model, healthy_val, s, m, q, base_seed, sampler=None, threads=1):
    """Per-vertex std (n-divisor) of Y - R over healthy validation subjects."""
    if len(healthy_val) < 10:
        raise InsufficientDataError("sigma estimation needs at least 10 validation subjects")
    if sampler is None:
        sampler = make_sampler(model, s)
    y = healthy_val.thickness.astype(np.float64)

    def one(i):
        ref, _ = _references(model, y[i], s, m, [q], base_seed, sampler)[0]
        return y[i] - ref

    resid = np.stack(_map_subjects(one, len(healthy_val), threads))
    return sigma_from_residuals(resid)


def sigma_from_residuals(residuals):
    return np.maximum(np.asarray(residuals, dtype=np.float64).std(axis=0), SIGMA_FLOOR)


def roi_means(z, rois):
    out = {}
    for name, mask in rois.items():
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ConfigurationError(f"ROI {name!r} contains no vertices")
        out[name] = float(z[mask].mean())
    return out


def zscore_map(y, ref, sigma, rois=None):
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), SIGMA_FLOOR)
    z = (np.asarray(y, dtype=np.float64) - ref) / sigma
    named = {"cortex": np.ones(z.size, dtype=bool)}
    named.update(rois or {})
    return z, roi_means(z, named)


def deviation_map(model, y, sigma, s, m, q, base_seed, rois=None, sampler=None, subject_id=""):
    """Vertex-wise z = (Y - R) / sigma with R the q-centile reference.

    ``rois`` maps names to boolean vertex masks; the whole-cortex mean is
    always reported under ``"cortex"``.
    """
    y = np.asarray(y, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (model.p,):
        raise ShapeError("sigma length does not match the model")
    if sampler is None:
        sampler = make_sampler(model, s)
    ref, uncovered = _references(model, y, s, m, [q], base_seed, sampler)[0]
    sig = np.maximum(sigma, SIGMA_FLOOR)
    z, means = zscore_map(y, ref, sig, rois)
    return DeviationMap(y, ref, sig, z, float(q), float(s), int(m), int(base_seed), means, uncovered, subject_id)


def deviation_maps(model, cohort, sigma, s, m, q, base_seed, rois=None, sampler=None, threads=1):
    """Deviation maps for every subject of ``cohort``; identical for any ``threads``."""
    if sampler is None:
        sampler = make_sampler(model, s)

    def one(i):
        return deviation_map(model, cohort.thickness[i], sigma, s, m, q, base_seed, rois,
                             sampler=sampler, subject_id=cohort.ids[i])

    return _map_subjects(one, len(cohort), threads)


@dataclass
class SweepRow:
    s: float
    q: float
    rec_error_cn: float
    rec_error_ad: float
    auc: float


def sweep(model, val, s_grid, q_grid, m, base_seed, rois=None, roi="cortex", sigma_cohort=None,
          strategy="vertex", parcellation=None, excluded_roi=None, threads=1):
    """Reconstruction error per group and CN-vs-AD AUC over an (s, q) grid.

    The reconstruction distribution of each subject is computed once per
    ``s`` and reused for every ``q``. Sigma is re-estimated per (s, q) from
    ``sigma_cohort`` (default: the CN subjects of ``val``).
    """
    cn_idx = [i for i, d in enumerate(val.diagnosis) if d == "CN"]
    ad_idx = [i for i, d in enumerate(val.diagnosis) if d == "AD"]
    if not cn_idx or not ad_idx:
        raise InsufficientDataError("sweep needs CN and AD subjects in the validation cohort")
    if sigma_cohort is None:
        sigma_cohort = val.subset(cn_idx)
    if len(sigma_cohort) < 10:
        raise InsufficientDataError("sigma estimation needs at least 10 healthy subjects")
    roi_mask = np.ones(model.p, dtype=bool) if roi == "cortex" else np.asarray(rois[roi], dtype=bool)
    qs = [float(q) for q in q_grid]
    y_val = val.thickness.astype(np.float64)
    y_sig = sigma_cohort.thickness.astype(np.float64)
    rows = []
    for s in s_grid:
        sampler = MaskSampler(model.p, s, strategy, parcellation, excluded_roi)
        refs_val = _map_subjects(lambda i: _references(model, y_val[i], s, m, qs, base_seed, sampler),
                                 len(val), threads)
        refs_sig = _map_subjects(lambda i: _references(model, y_sig[i], s, m, qs, base_seed, sampler),
                                 len(sigma_cohort), threads)
        for j, q in enumerate(qs):
            ref = np.stack([r[j][0] for r in refs_val])
            sig = sigma_from_residuals(y_sig - np.stack([r[j][0] for r in refs_sig]))
            mse = ((y_val - ref) ** 2).mean(axis=1)
            z_roi = ((y_val - ref) / sig)[:, roi_mask].mean(axis=1)
            labels = np.r_[np.zeros(len(cn_idx)), np.ones(len(ad_idx))]
            scores = -np.r_[z_roi[cn_idx], z_roi[ad_idx]]
            rows.append(SweepRow(float(s), q, float(mse[cn_idx].mean()), float(mse[ad_idx].mean()),
                                 roc_auc(scores, labels)))
    return rows
