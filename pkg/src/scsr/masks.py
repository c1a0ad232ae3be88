"""Stochastic predictor masks: which vertices are revealed to the model."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateMaskError

STRATEGIES = ("vertex", "parcel")


@dataclass(frozen=True, eq=False)
class SamplingMask:
    sampled: np.ndarray  # bool (p,)
    rate: float
    strategy: str = "vertex"
    excluded_roi: str = None

    @property
    def n_sampled(self):
        return int(self.sampled.sum())


def round_half_away(x):
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


class MaskSampler:
    """Draws masks for a fixed (p, rate, strategy, exclusion) setting.

    For the vertex strategy exactly ``round(rate * p_eligible)`` eligible
    vertices are sampled (at least one). For the parcel strategy whole
    eligible parcels are added in random order until the sampled vertex count
    first reaches ``rate * p_eligible``.
    """

    def __init__(self, p, rate, strategy="vertex", parcellation=None, excluded_roi=None):
        if not 0.0 < rate < 1.0:
            raise ConfigurationError(f"sampling rate must be in (0, 1), got {rate}")
        if strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown sampling strategy {strategy!r}")
        if strategy == "parcel" and parcellation is None:
            raise ConfigurationError("parcel strategy requires a parcellation")
        if excluded_roi is not None and parcellation is None:
            raise ConfigurationError("excluding an ROI requires a parcellation")
        if parcellation is not None and parcellation.n_vertices != p:
            raise ConfigurationError("parcellation does not match the vertex count")
        self.p = int(p)
        self.rate = float(rate)
        self.strategy = strategy
        self.excluded_roi = excluded_roi
        excluded = np.zeros(self.p, dtype=bool)
        if excluded_roi is not None:
            excluded = parcellation.roi_mask(excluded_roi)
        self.eligible = np.flatnonzero(~excluded)
        pe = self.eligible.size
        if pe == 0:
            raise DegenerateMaskError("no eligible vertices left after exclusion")
        self.target = self.rate * pe
        if strategy == "vertex":
            k = round_half_away(self.target)
            if k >= pe:
                raise DegenerateMaskError(
                    f"rate {rate} samples all {pe} eligible vertices, leaving nothing to reconstruct"
                )
            self.k = max(1, k)
        else:
            ids = np.unique(parcellation.labels[self.eligible])
            self.parcel_ids = ids
            self.parcel_members = [np.flatnonzero(parcellation.labels == i) for i in ids]
            self.parcel_sizes = np.array([m.size for m in self.parcel_members])

    def draw(self, rng):
        return SamplingMask(self.draw_batch(1, rng)[0], self.rate, self.strategy, self.excluded_roi)

    def draw_batch(self, n, rng):
        """Boolean (n, p) matrix of sampled positions."""
        out = np.zeros((n, self.p), dtype=bool)
        if self.strategy == "vertex":
            keys = rng.random((n, self.eligible.size))
            pick = np.argpartition(keys, self.k - 1, axis=1)[:, :self.k]
            rows = np.repeat(np.arange(n), self.k)
            out[rows, self.eligible[pick.ravel()]] = True
            return out
        for r in range(n):
            order = rng.permutation(self.parcel_ids.size)
            csum = np.cumsum(self.parcel_sizes[order])
            j = int(np.searchsorted(csum, self.target - 1e-9)) + 1
            if j >= order.size and self.excluded_roi is None:
                raise DegenerateMaskError("parcel sampling reached every parcel; nothing left to reconstruct")
            for i in order[:j]:
                out[r, self.parcel_members[i]] = True
        return out


def draw_mask(p, s, strategy="vertex", parcellation=None, excluded_roi=None, rng=None):
    rng = np.random.default_rng() if rng is None else rng
    return MaskSampler(p, s, strategy, parcellation, excluded_roi).draw(rng)
