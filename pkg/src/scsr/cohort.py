"""Synthetic cortical-thickness cohorts.

Each subject's map is a constant mean plus age, sex and site effects, a
low-rank spatially smooth latent component, white noise, and an optional
diagnosis-dependent atrophy pattern confined to an ROI and a falloff ring.
"""

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, InsufficientDataError, SplitError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

THICKNESS_MIN = 0.3
THICKNESS_MAX = 6.0
DIAGNOSES = ("CN", "MCI", "AD")
ORDINAL = {"CN": 0, "MCI": 1, "AD": 2}


@dataclass(frozen=True)
class Atrophy:
    roi: str
    depth_mm: float
    spread: int = 2


@dataclass
class CohortConfig:
    n_per_group: dict = field(default_factory=lambda: {"CN": 100})
    mesh_order: int = 3
    mean_map_mm: float = 2.5
    age_slope_mm_per_year: float = -0.005
    sex_effect_mm: float = 0.05
    n_latent: int = 16
    latent_scale_mm: float = 0.12
    noise_mm: float = 0.08
    site_count: int = 3
    site_offset_mm: float = 0.05
    age_min: float = 50.0
    age_max: float = 80.0
    atrophy: dict = field(default_factory=dict)  # diagnosis -> Atrophy
    smoothing_passes: int = 10
    population_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        self.atrophy = {
            k: v if isinstance(v, Atrophy) else Atrophy(**v) for k, v in self.atrophy.items()
        }
        for name in ("mean_map_mm", "sex_effect_mm", "latent_scale_mm", "noise_mm", "site_offset_mm"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.n_latent < 1:
            raise ConfigurationError("n_latent must be >= 1")
        if self.site_count < 1:
            raise ConfigurationError("site_count must be >= 1")
        if not self.age_min <= self.age_max:
            raise ConfigurationError("age_min must not exceed age_max")
        if any(n < 0 for n in self.n_per_group.values()):
            raise ConfigurationError("group sizes must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["atrophy"] = {k: asdict(v) for k, v in self.atrophy.items()}
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def ad_atrophy(roi, depth_mm, spread=2, mci_fraction=0.5):
    """Atrophy map with MCI at ``mci_fraction`` of the AD depth and CN untouched."""
    return {
        "MCI": Atrophy(roi, mci_fraction * depth_mm, spread),
        "AD": Atrophy(roi, depth_mm, spread),
    }


def load_cohort_config(path, **overrides):
    """Read a TOML cohort config; keyword overrides win over file values."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    known = set(CohortConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown cohort config keys: {sorted(unknown)}")
    return CohortConfig(**raw)


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    age: float
    sex: int
    site: int
    diagnosis: str
    thickness: np.ndarray


@dataclass(eq=False)
class Cohort:
    ids: list
    age: np.ndarray  # float64
    sex: np.ndarray  # int64 in {0, 1}
    site: np.ndarray  # int64
    diagnosis: list
    thickness: np.ndarray  # (n, p) float32
    mesh_order: int = -1
    n_parcels: int = 0
    config_hash: str = ""

    def __post_init__(self):
        self.ids = list(self.ids)
        self.diagnosis = list(self.diagnosis)
        self.age = np.asarray(self.age, dtype=np.float64).reshape(-1)
        self.sex = np.asarray(self.sex, dtype=np.int64).reshape(-1)
        self.site = np.asarray(self.site, dtype=np.int64).reshape(-1)
        self.thickness = np.asarray(self.thickness, dtype=np.float32)
        n = len(self.ids)
        if self.thickness.ndim != 2 or self.thickness.shape[0] != n:
            self.thickness = self.thickness.reshape(n, -1)
        if not (len(self.diagnosis) == self.age.size == self.sex.size == self.site.size == n):
            raise ConfigurationError("cohort metadata lengths disagree")

    def __len__(self):
        return len(self.ids)

    @property
    def p(self):
        return self.thickness.shape[1]

    def __getitem__(self, i):
        return SubjectRecord(
            self.ids[i], float(self.age[i]), int(self.sex[i]), int(self.site[i]),
            self.diagnosis[i], self.thickness[i],
        )

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Cohort(
            ids=[self.ids[i] for i in index],
            age=self.age[index],
            sex=self.sex[index],
            site=self.site[index],
            diagnosis=[self.diagnosis[i] for i in index],
            thickness=self.thickness[index],
            mesh_order=self.mesh_order,
            n_parcels=self.n_parcels,
            config_hash=self.config_hash,
        )

    def select(self, diagnosis):
        return self.subset([i for i, d in enumerate(self.diagnosis) if d == diagnosis])

    def index_of(self, subject_id):
        try:
            return self.ids.index(subject_id)
        except ValueError:
            raise ConfigurationError(f"unknown subject id {subject_id!r}") from None


class PopulationModel:
    """Fixed population-level structure shared by every cohort drawn with one config.

    Loadings and site offsets depend only on ``population_seed`` so that
    independently seeded training and test cohorts come from one population.
    """

    def __init__(self, cfg, mesh, parcellation):
        self.cfg = cfg
        self.p = mesh.n_vertices
        rng = np.random.default_rng([cfg.population_seed, 0x5C5A])
        fields_ = rng.standard_normal((self.p, cfg.n_latent))
        fields_ = mesh.smooth(fields_, passes=cfg.smoothing_passes)
        rms = np.sqrt(np.mean(fields_ ** 2, axis=0))
        rms[rms == 0] = 1.0
        # unit RMS per mode, then sum of squared loadings averages to 1 per vertex
        self.loadings = fields_ / rms / np.sqrt(cfg.n_latent) * cfg.latent_scale_mm
        offsets = rng.standard_normal(cfg.site_count) * cfg.site_offset_mm
        self.site_offsets = offsets - offsets.mean()
        self.atrophy_profiles = {}
        for diag, spec in cfg.atrophy.items():
            if spec.roi not in parcellation.roi_sets:
                raise ConfigurationError(f"atrophy ROI {spec.roi!r} is not defined in the parcellation")
            roi = parcellation.roi_mask(spec.roi)
            profile = np.zeros(self.p)
            if roi.any() and spec.depth_mm != 0.0:
                dist = mesh.hop_distance(np.flatnonzero(roi))
                weight = np.clip(1.0 - dist / (spec.spread + 1.0), 0.0, 1.0)
                profile = spec.depth_mm * weight
            self.atrophy_profiles[diag] = profile

    def draw_subject(self, seed, index, diagnosis):
        """Draw one subject; the random stream depends on (seed, index) only."""
        cfg = self.cfg
        rng = np.random.default_rng([seed, index])
        age = rng.uniform(cfg.age_min, cfg.age_max)
        sex = int(rng.integers(2))
        site = int(rng.integers(cfg.site_count))
        z = rng.standard_normal(cfg.n_latent)
        eps = rng.standard_normal(self.p) * cfg.noise_mm
        y = (
            cfg.mean_map_mm
            + cfg.age_slope_mm_per_year * (age - 65.0)
            + cfg.sex_effect_mm * (sex - 0.5)
            + self.site_offsets[site]
            + self.loadings @ z
            + eps
        )
        if diagnosis in self.atrophy_profiles:
            y = y - self.atrophy_profiles[diagnosis]
        y = np.clip(y, THICKNESS_MIN, THICKNESS_MAX)
        return age, sex, site, y.astype(np.float32)


def synth_cohort(cfg, mesh, parcellation):
    if mesh.order != cfg.mesh_order:
        raise ConfigurationError(f"mesh order {mesh.order} does not match config mesh_order {cfg.mesh_order}")
    pop = PopulationModel(cfg, mesh, parcellation)
    ids, ages, sexes, sites, diags, rows = [], [], [], [], [], []
    index = 0
    for diag, count in cfg.n_per_group.items():
        for _ in range(int(count)):
            age, sex, site, y = pop.draw_subject(cfg.seed, index, diag)
            ids.append(f"sub-{cfg.seed}-{index:06d}")
            ages.append(age)
            sexes.append(sex)
            sites.append(site)
            diags.append(diag)
            rows.append(y)
            index += 1
    thickness = np.stack(rows) if rows else np.zeros((0, pop.p), dtype=np.float32)
    return Cohort(
        ids=ids, age=ages, sex=sexes, site=sites, diagnosis=diags, thickness=thickness,
        mesh_order=mesh.order, n_parcels=parcellation.k, config_hash=cfg.digest(),
    )


def split_cohort(cohort, fractions, seed):
    """Stratified (by diagnosis) train/val/test split.

    Per stratum, counts follow largest-remainder rounding of ``fractions``.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    if len(cohort) == 0:
        raise InsufficientDataError("cannot split an empty cohort")
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    for diag in sorted(set(cohort.diagnosis), key=lambda d: (ORDINAL.get(d, 99), d)):
        members = np.array([i for i, d in enumerate(cohort.diagnosis) if d == diag])
        members = members[rng.permutation(members.size)]
        counts = _largest_remainder(members.size, fractions)
        start = 0
        for j, c in enumerate(counts):
            parts[j].extend(members[start:start + c].tolist())
            start += c
    for j, f in enumerate(fractions):
        if f > 0 and not parts[j]:
            raise SplitError(f"split {j} has fraction {f} but received no subjects")
    return tuple(cohort.subset(sorted(p)) for p in parts)


def _largest_remainder(n, fractions):
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r + 1e-9)) for r in raw]
    rest = n - sum(counts)
    order = sorted(range(3), key=lambda j: (-(raw[j] - counts[j]), j))
    for j in order[:rest]:
        counts[j] += 1
    return counts
