"""Classical normative reference models.

``PopRef`` works per vertex with age brackets. ``Gam``, ``Gamlss`` and
``Blr`` work on parcel means with age and sex as covariates. Every model
exposes ``z(...)`` and round-trips through ``to_dict``/``from_dict``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import solve_triangular

from .errors import ConvergenceError, InsufficientDataError, ShapeError, ValidationError, VersionError

FORMAT_VERSION = 1
STD_FLOOR = 1e-6


def _arr(x):
    return np.asarray(x, dtype=np.float64)


def _align(values, mu):
    """Match ``values`` to the (n, K) prediction grid; 1-d input of length n means K=1."""
    values = _arr(values)
    if values.ndim == 1 and mu.shape[1] == 1 and values.size == mu.shape[0] != 1:
        values = values[:, None]
    return values


# ---------------------------------------------------------------- Pop-Ref


@dataclass(eq=False)
class PopRefModel:
    width: float
    edges: np.ndarray  # (B + 1,)
    mean: np.ndarray  # (B, p)
    std: np.ndarray  # (B, p)
    counts: np.ndarray  # (B,)

    kind = "popref"

    @property
    def n_brackets(self):
        return self.edges.size - 1

    def bracket_of(self, age):
        """Index of the right-open bracket holding ``age``, and whether it was clamped."""
        b = int(np.searchsorted(self.edges, age, side="right")) - 1
        if b < 0:
            return 0, True
        if b >= self.n_brackets:
            return self.n_brackets - 1, True
        return b, False

    def z(self, thickness, age):
        b, clamped = self.bracket_of(age)
        return (_arr(thickness) - self.mean[b]) / self.std[b], clamped

    def reference(self, age):
        b, _ = self.bracket_of(age)
        return self.mean[b], self.std[b]

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION, "kind": self.kind, "width": self.width,
            "edges": self.edges.tolist(), "mean": self.mean.tolist(), "std": self.std.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["width"], _arr(d["edges"]), _arr(d["mean"]), _arr(d["std"]), np.asarray(d["counts"]))


def popref_fit(train, width_years=5.0, min_count=2):
    """Age brackets ``[lo, lo + w)`` covering the training ages.

    Brackets with fewer than ``min_count`` subjects are merged into a
    neighbour (the right one when it exists).
    """
    n = len(train)
    if n == 0:
        raise InsufficientDataError("Pop-Ref needs training subjects")
    if n < min_count:
        raise InsufficientDataError(f"Pop-Ref needs at least {min_count} subjects")
    age = train.age
    lo = math.floor(age.min() / width_years) * width_years
    hi = (math.floor(age.max() / width_years) + 1) * width_years
    edges = list(np.arange(lo, hi + width_years / 2, width_years))
    while True:
        counts = np.histogram(age, bins=edges)[0] if len(edges) > 2 else np.array([n])
        small = np.flatnonzero(counts < min_count)
        if not small.size or len(edges) <= 2:
            break
        b = int(small[0])
        # drop the boundary shared with the neighbour we merge into
        del edges[b + 1 if b + 1 < len(edges) - 1 else b]
    edges = np.array(edges, dtype=np.float64)
    x = train.thickness.astype(np.float64)
    which = np.clip(np.searchsorted(edges, age, side="right") - 1, 0, edges.size - 2)
    nb = edges.size - 1
    mean = np.zeros((nb, x.shape[1]))
    std = np.zeros((nb, x.shape[1]))
    counts = np.zeros(nb, dtype=np.int64)
    for b in range(nb):
        rows = x[which == b]
        counts[b] = rows.shape[0]
        mean[b] = rows.mean(axis=0)
        std[b] = np.maximum(rows.std(axis=0), STD_FLOOR)
    return PopRefModel(float(width_years), edges, mean, std, counts)


def popref_z(model, thickness, age):
    return model.z(thickness, age)


# ---------------------------------------------------------------- GAM


def natural_spline_basis(x, knots):
    """Natural cubic spline basis without the constant column.

    Columns are ``x`` and the ``K - 2`` truncated-power differences; ``x`` is
    first mapped to [0, 1] over the knot range for conditioning.
    """
    x = _arr(x)
    k = _arr(knots)
    lo, hi = k[0], k[-1]
    span = hi - lo if hi > lo else 1.0
    xs = (x - lo) / span
    ks = (k - lo) / span

    def d(j):
        return (np.maximum(xs - ks[j], 0) ** 3 - np.maximum(xs - ks[-1], 0) ** 3) / (ks[-1] - ks[j])

    cols = [xs]
    for j in range(k.size - 2):
        cols.append(d(j) - d(k.size - 2))
    return np.stack(cols, axis=1)


@dataclass(eq=False)
class GamModel:
    knots: np.ndarray
    coef: np.ndarray  # (n_cols, K): intercept, spline columns, sex
    resid_std: np.ndarray  # (K,)
    regularized: bool = False

    kind = "gam"

    def design(self, age, sex):
        age = np.atleast_1d(_arr(age))
        sex = np.atleast_1d(_arr(sex))
        return np.column_stack([np.ones(age.size), natural_spline_basis(age, self.knots), sex])

    @property
    def sex_effect(self):
        return self.coef[-1]

    def predict(self, age, sex):
        return self.design(age, sex) @ self.coef

    def z(self, parcel_values, age, sex):
        mu = self.predict(age, sex)
        out = (_align(parcel_values, mu) - mu) / self.resid_std
        return out[0] if np.ndim(age) == 0 else out

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION, "kind": self.kind, "knots": self.knots.tolist(),
            "coef": self.coef.tolist(), "resid_std": self.resid_std.tolist(), "regularized": self.regularized,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(_arr(d["knots"]), _arr(d["coef"]), _arr(d["resid_std"]), bool(d["regularized"]))


def gam_fit(values, age, sex, n_interior=5):
    """Least-squares regression spline in age plus sex and intercept.

    Knots sit at age quantiles (boundary knots at min and max). A
    rank-deficient design falls back to a 1e-8 ridge solve and is flagged.
    """
    y = _arr(values)
    if y.ndim == 1:
        y = y[:, None]
    age, sex = _arr(age), _arr(sex)
    n = y.shape[0]
    if age.size != n or sex.size != n:
        raise ShapeError("values, age and sex must have equal lengths")
    if n < n_interior + 2 + 3:
        raise InsufficientDataError(f"GAM needs at least {n_interior + 5} subjects")
    knots = np.unique(np.quantile(age, np.linspace(0.0, 1.0, n_interior + 2)))
    model = GamModel(knots, None, None)
    x = model.design(age, sex)
    rank = np.linalg.matrix_rank(x)
    if rank < x.shape[1]:
        model.regularized = True
        coef = np.linalg.solve(x.T @ x + 1e-8 * np.eye(x.shape[1]), x.T @ y)
    else:
        coef = np.linalg.lstsq(x, y, rcond=None)[0]
    resid = y - x @ coef
    dof = max(n - x.shape[1], 1)
    model.coef = coef
    model.resid_std = np.maximum(np.sqrt((resid ** 2).sum(axis=0) / dof), STD_FLOOR)
    return model


def gam_z(model, parcel_values, age, sex):
    return model.z(parcel_values, age, sex)


# ---------------------------------------------------------------- GAMLSS


def gamlss_design(age, sex):
    """Covariates of log(mu) and log(sigma); age in years, used as given."""
    a = np.atleast_1d(_arr(age))
    s = np.atleast_1d(_arr(sex))
    if np.any(a <= 0):
        raise ShapeError("GAMLSS ages must be positive")
    xm = np.column_stack([np.ones_like(a), a ** -2, a ** -2 * np.log(a), s])
    xs = np.column_stack([np.ones_like(a), a ** -1, a ** 0.5, s])
    return xm, xs


@dataclass(eq=False)
class GamlssModel:
    alpha: np.ndarray  # (4, K)
    beta: np.ndarray  # (4, K)
    gamma0: np.ndarray  # (K,) skewness placeholder, fixed at 0
    grad_norm: np.ndarray = None

    kind = "gamlss"

    def mu_sigma(self, age, sex):
        xm, xs = gamlss_design(age, sex)
        return np.exp(xm @ self.alpha), np.exp(xs @ self.beta)

    def z(self, parcel_values, age, sex):
        mu, sigma = self.mu_sigma(age, sex)
        out = (_align(parcel_values, mu) - mu) / sigma
        return out[0] if np.ndim(age) == 0 else out

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION, "kind": self.kind, "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(), "gamma0": self.gamma0.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(_arr(d["alpha"]), _arr(d["beta"]), _arr(d["gamma0"]))


def _gamlss_loglik(y, xm, xs, alpha, beta):
    log_sigma = xs @ beta
    mu = np.exp(xm @ alpha)
    r = (y - mu) * np.exp(-log_sigma)
    return np.mean(-log_sigma - 0.5 * r * r, axis=0)


def _gamlss_grad(y, xm, xs, alpha, beta):
    mu = np.exp(xm @ alpha)
    inv_sigma = np.exp(-(xs @ beta))
    r = (y - mu) * inv_sigma
    n = y.shape[0]
    g_alpha = xm.T @ (r * inv_sigma * mu) / n
    g_beta = xs.T @ (r * r - 1.0) / n
    return g_alpha, g_beta


def gamlss_fit(values, age, sex, iters=2000, step=1e-2, tol=1e-2, max_halvings=40):
    """Gaussian location-scale fit by gradient ascent on the mean log-likelihood.

    Starts from log(mean) / log(std) intercepts with every other coefficient
    at zero; each iteration tries ``step`` and halves it until the
    likelihood does not decrease. Raises ``ConvergenceError`` (carrying the
    last iterate) when the gradient norm still exceeds ``tol``.
    """
    y = _arr(values)
    if y.ndim == 1:
        y = y[:, None]
    if np.any(y <= 0):
        raise ShapeError("GAMLSS responses must be positive")
    xm, xs = gamlss_design(age, sex)
    if xm.shape[0] != y.shape[0]:
        raise ShapeError("values, age and sex must have equal lengths")
    k = y.shape[1]
    alpha = np.zeros((4, k))
    beta = np.zeros((4, k))
    alpha[0] = np.log(y.mean(axis=0))
    beta[0] = np.log(np.maximum(y.std(axis=0), STD_FLOOR))
    ll = _gamlss_loglik(y, xm, xs, alpha, beta)
    for _ in range(iters):
        ga, gb = _gamlss_grad(y, xm, xs, alpha, beta)
        h = np.full(k, step)
        pending = np.ones(k, dtype=bool)
        new_a, new_b = alpha.copy(), beta.copy()
        for _ in range(max_halvings):
            cand_a = alpha + h * ga
            cand_b = beta + h * gb
            with np.errstate(over="ignore", invalid="ignore"):
                cand_ll = _gamlss_loglik(y, xm, xs, cand_a, cand_b)
            ok = pending & np.isfinite(cand_ll) & (cand_ll >= ll)
            new_a[:, ok] = cand_a[:, ok]
            new_b[:, ok] = cand_b[:, ok]
            ll = np.where(ok, cand_ll, ll)
            pending &= ~ok
            if not pending.any():
                break
            h = np.where(pending, h * 0.5, h)
        alpha, beta = new_a, new_b
    ga, gb = _gamlss_grad(y, xm, xs, alpha, beta)
    gnorm = np.sqrt((ga ** 2).sum(axis=0) + (gb ** 2).sum(axis=0))
    model = GamlssModel(alpha, beta, np.zeros(k), gnorm)
    if np.any(gnorm > tol):
        raise ConvergenceError(
            f"GAMLSS gradient norm {gnorm.max():.3g} exceeds {tol} after {iters} iterations",
            last_iterate=model,
        )
    return model


def gamlss_z(model, parcel_values, age, sex):
    return model.z(parcel_values, age, sex)


# ---------------------------------------------------------------- BLR


def bspline_knots(lo, hi, n_knots=5, degree=3):
    inner = np.linspace(lo, hi, n_knots)
    return np.r_[[lo] * degree, inner, [hi] * degree]


@dataclass(eq=False)
class BlrModel:
    knots: np.ndarray
    mean: np.ndarray  # (d, K) posterior means
    cov: np.ndarray  # (K, d, d) posterior covariances
    noise_var: np.ndarray  # (K,)
    prior_precision: float = 1.0

    kind = "blr"
    degree = 3

    def design(self, age, sex):
        age = np.atleast_1d(_arr(age))
        sex = np.atleast_1d(_arr(sex))
        basis = BSpline.design_matrix(age, self.knots, self.degree, extrapolate=True).toarray()
        return np.column_stack([np.ones(age.size), basis, sex])

    def predict(self, age, sex):
        """Predictive mean and variance, each (n, K)."""
        x = self.design(age, sex)
        mu = x @ self.mean
        var = self.noise_var + np.einsum("ni,kij,nj->nk", x, self.cov, x)
        return mu, var

    def z(self, parcel_values, age, sex):
        mu, var = self.predict(age, sex)
        out = (_align(parcel_values, mu) - mu) / np.sqrt(var)
        return out[0] if np.ndim(age) == 0 else out

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION, "kind": self.kind, "knots": self.knots.tolist(),
            "mean": self.mean.tolist(), "cov": self.cov.tolist(), "noise_var": self.noise_var.tolist(),
            "prior_precision": self.prior_precision,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(_arr(d["knots"]), _arr(d["mean"]), _arr(d["cov"]), _arr(d["noise_var"]),
                   float(d["prior_precision"]))


def blr_fit(values, age, sex, prior_precision=1.0, n_knots=5, max_iter=500, min_noise_var=1e-12):
    """Conjugate Gaussian BLR on a cubic B-spline age basis plus sex and intercept.

    The weight prior precision is fixed; the noise precision is set by
    evidence maximization (MacKay fixed-point updates). Posterior moments come
    from a QR factorization of the prior-augmented design, which stays
    well conditioned when the noise variance approaches zero.
    """
    y = _arr(values)
    if y.ndim == 1:
        y = y[:, None]
    age, sex = _arr(age), _arr(sex)
    n, k = y.shape
    if age.size != n or sex.size != n:
        raise ShapeError("values, age and sex must have equal lengths")
    if n < 2:
        raise InsufficientDataError("BLR needs at least 2 subjects")
    knots = bspline_knots(age.min(), age.max(), n_knots)
    model = BlrModel(knots, None, None, None, float(prior_precision))
    x = model.design(age, sex)
    d = x.shape[1]
    eig = np.linalg.svd(x, compute_uv=False) ** 2
    a = float(prior_precision)
    means = np.zeros((d, k))
    covs = np.zeros((k, d, d))
    noise = np.zeros(k)
    for j in range(k):
        yj = y[:, j]
        b = 1.0 / max(yj.var(), min_noise_var)
        for _ in range(max_iter):
            m, _ = _blr_posterior(x, yj, a, b)
            rss = float(((yj - x @ m) ** 2).sum())
            gamma = float((b * eig / (a + b * eig)).sum())
            b_new = min((n - gamma) / max(rss, 1e-300), 1.0 / min_noise_var)
            done = abs(b_new - b) <= 1e-10 * b
            b = b_new
            if done:
                break
        means[:, j], covs[j] = _blr_posterior(x, yj, a, b)
        noise[j] = 1.0 / b
    model.mean, model.cov, model.noise_var = means, covs, noise
    return model


def _blr_posterior(x, y, a, b):
    d = x.shape[1]
    aug = np.vstack([np.sqrt(b) * x, np.sqrt(a) * np.eye(d)])
    q, r = np.linalg.qr(aug)
    rhs = q.T @ np.r_[np.sqrt(b) * y, np.zeros(d)]
    mean = solve_triangular(r, rhs)
    r_inv = solve_triangular(r, np.eye(d))
    cov = r_inv @ r_inv.T
    return mean, 0.5 * (cov + cov.T)


def blr_z(model, parcel_values, age, sex):
    return model.z(parcel_values, age, sex)


# ---------------------------------------------------------------- helpers

PARCEL_MODELS = {"gam": (gam_fit, GamModel), "gamlss": (gamlss_fit, GamlssModel), "blr": (blr_fit, BlrModel)}


def fit_parcel_model(kind, cohort, parcellation, **kwargs):
    fit, _ = PARCEL_MODELS[kind]
    values = parcellation.parcel_means(cohort.thickness)
    return fit(values, cohort.age, cohort.sex, **kwargs)


def model_from_dict(d):
    if d.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported baseline format version {d.get('format_version')!r}")
    kind = d.get("kind")
    if kind == "popref":
        return PopRefModel.from_dict(d)
    if kind in PARCEL_MODELS:
        return PARCEL_MODELS[kind][1].from_dict(d)
    raise ValidationError(f"unknown baseline kind {kind!r}")
