import json

import numpy as np
import pytest

from scsr.baselines import (
    BlrModel, GamlssModel, PopRefModel, blr_fit, gam_fit, gamlss_design, gamlss_fit, model_from_dict,
    popref_fit, popref_z,
)
from scsr.cohort import Cohort
from scsr.errors import ConvergenceError, InsufficientDataError, ValidationError, VersionError


def cohort_of(x, age, sex=None):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    sex = np.zeros(n) if sex is None else sex
    return Cohort([f"s{i}" for i in range(n)], np.asarray(age, float), np.asarray(sex, float), np.zeros(n),
                  ["CN"] * n, x)


def covariates(n, seed):
    rng = np.random.default_rng(seed)
    return rng, rng.uniform(50, 80, n), rng.integers(0, 2, n).astype(float)


# ---------------------------------------------------------------- Pop-Ref


def test_popref_two_subjects():
    model = popref_fit(cohort_of([2.0, 4.0], [60.0, 61.0]))
    assert model.n_brackets == 1
    assert model.mean[0, 0] == 3.0 and model.std[0, 0] == 1.0


def test_popref_constant_cohort_floored():
    model = popref_fit(cohort_of(np.full((6, 3), 2.5), np.linspace(50, 54, 6)))
    assert np.all(model.std == 1e-6)


def test_popref_bracket_count():
    age = np.repeat(np.arange(50.0, 80.0, 1.0), 2)
    model = popref_fit(cohort_of(np.ones(age.size), age))
    assert model.n_brackets == 6 and model.edges[0] == 50.0 and model.edges[-1] == 80.0


def test_popref_z_and_edges():
    rng = np.random.default_rng(0)
    age = np.repeat([52.0, 57.0], 10)
    x = rng.normal(2.5, 0.2, (20, 4))
    model = popref_fit(cohort_of(x, age))
    z, clamped = popref_z(model, model.mean[1], 57.0)
    assert np.all(z == 0) and not clamped
    z, _ = popref_z(model, model.mean[0] + model.std[0], 52.0)
    assert np.allclose(z, 1.0)
    assert model.bracket_of(55.0) == (1, False)  # edges belong to the bracket on their right
    assert model.bracket_of(40.0) == (0, True)
    assert model.bracket_of(90.0) == (1, True)


def test_popref_merges_sparse_bracket():
    age = np.r_[np.full(5, 51.0), [56.0], np.full(5, 61.0)]
    model = popref_fit(cohort_of(np.ones(age.size), age))
    assert np.all(model.counts >= 2) and model.counts.sum() == 11


def test_popref_vertex_locality():
    rng = np.random.default_rng(1)
    model = popref_fit(cohort_of(rng.normal(size=(10, 5)), np.full(10, 60.0)))
    y = rng.normal(size=5)
    z0, _ = model.z(y, 60.0)
    y[2] += 1.0
    z1, _ = model.z(y, 60.0)
    assert np.flatnonzero(z0 != z1).tolist() == [2]


def test_popref_empty():
    with pytest.raises(InsufficientDataError):
        popref_fit(cohort_of(np.zeros((0, 2)), []))


# ---------------------------------------------------------------- GAM


def test_gam_linear_zero_noise():
    _, age, sex = covariates(200, 2)
    y = 3.0 - 0.01 * age + 0.05 * sex
    model = gam_fit(y, age, sex)
    assert np.abs(y[:, None] - model.predict(age, sex)).max() < 1e-8
    # residual std sits at its 1e-6 floor, so residuals below 1e-8 give |z| below 0.01
    assert np.abs(model.z(y, age, sex)).max() < 1e-2
    assert not model.regularized


def test_gam_permutation_invariant():
    rng, age, sex = covariates(300, 3)
    y = 2.5 + 0.1 * np.sin(age / 7) + rng.normal(0, 0.05, 300)
    perm = rng.permutation(300)
    a, b = gam_fit(y, age, sex), gam_fit(y[perm], age[perm], sex[perm])
    assert np.allclose(a.coef, b.coef, rtol=0, atol=1e-10)


def test_gam_sex_effect_recovery():
    rng, age, sex = covariates(2000, 4)
    y = 2.8 - 0.008 * (age - 65) - 1e-4 * (age - 65) ** 2 + 0.05 * sex + rng.normal(0, 0.1, 2000)
    model = gam_fit(y, age, sex)
    assert abs(model.sex_effect[0] - 0.05) < 0.01


def test_gam_rank_deficient_flagged():
    age = np.full(20, 60.0)
    model = gam_fit(np.linspace(2, 3, 20), age, np.zeros(20))
    assert model.regularized


# ---------------------------------------------------------------- GAMLSS


def simulate_gamlss(alpha, beta, n, seed):
    rng, age, sex = covariates(n, seed)
    xm, xs = gamlss_design(age, sex)
    y = np.exp(xm @ alpha) + np.exp(xs @ beta) * rng.normal(size=n)
    return y, age, sex


def test_gamlss_recovery():
    alpha, beta = np.array([0.9, 0, 0, 0.02]), np.array([-2.0, 0, 0, 0])
    model = gamlss_fit(*simulate_gamlss(alpha, beta, 5000, 5))
    assert np.abs(model.alpha[:, 0] - alpha).max() < 0.05
    assert np.abs(model.beta[:, 0] - beta).max() < 0.05
    assert abs(model.beta[1, 0]) < 0.05 and abs(model.beta[2, 0]) < 0.05


def test_gamlss_z_at_mean_and_sigma_positive():
    alpha, beta = np.array([0.9, 0, 0, 0.02]), np.array([-2.0, 0, 0, 0])
    model = gamlss_fit(*simulate_gamlss(alpha, beta, 2000, 6))
    mu, _ = model.mu_sigma(63.0, 1.0)
    assert abs(model.z(mu[0], 63.0, 1.0)[0]) < 1e-12
    _, sigma = model.mu_sigma(np.arange(18.0, 101.0), np.zeros(83))
    assert np.all(sigma > 0)


def test_gamlss_non_convergence_carries_iterate():
    alpha, beta = np.array([0.9, 0, 0, 0.02]), np.array([-2.0, 0, 0, 0])
    y, age, sex = simulate_gamlss(alpha, beta, 500, 7)
    with pytest.raises(ConvergenceError) as info:
        gamlss_fit(y, age, sex, iters=1, tol=1e-12)
    assert isinstance(info.value.last_iterate, GamlssModel)


# ---------------------------------------------------------------- BLR


def test_blr_zero_noise_linear():
    _, age, sex = covariates(300, 8)
    y = 3.0 - 0.01 * age + 0.05 * sex
    model = blr_fit(y, age, sex)
    mu, _ = model.predict(age, sex)
    assert np.abs(mu[:, 0] - y).max() < 1e-6


def test_blr_extrapolation_variance():
    rng, age, sex = covariates(400, 9)
    model = blr_fit(2.5 + rng.normal(0, 0.1, 400), age, sex)
    _, v_mid = model.predict(age.mean(), 0.0)
    _, v_far = model.predict(140.0, 0.0)
    assert v_far[0, 0] > v_mid[0, 0]
    for c in model.cov:
        assert np.allclose(c, c.T) and np.all(np.linalg.eigvalsh(c) > 0)


def test_blr_noise_recovery():
    rng, age, sex = covariates(2000, 10)
    y = 2.7 - 0.01 * (age - 65) + 0.04 * sex + rng.normal(0, 0.1, 2000)
    model = blr_fit(y, age, sex)
    assert abs(model.noise_var[0] / 0.01 - 1) < 0.1


# ---------------------------------------------------------------- shared


def test_training_calibration():
    rng, age, sex = covariates(3000, 11)
    y = 2.6 - 0.006 * (age - 65) + 0.03 * sex + rng.normal(0, 0.12, 3000)
    fits = {
        "gam": gam_fit(y, age, sex),
        "gamlss": gamlss_fit(y, age, sex),
        "blr": blr_fit(y, age, sex),
    }
    for name, model in fits.items():
        z = model.z(y, age, sex)[:, 0]
        assert abs(z.mean()) < 0.1 and 0.8 <= z.std() <= 1.2, name
    x = 2.5 + rng.normal(0, 0.1, (3000, 8))
    pop = popref_fit(cohort_of(x, age))
    z = np.stack([pop.z(x[i], age[i])[0] for i in range(3000)])
    assert np.abs(z.mean(0)).max() < 0.1
    assert np.all((z.std(0) >= 0.8) & (z.std(0) <= 1.2))


def test_json_round_trip():
    rng, age, sex = covariates(200, 12)
    y = 2.5 + rng.normal(0, 0.1, (200, 2))
    models = [
        popref_fit(cohort_of(y, age)), gam_fit(y, age, sex), gamlss_fit(y, age, sex, iters=20000), blr_fit(y, age, sex),
    ]
    for model in models:
        back = model_from_dict(json.loads(json.dumps(model.to_dict())))
        assert type(back) is type(model)
        if isinstance(model, PopRefModel):
            assert np.array_equal(back.z(y[0], age[0])[0], model.z(y[0], age[0])[0])
        else:
            assert np.array_equal(back.z(y[:5], age[:5], sex[:5]), model.z(y[:5], age[:5], sex[:5]))


def test_model_from_dict_errors():
    d = blr_fit(np.linspace(2, 3, 30), np.linspace(50, 80, 30), np.zeros(30)).to_dict()
    assert isinstance(model_from_dict(d), BlrModel)
    with pytest.raises(VersionError):
        model_from_dict({**d, "format_version": 99})
    with pytest.raises(ValidationError):
        model_from_dict({**d, "kind": "nope"})
