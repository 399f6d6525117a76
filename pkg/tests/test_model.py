import json

import numpy as np
import pytest
from scipy import integrate
from scipy.special import ndtr

from gppriv.data import Dataset, synth_lupi
from gppriv.ep import EPConfig
from gppriv.exceptions import InputError
from gppriv.kernels import SEKernelParams
from gppriv.model import FitOptions, GPCModel, build_model, fit, labels_from_proba

KF = SEKernelParams(0.0, 0.0)


def gauss_quad(fn, mean, var):
    sd = np.sqrt(var)
    dens = lambda f: np.exp(-0.5 * (f - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)  # noqa: E731
    return integrate.quad(lambda f: dens(f) * fn(f), mean - 12 * sd, mean + 12 * sd,
                          epsabs=1e-12, epsrel=1e-10)[0]


@pytest.mark.parametrize("variant", ["gpc", "gpc+"])
def test_single_point_predictive_matches_quadrature(variant):
    data = Dataset(np.zeros((1, 1)), [1], np.zeros((1, 1)))
    m = build_model(data, variant, KF, KF, noise_var=0.5, ep=EPConfig(tol=1e-10))
    mu, var = m.latent_predictive(np.zeros((1, 1)))
    s2 = m.test_noise_var()
    ref = gauss_quad(lambda f: ndtr(f / np.sqrt(s2)), mu[0], var[0])
    assert m.predict_proba(np.zeros((1, 1)))[0] == pytest.approx(ref, abs=1e-4)
    # the latent predictive at the training input is the EP posterior marginal
    assert mu[0] == pytest.approx(m.state.posterior_f.mean[0], abs=1e-10)
    assert var[0] == pytest.approx(m.state.posterior_f.var[0], abs=1e-10)


@pytest.mark.parametrize("variant", ["gpc", "gpc+"])
def test_predictive_at_training_inputs_equals_posterior(variant):
    data = synth_lupi(15, seed=1)
    m = build_model(data, variant, KF, KF)
    mu, var = m.latent_predictive(data.X)
    np.testing.assert_allclose(mu, m.state.posterior_f.mean, atol=1e-8)
    np.testing.assert_allclose(var, m.state.posterior_f.var, atol=1e-8)


def test_far_away_inputs_revert_to_prior():
    data = synth_lupi(15, seed=2)
    m = build_model(data, "gpc", KF, noise_var=1.0)
    mu, var = m.latent_predictive(np.full((1, 2), 1e3))
    assert abs(mu[0]) < 1e-12 and var[0] == pytest.approx(1.0)
    assert m.predict_proba(np.full((1, 2), 1e3))[0] == pytest.approx(0.5)


def test_vanishing_g_kernel_reproduces_baseline():
    rng = np.random.default_rng(3)
    data = synth_lupi(30, seed=3)
    data = Dataset(data.X, data.y, np.ones((30, 1)))
    plus = build_model(data, "gpc+", KF, SEKernelParams(np.log(1e-10), 0.0), ep=EPConfig(tol=1e-8))
    base = build_model(data, "gpc", KF, noise_var=1.0, ep=EPConfig(tol=1e-8))
    Xt = rng.normal(size=(50, 2)) * 2
    np.testing.assert_allclose(plus.predict_proba(Xt), base.predict_proba(Xt), atol=1e-3)


def test_test_noise_modes():
    data = synth_lupi(20, seed=4)
    m = build_model(data, "gpc+", KF, KF)
    assert m.test_noise_var() == 1.0
    m.test_noise = "posterior"
    post = m.state.posterior_g
    assert m.test_noise_var() == pytest.approx(np.mean(np.exp(post.mean + 0.5 * post.var)))


def test_prediction_input_checks():
    m = build_model(synth_lupi(10, seed=5), "gpc", KF)
    with pytest.raises(InputError):
        m.predict_proba(np.zeros((2, 3)))
    assert m.predict_proba(np.zeros((0, 2))).shape == (0,)


def test_labels_from_proba_tie_goes_to_one():
    np.testing.assert_array_equal(labels_from_proba([0.2, 0.5, 0.9]), [0, 1, 1])


@pytest.mark.parametrize("variant", ["gpc", "gpc+"])
def test_serialization_roundtrip(variant, tmp_path):
    data = synth_lupi(25, seed=6)
    m = build_model(data, variant, KF, SEKernelParams(0.0, 0.5), noise_var=0.7)
    p = tmp_path / "m.json"
    m.save(p)
    back = GPCModel.load(p)
    Xt = np.random.default_rng(0).normal(size=(10, 2))
    np.testing.assert_allclose(back.predict_proba(Xt), m.predict_proba(Xt), atol=1e-12)
    assert back.to_json() == m.to_json()


def test_load_rejects_foreign_documents():
    with pytest.raises(InputError):
        GPCModel.from_dict({"format": "other"})
    d = json.loads(build_model(synth_lupi(5, seed=0), "gpc", KF).to_json())
    d["version"] = 99
    with pytest.raises(InputError):
        GPCModel.from_dict(d)


@pytest.mark.parametrize("variant", ["gpc", "gpc+"])
def test_fit_improves_evidence_and_respects_bounds(variant):
    data = synth_lupi(40, d=2, seed=7)
    m = fit(data, variant, FitOptions(max_evals=25))
    log = m.fit_log
    first = [t["log_evidence"] for t in log["trace"] if t["log_evidence"] is not None][0]
    assert m.converged and m.log_evidence >= first
    assert log["best_log_evidence"] == pytest.approx(m.log_evidence)
    assert np.all(np.diff([v for v in log["best_so_far"] if v is not None]) >= 0)
    for t in log["trace"]:
        for v, (lo, hi) in zip(t["x"], log["bounds"]):
            assert lo - 1e-12 <= v <= hi + 1e-12
    assert m.kf.amplitude == pytest.approx(1.0)
    if variant == "gpc":
        assert 1e-4 <= m.noise_var <= 1e2
    else:
        assert m.kg is not None


def test_fit_is_deterministic():
    data = synth_lupi(30, seed=8)
    a = fit(data, "gpc+", FitOptions(max_evals=15))
    b = fit(data, "gpc+", FitOptions(max_evals=15))
    assert a.to_json() == b.to_json()


def test_fit_requires_privileged_features_for_gpcplus():
    data = synth_lupi(10, seed=9)
    with pytest.raises(InputError):
        fit(Dataset(data.X, data.y), "gpc+")
    with pytest.raises(InputError):
        fit(Dataset(data.X, None), "gpc")


def test_fit_options_validation():
    with pytest.raises(InputError):
        FitOptions(restarts=0)
    with pytest.raises(InputError):
        FitOptions(test_noise="median")
    with pytest.raises(InputError):
        FitOptions(log_noise_bounds=(1.0, 0.0))
    assert FitOptions(ep={"tol": 1e-6}).ep.tol == 1e-6
