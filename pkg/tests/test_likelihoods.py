import math

import numpy as np
import pytest
from scipy import stats

from gcstar.errors import DomainError
from gcstar.likelihoods import (ObsModel, gaussian_loglik_eta, gc_loglik_eta,
                                genpoisson_loglik_eta, negbin_loglik_eta, poisson_loglik_eta)


def richardson_d1(f, x, h=1e-3):
    d = lambda h: (f(x + h) - f(x - h)) / (2 * h)
    return (4 * d(h / 2) - d(h)) / 3


def richardson_d2(f, x, h=1e-2):
    d = lambda h: (f(x + h) - 2 * f(x) + f(x - h)) / h ** 2
    return (4 * d(h / 2) - d(h)) / 3


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1.0)


def _random_points(kind, rng, n=100):
    y = rng.integers(0, 25, n)
    eta = rng.uniform(-1.5, 2.5, n)
    if kind == "gc":
        hyper = rng.uniform(0.3, 2.5, n)
    elif kind == "negbin":
        hyper = rng.uniform(0.5, 20, n)
    elif kind == "genpoisson":
        hyper = rng.uniform(0.01, 0.6, n)
    else:
        hyper = np.full(n, np.nan)
    return y, eta, hyper


FUNCS = {
    "gc": lambda y, e, h: gc_loglik_eta(y, e, h, clamp=False),
    "poisson": lambda y, e, h: poisson_loglik_eta(y, e, clamp=False),
    "negbin": lambda y, e, h: negbin_loglik_eta(y, e, h, clamp=False),
    "genpoisson": lambda y, e, h: genpoisson_loglik_eta(y, e, h, clamp=False),
}


@pytest.mark.parametrize("kind", sorted(FUNCS))
def test_derivatives_against_finite_differences(kind, rng):
    fn = FUNCS[kind]
    for y, eta, h in zip(*_random_points(kind, rng)):
        f = lambda e: float(fn(y, e, h).loglik)
        out = fn(y, eta, h)
        assert rel_err(float(out.d1), richardson_d1(f, eta)) < 1e-6
        assert rel_err(float(out.d2), richardson_d2(f, eta)) < 1e-4


def test_gc_poisson_reduction_exact():
    y = np.arange(31)
    for eta in (-1.0, 0.3, 2.0):
        a = gc_loglik_eta(y, eta, 1.0, clamp=False)
        b = poisson_loglik_eta(y, eta, clamp=False)
        np.testing.assert_allclose(a.loglik, b.loglik, atol=1e-12, rtol=0)
        np.testing.assert_allclose(a.d1, b.d1, atol=1e-9)
        np.testing.assert_allclose(a.d2, b.d2, atol=1e-8)


def test_gc_spec_example():
    out = gc_loglik_eta(3, math.log(2), 1.0)
    assert float(out.loglik) == pytest.approx(math.log(8 * math.exp(-2) / 6), rel=1e-12)
    assert float(out.d1) == pytest.approx(1.0, rel=1e-9)
    assert float(out.d2) == pytest.approx(-2.0, rel=1e-8)


def test_poisson_examples():
    out = poisson_loglik_eta(0, 0.0)
    assert (float(out.loglik), float(out.d1), float(out.d2)) == pytest.approx((-1, -1, -1))
    assert float(poisson_loglik_eta(4, math.log(4)).d1) == pytest.approx(0.0, abs=1e-14)


def test_negbin_limits_and_normalization():
    y = np.arange(20)
    a = negbin_loglik_eta(y, 0.7, 1e8).loglik
    b = poisson_loglik_eta(y, 0.7).loglik
    np.testing.assert_allclose(a, b, atol=1e-6)
    ll = negbin_loglik_eta(np.arange(2000), 0.0, 2.0).loglik
    assert np.exp(ll).sum() == pytest.approx(1.0, abs=1e-10)
    mu, size = 3.0, 2.0
    ref = stats.nbinom.logpmf(y, size, size / (size + mu))
    np.testing.assert_allclose(negbin_loglik_eta(y, math.log(mu), size).loglik, ref, rtol=1e-12)
    with pytest.raises(DomainError):
        negbin_loglik_eta(1, 0.0, 0.0)


def test_genpoisson_limits_and_normalization():
    y = np.arange(25)
    a = genpoisson_loglik_eta(y, 0.5, 1e-8).loglik
    np.testing.assert_allclose(a, poisson_loglik_eta(y, 0.5).loglik, atol=1e-6)
    ll = genpoisson_loglik_eta(np.arange(400), 0.5, 0.2).loglik
    total = np.exp(ll).sum()
    assert total == pytest.approx(1.0, abs=1e-6)
    mean = (np.arange(400) * np.exp(ll)).sum()
    assert mean == pytest.approx(math.exp(0.5), rel=1e-6)


def test_clamp_flags_convexity():
    # very small alpha with y far from the mean gives a locally convex log-pmf
    raw = gc_loglik_eta(np.arange(40), 0.0, 0.05, clamp=False)
    clamped = gc_loglik_eta(np.arange(40), 0.0, 0.05)
    assert np.all(clamped.d2 <= -1e-10)
    np.testing.assert_array_equal(clamped.d2[raw.d2 <= -1e-10], raw.d2[raw.d2 <= -1e-10])


def test_gaussian_model():
    out = gaussian_loglik_eta(np.array([1.0, 2.0]), np.array([0.5, 2.5]), 4.0)
    ref = stats.norm.logpdf([1.0, 2.0], [0.5, 2.5], 0.5)
    np.testing.assert_allclose(out.loglik, ref, rtol=1e-13)
    np.testing.assert_allclose(out.d2, -4.0)


def test_obs_model_validation_and_scales():
    with pytest.raises(DomainError):
        ObsModel("gc")
    with pytest.raises(DomainError):
        ObsModel("genpoisson", 1.2)
    with pytest.raises(DomainError):
        ObsModel("zip", 1.0)
    m = ObsModel("genpoisson", 0.3)
    assert ObsModel.from_internal("genpoisson", ObsModel.to_internal("genpoisson", 0.3)) == pytest.approx(0.3)
    assert m.with_internal(0.0).hyper == pytest.approx(0.5)
    assert ObsModel("poisson").hyper_name is None


@pytest.mark.parametrize("model", [ObsModel("gc", 0.6), ObsModel("negbin", 3.0),
                                   ObsModel("genpoisson", 0.25), ObsModel("poisson")])
def test_obs_model_sampler_mean(model, rng):
    eta = np.full(100_000, 0.8)
    y = model.sample(eta, rng)
    if model.kind == "gc":
        from gcstar.gammacount import GCParams, mean
        target = mean(GCParams(0.6, 0.6 * math.exp(0.8)))
    else:
        target = math.exp(0.8)
    assert y.mean() == pytest.approx(target, abs=4 * y.std() / math.sqrt(len(y)))
