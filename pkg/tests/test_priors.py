import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from gcstar.errors import DomainError
from gcstar.priors import (PcAlphaPrior, PcPrecisionPrior, PriorConfig, gaussian_fixed_log_density,
                           log_prior_lik_hyper, log_prior_log_alpha, log_prior_log_precision,
                           pc_alpha_distance, pc_alpha_jacobian_at_base, pc_alpha_log_density,
                           pc_precision_log_density)
from gcstar.special import digamma, trigamma


@pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
def test_pc_alpha_proper(lam):
    f = lambda a: math.exp(pc_alpha_log_density(a, PcAlphaPrior(lam)))
    left = integrate.quad(f, 0, 1, limit=200, epsabs=1e-12)[0]
    right = integrate.quad(f, 1, np.inf, limit=200, epsabs=1e-12)[0]
    assert left + right == pytest.approx(1.0, abs=1e-4)
    assert left == pytest.approx(0.5, abs=1e-4)


def test_pc_alpha_distance_exponential():
    # P(d(alpha) > d0) = exp(-lambda d0) on the alpha > 1 branch (mass 1/2) plus the other branch
    from scipy.optimize import brentq
    lam, d0 = 1.3, 0.8
    hi = brentq(lambda a: pc_alpha_distance(a) - d0, 1.0001, 50)
    lo = brentq(lambda a: pc_alpha_distance(a) - d0, 1e-4, 0.9999)
    f = lambda a: math.exp(pc_alpha_log_density(a, PcAlphaPrior(lam)))
    tail = integrate.quad(f, hi, np.inf)[0] + integrate.quad(f, 0, lo)[0]
    assert tail == pytest.approx(math.exp(-lam * d0), rel=1e-7)


def test_pc_alpha_distance_definition():
    assert pc_alpha_distance(1.0) == 0.0
    for a in (0.3, 0.9, 1.2, 4.0):
        ref = math.sqrt(-2 * math.lgamma(a) + 2 * (a - 1) * float(digamma(a)))
        assert pc_alpha_distance(a) == pytest.approx(ref, rel=1e-10)


def test_pc_alpha_continuous_at_base():
    lam = 1.0
    base = math.log(lam / 2) + math.log(pc_alpha_jacobian_at_base())
    assert pc_alpha_jacobian_at_base() == pytest.approx(math.sqrt(float(trigamma(1.0))), rel=1e-14)
    assert pc_alpha_log_density(1.0) == pytest.approx(base, abs=1e-12)
    for eps in (1e-4, 1e-6, -1e-4, -1e-6):
        assert pc_alpha_log_density(1.0 + eps) == pytest.approx(base, abs=1e-3 * abs(eps) * 1e4 + 1e-6)


def test_pc_alpha_scalar_and_vector_agree():
    a = np.array([0.2, 0.7, 0.999999, 1.0, 1.000001, 1.5, 6.0])
    vec = pc_alpha_log_density(a)
    sca = np.array([pc_alpha_log_density(float(x)) for x in a])
    np.testing.assert_allclose(vec, sca, rtol=1e-12)
    z = np.log(a)
    np.testing.assert_allclose(log_prior_log_alpha(z), vec + z, rtol=1e-12)


def test_pc_precision_prior():
    p = PcPrecisionPrior(1.0, 0.01)
    assert p.rate == pytest.approx(4.60517018599, rel=1e-10)
    f = lambda t: math.exp(pc_precision_log_density(t, p))
    mass = integrate.quad(f, 0, 1, limit=200)[0] + integrate.quad(f, 1, np.inf, limit=200)[0]
    assert mass == pytest.approx(1.0, abs=1e-6)
    # sigma > 1 <=> tau < 1
    assert integrate.quad(f, 0, 1, limit=200, epsabs=1e-14)[0] == pytest.approx(0.01, rel=1e-8)


@given(st.floats(-8, 8))
def test_log_precision_change_of_variables(z):
    p = PcPrecisionPrior(0.5, 0.05)
    assert log_prior_log_precision(z, p) == pytest.approx(
        pc_precision_log_density(math.exp(z), p) + z, rel=1e-10, abs=1e-10)


def test_gaussian_fixed():
    assert gaussian_fixed_log_density(0.0) == pytest.approx(-0.5 * math.log(200 * math.pi))
    assert gaussian_fixed_log_density(10.0) == pytest.approx(-0.5 * math.log(200 * math.pi) - 0.5)
    assert gaussian_fixed_log_density(-3.3) == gaussian_fixed_log_density(3.3)


def test_domain_errors():
    with pytest.raises(DomainError):
        pc_alpha_log_density(0.0)
    with pytest.raises(DomainError):
        pc_precision_log_density(-1.0)
    with pytest.raises(DomainError):
        PcAlphaPrior(0.0)
    with pytest.raises(DomainError):
        PcPrecisionPrior(1.0, 1.0)


def test_prior_config_round_trip():
    cfg = PriorConfig(alpha=PcAlphaPrior(2.0), fixed_variance=50.0)
    assert PriorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(Exception):
        PriorConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize("kind", ["gc", "negbin", "genpoisson", "gaussian"])
def test_lik_hyper_priors_are_proper(kind):
    f = lambda z: math.exp(log_prior_lik_hyper(kind, z))
    mass = integrate.quad(f, -40, 40, limit=400, points=[0.0])[0]
    assert mass == pytest.approx(1.0, abs=1e-6)
