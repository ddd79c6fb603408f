"""
Tests for the theory subpackage: generator calculus, tail classification,
drift-inequality and membership certificates, and the Feynman-Kac potential.
"""

import math

import numpy as np
import pytest

from damping_lab.errors import MissingCertificateError, ModelSpecError
from damping_lab.model import (
    OU, Affine, Constant, DampingTerm, GradientForm, Hinge, MatrixModel, Power, ScalarModel, Tabulated,
    contraction_certificate, damping_profile,
)
from damping_lab.theory import (
    NOT_CLASSIFIABLE, GeneratorFn, apply_generator, carre_du_champ, check_Am, classify, classify_matrix,
    compose, gamma_integral_oracle, moment_upper_threshold, search_eta, spekf_exact_threshold,
    surrogate_moment, theta_feynman_kac, theta_residual, verify_drift_inequality,
)
from damping_lab.theory.certificates import ETA_LOWER, THETA_UPPER
from damping_lab.theory.classify import intermediate_level
from damping_lab.theory.generator import linear, power_norm, squared_norm, surrogate_moment_fn

STEP = 1e-5


def numeric_gradient_x(f, x, u):
    """Central differences in x for a function of a scalar x."""
    return (f(x + STEP, u) - f(x - STEP, u)) / (2 * STEP)


# ---------------------------------------------------------------------------
# Generator calculus
# ---------------------------------------------------------------------------

def test_gamma_integral_oracle():
    assert gamma_integral_oracle(5, 1, 1) == pytest.approx(math.log(120.0))
    assert gamma_integral_oracle(0, 2, 1) == pytest.approx(math.log(math.sqrt(math.pi) / 2.0))
    with pytest.raises(ModelSpecError):
        gamma_integral_oracle(1, 0, 1)


def test_carre_du_champ_symmetric_and_nonnegative():
    x = np.linspace(-2.0, 2.0, 9)[:, None]
    u = np.linspace(-1.0, 1.0, 9)[:, None]
    f = linear([1.0], [2.0])
    g = squared_norm('x', scale=0.5)
    np.testing.assert_allclose(carre_du_champ(f, f, x, u), 2.5)
    np.testing.assert_allclose(carre_du_champ(f, g, x, u), carre_du_champ(g, f, x, u))
    assert np.all(carre_du_champ(g, g, x, u, sigma_x=0.3) >= 0)
    np.testing.assert_allclose(carre_du_champ(g, g, x, u, sigma_x=2.0), 2.0 * x[:, 0] ** 2)


def test_generator_on_quadratics(ou2):
    x = np.linspace(-2.0, 2.0, 5)[:, None]
    u = np.linspace(-1.0, 1.0, 5)[:, None]
    model = ScalarModel(Constant(1.0), ou2)
    np.testing.assert_allclose(apply_generator(squared_norm('x'), model, x, u), -2.0 * x[:, 0] ** 2 + 1.0)
    np.testing.assert_allclose(apply_generator(squared_norm('u'), model, x, u), -4.0 * u[:, 0] ** 2 + 1.0)
    hinge = ScalarModel(Hinge(1.0, 1.0, 1.0), ou2, sigma_x=0.5)
    expected = -2.0 * Hinge(1.0, 1.0, 1.0)(u) * x[:, 0] ** 2 + 0.25
    np.testing.assert_allclose(apply_generator(squared_norm('x'), hinge, x, u), expected)


def test_generator_checks_dimensions(ou2):
    model = ScalarModel(Constant(1.0), ou2, d_x=2)
    with pytest.raises(ModelSpecError):
        apply_generator(squared_norm('x'), model, np.zeros((1, 1)), np.zeros((1, 1)))


def test_compose_chain_rule():
    f = squared_norm('x', scale=0.5)
    composed = compose('exp', f)
    u = np.zeros((4, 1))
    x = np.array([[-1.0], [0.3], [0.7], [1.5]])
    numeric = numeric_gradient_x(composed, x, u)
    np.testing.assert_allclose(composed.grad_x(x, u)[:, 0], numeric, rtol=1e-6)
    squared = compose('power', f, power=2.0)
    np.testing.assert_allclose(squared(x, u), f(x, u) ** 2)
    hess = squared.hess_x(x, u)[:, 0, 0]
    np.testing.assert_allclose(hess, 3.0 * x[:, 0] ** 2)
    with pytest.raises(ModelSpecError):
        compose('log', f)


def test_surrogate_moment_is_comparable_to_power():
    x = np.linspace(-20.0, 20.0, 401)
    for p in (0.5, 1.0, 3.0, 7.0):
        value = surrogate_moment(x[:, None], p)
        power = np.abs(x) ** p + 1.0
        assert np.all(value <= power * (1 + 1e-12))
        assert np.all(value >= 0.5 * power * (1 - 1e-12))


def test_surrogate_moment_derivatives():
    fn = surrogate_moment_fn(3.0)
    x = np.array([[-1.7], [0.4], [1.3], [2.5]])
    u = np.zeros((4, 1))
    np.testing.assert_allclose(fn.grad_x(x, u)[:, 0], numeric_gradient_x(fn, x, u), rtol=1e-6)
    numeric_hess = (fn.grad_x(x + STEP, u) - fn.grad_x(x - STEP, u))[:, 0] / (2 * STEP)
    np.testing.assert_allclose(fn.hess_x(x, u)[:, 0, 0], numeric_hess, rtol=1e-5)


def combine(a, f, b, g):
    """a f + b g with summed derivatives."""
    def mix(first, second):
        return lambda x, u: a * first(x, u) + b * second(x, u)

    return GeneratorFn(f'{a}*{f.name}+{b}*{g.name}', f.d_x, f.d_u,
                       mix(f.value, g.value), mix(f.grad_x, g.grad_x), mix(f.grad_u, g.grad_u),
                       mix(f.hess_x, g.hess_x), mix(f.hess_u, g.hess_u))


def random_points(n, d_x=2, seed=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d_x)), rng.uniform(-2.0, 2.0, (n, 1))


def test_carre_du_champ_is_bilinear():
    x, u = random_points(1000)
    f = linear([0.3, -0.2], [0.5])
    g = squared_norm('x', d_x=2, scale=0.25)
    h = combine(1.0, squared_norm('u', d_x=2), -0.5, f)
    mixed = combine(2.0, f, -3.0, g)
    for sigma in (1.0, 0.7):
        lhs = carre_du_champ(mixed, h, x, u, sigma_x=sigma)
        rhs = (2.0 * carre_du_champ(f, h, x, u, sigma_x=sigma)
               - 3.0 * carre_du_champ(g, h, x, u, sigma_x=sigma))
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(carre_du_champ(h, mixed, x, u, sigma_x=sigma), lhs, rtol=1e-12)


@pytest.mark.parametrize('f', [
    linear([0.3, -0.2], [0.5]),
    squared_norm('x', d_x=2, scale=0.25),
    surrogate_moment_fn(3.0, d_x=2),
])
def test_generator_chain_rule(ou2, f):
    """L phi(f) = phi'(f) Lf + phi''(f) Gamma(f, f) on random points."""
    x, u = random_points(1000)
    model = ScalarModel(Hinge(1.0, 0.5, 1.0), ou2, sigma_x=0.7, d_x=2)
    value = f(x, u)
    lf = apply_generator(f, model, x, u)
    gamma = carre_du_champ(f, f, x, u, sigma_x=0.7)
    np.testing.assert_allclose(apply_generator(compose('power', f, power=2.0), model, x, u),
                               2.0 * value * lf + 2.0 * gamma, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(apply_generator(compose('exp', f), model, x, u),
                               np.exp(value) * (lf + gamma), rtol=1e-9, atol=1e-9)


def test_surrogate_moment_sandwich_on_random_points():
    rng = np.random.default_rng(8)
    radius = 10.0 ** rng.uniform(-2.0, 2.0, (10_000, 1))
    x = rng.normal(size=(10_000, 3)) * radius
    norm = np.linalg.norm(x, axis=-1)
    for p in (0.3, 1.5, 4.0, 9.0):
        value = surrogate_moment(x, p)
        power = norm ** p + 1.0
        assert np.all(value <= power * (1 + 1e-12))
        assert np.all(value >= 0.5 * power * (1 - 1e-12))


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('c, expected', [(3.0, 8.0 / 9.0), (2.0, 2.0), (1.0, 8.0)])
def test_affine_threshold(c, expected):
    assert spekf_exact_threshold(Affine(1.0, c), 2.0) == pytest.approx(expected)


def test_affine_threshold_rejects_other_families():
    with pytest.raises(ModelSpecError):
        spekf_exact_threshold(Power(2.0), 2.0)
    with pytest.raises(ModelSpecError):
        spekf_exact_threshold(Affine(1.0, 0.0), 2.0)


def test_moment_upper_threshold_matches_exact_threshold(ou2):
    profile = damping_profile(Affine(1.0, 3.0), ou2)
    assert moment_upper_threshold(profile, contraction_certificate(ou2)) == pytest.approx(8.0 / 9.0)


@pytest.mark.parametrize('damping, expected', [
    (Affine(1.0, 3.0), 'polynomial'),
    (Affine(1.0, 1.0), 'polynomial'),
    (Hinge(1.0, 1.0, 2.0), 'exponential'),
    (Hinge(1.0, 0.5, 1.0), 'exponential'),
    (Power(4.0, 0.0), 'intermediate'),
    (Power(1.0, 0.0), 'intermediate'),
    (Power(2.0, 1.0), 'gaussian'),
    (Constant(1.0), 'gaussian'),
])
def test_classify_figure_dampings(ou2, damping, expected):
    assert classify(damping_profile(damping, ou2)).tail_class == expected


@pytest.mark.parametrize('make', [
    lambda lam: Affine(lam, 3.0 * lam),
    lambda lam: Affine(0.0, lam),
    lambda lam: Hinge(1.0, 1.0, lam),
    lambda lam: Hinge(1.0, 0.0, 2.0 * lam),
    lambda lam: Constant(lam),
    lambda lam: Tabulated((-1.0, 0.0, 1.0), (lam, 0.0, lam)),
    lambda lam: Tabulated((-1.0, 0.0, 1.0), (lam, lam, 3.0 * lam)),
])
def test_classification_is_invariant_under_positive_rescaling(ou2, make):
    reference = classify(damping_profile(make(1.0), ou2)).tail_class
    for lam in (0.1, 0.5, 3.0, 25.0):
        assert classify(damping_profile(make(lam), ou2)).tail_class == reference


def test_classify_polynomial_thresholds(ou2):
    heavy = classify(damping_profile(Affine(1.0, 3.0), ou2))
    assert heavy.q0 == pytest.approx(8.0 / 9.0)
    assert heavy.p_up == pytest.approx(8.0 / 9.0)
    assert heavy.variance_infinite
    light = classify(damping_profile(Affine(1.0, 1.0), ou2))
    assert light.q0 == pytest.approx(8.0)
    assert not light.variance_infinite


def test_classify_scaling_bounds(ou2):
    assert classify(damping_profile(Hinge(1.0, 1.0, 1.0), ou2)).scaling_bounds == (2.0, 2.0)
    quartic = classify(damping_profile(Power(4.0, 0.0), ou2))
    assert quartic.level == 2
    assert quartic.scaling_bounds == (1.75, 2.0)
    assert classify(damping_profile(Power(2.0, 0.0), ou2)).scaling_bounds == (1.5, 2.0)
    assert classify(damping_profile(Constant(1.0), ou2)).scaling_bounds == (1.0, 1.0)


def test_classify_radii(ou2):
    gaussian = classify(damping_profile(Power(2.0, 1.0), ou2), sigma_x=1.0)
    assert gaussian.radii['gaussian_moment'] == pytest.approx(1.0)
    hinge = classify(damping_profile(Hinge(1.0, 1.0, 1.0), ou2), sigma_x=1.0)
    assert hinge.radii['exponential_moment'] == pytest.approx(2.0 * 0.19947 / 1.25, abs=1e-3)


def test_zero_average_damping_is_not_classifiable(ou2):
    prediction = classify(damping_profile(Affine(0.0, 1.0), ou2))
    assert prediction.tail_class == NOT_CLASSIFIABLE
    assert not prediction.classifiable


def test_intermediate_level():
    assert [intermediate_level(g) for g in (2.0, 4.0, 6.0, 14.0)] == [1, 2, 2, 3]


@pytest.mark.parametrize('damping, expected', [
    (Hinge(1.0, 1.0, 1.0), 'exponential'),
    (Constant(1.0), 'gaussian'),
])
def test_classify_matrix_identity_term(ou2, damping, expected):
    model = MatrixModel((DampingTerm(damping, ((1.0,),), (0,)),), ((1.0,),), ou2)
    prediction = classify_matrix(model)
    assert prediction.tail_class == expected
    assert prediction.class_range == (expected, expected)


# ---------------------------------------------------------------------------
# Drift inequalities and membership
# ---------------------------------------------------------------------------

def test_theta_upper_margin_for_linear_potential(ou2):
    theta = linear([], [-0.5])
    exact = verify_drift_inequality(theta, THETA_UPPER, Affine(0.0, 1.0), ou2, q=1.0,
                                    delta=0.0, rho=0.0, pi_avg=0.0, grid=np.linspace(-3, 3, 61))
    np.testing.assert_allclose(exact.margins, -0.125)
    assert not exact.passed

    shifted = verify_drift_inequality(theta, THETA_UPPER, Affine(1.0, 1.0), ou2, q=1.0,
                                      grid=np.linspace(-3, 3, 61))
    assert shifted.parameters['delta'] == pytest.approx(0.05)
    assert shifted.min_margin == pytest.approx(0.615)
    assert shifted.passed
    assert shifted.worst_point == pytest.approx([3.0])


def test_eta_lower_margin_of_zero_candidate(ou2):
    report = verify_drift_inequality(power_norm(0.0, 2, [0.0]), ETA_LOWER, Constant(1.0), ou2, q=1.0,
                                     grid=np.linspace(-3, 3, 61))
    np.testing.assert_allclose(report.margins, -2.22)
    assert report.verdict == 'fail'
    assert list(report.to_frame().columns) == ['u0', 'margin']


def test_unknown_inequality_role(ou2):
    with pytest.raises(ModelSpecError):
        verify_drift_inequality(linear([], [1.0]), 'sideways', Constant(1.0), ou2, q=1.0)


def test_search_eta_reports_budget(ou2):
    report = search_eta(Affine(1.0, 1.0), ou2)
    assert report.inequality == ETA_LOWER
    assert report.search['budget'] == 41 * 41
    assert set(report.parameters) >= {'q', 'c', 'm', 'delta', 'rho'}


def test_quadratic_damping_is_level_one_member(ou2):
    cert = check_Am(Power(2.0, 0.0), ou2, m=1)
    assert cert.member, cert.failed
    assert cert.m1_scaled
    assert cert.exponents == (2,)


def test_hinge_is_level_three_member():
    cert = check_Am(Hinge(1.0, 1.0, 1.0), OU(2.0, (-1.0,)), m=3)
    assert cert.member, cert.failed
    assert cert.exponents == (8, 4, 2)
    assert cert.to_dict()['verdict'] == 'member'


def test_negative_damping_is_not_a_member(ou2):
    cert = check_Am(Affine(1.0, 3.0), ou2, m=1)
    assert not cert.member
    assert '1' in cert.failed


def test_check_Am_needs_positive_level(ou2):
    with pytest.raises(ModelSpecError):
        check_Am(Power(2.0), ou2, m=0)


# ---------------------------------------------------------------------------
# Feynman-Kac potential
# ---------------------------------------------------------------------------

def test_theta_of_linear_damping(ou2):
    grid = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
    estimate = theta_feynman_kac(Affine(0.0, 1.0), ou2, grid, n_samples=2000, seed=1)
    assert estimate.horizon >= math.log(1e4) / 2.0
    error = np.abs(estimate.values + 0.5 * grid)
    assert np.all(error <= 3.0 * estimate.standard_errors + estimate.truncation_bound + 1e-4)
    assert estimate.lipschitz_bound == pytest.approx(0.5)
    assert estimate.lipschitz_estimate <= 0.5 * (1.0 + 1e-4)
    assert estimate.lipschitz_consistent
    assert list(estimate.to_frame().columns) == ['u', 'theta', 'theta_se', 'truncation_bound']


def test_theta_residual_of_linear_damping(ou2):
    grid = np.linspace(-1.0, 1.0, 5)
    estimate = theta_feynman_kac(Affine(0.0, 1.0), ou2, grid, n_samples=500)
    residual = theta_residual(estimate, Affine(0.0, 1.0), ou2)
    assert list(residual.columns) == ['u', 'generator_theta', 'target', 'residual']
    assert len(residual) == 3
    assert np.all(np.abs(residual['residual']) <= 1e-3)


def test_theta_of_constant_damping_vanishes(ou2):
    estimate = theta_feynman_kac(Constant(1.0), ou2, [-1.0, 0.0, 1.0], n_samples=100)
    np.testing.assert_allclose(estimate.values, 0.0, atol=1e-12)


def test_theta_horizon_and_certificate_checks(ou2):
    with pytest.raises(ModelSpecError):
        theta_feynman_kac(Affine(0.0, 1.0), ou2, [0.0], horizon=1.0, n_samples=10)
    with pytest.raises(MissingCertificateError):
        theta_feynman_kac(Affine(0.0, 1.0), GradientForm('quartic'), [0.0], n_samples=10)
    estimate = theta_feynman_kac(Affine(0.0, 1.0), ou2, [0.0, 1.0], n_samples=10)
    with pytest.raises(ModelSpecError):
        theta_residual(estimate, Affine(0.0, 1.0), ou2)
