"""
Tests for the model layer: damping families, stationary averages, profiles,
matrix surrogates and contraction certificates.
"""

import math

import numpy as np
import pytest

from damping_lab.errors import ConfigError, ModelSpecError, UnsupportedDriftError
from damping_lab.model import (
    BOUNDED_BELOW_POSITIVE, NEGATIVE_SOMEWHERE, OU, STATIONARY, ZERO_AT_POINT, ZERO_ON_INTERVAL, Affine,
    Constant, DampingTerm, GradientForm, Hinge, MatrixModel, Power, ScalarModel, Tabulated,
    contraction_certificate, damping_profile, damping_value, default_box, gaussian_abs_moment,
    log_gaussian_moment, model_from_dict, pi_average, sampled_contraction_constant, stationary_law,
    surrogate_damping, surrogate_profiles,
)
from damping_lab.utils import model_from_flat


def test_damping_families_evaluate():
    """Each family evaluates to its closed form."""
    u = np.array([-2.5, -1.0, 0.0, 0.5, 2.0])
    points = u[:, None]
    np.testing.assert_allclose(Affine(1.0, 3.0)(points), 1.0 + 3.0 * u)
    np.testing.assert_allclose(Hinge(1.0, 1.0, 1.0)(points), [0.5, 0.0, 0.0, 0.5, 2.0])
    np.testing.assert_allclose(Power(2.0, 1.0)(points), u ** 2 + 1.0)
    np.testing.assert_allclose(Constant(1.0)(points), np.ones_like(u))
    table = Tabulated((-1.0, 0.0, 1.0), (2.0, 0.0, 2.0))
    np.testing.assert_allclose(table.evaluate(np.array([-5.0, -0.5, 0.25, 5.0])), [2.0, 1.0, 0.5, 2.0])
    assert Affine(1.0, 3.0)(0.5) == pytest.approx(2.5)


def test_damping_reads_its_coordinate():
    u = np.array([[0.0, 3.0], [1.0, -2.0]])
    np.testing.assert_allclose(Power(2.0, 0.0, coordinate=1)(u), [9.0, 4.0])
    with pytest.raises(ModelSpecError):
        Power(2.0, 0.0, coordinate=2)(u)


@pytest.mark.parametrize('spec, expected', [
    (Affine(1.0, 1.0), NEGATIVE_SOMEWHERE),
    (Hinge(1.0, 1.0, 1.0), ZERO_ON_INTERVAL),
    (Hinge(1.0, 0.0, 1.0), ZERO_AT_POINT),
    (Power(2.0, 0.0), ZERO_AT_POINT),
    (Power(2.0, 1.0), BOUNDED_BELOW_POSITIVE),
    (Constant(1.0), BOUNDED_BELOW_POSITIVE),
    (Tabulated((-1.0, 0.0, 1.0), (1.0, 0.0, 1.0)), ZERO_AT_POINT),
    (Tabulated((-1.0, 0.0, 1.0), (0.0, 0.0, 1.0)), ZERO_ON_INTERVAL),
])
def test_zero_set_kind(spec, expected):
    assert spec.zero_set()[0] == expected


def test_invalid_parameters_rejected():
    with pytest.raises(ModelSpecError):
        Hinge(1.0, 1.0, 0.0)
    with pytest.raises(ModelSpecError):
        Power(0.0)
    with pytest.raises(ModelSpecError):
        Tabulated((0.0, 0.0), (1.0, 1.0))
    with pytest.raises(ModelSpecError):
        OU(-1.0)
    with pytest.raises(ModelSpecError):
        ScalarModel(Constant(1.0), OU(2.0), sigma_x=-1.0)


def test_stationary_law_of_scalar_ou(ou2):
    mean, cov = stationary_law(ou2)
    assert mean.tolist() == [0.0]
    assert cov[0, 0] == pytest.approx(0.25)
    box = default_box(ou2)
    assert box.interval() == pytest.approx((-3.0, 3.0))


def test_stationary_law_needs_ou():
    with pytest.raises(UnsupportedDriftError):
        stationary_law(GradientForm('quartic'))


def test_pi_average_closed_forms(ou2):
    """Closed forms under the N(0, 1/4) stationary law."""
    assert pi_average(Affine(1.0, 3.0), ou2).value == pytest.approx(1.0)
    assert pi_average(Power(2.0, 0.0), ou2).value == pytest.approx(0.25)
    assert pi_average(Power(1.0, 0.0), ou2).value == pytest.approx(0.5 * math.sqrt(2.0 / math.pi))
    # half-normal mean of the shifted dead zone: 0.5 * phi(0)
    hinge = pi_average(Hinge(1.0, 1.0, 1.0), ou2)
    assert hinge.provenance == 'closed-form'
    assert hinge.value == pytest.approx(0.19947, abs=1e-4)


def test_pi_average_gauss_hermite_matches_closed_form(ou2):
    table = Tabulated(tuple(np.linspace(-4, 4, 4001)), tuple(np.linspace(-4, 4, 4001) ** 2))
    avg = pi_average(table, ou2)
    assert avg.provenance == 'gauss-hermite'
    assert avg.value == pytest.approx(0.25, abs=1e-3)


def test_pi_average_gradient_drift_needs_budget():
    drift = GradientForm('quartic')
    with pytest.raises(UnsupportedDriftError):
        pi_average(Power(2.0, 0.0), drift)
    avg = pi_average(Constant(2.0), drift)
    assert avg.value == 2.0


def test_gaussian_moments():
    assert gaussian_abs_moment(1.0, 0.0, 1.0) == pytest.approx(math.sqrt(2.0 / math.pi))
    assert gaussian_abs_moment(2.0, 1.0, 1.0) == pytest.approx(2.0)
    assert float(log_gaussian_moment(2, 0.0, 1.0)) == pytest.approx(math.log(3.0))
    assert float(log_gaussian_moment(1, 1.0, 1.0)) == pytest.approx(math.log(2.0))
    assert float(log_gaussian_moment(0.5, 0.0, 1.0)) == pytest.approx(math.log(math.sqrt(2.0 / math.pi)))


def test_damping_profile(ou2):
    profile = damping_profile(Power(4.0, 0.0), ou2)
    assert profile.growth_exponent == 4.0
    assert profile.zero_set_kind == ZERO_AT_POINT
    assert profile.lipschitz_constant == pytest.approx(4.0 * 27.0)
    assert damping_profile(Affine(1.0, 2.0), ou2).growth_exponent == 2.0


def test_scalar_contraction_certificate(ou2):
    cert = contraction_certificate(ou2)
    assert (cert.C_gamma, cert.gamma, cert.provenance) == (1.0, 2.0, 'analytic')


def test_non_normal_certificate_dominates_sampled_constant():
    drift = OU(((1.0, 10.0), (0.0, 1.0)))
    cert = contraction_certificate(drift)
    assert cert.provenance == 'numeric-bound'
    assert cert.gamma == pytest.approx(0.999)
    assert cert.C_gamma >= sampled_contraction_constant(drift, cert.gamma)


def test_gradient_drift_needs_user_certificate():
    with pytest.raises(UnsupportedDriftError):
        contraction_certificate(GradientForm('double_well'))


def test_damping_term_support_checked():
    with pytest.raises(ModelSpecError):
        DampingTerm(Constant(1.0), ((1.0, 1.0), (0.0, 1.0)), (0,))


def test_surrogates_of_identity_term_equal_damping(ou2):
    hinge = Hinge(1.0, 1.0, 1.0)
    model = MatrixModel((DampingTerm(hinge, ((1.0,),), (0,)),), ((1.0,),), ou2)
    u = np.linspace(-3.0, 3.0, 61)
    b_bar, b_under = surrogate_profiles(model, u[:, None])
    np.testing.assert_allclose(b_bar, hinge.evaluate(u))
    np.testing.assert_allclose(b_under, hinge.evaluate(u))


def test_surrogates_bracket_two_terms(ou2):
    """b_bar <= b_under when two terms act on overlapping blocks."""
    terms = (
        DampingTerm(Constant(1.0), ((1.0, 0.0), (0.0, 2.0)), (0, 1)),
        DampingTerm(Power(2.0, 0.0), ((1.0, 0.0), (0.0, 0.0)), (0,)),
    )
    model = MatrixModel(terms, ((1.0, 0.0), (0.0, 1.0)), ou2)
    u = np.linspace(-2.0, 2.0, 21)
    b_bar, b_under = surrogate_profiles(model, u[:, None])
    np.testing.assert_allclose(b_bar, np.ones_like(u))
    np.testing.assert_allclose(b_under, 2.0 + u ** 2)
    assert surrogate_damping(model, 1.5) == pytest.approx((1.0, 4.25))


def test_model_dict_round_trip(ou2):
    model = ScalarModel(Hinge(1.0, 0.5, 1.0), OU(2.0, (-1.0,)), sigma_x=0.5, x0=1.0, u0=STATIONARY)
    assert model_from_dict(model.to_dict()) == model


def test_model_from_flat_config():
    model = model_from_flat({'damping.kind': 'affine', 'damping.a': '0', 'damping.c': '1',
                             'drift.gamma': '2'})
    assert isinstance(model, ScalarModel)
    assert model.damping == Affine(0.0, 1.0)
    assert model.drift == OU(2.0)


def test_model_from_flat_rejects_bad_values():
    with pytest.raises(ConfigError):
        model_from_flat({'drift.gamma': '2'})
    with pytest.raises(ConfigError):
        model_from_flat({'damping.kind': 'affine', 'damping.a': 'one', 'damping.c': '1'})


def test_damping_value_at_a_point():
    assert damping_value(Affine(1.0, 2.0), 0.25) == pytest.approx(1.5)
    assert damping_value(Constant(3.0), -7.0) == pytest.approx(3.0)
    assert isinstance(damping_value(Hinge(1.0, 1.0, 1.0), 2.0), float)


def non_normal_model(ou2):
    return MatrixModel((DampingTerm(Affine(0.0, 1.0), ((1.0, 1.0), (0.0, 1.0)), (0, 1)),),
                       ((1.0, 0.0), (0.0, 1.0)), ou2)


def test_surrogates_of_non_normal_term(ou2):
    model = non_normal_model(ou2)
    assert surrogate_damping(model, 2.0) == pytest.approx((1.0, 3.0))
    assert surrogate_damping(model, -2.0) == pytest.approx((-3.0, -1.0))


def test_matrix_damping_reconstruction_and_quadratic_sandwich(ou2):
    rng = np.random.default_rng(11)
    hinge, affine = Hinge(0.5, 0.5, 1.5), Affine(0.2, 1.0)
    B1 = np.array([[1.0, 1.0], [0.0, 1.0]])
    B2 = np.array([[2.0, 0.0], [0.0, 0.0]])
    model = MatrixModel((DampingTerm(hinge, tuple(map(tuple, B1)), (0, 1)),
                         DampingTerm(affine, tuple(map(tuple, B2)), (0,))),
                        ((1.0, 0.0), (0.0, 1.0)), ou2)
    u = rng.uniform(-3.0, 3.0, 1000)
    x = rng.normal(size=(1000, 2))

    B = model.damping_matrix(u[:, None])
    expected = hinge.evaluate(u)[:, None, None] * B1 + affine.evaluate(u)[:, None, None] * B2
    np.testing.assert_allclose(B, expected, atol=1e-12)

    b_bar, b_under = surrogate_profiles(model, u[:, None])
    sym = 0.5 * (B + np.swapaxes(B, -1, -2))
    quad = np.einsum('ni,nij,nj->n', x, sym, x)
    norm2 = np.sum(x * x, axis=-1)
    assert np.all(b_bar <= b_under)
    assert np.all(b_bar * norm2 <= quad + 1e-10)
    assert np.all(quad <= b_under * norm2 + 1e-10)


@pytest.mark.parametrize('spec', [
    Affine(0.0, 1.7),
    Tabulated((-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0), (-27.0, -8.0, -1.0, 0.0, 1.0, 8.0, 27.0)),
])
def test_pi_average_of_odd_damping_is_zero(ou2, spec):
    assert pi_average(spec, ou2).value == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize('spec', [
    Affine(1.0, 3.0),
    Hinge(1.0, 0.5, 2.0),
    Power(4.0, 0.0),
    Power(1.0, 0.5),
    Constant(2.0),
    Tabulated((-1.0, 0.0, 0.5, 2.0), (3.0, 0.0, 0.0, 4.0)),
])
def test_reported_lipschitz_bounds_difference_quotients(ou2, spec):
    rng = np.random.default_rng(5)
    lo, hi = default_box(ou2).interval(0)
    u, v = rng.uniform(lo, hi, (2, 10_000))
    quotients = np.abs(spec.evaluate(u) - spec.evaluate(v)) / np.abs(u - v)
    lip = damping_profile(spec, ou2).lipschitz_constant
    assert np.all(quotients <= lip * (1 + 1e-9) + 1e-12)
    if math.isfinite(spec.global_lipschitz()):
        u, v = rng.uniform(-50.0, 50.0, (2, 10_000))
        quotients = np.abs(spec.evaluate(u) - spec.evaluate(v)) / np.abs(u - v)
        assert np.all(quotients <= spec.global_lipschitz() * (1 + 1e-9) + 1e-12)
