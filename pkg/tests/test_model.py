import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halotomo.model import (
    GAMMA_CONVENTIONS,
    FieldModel,
    PairState,
    PhysicalConstants,
    SpinState,
    bell_mixing,
    bell_mixing_array,
    bell_sql_threshold,
    field_at,
    joint_xbasis_distribution,
    larmor_phase,
    min_phase_bell,
    min_phase_ramsey,
    pair_parity,
    ramsey_polarisation,
    sql_delta_b,
)

ANGULAR = PhysicalConstants.from_convention("angular")
CYCLIC = PhysicalConstants.from_convention("cyclic_as_angular")
finite = st.floats(-1e-2, 1e-2, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


def test_constants_positive_and_conventions():
    assert ANGULAR.gamma == pytest.approx(2 * np.pi * 2.8e6)
    assert CYCLIC.gamma == 2.8e6
    assert set(GAMMA_CONVENTIONS) == {"angular", "cyclic_as_angular"}
    with pytest.raises(ValueError):
        PhysicalConstants(gamma=0.0)
    with pytest.raises(ValueError):
        PhysicalConstants.from_convention("hertz")


def test_stationary_fall_time_is_416_ms():
    assert ANGULAR.t_star_stationary == pytest.approx(0.416, abs=1e-3)


def test_recoil_displacement_38_mm():
    # hbar k / m times the stationary fall time
    assert ANGULAR.recoil_velocity * ANGULAR.t_star_stationary == pytest.approx(38.3e-3, rel=2e-3)


def test_spin_state_two_values():
    assert len(SpinState) == 2
    assert SpinState.UP == 1 and SpinState.DOWN == 0


def test_field_at_examples():
    m = FieldModel(0.532, [5.0, 0, 0])
    assert field_at(m, np.zeros(3)) == pytest.approx(0.532)
    assert field_at(m, [1e-3, 0, 0]) == pytest.approx(0.537, abs=1e-12)
    assert field_at(m, [0, 2e-3, -1e-3]) == pytest.approx(0.532)


def test_field_model_rejects_asymmetric_curvature():
    with pytest.raises(ValueError):
        FieldModel(0.5, curvature=[[0, 1, 0], [0, 0, 0], [0, 0, 0]])
    assert FieldModel(0.5, curvature=np.zeros((3, 3))).is_linear


@given(vec3, vec3, vec3)
def test_field_linear_in_r(g, r1, r2):
    m = FieldModel(0.3, g * 100)
    lhs = field_at(m, r1 + r2) - m.b0
    rhs = (field_at(m, r1) - m.b0) + (field_at(m, r2) - m.b0)
    assert lhs == pytest.approx(rhs, abs=1e-14)


def test_larmor_uniform_example():
    m = FieldModel(0.5)
    closed = larmor_phase(ANGULAR, m, np.zeros(3), np.zeros(3), 0.0, 1e-6)
    quad = larmor_phase(ANGULAR, m, np.zeros(3), np.zeros(3), 0.0, 1e-6, method="quad")
    assert closed == pytest.approx(quad, rel=1e-12)
    assert closed == pytest.approx(8.7965, abs=1e-4)
    assert larmor_phase(ANGULAR, m, np.zeros(3), np.zeros(3), 2e-6, 2e-6) == 0.0


def test_larmor_rejects_reversed_interval():
    with pytest.raises(ValueError):
        larmor_phase(ANGULAR, FieldModel(0.5), np.zeros(3), np.zeros(3), 1.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(vec3, vec3, st.floats(0, 5e-3), st.floats(1e-7, 3e-3))
def test_larmor_closed_matches_quadrature(r0, v, t0, dt):
    m = FieldModel(0.532, [5.0, -2.0, 1.0])
    closed = larmor_phase(ANGULAR, m, r0, v * 10, t0, t0 + dt)
    quad = larmor_phase(ANGULAR, m, r0, v * 10, t0, t0 + dt, method="quad")
    assert closed == pytest.approx(quad, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(vec3, vec3, st.floats(1e-7, 3e-3))
def test_larmor_closed_with_curvature_matches_quadrature(r0, v, dt):
    C = np.array([[40.0, 5.0, 0.0], [5.0, -20.0, 3.0], [0.0, 3.0, 10.0]])
    m = FieldModel(0.532, [5.0, 0.0, 0.0], C)
    closed = larmor_phase(ANGULAR, m, r0, v * 10, 1e-3, 1e-3 + dt)
    quad = larmor_phase(ANGULAR, m, r0, v * 10, 1e-3, 1e-3 + dt, method="quad")
    assert closed == pytest.approx(quad, rel=1e-10)


def test_antipodal_phase_sum_cancels_gradient():
    m = FieldModel(0.532, [5.0, 1.0, -2.0])
    r0 = np.array([1e-5, 0, 0])
    v = np.array([0.06, 0.0, 0.0])
    total = larmor_phase(ANGULAR, m, r0, v, 0, 1e-3) + larmor_phase(ANGULAR, m, r0, -v, 0, 1e-3)
    assert total == pytest.approx(2 * ANGULAR.gamma * field_at(m, r0) * 1e-3, rel=1e-12)


def test_bell_mixing_example_matches_quadrature():
    m = FieldModel(0.532, [5.0, 0, 0])
    pair = PairState(0.0, np.array([1.0, 0, 0]), 0.06)
    closed = bell_mixing(CYCLIC, m, pair, 1.7e-3)
    quad = bell_mixing(CYCLIC, m, pair, 1.7e-3, method="quad")
    assert closed == pytest.approx(quad, rel=1e-10)
    assert closed == pytest.approx(1.2138, abs=1e-4)


def test_bell_mixing_trivial_cases():
    m = FieldModel(0.532, [5.0, 0, 0])
    assert bell_mixing(CYCLIC, m, PairState(0.0, np.array([1.0, 0, 0]), 0.06), 0.0) == 0.0
    assert bell_mixing(CYCLIC, m, PairState(0.0, np.array([0, 1.0, 0]), 0.06), 1.7e-3) == 0.0
    with pytest.raises(ValueError):
        bell_mixing(CYCLIC, m, PairState(0.0, np.array([1.0, 0, 0]), 0.06), -1.0)


def test_pair_state_requires_unit_direction():
    with pytest.raises(ValueError):
        PairState(0.0, np.array([1.0, 1.0, 0]), 0.06)
    with pytest.raises(ValueError):
        PairState(np.nan, np.array([1.0, 0, 0]), 0.06)


@given(st.floats(1e-5, 5e-3), st.floats(1e-5, 5e-3))
def test_bell_mixing_quadratic_in_tau(t1, t2):
    m = FieldModel(0.532, [5.0, 2.0, 0])
    d = np.array([0.6, 0.8, 0.0])
    a = bell_mixing_array(CYCLIC, m, d, 0.06, t1) / t1**2
    b = bell_mixing_array(CYCLIC, m, d, 0.06, t2) / t2**2
    assert a == pytest.approx(b, rel=1e-12)


def test_bell_mixing_with_curvature_and_offset_matches_quadrature():
    C = np.diag([30.0, -10.0, -20.0])
    m = FieldModel(0.532, [5.0, 0, 0], C)
    pair = PairState(0.0, np.array([0.6, 0, 0.8]), 0.06, birth_time=1e-4, source_position=np.array([2e-5, 0, 1e-5]))
    assert bell_mixing(CYCLIC, m, pair, 1.5e-3) == pytest.approx(
        bell_mixing(CYCLIC, m, pair, 1.5e-3, method="quad"), rel=1e-10)


def test_pair_parity_examples():
    assert pair_parity(0.0) == 1.0
    assert pair_parity(np.pi / 2) == pytest.approx(-1.0)
    assert pair_parity(np.pi / 4) == pytest.approx(0.0, abs=1e-15)


def test_joint_distribution_examples():
    assert np.allclose(joint_xbasis_distribution(0.0), [0.5, 0, 0, 0.5])
    assert np.allclose(joint_xbasis_distribution(np.pi / 2), [0, 0.5, 0.5, 0])


@given(st.floats(-20, 20, allow_nan=False))
def test_joint_distribution_identity(phi):
    p = joint_xbasis_distribution(phi)
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-15)
    assert p[0] + p[3] - p[1] - p[2] == pytest.approx(pair_parity(phi), abs=1e-14)


def test_ramsey_polarisation():
    assert ramsey_polarisation(0.0, 0.7) == 0.7
    assert ramsey_polarisation(np.pi / 2, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert ramsey_polarisation(np.pi, 0.8) == pytest.approx(-0.8)
    with pytest.raises(ValueError):
        ramsey_polarisation(0.0, 1.2)


def test_sql_delta_b():
    unit = PhysicalConstants(gamma=1.0)
    assert sql_delta_b(unit, 1, 1.0) == 1.0
    assert sql_delta_b(unit, 4, 1.0) == 0.5
    # hand arithmetic: 1 / (2 pi 2.8e6 sqrt(68000 * 2.2e-6))
    assert sql_delta_b(ANGULAR, 68000, 2.2e-6) == pytest.approx(1.46958e-7, rel=1e-4)
    with pytest.raises(ValueError):
        sql_delta_b(unit, 0, 1.0)
    with pytest.raises(ValueError):
        sql_delta_b(unit, 1, 0.0)


def test_phase_bounds():
    assert min_phase_ramsey(2, 1.0) == pytest.approx(1 / np.sqrt(2))
    assert min_phase_bell(1.0) == 0.5
    assert min_phase_bell(0.1) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        min_phase_bell(0.0)
    with pytest.raises(ValueError):
        min_phase_ramsey(2, 1.5)


def test_bell_threshold_is_inverse_sqrt2():
    assert bell_sql_threshold() == pytest.approx(1 / np.sqrt(2), abs=1e-12)


@given(st.floats(1e-3, 1.0))
def test_bell_beats_sql_iff_above_threshold(eta):
    thr = 1 / np.sqrt(2)
    if abs(eta - thr) > 1e-12:
        assert (min_phase_bell(eta) < min_phase_ramsey(2, 1.0)) == (eta > thr)
