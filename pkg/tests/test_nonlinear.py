import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpsys import NumericalError, StateSpace, ValidationError
from dpsys.nonlinear import (
    IosCertificate,
    KFunction,
    NonlinearSystem,
    SearchConfig,
    calibrate_ios_gaussian,
    calibrate_nonlinear_gaussian,
    check_incremental_ios,
    linear_system,
    local_input_observability_probe,
    logistic_system,
    nonlinear_laplace_scale,
    output_jacobian,
    stack_nonlinear_output,
    static_map,
)
from dpsys.observability import stack_markov_map
from dpsys.privacy import PrivacyBudget, induced_one_norm, min_iid_sigma, r_value

from conftest import random_system

SQUARE = static_map(lambda x: x[0] ** 2, 1, dh=lambda x: [[2 * x[0]]])
FAST_SEARCH = SearchConfig(samples=512, local_starts=4)


def _scalar_linear(a):
    return NonlinearSystem(f=lambda x, u: a * x + u, h=lambda x, u: x, n=1, m=1, q=1)


def test_logistic_hand_recursion():
    y = stack_nonlinear_output(logistic_system(3.5), [0.2], np.zeros((3, 1)))
    assert np.allclose(y, [0.2, 0.56, 0.8624], rtol=0, atol=1e-15)


def test_zero_horizon_is_single_output():
    sys = logistic_system()
    assert stack_nonlinear_output(sys, [0.3], [[0.1]]).tolist() == [0.3]


def test_failure_names_step():
    def f(x, u):
        if u[0] > 0:
            raise ArithmeticError("boom")
        return x

    sys = NonlinearSystem(f=f, h=lambda x, u: x, n=1, m=1, q=1)
    with pytest.raises(NumericalError, match="step 2"):
        stack_nonlinear_output(sys, [0.0], [[0.0], [0.0], [1.0], [0.0]])


@given(st.integers(0, 10_000))
def test_linear_wrapper_matches_stacked_maps(seed):
    rng = np.random.default_rng(seed)
    sys = random_system(rng, 3, 2, 2)
    x0, U = rng.standard_normal(3), rng.standard_normal((5, 2))
    maps = stack_markov_map(sys, 4)
    expected = maps.ON @ np.concatenate([x0, U.reshape(-1)])
    got = stack_nonlinear_output(linear_system(sys), x0, U)
    assert np.allclose(got, expected, rtol=0, atol=1e-12 * max(1.0, np.abs(expected).max()))


@given(st.integers(0, 10_000))
def test_jacobian_paths_agree(seed):
    rng = np.random.default_rng(seed)
    sys = random_system(rng, 2, 1, 2)
    analytic = linear_system(sys)
    numeric = NonlinearSystem(f=analytic.f, h=analytic.h, n=2, m=1, q=2)
    x0, U = rng.standard_normal(2), rng.standard_normal((4, 1))
    Ja, Jn = output_jacobian(analytic, x0, U), output_jacobian(numeric, x0, U)
    assert np.allclose(Ja, stack_markov_map(sys, 3).ON, atol=1e-12)
    assert np.allclose(Jn, Ja, atol=1e-7)


def test_linear_calibration_matches_iid_floor():
    sys = StateSpace([[0.5, 0.2], [0.0, 0.3]], [[1.0], [0.5]], [[1.0, 0.0]], [[0.0]])
    budget = PrivacyBudget(0.5, 0.01, 1.0)
    cal = calibrate_nonlinear_gaussian(linear_system(sys), np.zeros(2), np.zeros((4, 1)), budget)
    expected = min_iid_sigma(sys, budget, 3)
    assert cal.sigma_floor <= expected * (1 + 1e-9)
    assert cal.sigma_floor == pytest.approx(expected, rel=1e-2)
    assert cal.to_dict()["lower_bound_only"]


@pytest.mark.parametrize("x0,c", [(1.0, 0.5), (-2.0, 1.0), (0.3, 0.1)])
def test_square_sup_closed_form(x0, c):
    budget = PrivacyBudget(0.7, 0.02, c)
    cal = calibrate_nonlinear_gaussian(SQUARE, [x0], np.zeros((1, 0)), budget, FAST_SEARCH)
    sup = 2 * abs(x0) * c + c * c
    assert cal.sup_deviation == pytest.approx(sup, rel=1e-9)
    assert cal.sigma_floor == pytest.approx(sup * r_value(0.7, 0.02), rel=1e-9)


def test_floor_depends_on_operating_point():
    budget = PrivacyBudget(0.7, 0.02, 0.5)
    f1 = calibrate_nonlinear_gaussian(SQUARE, [0.5], np.zeros((1, 0)), budget, FAST_SEARCH)
    f2 = calibrate_nonlinear_gaussian(SQUARE, [3.0], np.zeros((1, 0)), budget, FAST_SEARCH)
    assert f2.sigma_floor > f1.sigma_floor


@settings(max_examples=10)
@given(st.floats(0.05, 1.0), st.floats(1.01, 3.0))
def test_floor_monotone_in_adjacency(c, factor):
    sys = logistic_system(3.2, 0.5)
    floors = [calibrate_nonlinear_gaussian(sys, [0.4], np.zeros((3, 1)),
                                           PrivacyBudget(1.0, 0.05, r), FAST_SEARCH).sigma_floor
              for r in (c, c * factor)]
    assert floors[1] >= floors[0] * (1 - 1e-9)


def test_laplace_linear_matches_induced_norm():
    sys = StateSpace([[0.5]], [[1.0]], [[1.0]], [[0.2]])
    budget = PrivacyBudget(0.5, 0.0, 2.0, p=1)
    rep = nonlinear_laplace_scale(linear_system(sys), budget, (-np.ones(4), np.ones(4)), 2)
    M = stack_markov_map(sys, 2).ON
    assert rep["sup_jacobian_one_norm"] == pytest.approx(induced_one_norm(M), rel=1e-12)
    assert rep["scale"] == pytest.approx(2.0 * induced_one_norm(M) / 0.5, rel=1e-12)


def test_laplace_square_on_box():
    for eps in (0.5, 1.0):
        rep = nonlinear_laplace_scale(SQUARE, PrivacyBudget(eps, 0.0, 1.0, p=1), ([-2], [2]), 0)
        assert rep["scale"] == pytest.approx(4.0 / eps, rel=1e-12)


def test_laplace_overflow_guard():
    explode = static_map(lambda x: np.exp(x[0]), 1, dh=lambda x: [[np.exp(x[0])]])
    with pytest.raises(NumericalError, match="unbounded sensitivity"):
        nonlinear_laplace_scale(explode, PrivacyBudget(1.0, 0.0, p=1), ([-1], [400]), 0)


def test_observability_probe():
    # state and input both measured: recoverable whatever the later inputs do
    both = linear_system(StateSpace([[0.5]], [[1.0]], [[1.0], [0.0]], [[0.0], [1.0]]))
    assert local_input_observability_probe(both, [0.0], np.zeros((3, 1)))["locally_recoverable"]
    # one output mixing state and input: later inputs absorb every new equation
    mixed = linear_system(StateSpace([[0.5]], [[1.0]], [[1.0]], [[1.0]]))
    rep = local_input_observability_probe(mixed, [0.0], np.zeros((3, 1)))
    assert not rep["locally_recoverable"] and rep["heuristic"]


def _identity_cert(lam=0.5):
    return IosCertificate(V=lambda x, xp: float(np.abs(x - xp).sum()), lam=lam,
                          sigma1=lambda r: 0.0, sigma2=lambda r: r, alpha2=lambda r: r)


def test_stable_linear_ios_holds():
    rep = check_incremental_ios(_scalar_linear(0.5), _identity_cert(),
                                {"state_box": (-2, 2), "input_box": (-1, 1), "grid": 9})
    assert rep["holds_on_samples"] and not rep["witnesses"] and not rep["proof"]
    assert min(rep["worst_margins"].values()) >= 0


def test_unstable_linear_ios_fails_with_witness():
    rep = check_incremental_ios(_scalar_linear(2.0), _identity_cert(0.9),
                                {"state_box": (-2, 2), "input_box": (-1, 1), "grid": 9})
    assert not rep["holds_on_samples"]
    w = rep["witnesses"]["decay"]
    assert w["margin"] < 0 and w["x"] != w["x_prime"]


def test_identical_pairs_hold():
    rep = check_incremental_ios(_scalar_linear(2.0), _identity_cert(0.9),
                                {"state_box": (-2, 2), "input_box": (0, 0), "count": 256,
                                 "diagonal": True})
    assert rep["holds_on_samples"]


@given(st.floats(0.1, 100.0))
def test_ios_verdict_scale_invariant(k):
    base = _identity_cert()
    scaled = IosCertificate(V=lambda x, xp: k * base.V(x, xp), lam=base.lam,
                            sigma1=lambda r: 0.0, sigma2=lambda r: k * r,
                            alpha2=lambda r: k * r, c1=k)
    spec = {"state_box": (-1, 1), "input_box": (-1, 1), "count": 128}
    for a in (0.5, 1.5):
        assert (check_incremental_ios(_scalar_linear(a), base, spec)["holds_on_samples"]
                == check_incremental_ios(_scalar_linear(a), scaled, spec)["holds_on_samples"])


def test_certificate_validation():
    with pytest.raises(ValidationError):
        IosCertificate(V=lambda x, y: 0.0, lam=1.0, sigma1=abs, sigma2=abs, alpha2=abs)


def test_k_function_validation():
    with pytest.raises(ValidationError, match="vanish"):
        KFunction(lambda r: r + 1)
    with pytest.raises(ValidationError, match="increasing"):
        KFunction(lambda r: np.sin(r))
    assert KFunction.linear(2.0)(1.5) == 3.0


def test_ios_floor_value():
    budget = PrivacyBudget(0.3, 0.0446, 1.0)
    floor = calibrate_ios_gaussian(KFunction.linear(1.0), KFunction.linear(1.0), budget, 4)
    assert np.sqrt(floor) == pytest.approx(6 * r_value(0.3, 0.0446), rel=1e-12)
    assert np.sqrt(floor) == pytest.approx(35.67, abs=0.01)


def test_ios_floor_structure():
    budget = PrivacyBudget(0.8, 0.01, 0.5)
    alpha = KFunction.linear(1.0)
    flat = [calibrate_ios_gaussian(alpha, KFunction.zero(), budget, t) for t in (0, 3, 9)]
    assert flat[0] == flat[1] == flat[2]
    roots = [np.sqrt(calibrate_ios_gaussian(alpha, KFunction.linear(2.0), budget, t))
             for t in range(5)]
    steps = np.diff(roots)
    assert np.allclose(steps, 2.0 * 0.5 * r_value(0.8, 0.01), rtol=1e-12)


def test_ios_floor_rejects_plain_callables():
    with pytest.raises(ValidationError):
        calibrate_ios_gaussian(lambda r: r, KFunction.zero(), PrivacyBudget(1.0, 0.1), 2)
