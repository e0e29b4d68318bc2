import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpsys import RankDeficiencyError, StateSpace, ValidationError, simulate
from dpsys.estimation import LeftInverseSystem, estimate_private_errors, left_inverse_gain
from dpsys.linsys import close_loop
from dpsys.observability import markov_matrix, stack_output_map


def _loop_run(plant, exo, ctrl, steps=120, x_p0=1.5, x_r0=2.0):
    loop = close_loop(plant, ctrl, exo)
    x0 = np.concatenate([[x_p0], ctrl.steady_state([x_r0]), [x_r0]])
    tr = simulate(loop, x0, np.zeros((steps, 2)))
    up, e = tr.outputs[:, 1:2], tr.outputs[:, 2:3]
    return up, e, tr.states[:, 2:3]


def test_scalar_noiseless_reconstruction(scalar_tracking):
    plant, exo, ctrl = scalar_tracking
    up, e, xr = _loop_run(plant, exo, ctrl)
    assert np.abs(e).max() > 0.1
    est = estimate_private_errors(ctrl, up, xr)
    assert est.shape == (len(up) - 2, 1)
    assert np.abs(est - e[:len(est)]).max() < 1e-8


def test_gain_identity_residual(scalar_tracking):
    _, _, ctrl = scalar_tracking
    gain = left_inverse_gain(ctrl)
    sys = ctrl.error_to_input()
    M = np.hstack([stack_output_map(sys, 2), markov_matrix(sys, 2, 1)])
    assert np.abs(gain.K @ M - np.eye(3)).max() < 1e-9
    assert gain.lag == 2


def test_gain_matches_normal_equations(scalar_tracking):
    _, _, ctrl = scalar_tracking
    sys = ctrl.error_to_input()
    M = np.hstack([stack_output_map(sys, 2), markov_matrix(sys, 2, 1)])
    K_normal = np.linalg.solve(M.T @ M, M.T)
    assert np.allclose(left_inverse_gain(ctrl).K, K_normal, atol=1e-10)


def test_rank_deficient_controller_rejected():
    # two private inputs, one published output
    sys = StateSpace([[0.5]], [[1.0, 1.0]], [[1.0]], [[0.0, 0.0]])
    with pytest.raises(RankDeficiencyError, match="strongly input observable"):
        left_inverse_gain(sys)


def test_short_trajectory_rejected(scalar_tracking):
    _, _, ctrl = scalar_tracking
    with pytest.raises(ValidationError, match="2n\\+1 = 3"):
        estimate_private_errors(ctrl, np.zeros((2, 1)), np.zeros((2, 1)))


def test_missing_exosystem_trace_rejected(scalar_tracking):
    _, _, ctrl = scalar_tracking
    with pytest.raises(ValidationError, match="exo_trace"):
        estimate_private_errors(ctrl, np.zeros((10, 1)))


def test_zero_error_gives_zero_estimate(scalar_tracking):
    plant, exo, ctrl = scalar_tracking
    x_ss = ctrl.steady_state([2.0])
    loop = close_loop(plant, ctrl, exo)
    tr = simulate(loop, np.concatenate([x_ss, x_ss, [2.0]]), np.zeros((50, 2)))
    assert np.abs(tr.outputs[:, 2]).max() < 1e-12
    est = estimate_private_errors(ctrl, tr.outputs[:, 1:2], tr.states[:, 2:3])
    assert np.abs(est).max() < 1e-10


@given(st.integers(0, 10_000), st.integers(10, 30))
def test_reconstruction_lag_is_2n(seed, t0):
    rng = np.random.default_rng(seed)
    sys = StateSpace([[0.4]], [[1.0]], [[0.7]], [[0.0]])
    n = sys.n
    E = rng.standard_normal((40, 1))
    E2 = E.copy()
    E2[t0] += 1.0
    u1 = simulate(sys, [0.3], E).outputs
    u2 = simulate(sys, [0.3], E2).outputs
    est1, est2 = estimate_private_errors(sys, u1), estimate_private_errors(sys, u2)
    assert np.array_equal(est1[:t0 - 2 * n], est2[:t0 - 2 * n])
    assert np.abs(est1 - E[:len(est1)]).max() < 1e-9
    assert np.abs(est2[t0] - E2[t0]).max() < 1e-9


def test_error_grows_with_output_noise(scalar_tracking):
    plant, exo, ctrl = scalar_tracking
    up, e, xr = _loop_run(plant, exo, ctrl, steps=400)
    base = np.random.default_rng(9).standard_normal(up.shape)
    rmse = []
    for sigma in (0.01, 0.03, 0.1, 0.3, 1.0):
        est = estimate_private_errors(ctrl, up + sigma * base, xr, noise_model={"sigma": sigma})
        rmse.append(float(np.sqrt(np.mean((est - e[:len(est)]) ** 2))))
    assert rmse == sorted(rmse)
    # close to linear: ten times the noise gives about ten times the error
    assert 8 < rmse[-1] / rmse[2] < 12


def test_left_inverse_system_replays_published_input(scalar_tracking):
    plant, exo, ctrl = scalar_tracking
    up, e, xr = _loop_run(plant, exo, ctrl)
    e_hat, x_hat, u_hat = LeftInverseSystem(ctrl, left_inverse_gain(ctrl)).run(up, xr)
    assert np.abs(e_hat - e[:len(e_hat)]).max() < 1e-8
    assert np.abs(u_hat - up[:len(u_hat)]).max() < 1e-8


def test_microgrid_controller_is_not_invertible(printed_controller):
    # four private error channels against two published inputs
    with pytest.raises(RankDeficiencyError):
        left_inverse_gain(printed_controller)
