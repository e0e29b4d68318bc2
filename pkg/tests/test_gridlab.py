import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from dpsys import ValidationError
from dpsys.gridlab.experiment import ExperimentConfig, batch_means_ztest, run_tracking_experiment
from dpsys.gridlab.model import (
    MicrogridParams,
    build_microgrid,
    discretized_microgrid,
    equilibrium_state,
    two_node_params,
)
from dpsys.gridlab.noise import gramian_noise_design
from dpsys.gridlab.pipeline import LABELS, REFERENCE_BLOCK, run_preset

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def design(printed_controller):
    return gramian_noise_design(printed_controller, t=10, T=5)


def test_current_row_entries():
    A = build_microgrid(two_node_params()).A
    B = build_microgrid(two_node_params()).B
    assert A[0, 0] == pytest.approx(-111.1, abs=0.1)
    assert A[0, 2] == pytest.approx(-555.6, abs=0.1)
    assert B[0, 0] == pytest.approx(555.6, abs=0.1)


def test_discretized_model_is_schur_stable():
    A = discretized_microgrid(two_node_params()).A
    assert np.max(np.abs(np.linalg.eigvals(A))) < 1


def _three_nodes(order):
    base = {"R": [0.2, 0.3, 0.25], "L": [1.8e-3, 2.0e-3, 1.5e-3], "C": [2.2e-3, 2.0e-3, 2.5e-3]}
    inv = {old: new for new, old in enumerate(order)}
    edges = [(0, 1), (1, 2)]
    return MicrogridParams(
        R=[base["R"][i] for i in order], L=[base["L"][i] for i in order],
        C=[base["C"][i] for i in order], edges=[(inv[i], inv[j]) for i, j in edges],
        R_line=[0.07, 0.05], L_line=[2.1e-3, 1.0e-3])


def test_node_relabeling_is_a_permutation_similarity():
    order = [2, 0, 1]
    A0, A1 = build_microgrid(_three_nodes([0, 1, 2])).A, build_microgrid(_three_nodes(order)).A
    k = 3
    perm = order + [k + i for i in order] + [6, 7]
    P = np.eye(8)[perm]
    assert np.allclose(P @ A0 @ P.T, A1)


def test_algebraic_line_has_no_state():
    p = MicrogridParams(R=[0.2, 0.2], L=[1e-3, 1e-3], C=[1e-3, 1e-3], edges=[(0, 1)],
                        R_line=[0.1], L_line=[None])
    A = build_microgrid(p).A
    assert A.shape == (4, 4)
    assert A[2, 3] == pytest.approx(10.0 / 1e-3)


def test_parameter_validation():
    with pytest.raises(ValidationError, match="disconnected"):
        MicrogridParams(R=[1, 1, 1], L=[1, 1, 1], C=[1, 1, 1], edges=[(0, 1)], R_line=[1],
                        L_line=[1])
    with pytest.raises(ValidationError, match="positive"):
        MicrogridParams(R=[1, -1], L=[1, 1], C=[1, 1], edges=[(0, 1)], R_line=[1], L_line=[1])


def test_params_round_trip():
    p = two_node_params()
    assert MicrogridParams.from_dict(p.to_dict()) == p


def test_noise_blocks_are_psd_and_scale(design):
    for B in design.blocks:
        assert np.allclose(B, B.T) and np.linalg.eigvalsh(B)[0] > 0
    for B1, B2 in zip(design.scaled(1.0), design.scaled(2.0)):
        assert np.allclose(B2, 4 * B1, rtol=1e-15)


def test_noise_block_shape_matches_published(design):
    for B in design.blocks:
        ratio = B / B[0, 0] * REFERENCE_BLOCK[0, 0]
        assert np.all(np.abs(ratio - REFERENCE_BLOCK) <= 0.1 * np.abs(REFERENCE_BLOCK))
    assert 9.7 <= design.kappa <= 11.9


def test_eigen_selection_equals_principal_block(printed_controller, design):
    explicit = gramian_noise_design(printed_controller, 10, 5, indices=design.used_indices)
    for B1, B2 in zip(design.blocks, explicit.blocks):
        assert np.allclose(B1, B2)


def test_noise_design_rejects_empty_selection(printed_controller):
    with pytest.raises(ValidationError, match="below the threshold"):
        gramian_noise_design(printed_controller, 10, 5, threshold=2.0)


def _loop_state(mg, ctrl):
    x_ss = ctrl.steady_state(mg["x_r0"])
    return ctrl.loop(mg["plant"], mg["exo"]), np.concatenate([x_ss, x_ss, mg["x_r0"]])


def test_equilibrium_is_fixed_point(microgrid, printed_controller):
    loop, x = _loop_state(microgrid, printed_controller)
    assert np.abs(loop.A @ x - x).max() < 1e-10 * np.abs(x).max()
    x_eq = equilibrium_state(microgrid["params"])
    assert np.allclose(x[:5], x_eq, atol=1e-9)


def test_no_noise_run_converges(microgrid, printed_controller):
    mg = microgrid
    res = run_tracking_experiment(mg["plant"], mg["exo"], printed_controller, mg["x_r0"],
                                  ExperimentConfig(horizon=10000), labels=LABELS)
    final = res["summary"]["final_output"]
    assert abs(final["V1"] - 380) < 1e-4 and abs(final["V2"] - 380) < 1e-4
    assert abs(final["I1"]) < 1e-4 and abs(final["I2"]) < 1e-4


def test_zero_horizon_rejected():
    with pytest.raises(ValidationError):
        ExperimentConfig(horizon=0)


def test_identical_seeds_give_identical_csv(tmp_path, microgrid, printed_controller, design):
    mg = microgrid
    paths = []
    for name in ("a.csv", "b.csv"):
        cfg = ExperimentConfig(horizon=300, noise="input", a=15.8, seed=7,
                               csv_path=str(tmp_path / name))
        run_tracking_experiment(mg["plant"], mg["exo"], printed_controller, mg["x_r0"], cfg,
                                design, labels=LABELS)
        paths.append(tmp_path / name)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    header = paths[0].read_text().splitlines()[0].split(",")
    assert header[:5] == ["t", "I1", "I2", "V1", "V2"]


def test_privacy_utility_tradeoff(microgrid, printed_controller, design):
    mg = microgrid
    levels = [0.0, 15.8, 39.7, 64.3]
    variance, eps = [], []
    for a in levels:
        cfg = ExperimentConfig(horizon=3000, noise="input" if a else "none", a=a, seed=3)
        s = run_tracking_experiment(mg["plant"], mg["exo"], printed_controller, mg["x_r0"],
                                    cfg, design, labels=LABELS)["summary"]
        variance.append(sum(s["output_variance"].values()))
        eps.append(s["achievable_epsilon"])
    assert spearmanr(levels, variance).statistic == pytest.approx(1.0)
    assert eps[0] is None
    assert eps[1] > eps[2] > eps[3]


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_ztest_detects_large_shift(seed):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal(400)
    assert batch_means_ztest(base, rng.standard_normal(20) + 3.0)["reject_5pct"]


def test_ztest_null_rate():
    rng = np.random.default_rng(0)
    rejections = sum(batch_means_ztest(rng.standard_normal(400),
                                       rng.standard_normal(20))["reject_5pct"]
                     for _ in range(400))
    assert rejections / 400 < 0.1


def test_preset_pipeline_artifacts(tmp_path):
    report = run_preset(tmp_path, horizon=400)
    for name in ("traces.png", "markov_spectrum.png"):
        assert (tmp_path / name).read_bytes()[:8] == PNG_MAGIC
    assert "report.json" in report["artifacts"]
    assert report["reference_controller"]["lmi_status"] == "feasible"
    assert report["gains"]["G1_max_deviation"] < 1e-2
    a_min = [row["a_min"] for row in report["noise_levels"]]
    assert a_min[0] == pytest.approx(64.3, abs=0.6) and a_min[1] == pytest.approx(15.8, abs=0.3)
