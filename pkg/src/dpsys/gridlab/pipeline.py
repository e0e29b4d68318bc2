"""End-to-end run of the two-node microgrid case study."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import hinf_sdp
from ..privacy import r_value
from ..synthesis import (
    assemble_privacy_controller,
    certify_privacy_controller,
    check_assumptions,
    design_privacy_controller,
    fixed_gain_certificate,
    lqr_gain,
    solve_regulator_equations,
)
from .experiment import ExperimentConfig, run_tracking_experiment
from .model import discretized_microgrid, two_node_params, reference_exosystem
from .noise import gramian_noise_design
from .plotting import plot_eigenvalues, plot_traces

# Published gains for the two-node preset (output order I1, I2, V1, V2).
REFERENCE_G1 = np.array([
    [-0.850, 0.037, -0.0461, -0.0007, 0.229],
    [0.0370, -0.850, -0.0007, -0.0461, -0.229],
])
REFERENCE_G2 = np.array([
    [0.869, -0.0019, 0.873, 0.174],
    [-0.0019, 0.869, 0.174, 0.873],
])
REFERENCE_L1 = np.array([
    [-0.193, 0.0088, 0.0828, 0.0111],
    [0.0088, -0.193, 0.0111, 0.0828],
    [-0.0717, 0.0072, -0.134, -0.0129],
    [0.0072, -0.0717, -0.0129, -0.134],
    [0.0253, -0.0253, -0.0504, 0.0504],
])
REFERENCE_BLOCK = np.array([[0.0347, -0.0106], [-0.0106, 0.0129]])
REFERENCE_GAMMA = 0.365
BUDGETS = [(0.3, 0.0446), (1.4, 0.0446), (0.69, 0.0082), (0.42, 0.0082)]
LABELS = ["I1", "I2", "V1", "V2"]


def preset_setup():
    """Plant, exosystem, reference state and the regulator/LQR data."""
    params = two_node_params()
    plant = discretized_microgrid(params)
    exo, x_r0 = reference_exosystem(params)
    G1 = lqr_gain(plant)
    regulator = solve_regulator_equations(plant, exo, strict=False)
    return params, plant, exo, x_r0, G1, regulator


def reference_controller(plant, exo, G1, regulator):
    """Controller built from the published observer gain, re-certified here."""
    ctrl = assemble_privacy_controller(plant, exo, G1, REFERENCE_L1, regulator,
                                       REFERENCE_GAMMA)
    certify_privacy_controller(plant, ctrl)
    return ctrl


def run_preset(outdir, horizon: int = 10000, seed: int = 0,
               noise_levels=(0.0, 15.8, 39.7, 64.3)) -> dict:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    params, plant, exo, x_r0, G1, regulator = preset_setup()
    report = {"assumptions": check_assumptions(plant, exo, x_r0)}
    G2 = regulator.U - G1 @ regulator.X
    report["gains"] = {
        "G1": G1.tolist(),
        "G2": G2.tolist(),
        "G1_max_deviation": float(np.abs(G1 - REFERENCE_G1).max()),
        "G2_max_deviation": float(np.abs(G2 - REFERENCE_G2).max()),
        "regulator_residual": regulator.residual,
    }

    designed = design_privacy_controller(plant, exo, G1, gamma=REFERENCE_GAMMA,
                                         strict_regulator=False)
    designed.save(out / "controller_designed.json")
    hinf_lmi = hinf_sdp.hinf_norm_lmi(designed.error_to_input())
    report["designed_controller"] = dict(designed.certificates, hinf_lmi=hinf_lmi,
                                         L1=designed.L1.tolist())

    ref = reference_controller(plant, exo, G1, regulator)
    ref.save(out / "controller_reference.json")
    cert = fixed_gain_certificate(plant, G1, REFERENCE_L1, REFERENCE_GAMMA)
    report["reference_controller"] = dict(ref.certificates, lmi_status=cert.status,
                                          lmi_margin=cert.margin)

    design = gramian_noise_design(ref, t=10, T=5)
    wide = gramian_noise_design(ref, t=10, T=9)
    report["noise_design"] = dict(design.to_dict(), eigenvalues=None,
                                  reference_block=REFERENCE_BLOCK.tolist())
    report["noise_levels"] = [
        {"epsilon": e, "delta": d, "a_min": design.kappa * r_value(e, d)} for e, d in BUDGETS
    ]
    plot_eigenvalues(wide.eigenvalues, out / "markov_spectrum.png",
                     title="N'N eigenvalues, (t, T) = (10, 9)")

    runs, summaries = {}, {}
    for a in noise_levels:
        cfg = ExperimentConfig(horizon=horizon, noise="input" if a > 0 else "none", a=a,
                               seed=seed, csv_path=str(out / f"traces_a{a:g}.csv"))
        res = run_tracking_experiment(plant, exo, ref, x_r0, cfg, design, labels=LABELS)
        runs[f"a = {a:g}"] = res["traces"]
        summaries[f"{a:g}"] = res["summary"]
    plot_traces(runs, LABELS, out / "traces.png", dt=params.dt)
    report["experiments"] = summaries
    report["artifacts"] = sorted({p.name for p in out.iterdir()} | {"report.json"})
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, default=float)
    return report
