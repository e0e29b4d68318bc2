"""Command-line entry point ``dpsys``.

Every subcommand prints its result as delimited JSON sections.  Exit codes:
0 success, 2 invalid input, 3 infeasible design, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .exceptions import DpsysError, InfeasibleError, NumericalError, ValidationError
from .linsys import ContinuousStateSpace, StateSpace, load_system


def _emit(name: str, payload) -> None:
    print(f"===== {name} =====")
    print(json.dumps(payload, indent=2, default=_jsonable))
    print(f"===== end {name} =====")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, complex):
        return [x.real, x.imag]
    raise TypeError(f"not serializable: {type(x).__name__}")


def _discrete(path) -> StateSpace:
    sys_ = load_system(path)
    if isinstance(sys_, ContinuousStateSpace):
        raise ValidationError(f"{path}: expected a discrete-time system")
    return sys_


def _sigma_arg(spec: str | None):
    if spec is None:
        return None
    if spec.startswith("iid:"):
        s = float(spec[4:])
        if not s > 0:
            raise ValidationError("iid noise std must be positive")
        return s * s
    with open(spec) as fh:
        return np.asarray(json.load(fh), dtype=float)


def cmd_analyze(args) -> int:
    from .observability import is_strongly_input_observable, weighted_gramian
    from .privacy import PrivacyBudget, achievable_epsilon, verify_output_gaussian

    sys_ = _discrete(args.system)
    Sigma = _sigma_arg(args.sigma)
    rep = weighted_gramian(sys_, args.horizon, args.T, Sigma)
    out = {"gramian": rep.to_dict()}
    if sys_.n or sys_.m:
        out["strong_input_observability"] = is_strongly_input_observable(sys_)
    if args.delta is not None:
        noise = 1.0 if Sigma is None else Sigma
        out["achievable_epsilon"] = achievable_epsilon(sys_, noise, args.delta, args.c,
                                                       args.horizon, args.T)
        if args.eps is not None:
            budget = PrivacyBudget(args.eps, args.delta, args.c)
            out["verification"] = verify_output_gaussian(sys_, noise, budget, args.horizon,
                                                         args.T).to_dict()
    _emit("analyze", out)
    return 0


def cmd_calibrate(args) -> int:
    from . import privacy

    sys_ = _discrete(args.system)
    budget = privacy.PrivacyBudget(args.eps, args.delta, args.c, p=1 if args.mode == "laplace" else 2)
    out = {"mode": args.mode, "epsilon": args.eps, "delta": args.delta, "c": args.c}
    if args.mode == "output-iid":
        out["sigma_min"] = privacy.min_iid_sigma(sys_, budget, args.horizon)
        out["horizon"] = args.horizon
    elif args.mode == "input":
        out["lambda_min_floor"] = privacy.calibrate_input_gaussian(budget)
    elif args.mode == "stable":
        obs, gam = privacy.stable_sensitivity(sys_, args.variant)
        R = privacy.r_value(args.eps, args.delta)
        out.update(variant=args.variant, sqrt_lambda_max_Oinf=obs, hinf=gam,
                   lambda_min_floor=(args.c * (obs + gam) * R) ** 2)
    else:
        out["laplace_scale"] = privacy.laplace_scale(sys_, budget, args.horizon)
        out["horizon"] = args.horizon
    _emit("calibrate", out)
    return 0


def cmd_synthesize(args) -> int:
    from .synthesis import check_assumptions, design_privacy_controller

    plant, exo = _discrete(args.plant), _discrete(args.exo)
    G1 = None
    if args.G1:
        with open(args.G1) as fh:
            G1 = np.asarray(json.load(fh), dtype=float)
    ctrl = design_privacy_controller(plant, exo, G1, gamma=args.gamma, gamma_bar=args.gamma_bar,
                                     strict_regulator=not args.allow_regulator_residual)
    if args.out:
        ctrl.save(args.out)
    _emit("assumptions", check_assumptions(plant, exo))
    _emit("controller", ctrl.to_dict())
    return 0


def cmd_simulate(args) -> int:
    from .gridlab.experiment import ExperimentConfig, run_tracking_experiment
    from .gridlab.noise import gramian_noise_design
    from .synthesis import PrivacyController

    plant = _discrete(args.plant)
    ctrl = PrivacyController.load(args.controller)
    with open(args.config) as fh:
        raw = json.load(fh)
    exo_spec = raw.pop("exo", None)
    x_r0 = raw.pop("x_r0", None)
    labels = raw.pop("labels", None)
    design_tT = raw.pop("noise_design", [10, 5])
    if x_r0 is None:
        raise ValidationError("experiment config needs x_r0")
    if exo_spec is None:
        k = len(x_r0)
        exo = StateSpace(np.eye(k), np.zeros((k, 0)), np.eye(plant.q, k), np.zeros((plant.q, 0)))
    elif isinstance(exo_spec, str):
        exo = _discrete(Path(args.config).parent / exo_spec)
    else:
        exo = StateSpace.from_dict(exo_spec)
    cfg = ExperimentConfig.from_dict(raw)
    design = gramian_noise_design(ctrl, *design_tT) if cfg.noise == "input" else None
    res = run_tracking_experiment(plant, exo, ctrl, x_r0, cfg, design, labels=labels)
    _emit("summary", res["summary"])
    return 0


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValidationError(f"{path}: no data rows")
    header = rows[0]
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:]])
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric entry ({exc})") from None
    return header, data


def cmd_estimate(args) -> int:
    from .estimation import estimate_private_errors
    from .synthesis import PrivacyController

    ctrl = PrivacyController.load(args.controller)
    header, data = _read_csv(args.traj)
    col = {h: i for i, h in enumerate(header)}
    u_cols = [h for h in header if h.startswith("u") and h[1:].isdigit()]
    xr_cols = [h for h in header if h.startswith("xr") and h[2:].isdigit()]
    e_cols = [h for h in header if h.startswith("e_")]
    if not u_cols:
        raise ValidationError(f"{args.traj}: no u<j> columns")
    up = data[:, [col[h] for h in u_cols]]
    xr = data[:, [col[h] for h in xr_cols]] if xr_cols else None
    noise = {"sigma": args.noise_sigma} if args.noise_sigma else None
    e_hat = estimate_private_errors(ctrl, up, xr, noise_model=noise)
    truth = data[:e_hat.shape[0], [col[h] for h in e_cols]] if e_cols else None
    out_header = ["t"] + [f"ehat{j}" for j in range(e_hat.shape[1])]
    if truth is not None:
        out_header += [f"e{j}" for j in range(truth.shape[1])] + ["error"]
    target = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        wr = csv.writer(target)
        wr.writerow(out_header)
        for k in range(e_hat.shape[0]):
            row = [k] + [repr(float(x)) for x in e_hat[k]]
            if truth is not None:
                row += [repr(float(x)) for x in truth[k]]
                row.append(repr(float(np.abs(e_hat[k] - truth[k]).max())))
            wr.writerow(row)
    finally:
        if args.out:
            target.close()
    if args.out and truth is not None:
        _emit("estimate", {"rows": int(e_hat.shape[0]),
                           "max_error": float(np.abs(e_hat - truth).max())})
    return 0


def cmd_microgrid(args) -> int:
    from .gridlab.pipeline import run_preset

    if args.preset != "paper":
        raise ValidationError(f"unknown preset {args.preset!r}")
    rep = run_preset(args.out, horizon=args.horizon, seed=args.seed)
    for key in ("assumptions", "gains", "designed_controller", "reference_controller",
                "noise_design", "noise_levels"):
        _emit(key, rep[key])
    _emit("experiments", {a: {k: s[k] for k in ("final_output", "steady_state_error",
                                                  "achievable_epsilon")}
                          for a, s in rep["experiments"].items()})
    _emit("artifacts", {"directory": str(Path(args.out).resolve()),
                        "files": rep["artifacts"]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpsys", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="Gramian spectrum and privacy level of a system")
    a.add_argument("system")
    a.add_argument("--horizon", "-t", type=int, required=True)
    a.add_argument("--T", type=int, default=None)
    a.add_argument("--sigma", help="noise covariance JSON file or iid:<std>")
    a.add_argument("--eps", type=float)
    a.add_argument("--delta", type=float)
    a.add_argument("--c", type=float, default=1.0)
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("calibrate", help="noise floors for a privacy budget")
    c.add_argument("system")
    c.add_argument("--eps", type=float, required=True)
    c.add_argument("--delta", type=float, required=True)
    c.add_argument("--c", type=float, default=1.0)
    c.add_argument("--mode", choices=["output-iid", "input", "stable", "laplace"],
                   default="output-iid")
    c.add_argument("--horizon", "-t", type=int, default=10)
    c.add_argument("--variant", choices=["full", "public_x0", "public_input"], default="full")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("synthesize", help="design a privacy-preserving tracking controller")
    s.add_argument("plant")
    s.add_argument("exo")
    s.add_argument("--gamma", type=float, required=True)
    s.add_argument("--gamma-bar", type=float, default=None)
    s.add_argument("--G1", help="JSON file with a state-feedback gain (default: LQR)")
    s.add_argument("--allow-regulator-residual", action="store_true",
                   help="use the least-squares regulator solution when no exact one exists")
    s.add_argument("--out", "-o")
    s.set_defaults(func=cmd_synthesize)

    m = sub.add_parser("simulate", help="closed-loop experiment from a config file")
    m.add_argument("plant")
    m.add_argument("controller")
    m.add_argument("--config", required=True)
    m.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="reconstruct tracking errors from published inputs")
    e.add_argument("controller")
    e.add_argument("--traj", required=True)
    e.add_argument("--noise-sigma", type=float, default=None)
    e.add_argument("--out", "-o")
    e.set_defaults(func=cmd_estimate)

    g = sub.add_parser("microgrid", help="run the two-node microgrid case study")
    g.add_argument("--preset", required=True)
    g.add_argument("--out", "-o", default="microgrid_out")
    g.add_argument("--horizon", type=int, default=10000)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_microgrid)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleError as exc:
        extra = f" (estimate {exc.estimate:.6g})" if exc.estimate is not None else ""
        print(f"infeasible: {exc}{extra}", file=sys.stderr)
        return 3
    except (NumericalError, DpsysError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
