"""Closed-loop tracking experiments with injected privacy noise."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from ..exceptions import ValidationError
from ..linsys import StateSpace
from ..privacy import epsilon_for_floor
from .noise import NoiseDesign


@dataclass
class ExperimentConfig:
    """One closed-loop run.

    ``offset``: plant-state jump (relative to the regulated equilibrium)
    applied at step ``disturbance_step``; before it the loop sits at the
    equilibrium.  ``noise``: "none", "input" (per-user blocks scaled by
    ``a`` added to the error the controller reads) or "output" (i.i.d.
    ``sigma`` on each published input channel).
    """

    horizon: int = 10000
    offset: list = field(default_factory=lambda: [-4.0, 0.0, 0.0, 0.0, 0.0])
    disturbance_step: int = 0
    noise: str = "none"
    a: float = 0.0
    sigma: float = 0.0
    seed: int = 0
    delta: float = 0.0446
    c: float = 1.0
    ztest_window: int = 20
    ztest_burn_in: int = 100
    ztest_channel: int = 1
    csv_path: str | None = None
    summary_path: str | None = None

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValidationError("horizon must be a positive integer")
        if self.noise not in ("none", "input", "output"):
            raise ValidationError(f"unknown noise kind {self.noise!r}")
        if self.a < 0 or self.sigma < 0:
            raise ValidationError("noise scales must be nonnegative")
        if not 0 <= self.disturbance_step < self.horizon:
            raise ValidationError("disturbance_step must lie inside the horizon")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _noise_streams(seed, channels):
    """One independent generator per channel group (reproducible, splittable)."""
    ss = np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(channels)]


def sample_noise(config: ExperimentConfig, q: int, m: int, design: NoiseDesign | None,
                 user_coords) -> tuple:
    """``(v, w)``: error-side noise (horizon x q) and input-side noise (horizon x m)."""
    H = config.horizon
    v = np.zeros((H, q))
    w = np.zeros((H, m))
    if config.noise == "input" and config.a > 0:
        if design is None:
            raise ValidationError("input noise needs a noise design")
        streams = _noise_streams(config.seed, len(user_coords))
        for B, idx, g in zip(design.scaled(config.a), user_coords, streams):
            Lc = np.linalg.cholesky(B)
            v[:, list(idx)] = g.standard_normal((H, len(idx))) @ Lc.T
    elif config.noise == "output" and config.sigma > 0:
        streams = _noise_streams(config.seed, m)
        for j, g in enumerate(streams):
            w[:, j] = config.sigma * g.standard_normal(H)
    return v, w


def _simulate(loop: StateSpace, x0, inputs, jump_step, jump):
    A, B, C, D = loop.A, loop.B, loop.C, loop.D
    H = inputs.shape[0]
    X = np.zeros((H, A.shape[0]))
    Y = np.zeros((H, C.shape[0]))
    x = np.array(x0, dtype=float)
    for k in range(H):
        if k == jump_step:
            x = x + jump
        X[k] = x
        Y[k] = C @ x + D @ inputs[k]
        x = A @ x + B @ inputs[k]
    return X, Y


def batch_means_ztest(baseline, post) -> dict:
    """Is the mean of ``post`` atypical among equally long baseline windows?

    The baseline is cut into batches of ``len(post)`` samples; their means
    estimate the null distribution of a window mean, serial correlation
    included.  Two-sided test at 5% against the normal quantile.
    """
    baseline, post = np.asarray(baseline, dtype=float), np.asarray(post, dtype=float)
    W = len(post)
    nb = len(baseline) // W
    if W < 1 or nb < 2:
        raise ValidationError("baseline must hold at least two post-window lengths")
    means = baseline[len(baseline) - nb * W:].reshape(nb, W).mean(axis=1)
    centre = float(means.mean())
    se = float(means.std(ddof=1)) * math.sqrt(1.0 + 1.0 / nb)
    diff = float(post.mean() - centre)
    if se == 0:
        z = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    else:
        z = diff / se
    p = float(2 * norm.sf(abs(z)))
    return {"z": z, "p_value": p, "reject_5pct": bool(p < 0.05), "shift": diff,
            "baseline_windows": nb}


def run_tracking_experiment(plant: StateSpace, exo: StateSpace, controller, x_r0,
                            config: ExperimentConfig, design: NoiseDesign | None = None,
                            user_coords=None, labels=None) -> dict:
    """Simulate the closed loop and write the trace CSV / summary JSON if asked.

    Returns ``{"summary": ..., "traces": {...}}``.  ``labels`` names the plant
    outputs (default ``y0, y1, ...``).
    """
    loop = controller.loop(plant, exo)
    q, m = plant.q, plant.m
    if user_coords is None:
        k = q // 2
        user_coords = [(i, k + i) for i in range(k)]
    labels = labels or [f"y{j}" for j in range(q)]
    x_r0 = np.asarray(x_r0, dtype=float)
    x_c0 = controller.steady_state(x_r0)
    x_eq = x_c0.copy()
    offset = np.asarray(config.offset, dtype=float)
    if offset.shape != (plant.n,):
        raise ValidationError(f"offset must have length {plant.n}")
    x0 = np.concatenate([x_eq, x_c0, x_r0])
    jump = np.concatenate([offset, np.zeros(plant.n + exo.n)])

    v, w = sample_noise(config, q, m, design, user_coords)
    X, Y = _simulate(loop, x0, np.hstack([v, w]), config.disturbance_step, jump)
    y, u, e = Y[:, :q], Y[:, q:q + m], Y[:, q + m:]
    times = np.arange(config.horizon)

    tail = slice(int(0.9 * config.horizon), None)
    band = slice(config.horizon // 2, None)
    summary = {
        "config": config.to_dict(),
        "final_output": dict(zip(labels, y[-1].tolist())),
        "steady_state_error": float(np.abs(e[tail]).mean()),
        "max_final_error": float(np.abs(e[-1]).max()),
        "output_variance": dict(zip(labels, y[band].var(axis=0).tolist())),
        "input_variance": u[band].var(axis=0).tolist(),
    }
    var = y[band].var(axis=0)
    summary["user_variance_ratio"] = [
        float(var[list(a)].sum() / var[list(b)].sum()) if var[list(b)].sum() > 0 else None
        for a, b in zip(user_coords[:1], user_coords[1:2])
    ]
    if config.noise == "input" and design is not None and config.a > 0:
        floor = config.a / design.kappa
        summary["achievable_epsilon"] = _eps_or_none(floor, config.delta, config.c)
        summary["kappa"] = design.kappa
    else:
        summary["achievable_epsilon"] = None

    W = config.ztest_window
    k = config.disturbance_step
    if k - config.ztest_burn_in >= 2 * W and k + W <= config.horizon:
        ch = u[:, config.ztest_channel]
        summary["ztest"] = batch_means_ztest(ch[config.ztest_burn_in:k], ch[k:k + W])

    xr = X[:, plant.n + x_c0.shape[0]:]
    traces = {"t": times, "y": y, "u": u, "e": e, "v": v, "w": w, "xr": xr, "states": X}
    if config.csv_path:
        write_trace_csv(config.csv_path, traces, labels)
    if config.summary_path:
        try:
            with open(config.summary_path, "w") as fh:
                json.dump(summary, fh, indent=2)
        except OSError as exc:
            raise OSError(f"cannot write summary to {config.summary_path}: {exc}") from exc
    return {"summary": summary, "traces": traces}


def _eps_or_none(floor, delta, c):
    try:
        return epsilon_for_floor(floor, delta, c)
    except ValidationError:
        return None


def write_trace_csv(path, traces: dict, labels) -> None:
    y, u, e, v, w, xr = (traces[k] for k in ("y", "u", "e", "v", "w", "xr"))
    header = (["t"] + list(labels) + [f"u{j}" for j in range(u.shape[1])]
              + [f"e_{lab}" for lab in labels] + [f"v_{lab}" for lab in labels]
              + [f"w{j}" for j in range(w.shape[1])] + [f"xr{j}" for j in range(xr.shape[1])])
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for k in range(y.shape[0]):
                wr.writerow([k] + [repr(float(x)) for x in
                                   np.concatenate([y[k], u[k], e[k], v[k], w[k], xr[k]])])
    except OSError as exc:
        raise OSError(f"cannot write traces to {path}: {exc}") from exc
