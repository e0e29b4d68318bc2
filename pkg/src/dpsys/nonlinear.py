"""Sensitivity and noise calibration for nonlinear systems
``x+ = f(x, u)``, ``y = h(x, u)``.

Nothing here is certified: sups over adjacency balls and domain boxes are
estimated by quasi-random sampling followed by local search, so they are
lower bounds on the true sup and the resulting noise levels can be
optimistic.  Every report says so.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm, qmc

from .exceptions import NumericalError, ValidationError
from .linsys import StateSpace
from .privacy import PrivacyBudget, r_value

SAMPLED_SUP_CAVEAT = (
    "sup estimated by sampling and local search: a lower bound on the true "
    "sensitivity, so the noise floor is not a certified calibration"
)
_OVERFLOW_GUARD = 1e150


@dataclass
class NonlinearSystem:
    """Callables ``f(x, u) -> x+`` and ``h(x, u) -> y`` on 1-d arrays.

    ``jac_f(x, u) -> (df/dx, df/du)`` and ``jac_h`` likewise are optional;
    central differences are used when they are missing.
    """

    f: Callable
    h: Callable
    n: int
    m: int
    q: int
    jac_f: Callable | None = None
    jac_h: Callable | None = None
    name: str = "custom"

    def __post_init__(self):
        if min(self.n, self.m, self.q) < 0 or self.q == 0:
            raise ValidationError("dimensions must be nonnegative with q >= 1")


def linear_system(sys: StateSpace) -> NonlinearSystem:
    """Wrap an LTI system (with exact Jacobians)."""
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    return NonlinearSystem(
        f=lambda x, u: A @ x + B @ u,
        h=lambda x, u: C @ x + D @ u,
        n=sys.n, m=sys.m, q=sys.q,
        jac_f=lambda x, u: (A, B),
        jac_h=lambda x, u: (C, D),
        name="linear",
    )


def logistic_system(rate: float = 3.5, input_gain: float = 1.0) -> NonlinearSystem:
    """``x+ = rate x (1 - x) + input_gain u``, ``y = x``."""
    return NonlinearSystem(
        f=lambda x, u: rate * x * (1 - x) + input_gain * u,
        h=lambda x, u: np.asarray(x, dtype=float).copy(),
        n=1, m=1, q=1,
        jac_f=lambda x, u: (np.atleast_2d(rate * (1 - 2 * x)), np.array([[input_gain]])),
        jac_h=lambda x, u: (np.eye(1), np.zeros((1, 1))),
        name="logistic",
    )


def static_map(h: Callable, n: int, q: int = 1, dh: Callable | None = None) -> NonlinearSystem:
    """Memoryless output ``y = h(x)`` of an initial condition (zero inputs)."""
    jac_h = None if dh is None else (lambda x, u: (np.atleast_2d(dh(x)), np.zeros((q, 0))))
    return NonlinearSystem(
        f=lambda x, u: np.asarray(x, dtype=float),
        h=lambda x, u: np.atleast_1d(np.asarray(h(x), dtype=float)),
        n=n, m=0, q=q,
        jac_f=lambda x, u: (np.eye(n), np.zeros((n, 0))),
        jac_h=jac_h,
        name="static",
    )


BUILTINS = {
    "logistic": logistic_system,
}


def _inputs_array(sys, inputs):
    U = np.asarray(inputs, dtype=float)
    if U.ndim == 1:
        U = U.reshape(-1, sys.m) if sys.m else U.reshape(-1, 0)
    if U.ndim != 2 or U.shape[1] != sys.m:
        raise ValidationError(f"inputs must have shape (t+1, {sys.m})")
    if U.shape[0] < 1:
        raise ValidationError("need at least one input sample (t >= 0)")
    return U


def _eval(fn, what, k, x, u, size):
    try:
        v = np.atleast_1d(np.asarray(fn(x, u), dtype=float)).reshape(-1)
    except Exception as exc:  # user callables may raise anything
        raise NumericalError(f"{what} failed at step {k}: {exc}") from exc
    if v.shape[0] != size:
        raise ValidationError(f"{what} returned {v.shape[0]} values at step {k}, expected {size}")
    if not np.all(np.isfinite(v)):
        raise NumericalError(f"{what} returned non-finite values at step {k}")
    return v


def stack_nonlinear_output(sys: NonlinearSystem, x0, inputs) -> np.ndarray:
    """``[h(x(0), u(0)); ...; h(x(t), u(t))]`` along the simulated trajectory."""
    U = _inputs_array(sys, inputs)
    x = np.asarray(x0, dtype=float).reshape(-1)
    if x.shape[0] != sys.n:
        raise ValidationError(f"x0 has length {x.shape[0]}, expected {sys.n}")
    out = []
    for k, u in enumerate(U):
        out.append(_eval(sys.h, "h", k, x, u, sys.q))
        if k < len(U) - 1:
            x = _eval(sys.f, "f", k, x, u, sys.n)
    return np.concatenate(out)


def _split(sys, z, t):
    return z[:sys.n], z[sys.n:].reshape(t + 1, sys.m)


def output_jacobian(sys: NonlinearSystem, x0, inputs) -> np.ndarray:
    """``dH_t / d(x0, U_t)``: chain rule with analytic Jacobians, else central differences."""
    U = _inputs_array(sys, inputs)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    t = U.shape[0] - 1
    n, m, q = sys.n, sys.m, sys.q
    d = n + (t + 1) * m
    if sys.jac_f is not None and sys.jac_h is not None:
        J = np.zeros(((t + 1) * q, d))
        dx = np.hstack([np.eye(n), np.zeros((n, (t + 1) * m))])  # d x(k) / d z
        x = x0
        for k, u in enumerate(U):
            Hx, Hu = (np.atleast_2d(np.asarray(M, dtype=float)) for M in sys.jac_h(x, u))
            row = Hx.reshape(q, n) @ dx
            row[:, n + k * m:n + (k + 1) * m] += Hu.reshape(q, m)
            J[k * q:(k + 1) * q] = row
            if k < t:
                Fx, Fu = (np.atleast_2d(np.asarray(M, dtype=float)) for M in sys.jac_f(x, u))
                new = Fx.reshape(n, n) @ dx
                new[:, n + k * m:n + (k + 1) * m] += Fu.reshape(n, m)
                dx = new
                x = _eval(sys.f, "f", k, x, u, n)
        return J
    z0 = np.concatenate([x0, U.reshape(-1)])
    J = np.zeros(((t + 1) * q, d))
    for j in range(d):
        h = 1e-6 * (1 + abs(z0[j]))
        zp, zm = z0.copy(), z0.copy()
        zp[j] += h
        zm[j] -= h
        J[:, j] = (stack_nonlinear_output(sys, *_split(sys, zp, t))
                   - stack_nonlinear_output(sys, *_split(sys, zm, t))) / (2 * h)
    return J


@dataclass
class SearchConfig:
    samples: int = 4096
    local_starts: int = 8
    seed: int = 0
    maxiter: int = 4000


@dataclass
class NonlinearCalibration:
    """Sampled sup of the weighted output deviation and the implied noise floor.

    ``sigma_floor`` is the i.i.d. std floor (``sup * R``) for identity
    weighting; with a weighting covariance it is the required scale factor.
    """

    sup_deviation: float
    sigma_floor: float
    worst_x0_shift: np.ndarray
    worst_input_shift: np.ndarray
    evaluations: int
    caveat: str = SAMPLED_SUP_CAVEAT

    def to_dict(self) -> dict:
        return {
            "sup_deviation": self.sup_deviation,
            "sigma_floor": self.sigma_floor,
            "worst_x0_shift": self.worst_x0_shift.tolist(),
            "worst_input_shift": self.worst_input_shift.tolist(),
            "evaluations": self.evaluations,
            "lower_bound_only": True,
            "caveat": self.caveat,
        }


def _ball_samples(d, count, seed):
    """Quasi-random points in the closed unit 2-norm ball of R^d.

    Half lie on the sphere, where sups of ray-increasing deviations sit.
    """
    sob = qmc.Sobol(d + 1, scramble=True, seed=seed)
    u = sob.random(count)
    g = norm.ppf(np.clip(u[:, :d], 1e-12, 1 - 1e-12))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = u[:, d] ** (1.0 / d)
    r[: count // 2] = 1.0
    return g * r[:, None]


def _project_ball(z, c):
    nz = np.linalg.norm(z)
    return z if nz <= c else z * (c / nz)


def calibrate_nonlinear_gaussian(sys: NonlinearSystem, x0, inputs, budget: PrivacyBudget,
                                 search_config: SearchConfig | None = None,
                                 Sigma=None) -> NonlinearCalibration:
    """Sampled sup of ``|H_t(x0 + dx, U + dU) - H_t(x0, U)|`` over the c-ball.

    The deviation is measured in the ``Sigma^{-1}`` norm when Sigma is
    given.  The floor is ``sup * R(eps, delta)``; the ball radius already
    carries the adjacency bound c.
    """
    budget.require_gaussian()
    cfg = search_config or SearchConfig()
    U = _inputs_array(sys, inputs)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    t = U.shape[0] - 1
    d = sys.n + (t + 1) * sys.m
    if d == 0:
        raise ValidationError("no private data: state and input dimensions are zero")
    base = stack_nonlinear_output(sys, x0, U)
    W = None
    if Sigma is not None:
        S = np.atleast_2d(np.asarray(Sigma, dtype=float))
        if S.size == 1:
            S = float(S) * np.eye(base.shape[0])
        W = np.linalg.cholesky(np.linalg.inv((S + S.T) / 2)).T
    c = budget.c
    count = [0]

    def deviation(z):
        count[0] += 1
        dxx, dU = _split(sys, z, t)
        diff = stack_nonlinear_output(sys, x0 + dxx, U + dU) - base
        return float(np.linalg.norm(diff if W is None else W @ diff))

    pts = c * _ball_samples(d, cfg.samples, cfg.seed)
    vals = np.array([deviation(z) for z in pts])
    best_z, best_v = pts[int(np.argmax(vals))], float(vals.max())
    for i in np.argsort(vals)[::-1][:cfg.local_starts]:
        res = minimize(lambda y: -deviation(_project_ball(y, c)), pts[i], method="Nelder-Mead",
                       options={"maxiter": cfg.maxiter, "xatol": 1e-10 * c, "fatol": 1e-14})
        z = _project_ball(res.x, c)
        v = deviation(z)
        if v > best_v:
            best_z, best_v = z, v
    dxx, dU = _split(sys, best_z, t)
    floor = best_v * r_value(budget.epsilon, budget.delta)
    return NonlinearCalibration(best_v, floor, dxx, dU, count[0])


def _box(box, d):
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (d,)).copy() for b in box)
    if np.any(hi < lo):
        raise ValidationError("box upper bounds must not be below lower bounds")
    return lo, hi


def nonlinear_laplace_scale(sys: NonlinearSystem, budget: PrivacyBudget, box, t: int,
                            samples: int = 1024, seed: int = 0) -> dict:
    """Laplace scale ``c / eps * sup_box |dH_t/d(x0, U_t)|_1`` (sampled sup).

    ``box = (lower, upper)`` bounds the stacked ``(x0, U_t)`` vector.  The
    sup is taken over Sobol samples, the box centre and (for up to 12
    coordinates) all box corners.
    """
    d = sys.n + (t + 1) * sys.m
    lo, hi = _box(box, d)
    pts = [0.5 * (lo + hi)]
    if d <= 12:
        pts.extend(np.array(corner) for corner in itertools.product(*zip(lo, hi)))
    if samples:
        u = qmc.Sobol(d, scramble=True, seed=seed).random(samples)
        pts.extend(lo + u * (hi - lo))
    best, arg = -1.0, None
    for z in pts:
        J = output_jacobian(sys, z[:sys.n], z[sys.n:].reshape(t + 1, sys.m))
        if not np.all(np.isfinite(J)) or np.abs(J).max() > _OVERFLOW_GUARD:
            raise NumericalError("unbounded sensitivity on box")
        v = float(np.max(np.sum(np.abs(J), axis=0)))
        if v > best:
            best, arg = v, z
    return {
        "scale": budget.c * best / budget.epsilon,
        "sup_jacobian_one_norm": best,
        "argmax": np.asarray(arg).tolist(),
        "points": len(pts),
        "lower_bound_only": True,
        "caveat": SAMPLED_SUP_CAVEAT,
    }


def local_input_observability_probe(sys: NonlinearSystem, x0, inputs, rtol=1e-9) -> dict:
    """Heuristic check that (x0, u(0)) is locally recoverable from H_t.

    Compares the Jacobian rank with the rank of its columns for later
    inputs: the difference must be n + m.
    """
    U = _inputs_array(sys, inputs)
    J = output_jacobian(sys, x0, U)
    k = sys.n + sys.m

    def rank(M):
        if M.size == 0:
            return 0
        s = np.linalg.svd(M, compute_uv=False)
        return int(np.sum(s > rtol * max(s[0], 1e-300)))

    gap = rank(J) - rank(J[:, k:])
    return {"locally_recoverable": gap == k, "rank_gap": gap, "required": k,
            "heuristic": True}


# --- incremental input-to-output stability ----------------------------------

@dataclass
class KFunction:
    """Gain function on ``[0, r_max]``, checked to vanish at 0 and increase."""

    fn: Callable
    r_max: float = 10.0
    strict: bool = True
    grid: int = 257

    def __post_init__(self):
        r = np.linspace(0.0, self.r_max, self.grid)
        v = np.array([float(self.fn(x)) for x in r])
        if abs(v[0]) > 1e-12:
            raise ValidationError("gain function must vanish at 0")
        dv = np.diff(v)
        if np.any(dv < 0) or (self.strict and np.any(dv <= 0)):
            raise ValidationError("gain function is not increasing on its sample grid")

    def __call__(self, r):
        return float(self.fn(r))

    @classmethod
    def zero(cls, r_max: float = 10.0) -> "KFunction":
        return cls(lambda r: 0.0, r_max, strict=False)

    @classmethod
    def linear(cls, slope: float, r_max: float = 10.0) -> "KFunction":
        if not slope > 0:
            raise ValidationError("slope must be positive")
        return cls(lambda r: slope * r, r_max)


@dataclass
class IosCertificate:
    """Candidate incremental-IOS certificate.

    ``V(x, x') >= 0`` storage, contraction ``lam`` in (0, 1), gains
    ``sigma1, sigma2`` (class K, or zero), upper bound ``alpha2`` and output
    constant ``c1 > 0``.
    """

    V: Callable
    lam: float
    sigma1: Callable
    sigma2: Callable
    alpha2: Callable
    c1: float = 1.0

    def __post_init__(self):
        if not 0 < self.lam < 1:
            raise ValidationError("contraction factor must lie in (0, 1)")
        if not self.c1 > 0:
            raise ValidationError("c1 must be positive")


def _pairs_from_spec(sys, spec):
    n, m = sys.n, sys.m
    d = 2 * n + 2 * m
    lo = np.concatenate([np.broadcast_to(spec["state_box"][0], n),
                         np.broadcast_to(spec["state_box"][0], n),
                         np.broadcast_to(spec.get("input_box", (0, 0))[0], m),
                         np.broadcast_to(spec.get("input_box", (0, 0))[0], m)]).astype(float)
    hi = np.concatenate([np.broadcast_to(spec["state_box"][1], n),
                         np.broadcast_to(spec["state_box"][1], n),
                         np.broadcast_to(spec.get("input_box", (0, 0))[1], m),
                         np.broadcast_to(spec.get("input_box", (0, 0))[1], m)]).astype(float)
    if "grid" in spec:
        axes = [np.linspace(lo[i], hi[i], int(spec["grid"])) for i in range(d)]
        Z = np.array(list(itertools.product(*axes)))
    else:
        count = int(spec.get("count", 4096))
        Z = lo + qmc.Sobol(d, scramble=True, seed=spec.get("seed", 0)).random(count) * (hi - lo)
    if spec.get("diagonal", False):
        Z[:, n:2 * n] = Z[:, :n]
    return Z


def check_incremental_ios(sys: NonlinearSystem, cert: IosCertificate, sample_spec: dict,
                          tol: float = 1e-12) -> dict:
    """Evaluate the three certificate inequalities on sampled pairs.

    ``sample_spec``: ``state_box`` and ``input_box`` as (low, high), plus
    either ``grid`` (points per coordinate of the pair space) or ``count``
    and ``seed``; ``diagonal=True`` samples only pairs with x = x'.

    Margins (right minus left side, nonnegative when satisfied):
      output: ``V(x,x') + sigma1(|u-u'|) - c1 |h(x,u) - h(x',u')|``
      upper:  ``alpha2(|x-x'|) - V(x,x')``
      decay:  ``lam V(x,x') + sigma2(|u-u'|) - V(f(x,u), f(x',u'))``
    Passing on samples is evidence, not a proof.
    """
    n, m = sys.n, sys.m
    Z = _pairs_from_spec(sys, sample_spec)
    worst = {"output": math.inf, "upper": math.inf, "decay": math.inf}
    witness = {}
    for z in Z:
        x, xp = z[:n], z[n:2 * n]
        u, up = z[2 * n:2 * n + m], z[2 * n + m:]
        V = float(cert.V(x, xp))
        du = float(np.linalg.norm(u - up))
        dx = float(np.linalg.norm(x - xp))
        dy = float(np.linalg.norm(np.atleast_1d(sys.h(x, u)) - np.atleast_1d(sys.h(xp, up))))
        margins = {
            "output": V + cert.sigma1(du) - cert.c1 * dy,
            "upper": cert.alpha2(dx) - V,
            "decay": cert.lam * V + cert.sigma2(du)
            - float(cert.V(np.atleast_1d(sys.f(x, u)), np.atleast_1d(sys.f(xp, up)))),
        }
        for k, v in margins.items():
            if v < worst[k]:
                worst[k] = v
                witness[k] = {"x": x.tolist(), "x_prime": xp.tolist(),
                              "u": u.tolist(), "u_prime": up.tolist(), "margin": v}
    holds = all(v >= -tol for v in worst.values())
    return {
        "holds_on_samples": holds,
        "worst_margins": worst,
        "witnesses": {k: w for k, w in witness.items() if w["margin"] < -tol},
        "samples": int(Z.shape[0]),
        "proof": False,
    }


def calibrate_ios_gaussian(alpha: KFunction, gamma: KFunction, budget: PrivacyBudget,
                           t: int) -> float:
    """Floor on ``lambda_min(Sigma)``: ``((alpha(c) + (t+1) gamma(c)) R)^2``."""
    budget.require_gaussian()
    if t < 0 or int(t) != t:
        raise ValidationError("horizon t must be a nonnegative integer")
    for g in (alpha, gamma):
        if not isinstance(g, KFunction):
            raise ValidationError("gains must be KFunction instances")
        if budget.c > g.r_max:
            raise ValidationError(f"adjacency bound c={budget.c} exceeds gain domain {g.r_max}")
    root = (alpha(budget.c) + (t + 1) * gamma(budget.c)) * r_value(budget.epsilon, budget.delta)
    return root ** 2
