"""Noise calibration for Gaussian and Laplace mechanisms induced by LTI systems.

The central quantity is

    R(eps, delta) = (Qinv(delta) + sqrt(Qinv(delta)**2 + 2 eps)) / (2 eps)

with ``Q`` the standard Gaussian tail.  A Gaussian output-noise mechanism is
(eps, delta)-DP for c-adjacent data when the weighted sensitivity
``lambda_max(Gramian)^{-1/2}`` is at least ``c R(eps, delta)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erfc

from .exceptions import NumericalError, RankDeficiencyError, UnstableSystemError, ValidationError
from .linsys import StateSpace
from .observability import (
    infinite_observability_gramian,
    stack_markov_map,
    weighted_gramian,
)


@dataclass(frozen=True)
class PrivacyBudget:
    """Target (eps, delta) for c-adjacency under the p-norm."""

    epsilon: float
    delta: float
    c: float = 1.0
    p: int = 2

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 <= self.delta < 0.5:
            raise ValidationError(f"delta must lie in [0, 1/2), got {self.delta}")
        if not self.c > 0:
            raise ValidationError(f"adjacency bound c must be positive, got {self.c}")
        if self.p not in (1, 2):
            raise ValidationError(f"norm index p must be 1 or 2, got {self.p}")

    def require_gaussian(self):
        if self.delta <= 0:
            raise ValidationError("Gaussian calibration needs 0 < delta < 1/2")
        return self


@dataclass(frozen=True)
class GaussianNoiseSpec:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if S.shape[0] != S.shape[1] or np.min(np.linalg.eigvalsh((S + S.T) / 2)) <= 0:
            raise ValidationError("covariance must be symmetric positive definite")
        mu = np.asarray(self.mean, dtype=float).reshape(-1)
        if mu.shape[0] != S.shape[0]:
            raise ValidationError("mean and covariance sizes differ")
        object.__setattr__(self, "covariance", S)
        object.__setattr__(self, "mean", mu)


@dataclass(frozen=True)
class LaplaceNoiseSpec:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError("Laplace scale must be positive")


@dataclass
class InputNoisePlan:
    """Initial-state/input noise plus dummy output-noise coordinates."""

    Sigma1: np.ndarray
    Sigma2: np.ndarray
    n: int
    m: int
    T: int

    def covariance(self) -> np.ndarray:
        k1, k2 = self.Sigma1.shape[0], self.Sigma2.shape[0]
        S = np.zeros((k1 + k2, k1 + k2))
        S[:k1, :k1] = self.Sigma1
        S[k1:, k1:] = self.Sigma2
        return S

    def sample(self, rng: np.random.Generator):
        """Draw ``(v_x, V_T, Vbar_d)``."""
        z = rng.multivariate_normal(np.zeros(self.covariance().shape[0]), self.covariance())
        n, k1 = self.n, self.Sigma1.shape[0]
        return z[:n], z[n:k1], z[k1:]


@dataclass
class MechanismReport:
    """Outcome of a calibration check.

    ``achieved_floor`` and ``required_floor`` are on the same scale (a
    standard-deviation-like quantity); ``margin = achieved - required``.
    """

    kind: str
    achieved_floor: float
    required_floor: float
    achievable_epsilon: float | None
    t: int | None = None
    details: dict = field(default_factory=dict)

    @property
    def margin(self) -> float:
        return self.achieved_floor - self.required_floor

    @property
    def passed(self) -> bool:
        return self.margin >= 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["margin"] = self.margin
        d["passed"] = self.passed
        return d


# --- Gaussian tail -----------------------------------------------------------

def q_function(w):
    """Standard Gaussian tail ``P(Z > w)``."""
    return 0.5 * erfc(np.asarray(w, dtype=float) / math.sqrt(2.0))


def _qinv_guess(p):
    # Abramowitz & Stegun 26.2.23, |error| < 4.5e-4 on (0, 1/2]
    t = math.sqrt(-2.0 * math.log(p))
    return t - (2.515517 + 0.802853 * t + 0.010328 * t * t) / (
        1.0 + 1.432788 * t + 0.189269 * t * t + 0.001308 * t ** 3
    )


def q_inverse(delta: float, tol: float = 1e-12, max_iter: int = 50) -> float:
    """Inverse of :func:`q_function` on (0, 1/2], by Newton's method."""
    if not 0 < delta <= 0.5:
        raise ValidationError(f"Q^-1 needs 0 < delta <= 1/2, got {delta}")
    if delta == 0.5:
        return 0.0
    w = max(_qinv_guess(delta), 0.0)
    for _ in range(max_iter):
        pdf = math.exp(-0.5 * w * w) / math.sqrt(2.0 * math.pi)
        step = (float(q_function(w)) - delta) / pdf
        w += step
        if abs(step) <= tol * max(1.0, abs(w)):
            return w
    raise NumericalError(f"Q^-1({delta}) did not converge")


def r_value(epsilon: float, delta: float) -> float:
    """``R(eps, delta)``; requires eps > 0 and 0 < delta < 1/2."""
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    if not 0 < delta < 0.5:
        raise ValidationError(f"delta must lie in (0, 1/2), got {delta}")
    qi = q_inverse(delta)
    return (qi + math.sqrt(qi * qi + 2.0 * epsilon)) / (2.0 * epsilon)


def epsilon_for_floor(floor: float, delta: float, c: float = 1.0,
                      bracket=(1e-8, 1e8), max_iter: int = 200) -> float:
    """Smallest eps with ``floor >= c R(eps, delta)``.

    R is strictly decreasing in eps, so plain bisection on the bracket.
    """
    if not floor > 0:
        raise ValidationError("noise floor must be positive")
    lo, hi = bracket
    target = floor / c
    if r_value(hi, delta) > target:
        raise ValidationError(
            f"noise too small: even eps={hi:g} needs floor {c * r_value(hi, delta):.3g}"
            f" > {floor:.3g}"
        )
    if r_value(lo, delta) <= target:
        return lo
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi) if hi / lo > 4 else 0.5 * (lo + hi)
        if r_value(mid, delta) <= target:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-14 * hi:
            break
    return hi


# --- calibration against system sensitivity ---------------------------------

def _gramian_floor(sys, Sigma, t, T):
    rep = weighted_gramian(sys, t, T, Sigma)
    lam = rep.lambda_max
    if lam <= 0:
        raise ValidationError("[O_t N_t,T] is zero; the mechanism releases no data")
    return lam ** -0.5, rep


def verify_output_gaussian(sys: StateSpace, Sigma, budget: PrivacyBudget, t: int,
                           T: int | None = None) -> MechanismReport:
    """Output-noise Gaussian test ``lambda_max^{-1/2}(O_Sigma) >= c R``.

    With ``T`` given (T >= n, t >= T + n) only the first T+1 inputs are
    private and the finite-input Gramian is used.
    """
    budget.require_gaussian()
    if T is not None and (T < sys.n or t < T + sys.n):
        raise ValidationError(f"need T >= n and t >= T + n (n={sys.n}, T={T}, t={t})")
    achieved, rep = _gramian_floor(sys, Sigma, t, T)
    required = budget.c * r_value(budget.epsilon, budget.delta)
    return MechanismReport(
        kind="output-gaussian",
        achieved_floor=achieved,
        required_floor=required,
        achievable_epsilon=_safe_eps(achieved, budget.delta, budget.c),
        t=t,
        details={"lambda_max": rep.lambda_max, "T": rep.T},
    )


def _safe_eps(floor, delta, c):
    try:
        return epsilon_for_floor(floor, delta, c)
    except ValidationError:
        return None


def min_iid_sigma(sys: StateSpace, budget: PrivacyBudget, t: int) -> float:
    """Smallest i.i.d. output-noise std meeting the budget at horizon t."""
    budget.require_gaussian()
    lam = weighted_gramian(sys, t).lambda_max
    return budget.c * math.sqrt(lam) * r_value(budget.epsilon, budget.delta)


def stable_sensitivity(sys: StateSpace, variant: str = "full"):
    """``(sqrt(lambda_max(O_inf)), gamma_Hinf)`` terms of the stable-system bound.

    ``variant``: "full", "public_x0" (drop the Gramian term) or
    "public_input" (drop the H-infinity term).
    """
    from .hinf_sdp import hinf_norm

    if variant not in ("full", "public_x0", "public_input"):
        raise ValidationError(f"unknown variant {variant!r}")
    obs = 0.0
    gam = 0.0
    if variant != "public_x0" and sys.n:
        Oinf = infinite_observability_gramian(sys)
        obs = math.sqrt(max(np.linalg.eigvalsh(Oinf)[-1], 0.0))
    if variant != "public_input":
        gam = hinf_norm(sys)
    return obs, gam


def verify_stable_gaussian(sys: StateSpace, Sigma, budget: PrivacyBudget,
                           variant: str = "full") -> MechanismReport:
    """Horizon-free test for Schur-stable systems.

    Passes iff ``lambda_min^{1/2}(Sigma) >= c (sqrt(lambda_max(O_inf)) + gamma) R``.
    """
    budget.require_gaussian()
    if not sys.is_stable():
        raise UnstableSystemError("Gramian undefined for unstable system")
    S = np.atleast_2d(np.asarray(Sigma, dtype=float))
    lam_min = float(np.linalg.eigvalsh((S + S.T) / 2)[0])
    if lam_min <= 0:
        raise ValidationError("noise covariance must be positive definite")
    obs, gam = stable_sensitivity(sys, variant)
    achieved = math.sqrt(lam_min)
    required = budget.c * (obs + gam) * r_value(budget.epsilon, budget.delta)
    sens = obs + gam
    return MechanismReport(
        kind=f"stable-gaussian/{variant}",
        achieved_floor=achieved,
        required_floor=required,
        achievable_epsilon=_safe_eps(achieved / sens, budget.delta, budget.c) if sens > 0 else None,
        details={"sqrt_lambda_max_Oinf": obs, "hinf": gam},
    )


def calibrate_input_gaussian(budget: PrivacyBudget) -> float:
    """Floor on ``lambda_min`` of the input-noise covariance: ``(c R)^2``."""
    budget.require_gaussian()
    return (budget.c * r_value(budget.epsilon, budget.delta)) ** 2


def verify_input_gaussian(Sigma1, budget: PrivacyBudget) -> MechanismReport:
    """Input-noise test ``lambda_min^{1/2}(Sigma1) >= c R``; system independent."""
    S = np.atleast_2d(np.asarray(Sigma1, dtype=float))
    lam_min = float(np.linalg.eigvalsh((S + S.T) / 2)[0])
    if lam_min <= 0:
        raise ValidationError("input-noise covariance must be positive definite")
    achieved = math.sqrt(lam_min)
    required = math.sqrt(calibrate_input_gaussian(budget))
    return MechanismReport(
        kind="input-gaussian",
        achieved_floor=achieved,
        required_floor=required,
        achievable_epsilon=_safe_eps(achieved, budget.delta, budget.c),
    )


def equivalent_input_covariance(sys: StateSpace, Sigma, t: int, T: int) -> np.ndarray:
    """Input-noise covariance with the same privacy level as output noise Sigma.

    Returns ``O_{Sigma,t,T}^{-1}``.
    """
    rep = weighted_gramian(sys, t, T, Sigma)
    if rep.rank < rep.gramian.shape[0]:
        raise RankDeficiencyError(
            "Gramian is singular: system not strongly input observable at (t, T)"
        )
    lam, V = rep.eigenvalues, rep.eigenvectors
    S1 = (V / lam) @ V.T
    return (S1 + S1.T) / 2


def induced_one_norm(M) -> float:
    """Max absolute column sum."""
    M = np.atleast_2d(M)
    return float(np.max(np.sum(np.abs(M), axis=0))) if M.size else 0.0


def laplace_scale(sys: StateSpace, budget: PrivacyBudget, t: int) -> float:
    """i.i.d. Laplace scale ``b >= c |[O_t N_t]|_1 / eps`` for (eps, 0)-DP."""
    maps = stack_markov_map(sys, t)
    return budget.c * induced_one_norm(maps.ON) / budget.epsilon


def achievable_epsilon(sys: StateSpace, noise, delta: float, c: float, t: int,
                       T: int | None = None) -> float:
    """Smallest eps certified by the output-noise Gaussian test.

    ``noise`` is a covariance matrix, or a scalar taken as the i.i.d. std.
    """
    if not 0 < delta < 0.5:
        raise ValidationError(f"delta must lie in (0, 1/2), got {delta}")
    Sigma = noise
    if np.ndim(noise) == 0:
        if not noise > 0:
            raise ValidationError("noise std must be positive")
        Sigma = float(noise) ** 2
    floor, _ = _gramian_floor(sys, Sigma, t, T)
    return epsilon_for_floor(floor, delta, c)
