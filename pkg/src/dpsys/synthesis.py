"""Output-regulation controllers and the privacy-preserving tracking controller.

Plant ``x_p+ = A_p x_p + B_p u_p``, ``y_p = C_p x_p + D_p u_p``; exosystem
``x_r+ = A_r x_r``, ``y_r = C_r x_r``; tracking error ``e = y_p - y_r``.

The privacy-preserving controller reads the exosystem state directly:

    x_c+ = Abar_c x_c + Abar_r x_r - L1 e,    u_p = G1 x_c + G2 x_r

with ``Abar_c = A_p + B_p G1 + L1 (C_p + D_p G1)`` and
``Abar_r = (B_p + L1 D_p) G2 - L1 C_r``.  The last sign is what makes
``x_c = X x_r`` invariant with ``e = 0``; the opposite sign leaves a
steady-state offset.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import hinf_sdp
from .exceptions import (
    DimensionError,
    InfeasibleError,
    NumericalError,
    UnstableSystemError,
    ValidationError,
)
from .linsys import StateSpace, dare, interconnect
from .observability import infinite_observability_gramian
from .privacy import PrivacyBudget, r_value


def _radius(M) -> float:
    M = np.atleast_2d(M)
    return float(np.max(np.abs(np.linalg.eigvals(M)))) if M.size else 0.0


def _check_pair(plant: StateSpace, exo: StateSpace):
    if exo.C.shape != (plant.q, exo.n):
        raise DimensionError(
            f"exosystem output has {exo.C.shape[0]} rows, plant output has {plant.q}"
        )


@dataclass
class CompositeSystem:
    """Plant and exosystem stacked: state ``[x_p; x_r]``, output e."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    n_p: int
    n_r: int

    @classmethod
    def build(cls, plant: StateSpace, exo: StateSpace) -> "CompositeSystem":
        _check_pair(plant, exo)
        n_p, n_r = plant.n, exo.n
        A = np.block([[plant.A, np.zeros((n_p, n_r))], [np.zeros((n_r, n_p)), exo.A]])
        B = np.vstack([plant.B, np.zeros((n_r, plant.m))])
        C = np.hstack([plant.C, -exo.C])
        return cls(A, B, C, plant.D.copy(), n_p, n_r)


def _pbh_witnesses(A, B, unstable_only=True, tol=1e-9):
    """Eigenvalues where ``[A - lam I, B]`` loses rank."""
    n = A.shape[0]
    bad = []
    for lam in np.linalg.eigvals(A):
        if unstable_only and abs(lam) < 1 - tol:
            continue
        M = np.hstack([A - lam * np.eye(n), B])
        s = np.linalg.svd(M, compute_uv=False)
        if len(s) < n or s[n - 1] <= tol * max(1.0, s[0]):
            bad.append(complex(lam))
    return bad


@dataclass
class RegulatorSolution:
    """``X A_r = A_p X + B_p U`` and ``C_p X + D_p U = C_r``.

    ``residual`` is the Frobenius norm of the stacked equation residual;
    ``exact`` tells whether it is below ``1e-9 * scale``.
    """

    X: np.ndarray
    U: np.ndarray
    residual: float
    exact: bool


def _regulator_scale(plant, exo):
    return max(1.0, *(float(np.abs(M).max()) for M in
                      (plant.A, plant.B, plant.C, exo.A, exo.C) if M.size))


def _regulator_lstsq(plant: StateSpace, exo: StateSpace):
    n_p, m_p = plant.n, plant.m
    n_r = exo.n
    Ip, Ir = np.eye(n_p), np.eye(n_r)
    # column-major vec:  vec(X A_r) = (A_r' kron I) vec X
    top = np.hstack([np.kron(exo.A.T, Ip) - np.kron(Ir, plant.A), -np.kron(Ir, plant.B)])
    bot = np.hstack([np.kron(Ir, plant.C), np.kron(Ir, plant.D)])
    M = np.vstack([top, bot])
    rhs = np.concatenate([np.zeros(n_p * n_r), exo.C.reshape(-1, order="F")])
    z, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    X = z[:n_p * n_r].reshape((n_p, n_r), order="F")
    U = z[n_p * n_r:].reshape((m_p, n_r), order="F")
    res = float(np.linalg.norm(M @ z - rhs))
    return X, U, res


def solve_regulator_equations(plant: StateSpace, exo: StateSpace,
                              strict: bool = True) -> RegulatorSolution:
    """Dense least-squares solve of the regulator equations.

    ``strict`` (default) raises when the system has no exact solution; with
    ``strict=False`` the least-squares pair is returned and flagged inexact.
    """
    _check_pair(plant, exo)
    X, U, res = _regulator_lstsq(plant, exo)
    exact = res < 1e-9 * _regulator_scale(plant, exo)
    if strict and not exact:
        raise InfeasibleError(f"regulator equations unsolvable (residual {res:.3e})")
    return RegulatorSolution(X, U, res, bool(exact))


def reference_residual(plant: StateSpace, exo: StateSpace, x_r0) -> float:
    """Residual of the regulator equations restricted to one reference.

    For ``A_r = I`` this checks whether the steady state demanded by
    ``C_r x_r0`` is reachable, even when the full equations are not.
    """
    sol_X, sol_U, _ = _regulator_lstsq(plant, exo)
    xr = np.asarray(x_r0, dtype=float).reshape(-1)
    xi, mu = sol_X @ xr, sol_U @ xr
    dyn = sol_X @ (exo.A @ xr) - plant.A @ xi - plant.B @ mu
    out = plant.C @ xi + plant.D @ mu - exo.C @ xr
    return float(np.linalg.norm(np.concatenate([dyn, out])))


def check_assumptions(plant: StateSpace, exo: StateSpace, x_r0=None) -> dict:
    """Exosystem antistability, stabilizability, detectability, regulator solvability.

    Never raises on a failed assumption; each entry holds ``holds`` plus a
    witness.  With ``x_r0`` the report adds ``reference_residual``.
    """
    _check_pair(plant, exo)
    eig_r = np.linalg.eigvals(exo.A) if exo.n else np.zeros(0)
    a1 = bool(np.all(np.abs(eig_r) >= 1 - 1e-9))
    bad_stab = _pbh_witnesses(plant.A, plant.B)
    comp = CompositeSystem.build(plant, exo)
    bad_det = _pbh_witnesses(comp.A.T, comp.C.T)
    X, U, res = _regulator_lstsq(plant, exo)
    exact = res < 1e-9 * _regulator_scale(plant, exo)
    report = {
        "exosystem_not_stable": {
            "holds": a1,
            "eigenvalues": [[float(z.real), float(z.imag)] for z in eig_r],
        },
        "plant_stabilizable": {
            "holds": not bad_stab,
            "uncontrollable_unstable_modes": [[z.real, z.imag] for z in bad_stab],
        },
        "composite_detectable": {
            "holds": not bad_det,
            "unobservable_unstable_modes": [[z.real, z.imag] for z in bad_det],
        },
        "regulator_solvable": {"holds": bool(exact), "residual": res},
    }
    if x_r0 is not None:
        rr = reference_residual(plant, exo, x_r0)
        report["regulator_solvable"]["reference_residual"] = rr
        report["regulator_solvable"]["reference_consistent"] = bool(
            rr < 1e-9 * _regulator_scale(plant, exo) * max(1.0, float(np.abs(x_r0).max())))
    return report


# --- observer-based tracking controller ---------------------------------------

@dataclass
class TrackingController:
    """``u_p = G x_c``, ``x_c+ = A_c x_c - L e`` with an internal exosystem model."""

    G: np.ndarray
    L: np.ndarray
    A_c: np.ndarray
    G1: np.ndarray
    G2: np.ndarray

    def loop(self, plant: StateSpace, exo: StateSpace) -> StateSpace:
        nr = exo.n
        nc = self.A_c.shape[0]
        return interconnect(plant, exo, self.A_c, np.zeros((nc, nr)), self.L, self.G,
                            np.zeros((plant.m, nr)))


def design_observer_tracking_controller(plant: StateSpace, exo: StateSpace, G1, L,
                                        strict: bool = True) -> TrackingController:
    """Assemble the observer-based tracking controller from G1 and L = [L1; L2]."""
    comp = CompositeSystem.build(plant, exo)
    G1 = np.atleast_2d(np.asarray(G1, dtype=float))
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if G1.shape != (plant.m, plant.n):
        raise DimensionError(f"G1 has shape {G1.shape}, expected {(plant.m, plant.n)}")
    if L.shape != (comp.n_p + comp.n_r, plant.q):
        raise DimensionError(f"L has shape {L.shape}, expected {(comp.n_p + comp.n_r, plant.q)}")
    r = _radius(plant.A + plant.B @ G1)
    if r >= 1:
        raise UnstableSystemError(f"A_p + B_p G1 not Schur stable (radius {r:.6g})")
    r = _radius(comp.A + L @ comp.C)
    if r >= 1:
        raise UnstableSystemError(f"observer matrix not Schur stable (radius {r:.6g})")
    sol = solve_regulator_equations(plant, exo, strict=strict)
    G2 = sol.U - G1 @ sol.X
    G = np.hstack([G1, G2])
    A_c = comp.A + L @ comp.C + (comp.B + L @ comp.D) @ G
    return TrackingController(G, L, A_c, G1, G2)


# --- privacy-preserving controller --------------------------------------------

def _arr(x):
    return None if x is None else np.asarray(x, dtype=float)


@dataclass
class PrivacyController:
    """Stable tracking controller with a certified H-infinity bound ``gamma``
    on its error-to-input map ``(Abar_c, -L1, G1, 0)``."""

    G1: np.ndarray
    G2: np.ndarray
    L1: np.ndarray
    Abar_c: np.ndarray
    Abar_r: np.ndarray
    gamma: float
    X: np.ndarray | None = None
    U: np.ndarray | None = None
    certificates: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.Abar_c.shape[0]

    def error_to_input(self) -> StateSpace:
        """``(Abar_c, -L1, G1, 0)``: the map whose privacy is calibrated."""
        return StateSpace(self.Abar_c, -self.L1, self.G1,
                          np.zeros((self.G1.shape[0], self.L1.shape[1])))

    def reference_to_input(self) -> StateSpace:
        """``(Abar_c, Abar_r, G1, G2)``: contribution of the exosystem state."""
        return StateSpace(self.Abar_c, self.Abar_r, self.G1, self.G2)

    def steady_state(self, x_r0):
        if self.X is None:
            raise ValidationError("controller has no regulator solution attached")
        return self.X @ np.asarray(x_r0, dtype=float)

    def loop(self, plant: StateSpace, exo: StateSpace) -> StateSpace:
        return interconnect(plant, exo, self.Abar_c, self.Abar_r, self.L1, self.G1, self.G2)

    def to_dict(self) -> dict:
        d = {k: np.asarray(getattr(self, k)).tolist()
             for k in ("G1", "G2", "L1", "Abar_c", "Abar_r")}
        d["gamma"] = self.gamma
        d["X"] = None if self.X is None else self.X.tolist()
        d["U"] = None if self.U is None else self.U.tolist()
        d["certificates"] = self.certificates
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PrivacyController":
        try:
            c = cls(
                G1=_arr(d["G1"]), G2=_arr(d["G2"]), L1=_arr(d["L1"]),
                Abar_c=_arr(d["Abar_c"]), Abar_r=_arr(d["Abar_r"]),
                gamma=float(d["gamma"]), X=_arr(d.get("X")), U=_arr(d.get("U")),
                certificates=d.get("certificates", {}),
            )
        except KeyError as exc:
            raise ValidationError(f"controller file missing field {exc}") from None
        c.G1, c.L1, c.Abar_c = (np.atleast_2d(v) for v in (c.G1, c.L1, c.Abar_c))
        return c

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "PrivacyController":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def assemble_privacy_controller(plant: StateSpace, exo: StateSpace, G1, L1,
                                regulator: RegulatorSolution, gamma: float,
                                certificates=None) -> PrivacyController:
    G1 = np.atleast_2d(np.asarray(G1, dtype=float))
    L1 = np.atleast_2d(np.asarray(L1, dtype=float))
    G2 = regulator.U - G1 @ regulator.X
    Abar_c = plant.A + plant.B @ G1 + L1 @ (plant.C + plant.D @ G1)
    Abar_r = (plant.B + L1 @ plant.D) @ G2 - L1 @ exo.C
    return PrivacyController(G1, G2, L1, Abar_c, Abar_r, float(gamma),
                             regulator.X, regulator.U, dict(certificates or {}))


def lqr_gain(plant: StateSpace, Q=None, R=None) -> np.ndarray:
    """``G1 = -K`` from the discrete Riccati equation (identity weights by default)."""
    Q = np.eye(plant.n) if Q is None else Q
    R = np.eye(plant.m) if R is None else R
    _, K = dare(plant.A, plant.B, Q, R)
    return -K


def minimal_observer_decay(plant, G1, gamma, gamma_bar=None, iters: int = 14) -> float:
    """Smallest observer decay rate compatible with the H-infinity bound.

    The max-slack solution of the design LMIs tends toward ``L1 = 0`` (which
    meets any gamma trivially but leaves the observer as slow as the plant);
    pinning the decay rate forces an observer that actually corrects.
    """
    if not hinf_sdp.lemma_feasible(plant, G1, gamma, 1.0, gamma_bar).feasible:
        raise InfeasibleError(f"design LMIs infeasible at gamma={gamma:g}")
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if hinf_sdp.lemma_feasible(plant, G1, gamma, mid, gamma_bar).feasible:
            hi = mid
        else:
            lo = mid
    return hi


def _upper_gamma(plant, G1, gamma, gamma_bar):
    g = max(gamma, 1e-3)
    for _ in range(40):
        g *= 2
        if hinf_sdp.lemma_feasible(plant, G1, g, 1.0, gamma_bar).feasible:
            return g
    return None


def design_privacy_controller(plant: StateSpace, exo: StateSpace, G1=None,
                              gamma: float = 1.0, gamma_bar: float | None = None,
                              observer_decay="auto", decay_margin: float = 0.01,
                              strict_regulator: bool = True) -> PrivacyController:
    """LMI-based design of ``L1`` for a given state-feedback gain G1.

    ``observer_decay``: "auto" bisects the fastest observer decay rate the
    LMIs admit and adds ``decay_margin``; a number fixes it; 1.0 recovers
    plain observer stability.  The result is re-verified (stability of
    ``Abar_c`` and ``A_p + L1 C_p``, frequency-sweep H-infinity norm) before
    it is returned.
    """
    _check_pair(plant, exo)
    if not gamma > 0:
        raise ValidationError("gamma must be positive")
    G1 = lqr_gain(plant) if G1 is None else np.atleast_2d(np.asarray(G1, dtype=float))
    regulator = solve_regulator_equations(plant, exo, strict=strict_regulator)

    feasible_at_one = hinf_sdp.lemma_feasible(plant, G1, gamma, 1.0, gamma_bar)
    if not feasible_at_one.feasible:
        upper = _upper_gamma(plant, G1, gamma, gamma_bar)
        estimate = None
        if upper is not None:
            estimate = hinf_sdp.min_feasible_gamma(plant, G1, bracket=(gamma, upper),
                                                   gamma_bar=gamma_bar)
        raise InfeasibleError(
            f"design LMIs infeasible at gamma={gamma:g}"
            + (f"; smallest feasible gamma is about {estimate:.4g}" if estimate else ""),
            estimate=estimate,
        )

    if observer_decay == "auto":
        decay = min(1.0, minimal_observer_decay(plant, G1, gamma, gamma_bar) + decay_margin)
    else:
        decay = float(observer_decay)
        if not 0 < decay <= 1:
            raise ValidationError("observer_decay must lie in (0, 1]")
    sol = hinf_sdp.lemma_feasible(plant, G1, gamma, decay, gamma_bar)
    if not sol.feasible:
        raise InfeasibleError(f"design LMIs infeasible at gamma={gamma:g}, decay={decay:g}")

    P, Lhat = sol.assignments["P"], sol.assignments["Lhat"]
    L1 = np.linalg.solve(P, Lhat)
    ctrl = assemble_privacy_controller(plant, exo, G1, L1, regulator, gamma)
    certify_privacy_controller(plant, ctrl)
    ctrl.certificates.update(
        lmi_margin=sol.margin,
        observer_decay=decay,
        regulator_residual=regulator.residual,
        regulator_exact=regulator.exact,
    )
    if gamma_bar is not None:
        loop_gain = closed_loop_gain(plant, exo, ctrl)
        if loop_gain > gamma_bar * (1 + 1e-6):
            raise NumericalError(
                f"closed-loop gain {loop_gain:.6g} exceeds certified {gamma_bar:.6g}"
            )
        ctrl.certificates.update(gamma_bar=gamma_bar, closed_loop_hinf=loop_gain)
    return ctrl


def closed_loop_gain(plant: StateSpace, exo: StateSpace, ctrl: PrivacyController) -> float:
    """H-infinity norm from input noise w to y_p of the plant-controller loop."""
    A = np.block([[plant.A, plant.B @ ctrl.G1],
                  [-ctrl.L1 @ plant.C, ctrl.Abar_c - ctrl.L1 @ plant.D @ ctrl.G1]])
    B = np.vstack([plant.B, -ctrl.L1 @ plant.D])
    C = np.hstack([plant.C, plant.D @ ctrl.G1])
    return hinf_sdp.hinf_norm(StateSpace(A, B, C, plant.D))


def certify_privacy_controller(plant: StateSpace, ctrl: PrivacyController) -> dict:
    """Re-check the controller from its matrices alone; raise on violation."""
    r_obs = _radius(plant.A + ctrl.L1 @ plant.C)
    r_ctl = _radius(ctrl.Abar_c)
    r_fb = _radius(plant.A + plant.B @ ctrl.G1)
    if max(r_obs, r_ctl, r_fb) >= 1:
        raise NumericalError(
            f"designed matrices not Schur stable (observer {r_obs:.6g}, controller "
            f"{r_ctl:.6g}, feedback {r_fb:.6g})"
        )
    g = hinf_sdp.hinf_norm(ctrl.error_to_input())
    if g > ctrl.gamma * (1 + 1e-6):
        raise NumericalError(f"controller H-inf norm {g:.8g} exceeds certified {ctrl.gamma:.8g}")
    ctrl.certificates.update(observer_radius=r_obs, controller_radius=r_ctl,
                             feedback_radius=r_fb, hinf=g)
    return ctrl.certificates


def fixed_gain_certificate(plant: StateSpace, G1, L1, gamma: float) -> hinf_sdp.SdpSolution:
    """Search P for a given L1 (``Lhat = P L1``) in the design LMIs."""
    return hinf_sdp.lemma_feasible(plant, G1, gamma, L1_fixed=L1)


def controller_privacy_noise(controller: PrivacyController, budget: PrivacyBudget) -> float:
    """Floor on ``lambda_min`` of the output-noise covariance on u_p.

    ``(c (sqrt(lambda_max(O_inf)) + gamma) R(eps, delta))^2`` with O_inf the
    observability Gramian of ``(Abar_c, G1)`` and gamma the certified bound.
    """
    budget.require_gaussian()
    if _radius(controller.Abar_c) >= 1:
        raise UnstableSystemError("controller matrix Abar_c is not Schur stable")
    Oinf = infinite_observability_gramian(controller.error_to_input())
    obs = math.sqrt(max(float(np.linalg.eigvalsh(Oinf)[-1]), 0.0))
    return (budget.c * (obs + controller.gamma) * r_value(budget.epsilon, budget.delta)) ** 2
