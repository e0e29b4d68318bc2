"""Discrete-time LTI state-space core.

Representation, exact simulation, zero-order-hold discretization, a
doubling solver for the discrete algebraic Riccati equation, and assembly
of the tracking closed loop used by the experiments.

Closed-loop state ordering is always (plant, controller, exosystem).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as la

from .exceptions import DimensionError, NumericalError, ValidationError


def _as_matrix(M, rows=None, cols=None, name="matrix"):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {M.shape}")
    if rows is not None and M.shape[0] != rows:
        raise DimensionError(f"{name} has {M.shape[0]} rows, expected {rows}")
    if cols is not None and M.shape[1] != cols:
        raise DimensionError(f"{name} has {M.shape[1]} columns, expected {cols}")
    return M


def _empty_or(M, shape):
    if M is None:
        return np.zeros(shape)
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros(shape)
    return M


@dataclass(frozen=True)
class StateSpace:
    """Discrete-time system ``x+ = A x + B u``, ``y = C x + D u``.

    Matrices are stored as float arrays; ``n``, ``m`` and ``q`` are the
    state, input and output dimensions.  ``n = 0`` (a static map ``y = D u``)
    is allowed.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        A = np.zeros((0, 0)) if A.size == 0 else np.atleast_2d(A)
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        q, m = D.shape
        B = _empty_or(self.B, (n, m))
        C = _empty_or(self.C, (q, n))
        # scalars and flat vectors are accepted when the size is unambiguous
        if B.ndim < 2 and B.size == n * m:
            B = B.reshape(n, m)
        if C.ndim < 2 and C.size == q * n:
            C = C.reshape(q, n)
        if B.shape != (n, m):
            raise DimensionError(f"B has shape {B.shape}, expected {(n, m)}")
        if C.shape != (q, n):
            raise DimensionError(f"C has shape {C.shape}, expected {(q, n)}")
        for name, M in zip("ABCD", (A, B, C, D)):
            M = np.array(M, dtype=float)
            M.setflags(write=False)
            object.__setattr__(self, name, M)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.D.shape[1]

    @property
    def q(self) -> int:
        return self.D.shape[0]

    @property
    def dims(self):
        return self.n, self.m, self.q

    def spectral_radius(self) -> float:
        if self.n == 0:
            return 0.0
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def is_stable(self) -> bool:
        return self.spectral_radius() < 1.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in "ABCD"}

    @classmethod
    def from_dict(cls, d: dict) -> "StateSpace":
        if d.get("continuous", False):
            raise ValidationError("expected a discrete-time system, got continuous")
        return cls(d["A"], d["B"], d["C"], d["D"])


@dataclass(frozen=True)
class ContinuousStateSpace:
    """Continuous-time quadruple (rates in SI units)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        # reuse the discrete validator for shape checks
        ss = StateSpace(self.A, self.B, self.C, self.D)
        for name in "ABCD":
            object.__setattr__(self, name, getattr(ss, name))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.D.shape[1]

    @property
    def q(self) -> int:
        return self.D.shape[0]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).tolist() for k in "ABCD"}
        d["continuous"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ContinuousStateSpace":
        return cls(d["A"], d["B"], d["C"], d["D"])


def load_system(path):
    """Read a system JSON file; returns StateSpace or ContinuousStateSpace."""
    with open(path) as fh:
        d = json.load(fh)
    if d.get("continuous", False):
        return ContinuousStateSpace.from_dict(d)
    return StateSpace.from_dict(d)


def save_system(sys, path):
    with open(path, "w") as fh:
        json.dump(sys.to_dict(), fh, indent=2)


@dataclass
class Trajectory:
    """Simulation result; row ``k`` of each array is time step ``k``."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray


def simulate(sys: StateSpace, x0, inputs: Sequence) -> Trajectory:
    """Run the recursion for ``len(inputs)`` steps.

    Returns states/outputs for t = 0..len(inputs)-1 (the state after the
    final input is not included).
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != sys.n:
        raise DimensionError(f"x0 has length {x0.shape[0]}, expected {sys.n}")
    U = [np.asarray(u, dtype=float).reshape(-1) for u in inputs]
    for k, u in enumerate(U):
        if u.shape[0] != sys.m:
            raise DimensionError(
                f"input at index {k} has length {u.shape[0]}, expected {sys.m}"
            )
    N = len(U)
    U = np.array(U).reshape(N, sys.m)
    X = np.empty((N, sys.n))
    Y = np.empty((N, sys.q))
    x = x0
    for k in range(N):
        X[k] = x
        Y[k] = sys.C @ x + sys.D @ U[k]
        x = sys.A @ x + sys.B @ U[k]
    return Trajectory(np.arange(N), X, U, Y)


def zoh_discretize(csys: ContinuousStateSpace, dt: float) -> StateSpace:
    """Zero-order-hold discretization via the augmented matrix exponential.

    ``expm([[A, B], [0, 0]] dt) = [[Ad, Bd], [0, I]]``.
    """
    if not dt > 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    n, m = csys.n, csys.m
    M = np.zeros((n + m, n + m))
    M[:n, :n] = csys.A * dt
    M[:n, n:] = csys.B * dt
    E = la.expm(M)
    return StateSpace(E[:n, :n], E[:n, n:], csys.C.copy(), csys.D.copy())


def is_stabilizable(A, B, tol=1e-9) -> bool:
    """PBH test on the eigenvalues outside the open unit disk."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1.0 - tol:
            M = np.hstack([lam * np.eye(n) - A, B])
            if np.linalg.matrix_rank(M, tol=tol * max(1.0, np.abs(M).max())) < n:
                return False
    return True


def dare(A, B, Q, R, tol=1e-14, max_iter=200):
    """Solve ``P = A'PA - A'PB (R + B'PB)^{-1} B'PA + Q``.

    Structure-preserving doubling.  Returns ``(P, K)`` with
    ``K = (R + B'PB)^{-1} B'PA``, so ``A - B K`` is Schur stable and the LQR
    control law is ``u = -K x``.
    """
    A = _as_matrix(A, name="A")
    n = A.shape[0]
    B = _as_matrix(B, n, name="B")
    Q = _as_matrix(Q, n, n, "Q")
    R = _as_matrix(R, B.shape[1], B.shape[1], "R")
    if np.min(np.linalg.eigvalsh((R + R.T) / 2)) <= 0:
        raise ValidationError("R must be positive definite")
    if np.min(np.linalg.eigvalsh((Q + Q.T) / 2)) < -1e-12 * max(1.0, np.abs(Q).max()):
        raise ValidationError("Q must be positive semidefinite")
    if not is_stabilizable(A, B):
        raise NumericalError("dare: (A, B) is not stabilizable (PBH test failed)")

    Ak = A.copy()
    Gk = B @ np.linalg.solve(R, B.T)
    Hk = (Q + Q.T) / 2
    I = np.eye(n)
    for _ in range(max_iter):
        W = I + Gk @ Hk
        WA = np.linalg.solve(W, Ak)
        WG = np.linalg.solve(W, Gk)
        H_next = Hk + Ak.T @ Hk @ WA
        G_next = Gk + Ak @ WG @ Ak.T
        A_next = Ak @ WA
        H_next = (H_next + H_next.T) / 2
        G_next = (G_next + G_next.T) / 2
        diff = np.linalg.norm(H_next - Hk) / max(1.0, np.linalg.norm(H_next))
        Ak, Gk, Hk = A_next, G_next, H_next
        if not np.all(np.isfinite(Hk)):
            raise NumericalError("dare: doubling iteration diverged")
        if diff < tol:
            break
    else:
        raise NumericalError(f"dare: no convergence in {max_iter} doubling steps")

    P = Hk
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    rho = np.max(np.abs(np.linalg.eigvals(A - B @ K))) if n else 0.0
    if rho >= 1.0:
        raise NumericalError(f"dare: closed loop not Schur stable (rho={rho:.6g})")
    return P, K


def dare_residual(A, B, Q, R, P) -> float:
    BtPB = R + B.T @ P @ B
    res = A.T @ P @ A - P - A.T @ P @ B @ np.linalg.solve(BtPB, B.T @ P @ A) + Q
    return float(np.linalg.norm(res))


def interconnect(plant: StateSpace, exo: StateSpace, Ak, Ax, L, Gk, Gx) -> StateSpace:
    """Close the loop around a dynamic output-feedback tracking controller.

    Controller: ``x_c+ = Ak x_c + Ax x_r - L e``, ``u_p = Gk x_c + Gx x_r``,
    driven by the tracking error ``e = C_p x_p + D_p u_p - C_r x_r`` of a
    reference generated by ``x_r+ = A_r x_r`` (``exo`` supplies A_r, C_r).

    Inputs of the returned system are ``[v; w]``: noise added to the error
    seen by the controller (q_p channels) and noise added to the published
    control input (m_p channels).  Outputs are ``[y_p; u_p; e]`` where e is
    the noiseless error.  States are ordered (x_p, x_c, x_r).
    """
    Ap, Bp, Cp, Dp = plant.A, plant.B, plant.C, plant.D
    np_, mp, qp = plant.n, plant.m, plant.q
    Ar, Cr = exo.A, exo.C
    nr = Ar.shape[0]
    Ak = _as_matrix(Ak, name="controller A")
    nc = Ak.shape[0]
    if Ak.shape != (nc, nc):
        raise DimensionError("controller A must be square")
    Ax = _as_matrix(Ax, nc, nr, "controller reference gain")
    L = _as_matrix(L, nc, qp, "controller error gain")
    Gk = _as_matrix(Gk, mp, nc, "controller output gain")
    Gx = _as_matrix(Gx, mp, nr, "feedforward gain")
    if Cr.shape != (qp, nr):
        raise DimensionError(f"C_r has shape {Cr.shape}, expected {(qp, nr)}")

    Z = np.zeros
    A = np.block([
        [Ap, Bp @ Gk, Bp @ Gx],
        [-L @ Cp, Ak - L @ Dp @ Gk, Ax - L @ (Dp @ Gx - Cr)],
        [Z((nr, np_)), Z((nr, nc)), Ar],
    ])
    B = np.block([
        [Z((np_, qp)), Bp],
        [-L, -L @ Dp],
        [Z((nr, qp)), Z((nr, mp))],
    ])
    C = np.block([
        [Cp, Dp @ Gk, Dp @ Gx],
        [Z((mp, np_)), Gk, Gx],
        [Cp, Dp @ Gk, Dp @ Gx - Cr],
    ])
    D = np.block([
        [Z((qp, qp)), Dp],
        [Z((mp, qp)), np.eye(mp)],
        [Z((qp, qp)), Dp],
    ])
    return StateSpace(A, B, C, D)


def close_loop(plant: StateSpace, controller, exo: StateSpace) -> StateSpace:
    """Interconnect with a controller exposing ``G1, G2, L1, Abar_c, Abar_r``."""
    return interconnect(plant, exo, controller.Abar_c, controller.Abar_r,
                        controller.L1, controller.G1, controller.G2)
