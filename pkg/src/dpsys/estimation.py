"""Reconstruction of a controller's private input (the tracking error e) from
its published output u_p, as an adversary would attempt it.

The controller is viewed as the system ``(Abar_c, -L1, G1, 0)`` from e to
u_p plus the public contribution ``(Abar_c, Abar_r, G1, G2)`` of the
exosystem state.  Over a window of 2n+1 samples

    U_p(t) = O x_c(t) + N E(t) + N_r X_r(t)

and a left inverse of ``[O N_{2n,n}]`` recovers ``x_c(t)`` and ``e(t)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, RankDeficiencyError, ValidationError
from .linsys import StateSpace
from .observability import is_strongly_input_observable, markov_matrix, stack_output_map


def _systems(controller):
    """``(error-to-input, reference-to-input)`` systems of a controller."""
    if isinstance(controller, StateSpace):
        return controller, None
    if isinstance(controller, tuple):
        return controller
    return controller.error_to_input(), controller.reference_to_input()


@dataclass
class LeftInverseGain:
    """``K`` with ``K [O_{2n} N_{2n,n}] = I``.

    ``K`` is the pseudoinverse.  ``K_e`` and ``K_s`` are the error and
    state extraction rows actually used for reconstruction: among all valid
    ``K_u`` (``K_x``) they are the minimal-norm ones that also cancel inputs
    after step n inside the window, when such a choice exists (``exact``);
    otherwise they equal the pseudoinverse rows.
    """

    K: np.ndarray
    K_e: np.ndarray
    K_s: np.ndarray
    exact: bool
    n: int
    m: int
    q: int

    @property
    def K_x(self) -> np.ndarray:
        return self.K[:self.n]

    @property
    def K_u(self) -> np.ndarray:
        return self.K[self.n:self.n + self.m]

    @property
    def lag(self) -> int:
        return 2 * self.n


def left_inverse_gain(controller, rtol=None) -> LeftInverseGain:
    sys, _ = _systems(controller)
    n, m, q = sys.n, sys.m, sys.q
    verdict = is_strongly_input_observable(sys, rtol=rtol)
    if not verdict["observable"]:
        raise RankDeficiencyError(
            f"controller not strongly input observable: rank {verdict['rank']} < "
            f"{verdict['required']} (n={n}, inputs={m}, outputs={q})"
        )
    O = stack_output_map(sys, 2 * n)
    N = markov_matrix(sys, 2 * n)
    M = np.hstack([O, N[:, :(n + 1) * m]])
    K = np.linalg.pinv(M)

    full = np.hstack([O, N])
    target = np.eye(n + m, full.shape[1])
    Kt, *_ = np.linalg.lstsq(full.T, target.T, rcond=None)
    Kt = Kt.T
    scale = max(1.0, float(np.abs(full).max()))
    exact = bool(np.abs(Kt @ full - target).max() < 1e-9 * scale * max(1.0, np.abs(Kt).max()))
    if not exact:
        Kt = K[:n + m]
    return LeftInverseGain(K, Kt[n:], Kt[:n], exact, n, m, q)


def _windows(series, length):
    """Stack ``series[t:t+length]`` row-wise for every admissible t."""
    L = series.shape[0]
    return np.stack([series[t:t + length].reshape(-1) for t in range(L - length + 1)])


def estimate_private_errors(controller, published_up, exo_trace=None, noise_model=None,
                            gain: LeftInverseGain | None = None) -> np.ndarray:
    """Estimate ``e(t)`` for ``t = 0 .. len - 2n - 1`` from ``u_p`` (and x_r).

    Each estimate uses ``u_p(t .. t+2n)``, i.e. it is a fixed-lag smoother
    with lag 2n.  Without ``noise_model`` the left-inverse gain is applied
    directly.  With ``noise_model`` (a dict, e.g. ``{"sigma": 0.5}``) the
    window is solved as a ridge-regularized least-squares problem in all
    unknowns ``(x_c(t), e(t..t+2n))`` and the e(t) block is kept.
    """
    sys_e, sys_r = _systems(controller)
    n, m, q = sys_e.n, sys_e.m, sys_e.q
    Up = np.asarray(published_up, dtype=float)
    if Up.ndim == 1:
        Up = Up[:, None]
    if Up.shape[1] != q:
        raise DimensionError(f"published u_p has {Up.shape[1]} channels, expected {q}")
    w = 2 * n + 1
    if Up.shape[0] < w:
        raise ValidationError(
            f"trajectory too short: need at least 2n+1 = {w} samples, got {Up.shape[0]}"
        )
    Y = _windows(Up, w)

    if sys_r is not None and sys_r.m:
        if exo_trace is None:
            raise ValidationError("controller uses the exosystem state; exo_trace required")
        Xr = np.asarray(exo_trace, dtype=float)
        if Xr.ndim == 1:
            Xr = Xr[:, None]
        if Xr.shape[0] < Up.shape[0] or Xr.shape[1] != sys_r.m:
            raise DimensionError(f"exo_trace must have shape ({Up.shape[0]}, {sys_r.m})")
        Nr = markov_matrix(sys_r, 2 * n)
        Y = Y - _windows(Xr[:Up.shape[0]], w) @ Nr.T

    if noise_model is None:
        gain = left_inverse_gain(sys_e) if gain is None else gain
        return Y @ gain.K_e.T

    O = stack_output_map(sys_e, 2 * n)
    N = markov_matrix(sys_e, 2 * n)
    M = np.hstack([O, N])
    lam = 1e-8 * float(np.linalg.norm(M, 2)) ** 2
    # ridge solve shared by all windows
    G = np.linalg.solve(M.T @ M + lam * np.eye(M.shape[1]), M.T)
    return Y @ G[n:n + m].T


@dataclass
class LeftInverseSystem:
    """Controller driven by reconstructed errors; reproduces the published u_p.

    ``x_c(0) = K_s (U_p(0) - N_r X_r(0))`` and
    ``x_c(t+1) = Abar_c x_c + Abar_r x_r - L1 e_hat(t)``.
    """

    controller: object
    gain: LeftInverseGain

    def run(self, published_up, exo_trace=None):
        """Return ``(e_hat, x_c_hat, u_p_hat)`` over the reconstructable range."""
        sys_e, sys_r = _systems(self.controller)
        e_hat = estimate_private_errors(self.controller, published_up, exo_trace,
                                        gain=self.gain)
        n = sys_e.n
        Up = np.atleast_2d(np.asarray(published_up, dtype=float).reshape(len(published_up), -1))
        y0 = Up[:2 * n + 1].reshape(-1)
        Xr = None
        if sys_r is not None and sys_r.m:
            Xr = np.asarray(exo_trace, dtype=float).reshape(len(exo_trace), -1)
            y0 = y0 - markov_matrix(sys_r, 2 * n) @ Xr[:2 * n + 1].reshape(-1)
        x = self.gain.K_s @ y0
        xs, us = [], []
        for t in range(e_hat.shape[0]):
            xr = Xr[t] if Xr is not None else np.zeros(0)
            u = sys_e.C @ x + sys_e.D @ e_hat[t] + (sys_r.D @ xr if Xr is not None else 0.0)
            xs.append(x)
            us.append(u)
            x = sys_e.A @ x + sys_e.B @ e_hat[t] + (sys_r.B @ xr if Xr is not None else 0.0)
        return e_hat, np.array(xs), np.array(us)
