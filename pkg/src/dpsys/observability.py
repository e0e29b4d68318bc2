"""Stacked output/Markov maps and strong input observability analysis.

For a horizon ``t`` the output sequence is ``Y_t = O_t x0 + N_t U_t`` with
``O_t`` the stacked observability matrix and ``N_t`` the block lower
triangular Toeplitz matrix of Markov parameters.  ``N_{t,T}`` keeps the
first ``T+1`` input blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .exceptions import (
    DimensionError,
    RankDeficiencyError,
    UnstableSystemError,
    ValidationError,
)
from .linsys import StateSpace


def _check_horizon(t, T=None):
    if t < 0 or int(t) != t:
        raise ValidationError(f"horizon t must be a nonnegative integer, got {t}")
    if T is not None:
        if T < 0 or int(T) != T:
            raise ValidationError(f"horizon T must be a nonnegative integer, got {T}")
        if T > t:
            raise ValidationError(f"need T <= t, got T={T}, t={t}")


def _assert_nontrivial(O, N):
    if not (np.any(O) or np.any(N)):
        raise ValidationError("[O_t N_t] is identically zero; output carries no data")


def numerical_rank(M, rtol=None):
    """Rank with threshold ``sigma_i > rtol * sigma_max``.

    Default ``rtol = max(M.shape) * eps``.  Returns ``(rank, singular_values)``.
    """
    M = np.atleast_2d(M)
    if M.size == 0:
        return 0, np.zeros(0)
    s = np.linalg.svd(M, compute_uv=False)
    if rtol is None:
        rtol = max(M.shape) * np.finfo(float).eps
    if s[0] == 0:
        return 0, s
    return int(np.sum(s > rtol * s[0])), s


def stack_output_map(sys: StateSpace, t: int) -> np.ndarray:
    """``O_t``: row block ``k`` is ``C A^k`` for k = 0..t."""
    _check_horizon(t)
    n, q = sys.n, sys.q
    O = np.zeros(((t + 1) * q, n))
    CAk = sys.C.copy()
    for k in range(t + 1):
        O[k * q:(k + 1) * q] = CAk
        CAk = CAk @ sys.A
    return O


def _markov_blocks(sys: StateSpace, t: int):
    """[D, CB, CAB, ..., C A^{t-1} B]."""
    blocks = [sys.D.copy()]
    CAk = sys.C.copy()
    for _ in range(t):
        blocks.append(CAk @ sys.B)
        CAk = CAk @ sys.A
    return blocks


def markov_matrix(sys: StateSpace, t: int, T: int | None = None) -> np.ndarray:
    """``N_{t,T}`` (``N_t`` when T is None)."""
    T = t if T is None else T
    _check_horizon(t, T)
    q, m = sys.q, sys.m
    h = _markov_blocks(sys, t)
    N = np.zeros(((t + 1) * q, (T + 1) * m))
    for i in range(t + 1):
        for j in range(min(i, T) + 1):
            N[i * q:(i + 1) * q, j * m:(j + 1) * m] = h[i - j]
    return N


@dataclass
class StackedMaps:
    O: np.ndarray
    N_full: np.ndarray
    N_sub: np.ndarray
    t: int
    T: int

    @property
    def ON(self) -> np.ndarray:
        """``[O_t N_{t,T}]``."""
        return np.hstack([self.O, self.N_sub])


def stack_markov_map(sys: StateSpace, t: int, T: int | None = None) -> StackedMaps:
    T = t if T is None else T
    _check_horizon(t, T)
    O = stack_output_map(sys, t)
    N = markov_matrix(sys, t)
    _assert_nontrivial(O, N)
    return StackedMaps(O=O, N_full=N, N_sub=N[:, :(T + 1) * sys.m].copy(), t=t, T=T)


@dataclass
class GramianReport:
    """Weighted strong input observability Gramian and its spectrum.

    ``projections[i]`` holds the components of eigenvector ``i`` on the
    ``x0`` block (key ``"x0"``) and on each input block ``"u(k)"``.
    """

    gramian: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    n: int
    m: int
    t: int
    T: int
    rank: int = 0
    projections: list = field(default_factory=list)

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "T": self.T,
            "n": self.n,
            "m": self.m,
            "rank": self.rank,
            "size": int(self.gramian.shape[0]),
            "eigenvalues": self.eigenvalues.tolist(),
            "lambda_max": self.lambda_max,
            "lambda_min": self.lambda_min,
            "projections": [
                {k: np.asarray(v).tolist() for k, v in p.items()} for p in self.projections
            ],
        }


def _split_projection(v, n, m, T):
    p = {"x0": v[:n]}
    for k in range(T + 1):
        p[f"u({k})"] = v[n + k * m:n + (k + 1) * m]
    return p


def _whiten(M, Sigma):
    """Return ``L^{-1} M`` where ``Sigma = L L'`` (so the Gramian is its Gram)."""
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.ndim == 0 or Sigma.size == 1:
        s = float(Sigma)
        if s <= 0:
            raise ValidationError("noise covariance must be positive definite")
        return M / np.sqrt(s)
    if Sigma.shape != (M.shape[0], M.shape[0]):
        raise DimensionError(
            f"Sigma has shape {Sigma.shape}, expected {(M.shape[0], M.shape[0])}"
        )
    try:
        L = np.linalg.cholesky((Sigma + Sigma.T) / 2)
    except np.linalg.LinAlgError:
        raise ValidationError("noise covariance must be positive definite") from None
    return la.solve_triangular(L, M, lower=True)


def weighted_gramian(sys: StateSpace, t: int, T: int | None = None, Sigma=None,
                     rtol=None) -> GramianReport:
    """``[O_t N_{t,T}]' Sigma^{-1} [O_t N_{t,T}]`` with eigen-analysis.

    ``Sigma`` may be a full ``(t+1)q`` square matrix, a scalar variance, or
    None for the identity (the strong input observability Gramian).
    """
    T = t if T is None else T
    maps = stack_markov_map(sys, t, T)
    M = maps.ON
    W = M if Sigma is None else _whiten(M, Sigma)
    G = W.T @ W
    G = (G + G.T) / 2
    lam, V = np.linalg.eigh(G)
    lam = np.clip(lam, 0.0, None)
    rank, _ = numerical_rank(W, rtol)
    projections = [_split_projection(V[:, i], sys.n, sys.m, T) for i in range(V.shape[1])]
    return GramianReport(G, lam, V, sys.n, sys.m, t, T, rank, projections)


def is_strongly_input_observable(sys: StateSpace, T: int | None = None,
                                 t: int | None = None, rtol=None) -> dict:
    """Rank test for strong input observability.

    Default horizons (T, t) = (n, 2n) give the classical test on
    ``[O_{2n} N_{2n,n}]``; any T >= n, t >= T + n is an equivalent test.
    """
    n, m = sys.n, sys.m
    T = n if T is None else T
    t = 2 * n if t is None else t
    if T < n or t < T + n:
        raise ValidationError(f"need T >= n and t >= T + n (n={n}, T={T}, t={t})")
    O = stack_output_map(sys, t)
    N = markov_matrix(sys, t, T)
    M = np.hstack([O, N])
    required = n + (T + 1) * m
    rank, s = numerical_rank(M, rtol)
    return {
        "observable": bool(rank == required),
        "rank": rank,
        "required": required,
        "singular_values": s.tolist(),
        "T": T,
        "t": t,
    }


def infinite_observability_gramian(sys: StateSpace) -> np.ndarray:
    """Solve ``A' X A - X + C' C = 0``."""
    if sys.n == 0:
        return np.zeros((0, 0))
    if not sys.is_stable():
        raise UnstableSystemError("Gramian undefined for unstable system")
    X = la.solve_discrete_lyapunov(sys.A.T, sys.C.T @ sys.C)
    return (X + X.T) / 2


def least_squares_input_estimate(sys: StateSpace, Y, t: int, T: int, Sigma=None):
    """Weighted least squares for ``(x0, U_T)`` given ``Y_t``.

    Assumes inputs after step T are zero.  Returns ``(x0_hat, U_hat, J)``
    with ``J`` the weighted residual.
    """
    maps = stack_markov_map(sys, t, T)
    M = maps.ON
    Y = np.asarray(Y, dtype=float).reshape(-1)
    if Y.shape[0] != M.shape[0]:
        raise DimensionError(f"Y has length {Y.shape[0]}, expected {M.shape[0]}")
    if Sigma is None:
        Mw, Yw = M, Y
    else:
        Mw = _whiten(M, Sigma)
        Yw = _whiten(Y[:, None], Sigma)[:, 0]
    rank, _ = numerical_rank(Mw)
    if rank < M.shape[1]:
        raise RankDeficiencyError("estimate not unique: Gramian is singular")
    # QR keeps the normal equations' conditioning out of the picture
    Q, R = np.linalg.qr(Mw)
    z = la.solve_triangular(R, Q.T @ Yw)
    r = Yw - Mw @ z
    return z[:sys.n], z[sys.n:], float(r @ r)


def output_null_complement(sys: StateSpace, t: int, T: int, rtol=None) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of range([O_t N_{t,T}]).

    Shape ``(t+1)q x ((t+1)q - n - (T+1)m)``; the square matrix
    ``[O_t N_{t,T} Nbar]`` is then nonsingular.
    """
    maps = stack_markov_map(sys, t, T)
    M = maps.ON
    rows, cols = M.shape
    if rows < cols:
        raise RankDeficiencyError(
            f"(t+1)q = {rows} < n + (T+1)m = {cols}; no complement exists"
        )
    rank, _ = numerical_rank(M, rtol)
    if rank < cols:
        raise RankDeficiencyError(
            f"[O_t N_t,T] has rank {rank} < {cols}: not strongly input observable"
        )
    U, _, _ = np.linalg.svd(M, full_matrices=True)
    return U[:, cols:].copy()
