"""Per-user input-noise covariances from the principal directions of a
controller's Markov matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..exceptions import ValidationError
from ..observability import markov_matrix


@dataclass
class NoiseDesign:
    """``blocks[i]`` is user i's noise covariance for ``a = 1``.

    ``kappa`` turns the privacy condition into ``a >= kappa * c * R(eps, delta)``.
    """

    blocks: list
    kappa: float
    eigenvalues: np.ndarray
    used_indices: list
    t: int
    T: int

    def scaled(self, a: float) -> list:
        return [a * a * B for B in self.blocks]

    def covariance(self, a: float, coords: list, size: int) -> np.ndarray:
        """Scatter the scaled blocks into a ``size``-square covariance."""
        S = np.zeros((size, size))
        for B, idx in zip(self.scaled(a), coords):
            S[np.ix_(idx, idx)] += B
        return S

    def to_dict(self) -> dict:
        return {
            "blocks": [B.tolist() for B in self.blocks],
            "kappa": self.kappa,
            "eigenvalues": self.eigenvalues.tolist(),
            "used_indices": self.used_indices,
            "t": self.t,
            "T": self.T,
        }


def gramian_noise_design(controller, t: int = 10, T: int = 5, user_coords=None,
                         threshold: float = 1e-10, indices=None) -> NoiseDesign:
    """Per-user blocks ``sum_j lambda_j v_ij v_ij'`` over the eigenpairs of
    ``N_{t,T}' N_{t,T}`` of the controller's error-to-input map.

    ``v_ij`` is the part of eigenvector j on user i's coordinates of the
    first input block.  By default every eigenvalue above
    ``threshold * lambda_max`` is used; ``indices`` (1-based, ascending
    order) overrides the selection.  Summing over all nonzero eigenpairs
    gives the principal block of ``N' N`` itself, so the blocks do not
    depend on how the eigenbasis is chosen.
    """
    sys = controller.error_to_input() if hasattr(controller, "error_to_input") else controller
    m = sys.m
    if user_coords is None:
        k = m // 2
        user_coords = [(i, k + i) for i in range(k)]
    for idx in user_coords:
        if any(not 0 <= j < m for j in idx):
            raise ValidationError(f"user coordinates {idx} outside 0..{m - 1}")
    N = markov_matrix(sys, t, T)
    lam, V = np.linalg.eigh(N.T @ N)
    lam = np.clip(lam, 0.0, None)
    if indices is None:
        keep = [j for j in range(len(lam)) if lam[j] > threshold * lam[-1]]
    else:
        keep = [j - 1 for j in indices]
        if any(not 0 <= j < len(lam) for j in keep):
            raise ValidationError(f"eigen-indices must lie in 1..{len(lam)}")
    if not keep or lam[-1] <= 0:
        raise ValidationError("all eigenvalues are below the threshold")
    blocks = []
    for idx in user_coords:
        Vi = V[list(idx)][:, keep]
        B = (Vi * lam[keep]) @ Vi.T
        blocks.append((B + B.T) / 2)
    lam_min = min(float(np.linalg.eigvalsh(B)[0]) for B in blocks)
    if lam_min <= 0:
        raise ValidationError("a user block is singular; no finite privacy constant")
    return NoiseDesign(blocks, 1.0 / math.sqrt(lam_min), lam, [j + 1 for j in keep], t, T)
