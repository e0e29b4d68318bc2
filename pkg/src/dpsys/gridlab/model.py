"""DC microgrid: nodes with a generator inductance and a load capacitor,
connected by resistive-inductive lines.

State order: ``(I_1..I_k, V_1..V_k, I_e for each dynamic line in edge order)``.
Outputs: ``(I_1..I_k, V_1..V_k)``.  ``I_i`` is the generator current minus
the (constant) load current, so the regulated equilibrium is ``I_i = 0``,
``V_i = V_star``, all line currents zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..exceptions import ValidationError
from ..linsys import ContinuousStateSpace, StateSpace, zoh_discretize


@dataclass
class MicrogridParams:
    """Per-node lists ``R, L, C, I_load``; per-edge lists ``R_line, L_line``.

    ``L_line[e] = None`` (or 0) marks an algebraic line, ``I_e = (V_i - V_j) / R_e``.
    """

    R: list
    L: list
    C: list
    edges: list
    R_line: list
    L_line: list
    I_load: list = field(default_factory=list)
    V_star: float = 380.0
    dt: float = 1e-3

    def __post_init__(self):
        k = len(self.R)
        if k == 0:
            raise ValidationError("microgrid needs at least one node")
        if len(self.L) != k or len(self.C) != k:
            raise ValidationError("R, L, C must have one entry per node")
        if not self.I_load:
            self.I_load = [0.0] * k
        if len(self.I_load) != k:
            raise ValidationError("I_load must have one entry per node")
        if len(self.R_line) != len(self.edges) or len(self.L_line) != len(self.edges):
            raise ValidationError("R_line and L_line must have one entry per edge")
        for name in ("R", "L", "C", "R_line"):
            if any(not v > 0 for v in getattr(self, name)):
                raise ValidationError(f"{name} entries must be positive")
        if any(v is not None and v < 0 for v in self.L_line):
            raise ValidationError("L_line entries must be positive (or None for algebraic)")
        if not self.V_star > 0 or not self.dt > 0:
            raise ValidationError("V_star and dt must be positive")
        self.edges = [tuple(int(x) for x in e) for e in self.edges]
        for i, j in self.edges:
            if not (0 <= i < k and 0 <= j < k) or i == j:
                raise ValidationError(f"bad edge ({i}, {j}) for {k} nodes")
        if not _connected(k, self.edges):
            raise ValidationError("microgrid topology is disconnected")

    @property
    def nodes(self) -> int:
        return len(self.R)

    def dynamic_edges(self) -> list:
        return [e for e, Le in enumerate(self.L_line) if Le]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["edges"] = [list(e) for e in self.edges]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MicrogridParams":
        return cls(**d)


def _connected(k, edges):
    seen, stack = {0}, [0]
    adj = {i: set() for i in range(k)}
    for i, j in edges:
        adj[i].add(j)
        adj[j].add(i)
    while stack:
        for j in adj[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return len(seen) == k


def two_node_params() -> MicrogridParams:
    """Two-node preset (line inductance 2.1 mH; see README)."""
    return MicrogridParams(
        R=[0.2, 0.2], L=[1.8e-3, 1.8e-3], C=[2.2e-3, 2.2e-3],
        edges=[(0, 1)], R_line=[0.07], L_line=[2.1e-3],
        V_star=380.0, dt=1e-3,
    )


def build_microgrid(params: MicrogridParams) -> ContinuousStateSpace:
    k = params.nodes
    dyn = params.dynamic_edges()
    n = 2 * k + len(dyn)
    A = np.zeros((n, n))
    B = np.zeros((n, k))
    iI = lambda i: i
    iV = lambda i: k + i
    for i in range(k):
        A[iI(i), iI(i)] = -params.R[i] / params.L[i]
        A[iI(i), iV(i)] = -1.0 / params.L[i]
        B[iI(i), i] = 1.0 / params.L[i]
        A[iV(i), iI(i)] = 1.0 / params.C[i]
    for e, (i, j) in enumerate(params.edges):
        Re = params.R_line[e]
        if e in dyn:
            s = 2 * k + dyn.index(e)
            Le = params.L_line[e]
            A[s, iV(i)] += 1.0 / Le
            A[s, iV(j)] -= 1.0 / Le
            A[s, s] = -Re / Le
            # I_e leaves node i and enters node j
            A[iV(i), s] -= 1.0 / params.C[i]
            A[iV(j), s] += 1.0 / params.C[j]
        else:
            g = 1.0 / Re
            A[iV(i), iV(i)] -= g / params.C[i]
            A[iV(i), iV(j)] += g / params.C[i]
            A[iV(j), iV(j)] -= g / params.C[j]
            A[iV(j), iV(i)] += g / params.C[j]
    C = np.eye(2 * k, n)
    D = np.zeros((2 * k, k))
    return ContinuousStateSpace(A, B, C, D)


def discretized_microgrid(params: MicrogridParams) -> StateSpace:
    return zoh_discretize(build_microgrid(params), params.dt)


def reference_exosystem(params: MicrogridParams) -> tuple:
    """Constant reference ``A_r = C_r = I`` and its initial state.

    Returns ``(exo, x_r0)`` with ``x_r0 = (0..0, V_star..V_star)``.
    """
    k = params.nodes
    exo = StateSpace(np.eye(2 * k), np.zeros((2 * k, 0)), np.eye(2 * k), np.zeros((2 * k, 0)))
    x_r0 = np.concatenate([np.zeros(k), np.full(k, params.V_star)])
    return exo, x_r0


def equilibrium_state(params: MicrogridParams) -> np.ndarray:
    k = params.nodes
    return np.concatenate([np.zeros(k), np.full(k, params.V_star),
                           np.zeros(len(params.dynamic_edges()))])


def node_coordinates(params: MicrogridParams, i: int) -> tuple:
    """Indices of user i's ``(I_i, V_i)`` in the output / tracking-error vector."""
    return (i, params.nodes + i)
