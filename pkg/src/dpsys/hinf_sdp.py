"""H-infinity norms and the LMI feasibility layer used for controller design.

Strict LMIs ``F(X) > 0`` are handled as ``F(X) >= t I, maximize t`` and
accepted when the maximal slack exceeds a tolerance.  The conic solve is
delegated to cvxpy (CLARABEL by default); every feasible verdict is
re-checked in numpy by substituting the returned assignment.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import cvxpy as cp
import numpy as np
from scipy.optimize import minimize_scalar

from .exceptions import InfeasibleError, NumericalError, UnstableSystemError, ValidationError
from .linsys import StateSpace

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
INDETERMINATE = "numerically-indeterminate"


# --- H-infinity norm ----------------------------------------------------------

def _sigma_max(sys: StateSpace, w: float) -> float:
    z = np.exp(1j * w)
    n = sys.n
    if n == 0:
        G = sys.D
    else:
        G = sys.C @ np.linalg.solve(z * np.eye(n) - sys.A, sys.B) + sys.D
    return float(np.linalg.svd(G, compute_uv=False)[0]) if G.size else 0.0


def hinf_norm_sweep(sys: StateSpace, tol: float = 1e-6, grid: int = 512) -> tuple:
    """Peak gain on the unit circle by sampling plus golden-section refinement.

    Returns ``(gamma, peak_frequency)``.  Pole angles are added to the grid
    so lightly damped resonances are not stepped over.
    """
    if sys.n == 0:
        return (float(np.linalg.svd(sys.D, compute_uv=False)[0]) if sys.D.size else 0.0), 0.0
    ws = np.linspace(0.0, np.pi, grid)
    poles = np.linalg.eigvals(sys.A)
    extra = np.abs(np.angle(poles))
    ws = np.unique(np.concatenate([ws, extra, [0.0, np.pi]]))
    vals = np.array([_sigma_max(sys, w) for w in ws])

    # refine around the strongest local maxima
    order = np.argsort(vals)[::-1]
    best_g, best_w = float(vals[order[0]]), float(ws[order[0]])
    tried = 0
    for idx in order:
        if tried >= 8:
            break
        is_peak = (idx == 0 or vals[idx] >= vals[idx - 1]) and (
            idx == len(ws) - 1 or vals[idx] >= vals[idx + 1])
        if not is_peak:
            continue
        tried += 1
        lo = ws[max(idx - 1, 0)]
        hi = ws[min(idx + 1, len(ws) - 1)]
        if hi <= lo:
            continue
        res = minimize_scalar(lambda w: -_sigma_max(sys, w), bounds=(lo, hi),
                              method="bounded",
                              options={"xatol": 1e-12 * max(1.0, hi)})
        if -res.fun > best_g:
            best_g, best_w = float(-res.fun), float(res.x)
    return best_g, best_w


def bounded_real_lmi(sys: StateSpace, gamma: float) -> "LmiProblem":
    """Bounded-real lemma: ``||G||_inf < gamma`` iff this LMI is feasible."""
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    n, m, q = sys.n, sys.m, sys.q

    def brl(V, bmat):
        P = V["P"]
        Z = np.zeros
        return bmat([
            [P, Z((n, m)), A.T @ P, C.T],
            [Z((m, n)), gamma ** 2 * np.eye(m), B.T @ P, D.T],
            [P @ A, P @ B, P, Z((n, q))],
            [C, D, Z((q, n)), np.eye(q)],
        ])

    return LmiProblem(
        variables={"P": ((n, n), True)},
        constraints=[LmiConstraint("bounded-real", brl, 2 * n + m + q,
                                   blocks=[n, m, n, q])],
    )


def hinf_norm_lmi(sys: StateSpace, rel_tol: float = 1e-7, upper: float | None = None,
                  tol: float = 1e-11) -> float:
    """H-infinity norm by bisection on bounded-real LMI feasibility.

    The slack grows only linearly in ``gamma - gamma*``, so a loose
    acceptance tolerance biases the result upward; bisection therefore uses
    a near-sign test on the re-substituted slack.
    """
    if not sys.is_stable():
        raise UnstableSystemError("H-infinity norm needs a Schur-stable system")
    lo = _sigma_max(sys, 0.0)
    lo = max(lo, _sigma_max(sys, np.pi), float(np.linalg.norm(sys.D, 2)) if sys.D.size else 0.0)
    if sys.n == 0:
        return lo
    hi = upper if upper is not None else max(2.0 * lo, 1e-6)
    for _ in range(60):
        if sdp_feasible(bounded_real_lmi(sys, hi), tol=tol).status == FEASIBLE:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise InfeasibleError("bounded-real LMI infeasible at every tried gamma")
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if sdp_feasible(bounded_real_lmi(sys, mid), tol=tol).status == FEASIBLE:
            hi = mid
        else:
            lo = mid
    return hi


def hinf_norm(sys: StateSpace, tol: float = 1e-6, cross_check: bool = False) -> float:
    """``sup_w sigma_max(C (e^{jw} I - A)^{-1} B + D)`` for Schur-stable systems.

    With ``cross_check`` the frequency-sweep value is compared with the
    bounded-real LMI bisection and NumericalError raised on disagreement.
    """
    if not sys.is_stable():
        raise UnstableSystemError("H-infinity norm needs a Schur-stable system")
    g, _ = hinf_norm_sweep(sys, tol)
    if cross_check and sys.n:
        g_lmi = hinf_norm_lmi(sys, rel_tol=min(tol, 1e-6) / 10)
        if abs(g_lmi - g) > 10 * tol * max(g, 1e-12):
            raise NumericalError(f"H-inf sweep {g:.10g} and LMI {g_lmi:.10g} disagree")
    return g


# --- LMI layer -------------------------------------------------------------------

@dataclass
class LmiConstraint:
    """``fn(V, bmat) > 0`` where V maps variable names to matrices.

    ``fn`` is written once and evaluated both on cvxpy expressions (with
    ``bmat=cp.bmat``) and on numpy values (with ``bmat=np.block``).
    """

    name: str
    fn: Callable
    size: int
    blocks: list = field(default_factory=list)


@dataclass
class LmiProblem:
    """Symmetric matrix inequalities in named decision variables.

    ``variables``: name -> (shape, symmetric).  ``derived``: name -> callable
    computing a matrix from the other variables (used to pin ``Lhat = P L1``).
    ``normalize``: symmetric variables constrained ``>= I`` (removes the
    scaling freedom of homogeneous LMIs so infeasibility is detectable).
    ``objective``: optional callable returning a scalar to minimize once
    strict feasibility is established.
    """

    variables: dict
    constraints: list
    derived: dict = field(default_factory=dict)
    normalize: list = field(default_factory=list)
    objective: Callable | None = None

    def __post_init__(self):
        names = list(self.variables) + list(self.derived)
        if len(names) != len(set(names)):
            raise ValidationError("variable names must be unique")

    def to_json(self) -> str:
        return json.dumps({
            "variables": {k: {"shape": list(s), "symmetric": sym}
                          for k, (s, sym) in self.variables.items()},
            "derived": list(self.derived),
            "normalize": self.normalize,
            "constraints": [{"name": c.name, "size": c.size, "blocks": c.blocks}
                            for c in self.constraints],
        }, indent=2)

    def evaluate(self, assignment: dict) -> dict:
        """Numeric constraint matrices at a given assignment."""
        V = dict(assignment)
        for k, f in self.derived.items():
            V[k] = f(V)
        return {c.name: _sym(np.asarray(c.fn(V, np.block), dtype=float))
                for c in self.constraints}


def _sym(M):
    return (M + M.T) / 2


@dataclass
class SdpSolution:
    assignments: dict
    margin: float
    status: str
    min_eigs: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status == FEASIBLE


def _data_scale(problem: LmiProblem) -> float:
    """Magnitude of the problem data: constant terms and variable coefficients.

    Taken from the problem alone, never from a solution, because the
    max-slack solution may be scaled up arbitrarily once the slack cap binds.
    """
    zero = {k: np.zeros(shape) for k, (shape, _) in problem.variables.items()}
    unit = {k: (np.eye(shape[0]) if sym else np.ones(shape))
            for k, (shape, sym) in problem.variables.items()}
    F0, F1 = problem.evaluate(zero), problem.evaluate(unit)
    sizes = [1.0]
    for k in F0:
        sizes.append(float(np.abs(F0[k]).max()))
        sizes.append(float(np.abs(F1[k] - F0[k]).max()))
    return max(sizes)


def _build(problem: LmiProblem):
    V = {}
    for name, (shape, symmetric) in problem.variables.items():
        V[name] = cp.Variable(shape, symmetric=symmetric) if symmetric else cp.Variable(shape)
    for name, f in problem.derived.items():
        V[name] = f(V)
    exprs = []
    for c in problem.constraints:
        F = c.fn(V, cp.bmat)
        exprs.append((c, (F + F.T) / 2))
    return V, exprs


def _solve(prob, solver):
    with warnings.catch_warnings():
        # inaccuracy is reported through the status string instead
        warnings.simplefilter("ignore", UserWarning)
        try:
            prob.solve(solver=solver)
        except cp.error.SolverError:
            try:
                prob.solve(solver="SCS", eps=1e-9, max_iters=20000)
            except cp.error.SolverError:
                return "solver_error"
    return prob.status


def sdp_feasible(problem: LmiProblem, tol: float = 1e-7, solver: str = "CLARABEL",
                 t_cap: float = 1.0) -> SdpSolution:
    """Maximize the common slack ``t`` with every constraint ``>= t I``.

    Status is feasible when the re-substituted constraints all have minimum
    eigenvalue above ``tol * scale``; infeasible when the slack is clearly
    negative or the solver certifies that ``F >= tol I`` has no solution;
    numerically-indeterminate otherwise.
    """
    V, exprs = _build(problem)
    t = cp.Variable()
    cons = [F >> t * np.eye(c.size) for c, F in exprs]
    cons.append(t <= t_cap)
    for name in problem.normalize:
        k = problem.variables[name][0][0]
        cons.append(V[name] >> np.eye(k))
    prob = cp.Problem(cp.Maximize(t), cons)
    status = _solve(prob, solver)
    diag = {"solver_status": status}
    if status not in ("optimal", "optimal_inaccurate") or t.value is None:
        if status in ("infeasible", "infeasible_inaccurate"):
            return SdpSolution({}, -math.inf, INFEASIBLE, diagnostics=diag)
        return SdpSolution({}, math.nan, INDETERMINATE, diagnostics=diag)

    assignment = {k: np.array(V[k].value, dtype=float) for k in problem.variables}
    mats = problem.evaluate(assignment)
    scale = _data_scale(problem)
    min_eigs = {k: float(np.linalg.eigvalsh(M)[0]) for k, M in mats.items()}
    for name in problem.normalize:
        min_eigs[f"{name}>=I"] = float(np.linalg.eigvalsh(_sym(assignment[name]))[0] - 1.0)
    margin = min(min_eigs.values()) if min_eigs else float(t.value)
    diag.update(t_star=float(t.value), scale=scale)
    thresh = tol * scale

    if margin > thresh:
        sol = SdpSolution(assignment, margin, FEASIBLE, min_eigs, diag)
        if problem.objective is not None:
            sol = _refine_objective(problem, sol, thresh, solver)
        return sol
    if float(t.value) < -thresh:
        return SdpSolution(assignment, margin, INFEASIBLE, min_eigs, diag)

    # slack is near zero: ask the solver for a certificate at a fixed margin
    V2, exprs2 = _build(problem)
    cons2 = [F >> thresh * np.eye(c.size) for c, F in exprs2]
    for name in problem.normalize:
        k = problem.variables[name][0][0]
        cons2.append(V2[name] >> np.eye(k))
    st2 = _solve(cp.Problem(cp.Minimize(0), cons2), solver)
    diag["fixed_margin_status"] = st2
    if st2 in ("infeasible", "infeasible_inaccurate"):
        return SdpSolution(assignment, margin, INFEASIBLE, min_eigs, diag)
    return SdpSolution(assignment, margin, INDETERMINATE, min_eigs, diag)


def _refine_objective(problem, sol, thresh, solver):
    V, exprs = _build(problem)
    margin = max(thresh, 0.5 * sol.margin)
    cons = [F >> margin * np.eye(c.size) for c, F in exprs]
    for name in problem.normalize:
        k = problem.variables[name][0][0]
        cons.append(V[name] >> np.eye(k))
    st = _solve(cp.Problem(cp.Minimize(problem.objective(V)), cons), solver)
    if st not in ("optimal", "optimal_inaccurate"):
        return sol
    assignment = {k: np.array(V[k].value, dtype=float) for k in problem.variables}
    mats = problem.evaluate(assignment)
    min_eigs = {k: float(np.linalg.eigvalsh(M)[0]) for k, M in mats.items()}
    if min(min_eigs.values()) <= thresh:
        return sol
    return SdpSolution(assignment, min(min_eigs.values()), FEASIBLE, min_eigs,
                       dict(sol.diagnostics, objective_status=st))


# --- the controller-design LMIs ------------------------------------------------

def _check_G1(plant: StateSpace, G1):
    G1 = np.atleast_2d(np.asarray(G1, dtype=float))
    if G1.shape != (plant.m, plant.n):
        raise ValidationError(f"G1 has shape {G1.shape}, expected {(plant.m, plant.n)}")
    rho = np.max(np.abs(np.linalg.eigvals(plant.A + plant.B @ G1)))
    if rho >= 1.0:
        raise UnstableSystemError(
            f"G1 does not stabilize A_p + B_p G1 (spectral radius {rho:.6g})"
        )
    return G1


def observer_lmi(plant: StateSpace, G1, decay: float = 1.0) -> LmiConstraint:
    """``[[r P, P A + Lhat C], [*, r P]] > 0``; certifies rho(A + L1 C) < r.

    ``decay = r = 1`` is plain Schur stability of the observer.
    """
    _check_G1(plant, G1)
    A, C = plant.A, plant.C
    n = plant.n

    def fn(V, bmat):
        P, Lh = V["P"], V["Lhat"]
        X = P @ A + Lh @ C
        return bmat([[decay * P, X], [X.T, decay * P]])

    return LmiConstraint("observer", fn, 2 * n, blocks=[n, n])


def controller_hinf_lmi(plant: StateSpace, G1, gamma: float) -> LmiConstraint:
    """The 4x4 block LMI bounding ``||-G1 (zI - Abar_c)^{-1} L1||_inf`` by gamma."""
    G1 = _check_G1(plant, G1)
    if not gamma > 0:
        raise ValidationError("gamma must be positive")
    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    n, m, q = plant.n, plant.m, plant.q
    Z = np.zeros

    def fn(V, bmat):
        P, Lh = V["P"], V["Lhat"]
        P13T = P @ (A + B @ G1) + Lh @ (C + D @ G1)
        return bmat([
            [P, Z((n, q)), P13T.T, G1.T],
            [Z((q, n)), gamma ** 2 * np.eye(q), -Lh.T, Z((q, m))],
            [P13T, -Lh, P, Z((n, m))],
            [G1, Z((m, q)), Z((m, n)), np.eye(m)],
        ])

    return LmiConstraint("controller-hinf", fn, 2 * n + q + m, blocks=[n, q, n, m])


def strong_stabilizability_constraint(plant: StateSpace, G1) -> LmiConstraint:
    """``[[P, P13], [P13', P]] > 0``: Abar_c is Schur for L1 = P^{-1} Lhat."""
    G1 = _check_G1(plant, G1)
    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    n = plant.n

    def fn(V, bmat):
        P, Lh = V["P"], V["Lhat"]
        P13T = P @ (A + B @ G1) + Lh @ (C + D @ G1)
        return bmat([[P, P13T.T], [P13T, P]])

    return LmiConstraint("strong-stabilizability", fn, 2 * n, blocks=[n, n])


def closed_loop_hinf_lmi(plant: StateSpace, G1, gamma_bar: float) -> LmiConstraint:
    """6x6 block LMI bounding the plant-controller loop gain from w to y_p."""
    G1 = _check_G1(plant, G1)
    if not gamma_bar > 0:
        raise ValidationError("gamma_bar must be positive")
    A, B, C, D = plant.A, plant.B, plant.C, plant.D
    n, m, q = plant.n, plant.m, plant.q
    Z = np.zeros

    def fn(V, bmat):
        Q, P, Lh = V["Q"], V["P"], V["Lhat"]
        P25T = P @ (A + B @ G1) + Lh @ C
        # the w row and column are divided by gamma_bar (a congruence), which
        # keeps huge bounds from dominating the numerical scale
        r4 = [Q @ A, Q @ B @ G1, Q @ B / gamma_bar]
        r5 = [-Lh @ C, P25T, -Lh @ D / gamma_bar]
        r6 = [C, D @ G1, D / gamma_bar]
        return bmat([
            [Q, Z((n, n)), Z((n, m)), r4[0].T, r5[0].T, r6[0].T],
            [Z((n, n)), P, Z((n, m)), r4[1].T, r5[1].T, r6[1].T],
            [Z((m, n)), Z((m, n)), np.eye(m), r4[2].T, r5[2].T, r6[2].T],
            [r4[0], r4[1], r4[2], Q, Z((n, n)), Z((n, q))],
            [r5[0], r5[1], r5[2], Z((n, n)), P, Z((n, q))],
            [r6[0], r6[1], r6[2], Z((q, n)), Z((q, n)), np.eye(q)],
        ])

    return LmiConstraint("closed-loop-hinf", fn, 4 * n + m + q,
                         blocks=[n, n, m, n, n, q])


def design_lmi_problem(plant: StateSpace, G1, gamma: float, decay: float = 1.0,
                       gamma_bar: float | None = None, L1_fixed=None) -> LmiProblem:
    """Observer LMI + controller H-infinity LMI (+ closed-loop LMI).

    With ``L1_fixed`` the observer gain is pinned via ``Lhat = P L1`` and only
    P (and Q) are searched.
    """
    n, q = plant.n, plant.q
    variables = {"P": ((n, n), True)}
    derived = {}
    if L1_fixed is None:
        variables["Lhat"] = ((n, q), False)
    else:
        L1f = np.atleast_2d(np.asarray(L1_fixed, dtype=float))
        if L1f.shape != (n, q):
            raise ValidationError(f"L1 has shape {L1f.shape}, expected {(n, q)}")
        derived["Lhat"] = lambda V: V["P"] @ L1f
    cons = [observer_lmi(plant, G1, decay), controller_hinf_lmi(plant, G1, gamma)]
    if gamma_bar is not None:
        variables["Q"] = ((n, n), True)
        cons.append(closed_loop_hinf_lmi(plant, G1, gamma_bar))
    return LmiProblem(variables=variables, constraints=cons, derived=derived)


def strong_stabilizability_lmi(plant: StateSpace, G1, tol: float = 1e-7) -> SdpSolution:
    """Joint feasibility of the observer and strong-stabilizability LMIs.

    Both are homogeneous in (P, Lhat), so P >= I is imposed without loss.
    """
    n, q = plant.n, plant.q
    prob = LmiProblem(
        variables={"P": ((n, n), True), "Lhat": ((n, q), False)},
        constraints=[observer_lmi(plant, G1), strong_stabilizability_constraint(plant, G1)],
        normalize=["P"],
    )
    return sdp_feasible(prob, tol=tol)


def observer_feasible(plant: StateSpace, G1, decay: float = 1.0, tol: float = 1e-7):
    n, q = plant.n, plant.q
    prob = LmiProblem(
        variables={"P": ((n, n), True), "Lhat": ((n, q), False)},
        constraints=[observer_lmi(plant, G1, decay)],
        normalize=["P"],
    )
    return sdp_feasible(prob, tol=tol)


def lemma_feasible(plant, G1, gamma, decay=1.0, gamma_bar=None, L1_fixed=None,
                   tol=1e-7) -> SdpSolution:
    return sdp_feasible(design_lmi_problem(plant, G1, gamma, decay, gamma_bar, L1_fixed),
                        tol=tol)


def min_feasible_gamma(plant: StateSpace, G1, bracket=(1e-4, 10.0), rel_width=1e-3,
                       decay: float = 1.0, gamma_bar=None) -> float:
    """Smallest gamma (to relative width ``rel_width``) with feasible design LMIs.

    Feasibility is monotone in gamma: a certificate at gamma_1 stays valid
    for any gamma_2 >= gamma_1.
    """
    lo, hi = bracket
    if not lemma_feasible(plant, G1, hi, decay, gamma_bar).feasible:
        raise InfeasibleError(f"design LMIs infeasible at upper bracket gamma={hi:g}")
    if lemma_feasible(plant, G1, lo, decay, gamma_bar).feasible:
        return lo
    while hi - lo > rel_width * hi:
        mid = math.sqrt(lo * hi) if hi / lo > 2 else 0.5 * (lo + hi)
        if lemma_feasible(plant, G1, mid, decay, gamma_bar).feasible:
            hi = mid
        else:
            lo = mid
    return hi
