"""Small dense convex QPs over polyhedra.

Every Riccati right-hand side evaluation needs

    min_K  K' Omega K + 2 w' K   s.t.  H K <= d

for a handful of controls, so the solver here is a plain primal active-set
method with dense solves of the equality-constrained KKT system on the
working set. Feasibility of a polyhedron is decided by a
phase-one LP.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import Infeasible, MaxIterations, NotPositiveDefinite

FEAS_TOL = 1e-9
PD_TOL = 1e-12
KKT_TOL = 1e-9
RIDGE = 1e-10


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    witness: Optional[np.ndarray]
    # {K : HK <= d, HK <= 0}, the set the finite/infinite-horizon assumptions ask for
    assumption_feasible: bool
    assumption_witness: Optional[np.ndarray]

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "witness": None if self.witness is None else self.witness.tolist(),
            "assumption_feasible": self.assumption_feasible,
            "assumption_witness": (
                None if self.assumption_witness is None else self.assumption_witness.tolist()
            ),
        }


@dataclass(frozen=True, eq=False)
class Polyhedron:
    """The set {K in R^n : H K <= d}; ``k = 0`` rows means unconstrained."""

    H: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        d = np.atleast_1d(np.asarray(self.d, dtype=float)).ravel()
        if H.size == 0:
            H = H.reshape(0, H.shape[-1] if H.ndim == 2 else 0)
        if H.shape[0] != d.shape[0]:
            raise ValueError(f"H has {H.shape[0]} rows but d has {d.shape[0]} entries")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "d", d)

    @classmethod
    def unconstrained(cls, n: int) -> "Polyhedron":
        return cls(np.zeros((0, n)), np.zeros(0))

    @classmethod
    def bounds(cls, lower, upper) -> "Polyhedron":
        """lower <= K <= upper, written as [I; -I] K <= [upper; -lower]."""
        lower = np.asarray(lower, dtype=float).ravel()
        upper = np.asarray(upper, dtype=float).ravel()
        n = lower.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))

    @property
    def n(self) -> int:
        return self.H.shape[1]

    @property
    def k(self) -> int:
        return self.H.shape[0]

    def scaled(self, alpha: float) -> "Polyhedron":
        """The state-dependent control set {u : H u <= |alpha| d}."""
        return Polyhedron(self.H, abs(alpha) * self.d)

    def violation(self, K) -> float:
        if self.k == 0:
            return 0.0
        return float(max(0.0, np.max(self.H @ np.asarray(K, dtype=float) - self.d)))

    def contains(self, K, tol: float = FEAS_TOL) -> bool:
        return self.violation(K) <= tol

    @cached_property
    def report(self) -> FeasibilityReport:
        return check_feasibility(self)

    @property
    def witness(self) -> Optional[np.ndarray]:
        return self.report.witness

    def to_dict(self) -> dict:
        return {"H": self.H.tolist(), "d": self.d.tolist()}


def _phase_one(H: np.ndarray, d: np.ndarray) -> Optional[np.ndarray]:
    """Largest-normalized-slack point of {HK <= d}, or None if empty.

    Solves max s s.t. H_i K + s ||H_i|| <= d_i, s <= 1. The set is nonempty
    iff the optimum s* >= 0; for s* > 0 the point is strictly interior.
    """
    k, n = H.shape
    if k == 0:
        return np.zeros(n)
    if np.all(d >= 0):
        return np.zeros(n)
    norms = np.linalg.norm(H, axis=1)
    norms[norms == 0] = 1.0
    A_ub = np.hstack([H, norms[:, None]])
    cost = np.zeros(n + 1)
    cost[-1] = -1.0
    bounds = [(None, None)] * n + [(None, 1.0)]
    res = linprog(cost, A_ub=A_ub, b_ub=d, bounds=bounds, method="highs")
    if res.status != 0 or -res.fun < -FEAS_TOL:
        return None
    K = res.x[:n]
    if np.max(H @ K - d) > FEAS_TOL:
        return None
    return K


def check_feasibility(region: Polyhedron) -> FeasibilityReport:
    """Decide whether {HK <= d} and {HK <= d, HK <= 0} are nonempty."""
    H, d = region.H, region.d
    witness = _phase_one(H, d)
    if witness is None:
        return FeasibilityReport(False, None, False, None)
    both = _phase_one(np.vstack([H, H]), np.concatenate([d, np.zeros_like(d)]))
    return FeasibilityReport(True, witness, both is not None, both)


@dataclass(frozen=True, eq=False)
class QpProblem:
    """min_K K' omega K + 2 w' K over ``region``."""

    omega: np.ndarray
    w: np.ndarray
    region: Polyhedron
    ridge: bool = False

    def __post_init__(self):
        omega = np.atleast_2d(np.asarray(self.omega, dtype=float))
        omega = 0.5 * (omega + omega.T)
        w = np.atleast_1d(np.asarray(self.w, dtype=float)).ravel()
        n = w.size
        if omega.shape != (n, n):
            raise ValueError(f"omega must be {n}x{n}, got {omega.shape}")
        if self.region.n != n:
            raise ValueError(f"region has {self.region.n} columns, expected {n}")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.w.size

    def objective(self, K) -> float:
        K = np.asarray(K, dtype=float)
        return float(K @ self.omega @ K + 2.0 * self.w @ K)

    def to_dict(self) -> dict:
        return {
            "omega": self.omega.tolist(),
            "w": self.w.tolist(),
            "region": self.region.to_dict(),
            "ridge": self.ridge,
        }


@dataclass(frozen=True, eq=False)
class QpSolution:
    k_star: np.ndarray
    value: float
    multipliers: np.ndarray
    active_set: tuple
    iterations: int = 0
    stationarity: float = 0.0
    complementarity: float = 0.0
    infeasibility: float = 0.0

    def kkt_ok(self, tol: float = KKT_TOL) -> bool:
        return (
            self.stationarity <= tol
            and self.complementarity <= tol
            and self.infeasibility <= FEAS_TOL
            and bool(np.all(self.multipliers >= -tol))
        )

    def to_dict(self) -> dict:
        return {
            "k_star": self.k_star.tolist(),
            "value": self.value,
            "multipliers": self.multipliers.tolist(),
            "active_set": list(self.active_set),
            "iterations": self.iterations,
            "stationarity": self.stationarity,
            "complementarity": self.complementarity,
            "infeasibility": self.infeasibility,
        }


def dump_debug(problem: QpProblem, solution: Optional[QpSolution] = None) -> str:
    """JSON blob of a problem (and its solution) for bug reports."""
    payload = {"problem": problem.to_dict()}
    if solution is not None:
        payload["solution"] = solution.to_dict()
    return json.dumps(payload, indent=2)


def _eqp(P, c, H, d, W):
    """Minimizer of 1/2 x'Px + c'x on the face {H_W x = d_W} and its multipliers."""
    n = c.size
    if not W:
        return np.linalg.solve(P, -c), np.zeros(0)
    Hw = H[W]
    m = len(W)
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = P
    kkt[:n, n:] = Hw.T
    kkt[n:, :n] = Hw
    rhs = np.concatenate([-c, d[W]])
    sol = np.linalg.solve(kkt, rhs)
    return sol[:n], sol[n:]


def _certify(problem: QpProblem, omega, K, mu):
    H, d = problem.region.H, problem.region.d
    grad = 2.0 * omega @ K + 2.0 * problem.w
    if H.shape[0]:
        grad = grad + H.T @ mu
        slack = H @ K - d
        comp = float(np.max(np.abs(mu * slack)))
        infeas = float(max(0.0, np.max(slack)))
    else:
        comp = infeas = 0.0
    return float(np.max(np.abs(grad))) if grad.size else 0.0, comp, infeas


def _require_pd(omega: np.ndarray) -> None:
    # Cholesky is the cheap test; the eigenvalue is only needed for the report
    if not omega.size:
        return
    try:
        np.linalg.cholesky(omega - PD_TOL * np.eye(omega.shape[0]))
        return
    except np.linalg.LinAlgError:
        pass
    raise NotPositiveDefinite(float(np.linalg.eigvalsh(omega)[0]))


def _independent(Hw: np.ndarray) -> bool:
    # Cholesky of the Gram matrix: far cheaper than an SVD rank test
    gram = Hw @ Hw.T
    try:
        np.linalg.cholesky(gram - 1e-12 * np.trace(gram) * np.eye(gram.shape[0]))
    except np.linalg.LinAlgError:
        return False
    return True


def _independent_rows(H: np.ndarray, rows) -> list:
    """Valid, linearly independent subset of a suggested working set (at most n rows)."""
    cand = sorted({int(i) for i in rows if 0 <= int(i) < H.shape[0]})
    if not cand or (len(cand) <= H.shape[1] and _independent(H[cand])):
        return cand
    keep: list = []
    for i in cand:
        if len(keep) == H.shape[1]:
            break
        if _independent(H[keep + [i]]):
            keep.append(i)
    return keep


def solve_qp(problem: QpProblem, warm_start: Optional[Sequence[int]] = None) -> QpSolution:
    """Global minimizer of a strictly convex QP with its KKT certificate.

    ``warm_start`` is an active set from a neighbouring problem (e.g. the
    previous Riccati stage); it only changes the path, not the answer.
    """
    omega = problem.omega
    if problem.ridge:
        omega = omega + RIDGE * np.eye(problem.n)
    _require_pd(omega)

    P = 2.0 * omega
    c = 2.0 * problem.w
    H, d = problem.region.H, problem.region.d
    n, k = problem.n, problem.region.k

    if k == 0:
        K = np.linalg.solve(P, -c)
        mu = np.zeros(0)
        stat, comp, infeas = _certify(problem, omega, K, mu)
        return QpSolution(K, problem.objective(K), mu, (), 0, stat, comp, infeas)

    scale = max(1.0, float(np.max(np.abs(P))), float(np.max(np.abs(c))) if n else 0.0)
    mult_tol = 1e-12 * scale
    step_tol = 1e-13 * scale

    x = None
    W: list = []
    warm = _independent_rows(H, warm_start) if warm_start else []
    for trial in ([warm] if warm else []) + [[]]:
        try:
            xw, _ = _eqp(P, c, H, d, trial)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(xw)) and np.max(H @ xw - d) <= FEAS_TOL:
            x, W = xw, list(trial)
            break
    if x is None:
        x = problem.region.witness
        if x is None:
            raise Infeasible("constraint polyhedron is empty")
        x = x.copy()
        W = []

    max_iter = 100 * (n + k)
    bland_after = 3 * n
    stalled = 0
    mu_w = np.zeros(len(W))
    for it in range(1, max_iter + 1):
        bland = stalled >= bland_after
        xw, mu_w = _eqp(P, c, H, d, W)
        p = xw - x
        if np.max(np.abs(p)) <= step_tol * (1.0 + np.max(np.abs(x))):
            x = xw
            if not W or np.min(mu_w) >= -mult_tol:
                break
            neg = [i for i, m in enumerate(mu_w) if m < -mult_tol]
            if bland:
                drop = min(neg, key=lambda i: W[i])
            else:
                # most negative multiplier; ties resolved by lowest constraint index
                drop = min(neg, key=lambda i: (mu_w[i], W[i]))
            W.pop(drop)
            stalled += 1
            continue

        Hp = H @ p
        alpha, block = 1.0, None
        for i in range(k):
            if i in W or Hp[i] <= 1e-14 * (1.0 + abs(d[i])):
                continue
            ratio = max(0.0, (d[i] - H[i] @ x) / Hp[i])
            if ratio < alpha:
                alpha, block = ratio, i
        x = x + alpha * p
        if block is None:
            stalled = 0
            continue
        W.append(block)
        W.sort()
        stalled = stalled + 1 if alpha <= 1e-14 else 0
    else:
        raise MaxIterations(f"active-set QP did not converge in {max_iter} iterations")

    mu = np.zeros(k)
    if W:
        mu[W] = np.maximum(mu_w, 0.0)
    stat, comp, infeas = _certify(problem, omega, x, mu)
    return QpSolution(x, problem.objective(x), mu, tuple(W), it, stat, comp, infeas)


def problem_at_state(omega, w, region: Polyhedron, alpha: float) -> QpProblem:
    """min_u u' omega u + 2 alpha w' u  s.t.  H u <= |alpha| d."""
    return QpProblem(omega, alpha * np.asarray(w, dtype=float), region.scaled(alpha))


def scale_solution(k_hat, k_bar, alpha: float) -> np.ndarray:
    """Minimizer of the state-alpha problem from the two unit-state minimizers."""
    if alpha >= 0:
        return alpha * np.asarray(k_hat, dtype=float)
    return abs(alpha) * np.asarray(k_bar, dtype=float)


def scale_value(v_hat: float, v_bar: float, alpha: float) -> float:
    return alpha * alpha * (v_hat if alpha >= 0 else v_bar)


def solve_branches(omega, w, region: Polyhedron, warm=(None, None), ridge: bool = False):
    """Solve the +w ("hat") and -w ("bar") problems sharing omega and region."""
    hat = solve_qp(QpProblem(omega, w, region, ridge), warm[0])
    bar = solve_qp(QpProblem(omega, -np.asarray(w, dtype=float), region, ridge), warm[1])
    return hat, bar
