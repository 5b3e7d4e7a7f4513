"""Finite-horizon constrained LQ: the two Riccati ODEs and the piecewise policy.

The value function is V(t, x) = x^2 Ghat(t) for x >= 0 and x^2 Gbar(t) for
x < 0, where

    dG/dt = -G C'C - 2 G A - q - min_{H K <= d} [ K'(G DD' + R)K +/- 2 (G(DC + B) + S)'K ]

with G(T) = q_T ("+" for Ghat, "-" for Gbar). Both are integrated backward
with classical RK4; each stage solves its own inner QP.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import qp
from ._io import write_csv
from .errors import BlowUp, OutOfHorizon, SingularMatrix, ValidationError

log = logging.getLogger(__name__)

BLOWUP = 1e12
SWITCH_TOL = 1e-6
MAX_HALVINGS = 8
TIME_TOL = 1e-12


def default_grid(horizon: float) -> np.ndarray:
    """h = 1e-4 (at least 1000 steps) up to T = 1, h = 1e-3 beyond."""
    if horizon <= 1.0:
        n = max(1000, math.ceil(horizon / 1e-4 - 1e-9))
    else:
        n = max(1000, math.ceil(horizon / 1e-3 - 1e-9))
    return np.linspace(0.0, horizon, n + 1)


def _interp(grid: np.ndarray, values: np.ndarray, t: float) -> np.ndarray:
    if len(grid) == 1:
        return values[0]
    i = int(np.clip(np.searchsorted(grid, t, side="right") - 1, 0, len(grid) - 2))
    w = (t - grid[i]) / (grid[i + 1] - grid[i])
    return values[i] + w * (values[i + 1] - values[i])


class Coefficients(NamedTuple):
    A: float
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    R: np.ndarray
    S: np.ndarray
    q: float
    region: qp.Polyhedron
    DDt: np.ndarray
    DC: np.ndarray


def _coefficients(A, B, C, D, R, S, q, region) -> Coefficients:
    return Coefficients(float(A), B, C, D, R, S, float(q), region, D @ D.T, D @ C)


@dataclass(frozen=True, eq=False)
class ProblemData:
    """Coefficients of the finite-horizon problem.

    Coefficients live on ``knots`` (first knot 0, last knot T) and are
    interpolated linearly in between; ``grid`` is the integration grid.
    Array shapes, with K knots: A (K,), B (K,n), C (K,m), D (K,n,m),
    R (K,n,n), S (K,n), q (K,), H (K,k,n), d (K,k).
    """

    horizon: float
    knots: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    R: np.ndarray
    S: np.ndarray
    q: np.ndarray
    H: np.ndarray
    d: np.ndarray
    q_T: float
    grid: np.ndarray

    def __post_init__(self):
        f = lambda x: np.asarray(x, dtype=float)  # noqa: E731
        knots = f(self.knots).ravel()
        K = knots.size
        A = f(self.A).reshape(K)
        B = f(self.B).reshape(K, -1)
        n = B.shape[1]
        C = f(self.C).reshape(K, -1)
        m = C.shape[1]
        D = f(self.D).reshape(K, n, m)
        R = f(self.R).reshape(K, n, n)
        R = 0.5 * (R + np.swapaxes(R, 1, 2))
        S = f(self.S).reshape(K, n)
        q = f(self.q).reshape(K)
        H = f(self.H).reshape(K, -1, n)
        d = f(self.d).reshape(K, H.shape[1])
        grid = f(self.grid).ravel()
        if K < 1 or abs(knots[0]) > TIME_TOL or abs(knots[-1] - self.horizon) > TIME_TOL * max(1, self.horizon):
            if K != 1:
                raise ValueError("coefficient knots must start at 0 and end at the horizon")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("coefficient knots must be strictly increasing")
        if grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise ValueError("integration grid must be strictly increasing with at least 2 points")
        if abs(grid[0]) > TIME_TOL or abs(grid[-1] - self.horizon) > TIME_TOL * max(1, self.horizon):
            raise ValueError("integration grid must run from 0 to the horizon")
        for name, val in dict(knots=knots, A=A, B=B, C=C, D=D, R=R, S=S, q=q, H=H, d=d, grid=grid).items():
            object.__setattr__(self, name, val)
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "q_T", float(self.q_T))
        const = K == 1 or all(
            np.array_equal(arr, np.broadcast_to(arr[0], arr.shape)) for arr in (A, B, C, D, R, S, q, H, d)
        )
        object.__setattr__(self, "_const", self._at_knot(0) if const else None)

    @classmethod
    def constant(cls, horizon, A, B, C, D, R, S, q, q_T, region: Optional[qp.Polyhedron] = None,
                 grid=None) -> "ProblemData":
        B = np.atleast_1d(np.asarray(B, dtype=float))
        n = B.size
        region = region if region is not None else qp.Polyhedron.unconstrained(n)
        grid = default_grid(horizon) if grid is None else grid
        return cls(horizon, [0.0, horizon], [A, A], [B, B], [C, C], [D, D], [R, R], [S, S],
                   [q, q], [region.H, region.H], [region.d, region.d], q_T, grid)

    @property
    def n(self) -> int:
        return self.B.shape[1]

    @property
    def m(self) -> int:
        return self.C.shape[1]

    @property
    def k(self) -> int:
        return self.H.shape[1]

    def _at_knot(self, i: int) -> Coefficients:
        return _coefficients(self.A[i], self.B[i], self.C[i], self.D[i], self.R[i], self.S[i],
                             self.q[i], qp.Polyhedron(self.H[i], self.d[i]))

    def at(self, t: float) -> Coefficients:
        if self._const is not None:
            return self._const
        kn = self.knots
        g = lambda arr: _interp(kn, arr, t)  # noqa: E731
        return _coefficients(g(self.A), g(self.B), g(self.C), g(self.D), g(self.R), g(self.S),
                             g(self.q), qp.Polyhedron(g(self.H), g(self.d)))

    def with_grid(self, grid) -> "ProblemData":
        return ProblemData(self.horizon, self.knots, self.A, self.B, self.C, self.D, self.R,
                           self.S, self.q, self.H, self.d, self.q_T, grid)

    def validate(self) -> list:
        """Check the modelling assumptions at every knot.

        Raises ValidationError for a non-PSD cost, a singular DD', or an
        empty constraint set; returns warnings (strings) when only the
        stronger {HK <= d, HK <= 0} nonemptiness fails.
        """
        warnings = []
        if self.q_T < 0:
            raise ValidationError("terminal weight q_T must be >= 0", "Assumption 2")
        for i in range(self.knots.size):
            Q = np.block([[self.R[i], self.S[i][:, None]], [self.S[i][None, :], np.array([[self.q[i]]])]])
            lam = np.linalg.eigvalsh(0.5 * (Q + Q.T))[0]
            if lam < -1e-12 * max(1.0, np.max(np.abs(Q))):
                raise ValidationError(f"cost matrix Q not PSD (min eigenvalue {lam:.3e})",
                                      "Assumption 2", i)
            DDt = self.D[i] @ self.D[i].T
            if np.linalg.eigvalsh(DDt)[0] <= qp.PD_TOL:
                raise ValidationError("D D' is not positive definite", "Assumption 2", i)
            rep = qp.check_feasibility(qp.Polyhedron(self.H[i], self.d[i]))
            if not rep.feasible:
                raise ValidationError("control constraint set {K : HK <= d} is empty",
                                      "Assumption 1", i)
            if not rep.assumption_feasible:
                warnings.append(f"Assumption 1: {{K : HK <= d, HK <= 0}} is empty at knot {i}")
        for w in warnings:
            log.warning(w)
        return warnings

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon, "knots": self.knots.tolist(), "A": self.A.tolist(),
            "B": self.B.tolist(), "C": self.C.tolist(), "D": self.D.tolist(), "R": self.R.tolist(),
            "S": self.S.tolist(), "q": self.q.tolist(), "H": self.H.tolist(), "d": self.d.tolist(),
            "q_T": self.q_T, "grid": self.grid.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ProblemData":
        return cls(obj["horizon"], obj["knots"], obj["A"], obj["B"], obj["C"], obj["D"], obj["R"],
                   obj["S"], obj["q"], obj["H"], obj["d"], obj["q_T"], obj["grid"])


def inner_problem(c: Coefficients, G: float, sign: int, ridge: bool = False) -> qp.QpProblem:
    """The QP inside the Riccati right-hand side at state weight G."""
    omega = G * c.DDt + c.R
    w = G * (c.DC + c.B) + c.S
    return qp.QpProblem(omega, sign * w, c.region, ridge)


def riccati_rhs(c: Coefficients, G: float, sign: int, warm=None, ridge: bool = False):
    sol = qp.solve_qp(inner_problem(c, G, sign, ridge), warm)
    return -G * float(c.C @ c.C) - 2.0 * G * c.A - c.q - sol.value, sol


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    grid: np.ndarray
    g_hat: np.ndarray
    g_bar: np.ndarray
    k_hat: np.ndarray
    k_bar: np.ndarray
    q_T: float = 0.0

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    def _check_time(self, t: float) -> None:
        if t < -TIME_TOL or t > self.horizon * (1 + TIME_TOL) + TIME_TOL:
            raise OutOfHorizon(f"t = {t} outside [0, {self.horizon}]")

    def g_at(self, t: float) -> tuple:
        self._check_time(t)
        return float(_interp(self.grid, self.g_hat, t)), float(_interp(self.grid, self.g_bar, t))

    def gains(self, t: float) -> tuple:
        self._check_time(t)
        return _interp(self.grid, self.k_hat, t), _interp(self.grid, self.k_bar, t)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(), "g_hat": self.g_hat.tolist(), "g_bar": self.g_bar.tolist(),
            "k_hat": self.k_hat.tolist(), "k_bar": self.k_bar.tolist(), "q_T": self.q_T,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RiccatiSolution":
        a = lambda k: np.asarray(obj[k], dtype=float)  # noqa: E731
        return cls(a("grid"), a("g_hat"), a("g_bar"), a("k_hat"), a("k_bar"), float(obj["q_T"]))


def _rk4(data, t1, h, G, sign, warm, ridge):
    # backward step from t1 to t1 - h
    f1, s1 = riccati_rhs(data.at(t1), G, sign, warm, ridge)
    cm = data.at(t1 - 0.5 * h)
    f2, s2 = riccati_rhs(cm, G - 0.5 * h * f1, sign, s1.active_set, ridge)
    f3, s3 = riccati_rhs(cm, G - 0.5 * h * f2, sign, s2.active_set, ridge)
    f4, s4 = riccati_rhs(data.at(t1 - h), G - h * f3, sign, s3.active_set, ridge)
    G0 = G - h / 6.0 * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
    switched = len({s1.active_set, s2.active_set, s3.active_set, s4.active_set}) > 1
    return G0, s1, s4.active_set, switched


def _step(data, t1, h, G, sign, warm, ridge, depth=0):
    """One grid step; halves the step around active-set switches."""
    G0, s1, warm_out, switched = _rk4(data, t1, h, G, sign, warm, ridge)
    if not switched or depth >= MAX_HALVINGS:
        return G0, s1, warm_out
    Gm, _, wm, _ = _rk4(data, t1, 0.5 * h, G, sign, warm, ridge)
    G2, _, w2, _ = _rk4(data, t1 - 0.5 * h, 0.5 * h, Gm, sign, wm, ridge)
    if abs(G2 - G0) <= SWITCH_TOL * max(1.0, abs(G)):
        return G2, s1, w2
    Gm, _, wm = _step(data, t1, 0.5 * h, G, sign, warm, ridge, depth + 1)
    G2, _, w2 = _step(data, t1 - 0.5 * h, 0.5 * h, Gm, sign, wm, ridge, depth + 1)
    return G2, s1, w2


def integrate_branch(data: ProblemData, sign: int, ridge: bool = False):
    """G and gain trajectories for one branch (+1: Ghat, -1: Gbar)."""
    grid = data.grid
    N = grid.size - 1
    G = np.empty(N + 1)
    K = np.empty((N + 1, data.n))
    G[N] = data.q_T
    warm = None
    for i in range(N - 1, -1, -1):
        t1 = grid[i + 1]
        G[i], s1, warm = _step(data, t1, t1 - grid[i], G[i + 1], sign, warm, ridge)
        K[i + 1] = s1.k_star
        if not np.isfinite(G[i]) or abs(G[i]) > BLOWUP:
            raise BlowUp(float(grid[i]), float(G[i]))
    _, s0 = riccati_rhs(data.at(grid[0]), G[0], sign, warm, ridge)
    K[0] = s0.k_star
    return G, K


def solve_riccati_pair(data: ProblemData, ridge: bool = False) -> RiccatiSolution:
    """Integrate the Ghat/Gbar pair backward from q_T and record the gains."""
    g_hat, k_hat = integrate_branch(data, +1, ridge)
    g_bar, k_bar = integrate_branch(data, -1, ridge)
    return RiccatiSolution(data.grid.copy(), g_hat, g_bar, k_hat, k_bar, data.q_T)


def unconstrained_rhs(c: Coefficients, G: float) -> float:
    omega = G * c.DDt + c.R
    w = G * (c.DC + c.B) + c.S
    try:
        x = np.linalg.solve(omega, w)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(f"G DD' + R is singular at G = {G}") from exc
    return -G * float(c.C @ c.C) - 2.0 * G * c.A - c.q + float(w @ x)


def solve_unconstrained_riccati(data: ProblemData) -> np.ndarray:
    """Classical Riccati trajectory with the closed-form (constraint-free) right-hand side."""
    grid = data.grid
    G = np.empty(grid.size)
    G[-1] = data.q_T
    for i in range(grid.size - 2, -1, -1):
        t1, h, g = grid[i + 1], grid[i + 1] - grid[i], G[i + 1]
        cm = data.at(t1 - 0.5 * h)
        f1 = unconstrained_rhs(data.at(t1), g)
        f2 = unconstrained_rhs(cm, g - 0.5 * h * f1)
        f3 = unconstrained_rhs(cm, g - 0.5 * h * f2)
        f4 = unconstrained_rhs(data.at(t1 - h), g - h * f3)
        G[i] = g - h / 6.0 * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
        if not np.isfinite(G[i]) or abs(G[i]) > BLOWUP:
            raise BlowUp(float(grid[i]), float(G[i]))
    return G


class PiecewisePolicy:
    """u(t, x) = Khat(t) x for x >= 0 and -Kbar(t) x for x < 0."""

    def __init__(self, solution: RiccatiSolution):
        self.solution = solution

    @property
    def horizon(self) -> float:
        return self.solution.horizon

    def gains(self, t: float):
        return self.solution.gains(t)

    def offset(self, t: float) -> float:
        return 0.0

    def __call__(self, t: float, x: float) -> np.ndarray:
        return evaluate_policy(self, t, x)


def evaluate_policy(policy: PiecewisePolicy, t: float, x: float) -> np.ndarray:
    k_hat, k_bar = policy.gains(t)
    # x = 0 takes the positive branch; both give u = 0
    return k_hat * x if x >= 0 else -k_bar * x


def value_function(sol: RiccatiSolution, t: float, x: float) -> float:
    g_hat, g_bar = sol.g_at(t)
    return x * x * (g_hat if x >= 0 else g_bar)


def export_gain_schedule(sol: RiccatiSolution, path=None) -> str:
    """CSV of (t, Ghat, Gbar, Khat_1..n, Kbar_1..n), one row per grid point."""
    n = sol.k_hat.shape[1]
    header = ["t", "g_hat", "g_bar"] + [f"k_hat_{j + 1}" for j in range(n)] + [
        f"k_bar_{j + 1}" for j in range(n)]
    rows = (
        [float(t), float(gh), float(gb), *map(float, kh), *map(float, kb)]
        for t, gh, gb, kh, kb in zip(sol.grid, sol.g_hat, sol.g_bar, sol.k_hat, sol.k_bar)
    )
    return write_csv(header, rows, path)
