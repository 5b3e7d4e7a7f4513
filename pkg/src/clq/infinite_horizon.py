"""Stationary (infinite-horizon) constrained LQ.

The stationary weights are roots of

    F(G) = -G C'C - 2 G A - q - min_{K in region} f(K, G)

for the hat branch (f = K'(G DD' + R)K + 2 (G(DC + B) + S)'K) and the bar
branch (same with the linear term negated). Roots are found by Newton's
method on a central-difference slope, safeguarded by bisection once a sign
change has been seen. When Newton fails, F is scanned on a log grid; no
sign change on (0, g_max] means no stationary solution.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Union

import numpy as np

from . import qp
from ._io import write_csv
from .errors import BlowUp, MaxIterations, ValidationError
from .finite_horizon import (
    Coefficients,
    ProblemData,
    _coefficients,
    default_grid,
    inner_problem,
    solve_riccati_pair,
)

log = logging.getLogger(__name__)

HAT, BAR = "hat", "bar"
_SIGN = {HAT: +1, BAR: -1}


@dataclass(frozen=True)
class StationaryOptions:
    root_tol: float = 1e-9
    max_iter: int = 100
    g_max: float = 1e6
    g_min: float = 1e-8
    scan_per_decade: int = 10
    fd_rel: float = 1e-6
    fd_min: float = 1e-6
    ridge: bool = False


@dataclass(frozen=True, eq=False)
class StationaryProblem:
    A: float
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    R: np.ndarray
    S: np.ndarray
    q: float
    region: qp.Polyhedron

    def __post_init__(self):
        B = np.atleast_1d(np.asarray(self.B, dtype=float)).ravel()
        n = B.size
        C = np.atleast_1d(np.asarray(self.C, dtype=float)).ravel()
        D = np.asarray(self.D, dtype=float).reshape(n, C.size)
        R = np.asarray(self.R, dtype=float).reshape(n, n)
        S = np.atleast_1d(np.asarray(self.S, dtype=float)).ravel()
        if S.size != n or self.region.n != n:
            raise ValueError("B, S and the constraint region must share the control dimension")
        for name, val in dict(A=float(self.A), B=B, C=C, D=D, R=0.5 * (R + R.T), S=S,
                              q=float(self.q)).items():
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.B.size

    @cached_property
    def coefficients(self) -> Coefficients:
        return _coefficients(self.A, self.B, self.C, self.D, self.R, self.S, self.q, self.region)

    def validate(self) -> list:
        """Raise on a violated strict assumption; return softer warnings."""
        Q = np.block([[self.R, self.S[:, None]], [self.S[None, :], np.array([[self.q]])]])
        lam = np.linalg.eigvalsh(Q)[0]
        if lam <= qp.PD_TOL:
            raise ValidationError(f"cost matrix Q not positive definite (min eigenvalue {lam:.3e})",
                                  "Assumption 4")
        if np.linalg.eigvalsh(self.D @ self.D.T)[0] <= qp.PD_TOL:
            raise ValidationError("D D' is not positive definite", "Assumption 4")
        rep = self.region.report
        if not rep.feasible:
            raise ValidationError("control constraint set {K : HK <= d} is empty", "Assumption 3")
        warnings = []
        if not rep.assumption_feasible:
            warnings.append("Assumption 3: {K : HK <= d, HK <= 0} is empty")
        for w in warnings:
            log.warning(w)
        return warnings

    def to_problem_data(self, horizon: float, q_T: float = 0.0, grid=None) -> ProblemData:
        return ProblemData.constant(horizon, self.A, self.B, self.C, self.D, self.R, self.S,
                                    self.q, q_T, self.region, grid)

    def to_dict(self) -> dict:
        return {"A": self.A, "B": self.B.tolist(), "C": self.C.tolist(), "D": self.D.tolist(),
                "R": self.R.tolist(), "S": self.S.tolist(), "q": self.q,
                "H": self.region.H.tolist(), "d": self.region.d.tolist()}


@dataclass(frozen=True)
class BranchResult:
    branch: str
    root: Optional[float]
    residual: float
    iterations: int
    method: str  # "newton", "scan+newton" or "none"

    @property
    def converged(self) -> bool:
        return self.root is not None


@dataclass(frozen=True, eq=False)
class ScanProfile:
    g: np.ndarray
    f_hat: np.ndarray
    f_bar: np.ndarray

    def sign_changes(self, branch: str) -> list:
        f = self.f_hat if branch == HAT else self.f_bar
        s = np.sign(f)
        return [i for i in range(len(f) - 1) if s[i] * s[i + 1] < 0 or s[i] == 0]

    def to_csv(self, path=None) -> str:
        rows = ([float(g), float(a), float(b)] for g, a, b in zip(self.g, self.f_hat, self.f_bar))
        return write_csv(["g", "f_hat", "f_bar"], rows, path)


@dataclass(frozen=True, eq=False)
class StationarySolution:
    g_hat_star: float
    g_bar_star: float
    k_hat_star: np.ndarray
    k_bar_star: np.ndarray
    n_hat: float
    n_bar: float
    iterations: tuple
    residuals: tuple

    horizon = math.inf

    @property
    def stable(self) -> bool:
        return self.n_hat < 0 and self.n_bar < 0

    def gains(self, t: float = 0.0):
        return self.k_hat_star, self.k_bar_star

    def offset(self, t: float = 0.0) -> float:
        return 0.0

    def to_dict(self) -> dict:
        return {
            "g_hat_star": self.g_hat_star, "g_bar_star": self.g_bar_star,
            "k_hat_star": self.k_hat_star.tolist(), "k_bar_star": self.k_bar_star.tolist(),
            "n_hat": self.n_hat, "n_bar": self.n_bar, "iterations": list(self.iterations),
            "residuals": list(self.residuals), "stable": self.stable,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "StationarySolution":
        return cls(float(obj["g_hat_star"]), float(obj["g_bar_star"]),
                   np.asarray(obj["k_hat_star"], dtype=float),
                   np.asarray(obj["k_bar_star"], dtype=float), float(obj["n_hat"]),
                   float(obj["n_bar"]), tuple(obj["iterations"]), tuple(obj["residuals"]))


@dataclass(frozen=True, eq=False)
class NoSolutionReport:
    hat: BranchResult
    bar: BranchResult
    scan: ScanProfile = field(repr=False)

    def to_dict(self) -> dict:
        out = {"status": "no_solution"}
        for b in (self.hat, self.bar):
            out[b.branch] = {"root": b.root, "residual": b.residual, "iterations": b.iterations,
                             "method": b.method, "converged": b.converged}
        return out


def eval_F(problem: StationaryProblem, g: float, branch: str = HAT, ridge: bool = False) -> float:
    return _eval(problem, g, branch, ridge)[0]


def _eval(problem, g, branch, ridge=False, warm=None):
    c = problem.coefficients
    sol = qp.solve_qp(inner_problem(c, g, _SIGN[branch], ridge), warm)
    return -g * float(c.C @ c.C) - 2.0 * g * c.A - c.q - sol.value, sol


def stability_scalar(problem: StationaryProblem, K, branch: str = HAT) -> float:
    """Growth rate of E[x^2] under u = K x (hat) or u = -K x (bar) in one sign regime."""
    K = np.asarray(K, dtype=float)
    c = problem.coefficients
    lin = float((c.B + c.DC) @ K)
    return 2.0 * c.A + float(c.C @ c.C) + 2.0 * _SIGN[branch] * lin + float(K @ c.DDt @ K)


def unconstrained_F(problem: StationaryProblem, g: float) -> float:
    c = problem.coefficients
    omega = g * c.DDt + c.R
    w = g * (c.DC + c.B) + c.S
    return -g * float(c.C @ c.C) - 2.0 * g * c.A - c.q + float(w @ np.linalg.solve(omega, w))


def _newton(func: Callable[[float], float], g0: float, opts: StationaryOptions,
            bracket: Optional[tuple] = None):
    """Newton with a central-difference slope; bisection once a sign change is known.

    Returns (root or None, |F(root)|, iterations). ``bracket`` holds two points
    (g_neg, g_pos) with F(g_neg) < 0 < F(g_pos).
    """
    g_neg, g_pos = bracket if bracket else (None, None)
    g = g0
    f_prev = math.inf
    best = (math.inf, None)
    for it in range(1, opts.max_iter + 1):
        f = func(g)
        if not math.isfinite(f):
            return None, math.inf, it
        if abs(f) < best[0]:
            best = (abs(f), g)
        if abs(f) <= opts.root_tol:
            return g, abs(f), it
        if f < 0:
            g_neg = g
        else:
            g_pos = g
        eps = max(opts.fd_min, opts.fd_rel * abs(g))
        if g - eps > 0:
            slope = (func(g + eps) - func(g - eps)) / (2.0 * eps)
        else:
            slope = (func(g + eps) - f) / eps
        g_new = g - f / slope if slope != 0 and math.isfinite(slope) else math.nan
        bracketed = g_neg is not None and g_pos is not None
        if bracketed:
            lo, hi = min(g_neg, g_pos), max(g_neg, g_pos)
            if not (lo < g_new < hi) or abs(f) > 0.5 * f_prev:
                g_new = 0.5 * (lo + hi)
            if hi - lo <= 4 * np.finfo(float).eps * hi:
                return (g, abs(f), it) if abs(f) <= 10 * opts.root_tol else (None, abs(f), it)
        else:
            if not math.isfinite(g_new):
                return None, abs(f), it
            if g_new <= 0:
                g_new = 0.1 * g
            if g_new > opts.g_max:
                g_new = opts.g_max if g < opts.g_max else math.nan
            if not math.isfinite(g_new) or g_new < opts.g_min * 1e-4:
                return None, abs(f), it
        f_prev = abs(f)
        g = g_new
    return None, best[0], opts.max_iter


def scan_F(problem: StationaryProblem, g=None, opts: StationaryOptions = StationaryOptions()) -> ScanProfile:
    """F-hat and F-bar on a grid (default: log-spaced over [g_min, g_max])."""
    if g is None:
        lo, hi = math.log10(opts.g_min), math.log10(opts.g_max)
        g = np.logspace(lo, hi, int(round((hi - lo) * opts.scan_per_decade)) + 1)
    g = np.asarray(g, dtype=float)
    f_hat = np.array([eval_F(problem, x, HAT, opts.ridge) for x in g])
    f_bar = np.array([eval_F(problem, x, BAR, opts.ridge) for x in g])
    return ScanProfile(g, f_hat, f_bar)


def initial_guess(problem: StationaryProblem, opts: StationaryOptions = StationaryOptions()) -> float:
    """Unconstrained algebraic Riccati root, else a long-horizon finite-horizon value."""
    func = lambda g: unconstrained_F(problem, g)  # noqa: E731
    root, _, _ = _newton(func, 1.0, opts)
    if root is not None and root > 0:
        return root
    T = 5.0 / abs(problem.A) + 1.0 if problem.A != 0 else 6.0
    try:
        sol = solve_riccati_pair(problem.to_problem_data(T, 0.0, default_grid(T)), opts.ridge)
    except BlowUp as exc:
        # no bounded long-horizon value either; Newton from 1 and the scan settle existence
        log.debug("initial guess fallback blew up: %s", exc)
        return 1.0
    return max(float(sol.g_hat[0]), opts.g_min)


def find_root(problem: StationaryProblem, branch: str, g0: float,
              opts: StationaryOptions = StationaryOptions(), scan: Optional[ScanProfile] = None):
    """Root of F for one branch; returns (BranchResult, scan profile used or None)."""
    func = lambda g: eval_F(problem, g, branch, opts.ridge)  # noqa: E731
    root, res, its = _newton(func, g0, opts)
    if root is not None and root > 0:
        return BranchResult(branch, root, res, its, "newton"), scan
    if scan is None:
        scan = scan_F(problem, opts=opts)
        log.debug("scan profile g=%s f_hat=%s f_bar=%s", scan.g, scan.f_hat, scan.f_bar)
    changes = scan.sign_changes(branch)
    if not changes:
        return BranchResult(branch, None, res, its, "none"), scan
    i = changes[0]
    f = scan.f_hat if branch == HAT else scan.f_bar
    if f[i] == 0:
        return BranchResult(branch, float(scan.g[i]), 0.0, its, "scan+newton"), scan
    a, b = float(scan.g[i]), float(scan.g[i + 1])
    bracket = (a, b) if f[i] < 0 else (b, a)
    root, res, its2 = _newton(func, math.sqrt(a * b), opts, bracket)
    if root is None:
        raise MaxIterations(f"{branch} root not found in bracket [{a}, {b}] within {opts.max_iter} iterations")
    return BranchResult(branch, root, res, its + its2, "scan+newton"), scan


def solve_stationary(problem: StationaryProblem, options: Optional[StationaryOptions] = None,
                     g0: Optional[float] = None) -> Union[StationarySolution, NoSolutionReport]:
    opts = options or StationaryOptions()
    if g0 is None:
        g0 = initial_guess(problem, opts)
    hat, scan = find_root(problem, HAT, g0, opts)
    bar, scan = find_root(problem, BAR, g0, opts, scan)
    if not (hat.converged and bar.converged):
        if scan is None:
            scan = scan_F(problem, opts=opts)
        return NoSolutionReport(hat, bar, scan)
    _, s_hat = _eval(problem, hat.root, HAT, opts.ridge)
    _, s_bar = _eval(problem, bar.root, BAR, opts.ridge)
    k_hat, k_bar = s_hat.k_star, s_bar.k_star
    return StationarySolution(
        hat.root, bar.root, k_hat, k_bar,
        stability_scalar(problem, k_hat, HAT), stability_scalar(problem, k_bar, BAR),
        (hat.iterations, bar.iterations), (hat.residual, bar.residual),
    )


def stationary_policy(sol: StationarySolution, x: float) -> np.ndarray:
    return sol.k_hat_star * x if x >= 0 else -sol.k_bar_star * x


def stationary_value(sol: StationarySolution, x0: float) -> float:
    return x0 * x0 * (sol.g_hat_star if x0 >= 0 else sol.g_bar_star)
