"""Dynamic mean-variance portfolio selection with cone constraints.

Wealth follows dx = (r x + b'u) dt + u' sigma dW with b = mu - r 1 and the
portfolio restricted to a cone H u >= 0. Minimising Var[x(T)] + E int u'Ru
subject to E[x(T)] = d is embedded into the constrained LQ problem for the
shifted state z = x - lambda rho(t), rho(t) = exp(-int_t^T r). The two
Riccati trajectories do not depend on d, so one solve serves every target.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import qp
from ._io import write_csv
from .errors import DegenerateMultiplier, InvalidMarket
from .finite_horizon import (
    TIME_TOL,
    ProblemData,
    RiccatiSolution,
    default_grid,
    export_gain_schedule,
    solve_riccati_pair,
)
from .simulate import SimConfig, mean_std_error, simulate_paths, terminal_mean

NONDEGENERACY_TOL = 1e-12  # relative to the largest eigenvalue of sigma sigma'
DEGENERACY_TOL = 1e-12
RATIO_HAT_TOL = 1e-9
RATIO_BAR_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class MvProblem:
    """Market data on ``knots`` (linear interpolation in between).

    Shapes with K knots: r (K,), mu (K,n), sigma (K,n,n), H (K,k,n), R (K,n,n).
    The portfolio cone is {u : H u >= 0}; ``target`` is the required E[x(T)].
    """

    horizon: float
    knots: np.ndarray
    r: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    H: np.ndarray
    R: np.ndarray
    x0: float
    target: float
    grid: Optional[np.ndarray] = None

    def __post_init__(self):
        f = lambda a: np.asarray(a, dtype=float)  # noqa: E731
        knots = f(self.knots).ravel()
        K = knots.size
        mu = f(self.mu).reshape(K, -1)
        n = mu.shape[1]
        vals = dict(
            knots=knots, r=f(self.r).reshape(K), mu=mu, sigma=f(self.sigma).reshape(K, n, n),
            H=f(self.H).reshape(K, -1, n), R=f(self.R).reshape(K, n, n),
            grid=default_grid(self.horizon) if self.grid is None else f(self.grid).ravel(),
            horizon=float(self.horizon), x0=float(self.x0), target=float(self.target),
        )
        for name, val in vals.items():
            object.__setattr__(self, name, val)

    @classmethod
    def constant(cls, horizon, r, mu, sigma, R, x0, target, H=None, grid=None) -> "MvProblem":
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        H = np.zeros((0, mu.size)) if H is None else np.asarray(H, dtype=float).reshape(-1, mu.size)
        return cls(horizon, [0.0, horizon], [r, r], [mu, mu], [sigma, sigma], [H, H], [R, R],
                   x0, target, grid)

    @staticmethod
    def no_short_cone(n: int, assets: Sequence[int]) -> np.ndarray:
        """Rows e_i for each (0-based) asset i that may not be shorted."""
        return np.eye(n)[list(assets)].reshape(len(assets), n)

    @property
    def n(self) -> int:
        return self.mu.shape[1]

    @property
    def excess(self) -> np.ndarray:
        return self.mu - self.r[:, None]

    def discount(self, t) -> np.ndarray:
        """rho(t) = exp(-int_t^T r(s) ds), exact for piecewise-linear r."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < -TIME_TOL) or np.any(t > self.horizon * (1 + TIME_TOL) + TIME_TOL):
            raise ValueError("discount evaluated outside [0, T]")
        pts = np.union1d(self.knots, np.clip(t, 0.0, self.horizon))
        rv = np.interp(pts, self.knots, self.r)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (rv[1:] + rv[:-1]) * np.diff(pts))])
        total = cum[-1]
        return np.exp(-(total - np.interp(np.clip(t, 0.0, self.horizon), pts, cum)))

    @property
    def rho0(self) -> float:
        return float(self.discount(0.0)[0])

    @property
    def riskfree_rollup(self) -> float:
        """x0 / rho(0): terminal wealth of the all-cash strategy."""
        return self.x0 / self.rho0

    @property
    def discounted_initial(self) -> float:
        return self.x0 * self.rho0

    def validate(self) -> None:
        for i in range(self.knots.size):
            S = self.sigma[i] @ self.sigma[i].T
            eig = np.linalg.eigvalsh(S)
            lam = eig[0]
            if lam <= NONDEGENERACY_TOL * max(eig[-1], 0.0) or eig[-1] <= 0:
                raise InvalidMarket(f"sigma sigma' is not uniformly positive definite at knot {i} "
                                    f"(min eigenvalue {lam:.3e})", "nondegeneracy")
            if not np.any(self.excess[i] > 0):
                raise InvalidMarket(f"no asset has a positive excess return at knot {i}", "Assumption 5")
            if np.linalg.eigvalsh(self.R[i])[0] < -1e-12:
                raise InvalidMarket(f"penalty R is not PSD at knot {i}", "Assumption 2")
        if self.x0 <= 0:
            raise InvalidMarket("initial wealth must be positive", "initial wealth")
        if not self.target > self.riskfree_rollup:
            raise InvalidMarket(f"target {self.target} does not exceed the risk-free roll-up "
                                f"{self.riskfree_rollup:.6g}", "target")

    def with_target(self, target: float) -> "MvProblem":
        return dataclasses.replace(self, target=target)

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "knots": self.knots.tolist(), "r": self.r.tolist(),
                "mu": self.mu.tolist(), "sigma": self.sigma.tolist(), "H": self.H.tolist(),
                "R": self.R.tolist(), "x0": self.x0, "target": self.target, "grid": self.grid.tolist()}


def embed(problem: MvProblem) -> ProblemData:
    problem.validate()
    K, n = problem.mu.shape
    k = problem.H.shape[1]
    return ProblemData(
        problem.horizon, problem.knots, problem.r, problem.excess, np.zeros((K, n)), problem.sigma,
        problem.R, np.zeros((K, n)), np.zeros(K), -problem.H, np.zeros((K, k)), 1.0, problem.grid,
    )


class MvPolicy:
    """u = Khat(t) z if z >= 0, else -Kbar(t) z, with z = x - lambda rho(t)."""

    def __init__(self, solution: "MvSolution", lam: Optional[float] = None):
        self.solution = solution
        self.lam = solution.lambda_star if lam is None else lam

    @property
    def horizon(self) -> float:
        return self.solution.riccati.horizon

    def gains(self, t: float):
        return self.solution.riccati.gains(t)

    def offset(self, t: float) -> float:
        return self.lam * float(self.solution.problem.discount(t)[0])

    def __call__(self, t: float, x: float) -> np.ndarray:
        k_hat, k_bar = self.gains(t)
        z = x - self.offset(t)
        return k_hat * z if z >= 0 else -k_bar * z


@dataclass(frozen=True, eq=False)
class MvSolution:
    problem: MvProblem
    lambda_star: float
    rho: np.ndarray
    riccati: RiccatiSolution

    @property
    def grid(self) -> np.ndarray:
        return self.riccati.grid

    @property
    def g_hat_mv(self) -> np.ndarray:
        return self.riccati.g_hat

    @property
    def g_bar_mv(self) -> np.ndarray:
        return self.riccati.g_bar

    @property
    def k_hat_mv(self) -> np.ndarray:
        return self.riccati.k_hat

    @property
    def k_bar_mv(self) -> np.ndarray:
        return self.riccati.k_bar

    @property
    def rho0(self) -> float:
        return float(self.rho[0])

    def multiplier(self, target: float) -> float:
        return _multiplier(self.problem.x0, float(self.g_bar_mv[0]), self.rho0, target)

    def policy(self, lam: Optional[float] = None) -> MvPolicy:
        return MvPolicy(self, lam)

    def ratio_margins(self) -> tuple:
        """(max Ghat rho^2 - 1, max Gbar rho^2 - 1) over the grid; both should be <= 0."""
        r2 = self.rho ** 2
        return float(np.max(self.g_hat_mv * r2) - 1.0), float(np.max(self.g_bar_mv * r2) - 1.0)

    def ratio_bound_holds(self) -> bool:
        hat, bar = self.ratio_margins()
        return hat <= RATIO_HAT_TOL and bar < -RATIO_BAR_TOL

    def dual_value(self, lam: float, target: Optional[float] = None) -> float:
        """Optimal embedded cost minus (lambda - d)^2; concave on each sign piece of z(0)."""
        d = self.problem.target if target is None else target
        z0 = self.problem.x0 - lam * self.rho0
        g = self.g_hat_mv[0] if z0 >= 0 else self.g_bar_mv[0]
        return float(g * z0 * z0 - (lam - d) ** 2)

    def analytic_variance_term(self, target: float) -> float:
        a = float(self.g_bar_mv[0]) * self.rho0 ** 2
        return a / (1.0 - a) * (target - self.problem.riskfree_rollup) ** 2

    def to_dict(self) -> dict:
        return {"lambda_star": self.lambda_star, "rho0": self.rho0,
                "riskfree_rollup": self.problem.riskfree_rollup,
                "discounted_initial": self.problem.discounted_initial,
                "g_hat_mv_0": float(self.g_hat_mv[0]), "g_bar_mv_0": float(self.g_bar_mv[0]),
                "k_hat_mv_0": self.k_hat_mv[0].tolist(), "k_bar_mv_0": self.k_bar_mv[0].tolist(),
                "ratio_margins": list(self.ratio_margins()), "ratio_bound_holds": self.ratio_bound_holds(),
                "riccati": self.riccati.to_dict()}

    def gains_csv(self, path=None) -> str:
        return export_gain_schedule(self.riccati, path)


def _multiplier(x0: float, g_bar0: float, rho0: float, target: float) -> float:
    denom = 1.0 - g_bar0 * rho0 ** 2
    if abs(denom) < DEGENERACY_TOL:
        raise DegenerateMultiplier(f"1 - Gbar(0) rho(0)^2 = {denom:.3e}; the strict bound Gbar rho^2 < 1 fails")
    return (target - x0 * g_bar0 * rho0) / denom


def solve_mv(problem: MvProblem, ridge: bool = False, riccati: Optional[RiccatiSolution] = None) -> MvSolution:
    data = embed(problem)
    if riccati is None:
        riccati = solve_riccati_pair(data, ridge)
    rho = problem.discount(riccati.grid)
    lam = _multiplier(problem.x0, float(riccati.g_bar[0]), float(rho[0]), problem.target)
    return MvSolution(problem, lam, rho, riccati)


def default_frontier_sim(problem: MvProblem) -> SimConfig:
    T = problem.horizon
    return SimConfig(num_paths=100_000, dt=T / 1200, horizon=T, seed=42, antithetic=True, x0=problem.x0)


@dataclass(frozen=True)
class FrontierPoint:
    target: float
    variance: float
    mc_std_error: float
    analytic: float
    penalty: float
    negative_variance: bool

    @property
    def std_dev(self) -> float:
        return math.sqrt(max(self.variance, 0.0))


def penalty_estimate(solution: MvSolution, target: float, sim: SimConfig) -> tuple:
    """Monte Carlo E int u'Ru dt under the optimal policy for ``target``."""
    data = embed(solution.problem.with_target(target))
    cfg = dataclasses.replace(sim, x0=solution.problem.x0, horizon=solution.problem.horizon)
    ens = simulate_paths(data, solution.policy(solution.multiplier(target)), cfg)
    return mean_std_error(ens.running_cost, cfg)


def efficient_frontier(problem: MvProblem, targets: Sequence[float], sim: Optional[SimConfig] = None,
                       solution: Optional[MvSolution] = None) -> list:
    solution = solution or solve_mv(problem)
    sim = sim or default_frontier_sim(problem)
    zero_penalty = not np.any(problem.R)
    points = []
    for d in targets:
        if d < problem.riskfree_rollup - 1e-12 * max(1.0, abs(d)):
            raise ValueError(f"target {d} lies below the risk-free roll-up {problem.riskfree_rollup}")
        analytic = solution.analytic_variance_term(d)
        pen, se = (0.0, 0.0) if zero_penalty else penalty_estimate(solution, d, sim)
        var = analytic - pen
        points.append(FrontierPoint(float(d), var, se, analytic, pen, pen - analytic > 3.0 * se))
    return points


def frontier_csv(points: Sequence[FrontierPoint], path=None, benchmark: Optional[Sequence] = None) -> str:
    header = ["target", "std_dev", "mc_std_error", "variance", "analytic", "negative_variance"]
    rows = [[p.target, p.std_dev, p.mc_std_error, p.variance, p.analytic, int(p.negative_variance)]
            for p in points]
    if benchmark is not None:
        header.append("benchmark_std_dev")
        for row, b in zip(rows, benchmark):
            row.append(b.std_dev)
    return write_csv(header, rows, path)


def verify_terminal_mean(solution: MvSolution, sim: SimConfig) -> tuple:
    cfg = dataclasses.replace(sim, x0=solution.problem.x0, horizon=solution.problem.horizon)
    ens = simulate_paths(embed(solution.problem), solution.policy(), cfg)
    return terminal_mean(ens)


# single-period buy-and-hold comparator

@dataclass(frozen=True, eq=False)
class BuyAndHold:
    target: float
    holdings: np.ndarray  # amounts invested in each risky asset at t = 0
    mean: float
    variance: float

    @property
    def std_dev(self) -> float:
        return math.sqrt(max(self.variance, 0.0))


def _static_moments(problem: MvProblem):
    if problem.knots.size != 2 or not (np.allclose(problem.mu[0], problem.mu[-1])
                                        and np.allclose(problem.sigma[0], problem.sigma[-1])
                                        and np.isclose(problem.r[0], problem.r[-1])):
        raise ValueError("buy-and-hold comparator needs constant market coefficients")
    T = problem.horizon
    mu, sig, r = problem.mu[0], problem.sigma[0], float(problem.r[0])
    Sigma = sig @ sig.T
    growth = np.exp(mu * T)
    V = np.outer(growth, growth) * np.expm1(Sigma * T)
    excess = growth - math.exp(r * T)
    return V, excess, math.exp(r * T)


def buy_and_hold(problem: MvProblem, targets: Optional[Sequence[float]] = None) -> list:
    """Minimum-variance static holdings reaching each target in expectation."""
    V, e, cash = _static_moments(problem)
    region = qp.Polyhedron(-problem.H[0], np.zeros(problem.H.shape[1]))
    # the cone makes the problem homogeneous: the optimum for excess gain
    # delta is delta / (e'K1) times K1 = argmin u'Vu - 2 e'u over the cone
    K1 = qp.solve_qp(qp.QpProblem(V, -e, region)).k_star
    gain = float(e @ K1)
    if gain <= 0:
        raise InvalidMarket("no admissible static portfolio earns a positive excess return", "Assumption 5")
    out = []
    for d in (targets if targets is not None else [problem.target]):
        theta = (d - problem.x0 * cash) / gain
        u = theta * K1
        out.append(BuyAndHold(float(d), u, problem.x0 * cash + float(e @ u), float(u @ V @ u)))
    return out


def wealth_paths(solution: MvSolution, num_paths: int = 1, dt: Optional[float] = None, seed: int = 0,
                 benchmark: Optional[BuyAndHold] = None):
    """Dynamic-policy and buy-and-hold wealth driven by the same Brownian paths.

    Returns (times, dynamic (P, N+1), benchmark (P, N+1) or None). The
    dynamic wealth uses Euler-Maruyama; asset prices are sampled exactly.
    """
    prob = solution.problem
    T = prob.horizon
    dt = dt or T / 1200
    steps = max(1, int(round(T / dt)))
    h = T / steps
    times = np.linspace(0.0, T, steps + 1)
    data = embed(prob)
    pol = solution.policy()
    rng = np.random.default_rng(seed)
    dW = rng.standard_normal((num_paths, steps, prob.n)) * math.sqrt(h)
    x = np.empty((num_paths, steps + 1))
    x[:, 0] = prob.x0
    for k in range(steps):
        c = data.at(times[k])
        for p in range(num_paths):
            u = pol(times[k], x[p, k])
            x[p, k + 1] = x[p, k] + (c.A * x[p, k] + c.B @ u) * h + (u @ c.D) @ dW[p, k]
    if benchmark is None:
        return times, x, None
    mu, sig, r = prob.mu[0], prob.sigma[0], float(prob.r[0])
    W = np.concatenate([np.zeros((num_paths, 1, prob.n)), np.cumsum(dW, axis=1)], axis=1)
    drift = (mu - 0.5 * np.sum(sig * sig, axis=1))[None, None, :] * times[None, :, None]
    prices = np.exp(drift + W @ sig.T)
    cash = (prob.x0 - benchmark.holdings.sum()) * np.exp(r * times)
    bh = cash[None, :] + prices @ benchmark.holdings
    return times, x, bh


def wealth_csv(times, dynamic, bench=None, path=None) -> str:
    header = ["t"] + [f"dynamic_{i}" for i in range(dynamic.shape[0])]
    if bench is not None:
        header += [f"benchmark_{i}" for i in range(bench.shape[0])]
    rows = []
    for j, t in enumerate(times):
        row = [float(t)] + [float(v) for v in dynamic[:, j]]
        if bench is not None:
            row += [float(v) for v in bench[:, j]]
        rows.append(row)
    return write_csv(header, rows, path)

