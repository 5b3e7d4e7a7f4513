"""Monte Carlo simulation of the closed-loop scalar SDE.

    dx = (A x + B'u) dt + (x C' + u'D) dW

under a piecewise-affine policy u = Khat(t) z for z >= 0 and -Kbar(t) z for
z < 0, where z = x - offset(t). Paths are split into fixed-size blocks; each
block owns a random stream derived from (seed, block index), so results are
bit-identical whatever the number of worker threads.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from ._io import write_csv
from .finite_horizon import ProblemData
from .infinite_horizon import StationaryProblem, stability_scalar
from .qp import FEAS_TOL

log = logging.getLogger(__name__)

OVERFLOW = 1e12
BLOCK_SIZE = 4096
DRAW_CHUNK = 64
MAX_TRACES = 100
OVERFLOW_WARN_FRACTION = 1e-3


@dataclass(frozen=True)
class SimConfig:
    num_paths: int
    dt: float
    horizon: float
    seed: int = 0
    antithetic: bool = False
    x0: float = 1.0
    record_paths: int = 0

    def __post_init__(self):
        if self.num_paths < 1:
            raise ValueError("num_paths must be at least 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < self.dt:
            raise ValueError("horizon must be at least one time step")
        if self.antithetic and self.num_paths % 2:
            raise ValueError("antithetic sampling needs an even number of paths")
        if not 0 <= self.record_paths <= MAX_TRACES:
            raise ValueError(f"record_paths must lie in [0, {MAX_TRACES}]")

    @property
    def steps(self) -> int:
        # the step is shrunk slightly when dt does not divide the horizon
        return max(1, int(round(self.horizon / self.dt)))

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


@dataclass(eq=False)
class PathEnsemble:
    config: SimConfig
    times: np.ndarray
    mean_x: np.ndarray
    mean_x2: np.ndarray
    se_x: np.ndarray
    se_x2: np.ndarray
    cost_samples: np.ndarray
    running_cost: np.ndarray
    terminal_cost: np.ndarray
    terminal_states: np.ndarray
    overflow_count: int
    max_violation: float
    states: Optional[np.ndarray] = field(default=None, repr=False)
    controls: Optional[np.ndarray] = field(default=None, repr=False)

    def moments_csv(self, path=None) -> str:
        rows = zip(self.times, self.mean_x, self.mean_x2, self.se_x, self.se_x2)
        return write_csv(["t", "mean_x", "mean_x2", "se_x", "se_x2"],
                         ([float(v) for v in r] for r in rows), path)

    def traces_csv(self, path=None) -> str:
        if self.states is None:
            raise ValueError("no traces recorded; set record_paths in SimConfig")
        header = ["t"] + [f"x_{i}" for i in range(self.states.shape[0])]
        rows = ([float(t)] + [float(v) for v in self.states[:, j]] for j, t in enumerate(self.times))
        return write_csv(header, rows, path)


class _Schedule:
    """Coefficients, gains and offsets tabulated on the simulation grid."""

    def __init__(self, data, policy, times):
        steps = len(times) - 1
        if isinstance(data, StationaryProblem):
            coeffs = [data.coefficients] * steps
            self.q_T = 0.0
        else:
            if times[-1] > data.horizon * (1 + 1e-12):
                raise ValueError("simulation horizon exceeds the problem horizon")
            const = getattr(data, "_const", None)
            coeffs = [const] * steps if const is not None else [data.at(t) for t in times[:-1]]
            self.q_T = float(data.q_T)
        self.coeffs = coeffs
        gains = [policy.gains(t) for t in times[:-1]]
        self.k_hat = np.array([g[0] for g in gains])
        self.k_bar = np.array([g[1] for g in gains])
        self.offset = np.array([policy.offset(t) for t in times])
        self.constant = (all(c is coeffs[0] for c in coeffs)
                         and np.array_equal(self.k_hat, np.broadcast_to(self.k_hat[0], self.k_hat.shape))
                         and np.array_equal(self.k_bar, np.broadcast_to(self.k_bar[0], self.k_bar.shape)))


def _regime_table(c, k_hat, k_bar):
    """Per-regime scalars so that each path needs only scalar arithmetic.

    In either regime u = |z| K with K = Khat (z >= 0) or Kbar (z < 0), hence
    u'Ru, S'u, B'u and u'D xi are |z| or z^2 times fixed numbers.
    """
    Ks = np.stack([k_hat, k_bar])
    quad = np.einsum("ri,ij,rj->r", Ks, c.R, Ks)
    cross = Ks @ c.S
    drift = Ks @ c.B
    proj = np.column_stack([c.C, (Ks @ c.D).T])  # m x 3: C, D'Khat, D'Kbar
    if c.region.k:
        viol = (Ks @ c.region.H.T - c.region.d).max(axis=1)
    else:
        viol = np.full(2, -np.inf)
    return quad, cross, drift, proj, viol


def _simulate_block(sched: _Schedule, cfg: SimConfig, block: int, size: int, record: int):
    steps = cfg.steps
    dt = cfg.horizon / steps
    sq = math.sqrt(dt)
    m = sched.coeffs[0].C.size
    n = sched.coeffs[0].B.size
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(block,))))
    half = size // 2 if cfg.antithetic else size

    x = np.full(size, float(cfg.x0))
    alive = np.ones(size, dtype=bool)
    all_alive = True
    run_cost = np.zeros(size)
    # per step: paths, sum x, sum x^2, then over sampling units (single paths,
    # or antithetic pair means): units, sum x, sum x^2, sum x^2, sum (x^2)^2
    sums = np.zeros((steps + 1, 8))
    max_viol = 0.0
    states = np.empty((record, steps + 1)) if record else None
    controls = np.empty((record, steps, n)) if record else None

    def accumulate(k):
        xa = x if all_alive else x[alive]
        x2 = x * x
        ux, ux2 = _units(x, cfg.antithetic), _units(x2, cfg.antithetic)
        if not all_alive:
            ok = _units(alive, cfg.antithetic) == 1.0
            ux, ux2 = ux[ok], ux2[ok]
        sums[k] = (xa.size, xa.sum(), (xa * xa).sum(), ux.size, ux.sum(), (ux * ux).sum(),
                   ux2.sum(), (ux2 * ux2).sum())

    accumulate(0)
    if record:
        states[:, 0] = x[:record]
    noise = None
    table = None
    for k in range(steps):
        if k % DRAW_CHUNK == 0:
            noise = rng.standard_normal((min(DRAW_CHUNK, steps - k), half, m))
            if cfg.antithetic:
                noise = np.concatenate([noise, -noise], axis=1)
        c = sched.coeffs[k]
        if table is None or not sched.constant:
            quad, cross, drift_k, proj, viol = table = _regime_table(c, sched.k_hat[k], sched.k_bar[k])
        z = x - sched.offset[k]
        pos = z >= 0
        a = np.abs(z)
        xi = noise[k % DRAW_CHUNK] @ proj
        if c.region.k:
            worst = np.where(pos, viol[0], viol[1]) * np.minimum(a, 1.0)
            max_viol = max(max_viol, float(worst[alive].max(initial=0.0)))
        run_cost += (a * a * np.where(pos, quad[0], quad[1])
                     + 2.0 * x * a * np.where(pos, cross[0], cross[1]) + c.q * x * x) * dt
        if record:
            controls[:, k] = a[:record, None] * np.where(pos[:record, None], sched.k_hat[k], sched.k_bar[k])
        x = (x + (c.A * x + a * np.where(pos, drift_k[0], drift_k[1])) * dt
             + (x * xi[:, 0] + a * np.where(pos, xi[:, 1], xi[:, 2])) * sq)
        if record:
            states[:, k + 1] = x[:record]
        blown = ~(np.abs(x) <= OVERFLOW)
        if blown.any():
            alive &= ~blown
            all_alive = False
            x[~alive] = 0.0
        accumulate(k + 1)
    term_cost = sched.q_T * x * x
    run_cost[~alive] = np.nan
    term_cost[~alive] = np.nan
    x_T = np.where(alive, x, np.nan)
    return sums, run_cost, term_cost, x_T, int((~alive).sum()), max_viol, states, controls


def _units(values: np.ndarray, antithetic: bool) -> np.ndarray:
    """Independent sampling units of one block: paths, or antithetic pair means."""
    if not antithetic:
        return values
    h = values.size // 2
    return 0.5 * (values[:h] + values[h:])


def unit_samples(values: np.ndarray, config: SimConfig) -> np.ndarray:
    """Split per-path values into independent units, block by block."""
    if not config.antithetic:
        return values
    return np.concatenate([_units(values[s:s + BLOCK_SIZE].astype(float), True)
                           for s in range(0, values.size, BLOCK_SIZE)])


def mean_std_error(values: np.ndarray, config: SimConfig) -> tuple:
    units = unit_samples(values, config)
    units = units[np.isfinite(units)]
    if units.size == 0:
        raise ValueError("no finite samples")
    if units.size == 1:
        return float(units[0]), 0.0
    return float(units.mean()), float(units.std(ddof=1) / math.sqrt(units.size))


def _thread_count() -> int:
    env = os.environ.get("CLQ_THREADS")
    try:
        return max(1, int(env)) if env else (os.cpu_count() or 1)
    except ValueError:
        return 1


def simulate_paths(data: Union[ProblemData, StationaryProblem], policy, config: SimConfig) -> PathEnsemble:
    times = config.times
    sched = _Schedule(data, policy, times)
    sizes = [min(BLOCK_SIZE, config.num_paths - s) for s in range(0, config.num_paths, BLOCK_SIZE)]
    records = [max(0, min(size, config.record_paths - b * BLOCK_SIZE)) for b, size in enumerate(sizes)]
    workers = min(_thread_count(), len(sizes))
    jobs = list(zip(range(len(sizes)), sizes, records))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda j: _simulate_block(sched, config, *j), jobs))
    else:
        results = [_simulate_block(sched, config, *j) for j in jobs]

    sums = sum(r[0] for r in results)
    run = np.concatenate([r[1] for r in results])
    term = np.concatenate([r[2] for r in results])
    x_T = np.concatenate([r[3] for r in results])
    overflow = sum(r[4] for r in results)
    max_viol = max(r[5] for r in results)
    states = controls = None
    if config.record_paths:
        states = np.concatenate([r[6] for r in results if r[6] is not None])
        controls = np.concatenate([r[7] for r in results if r[7] is not None])
    if overflow > OVERFLOW_WARN_FRACTION * config.num_paths:
        log.warning("%d of %d paths overflowed |x| > %g and were excluded", overflow,
                    config.num_paths, OVERFLOW)

    cnt = np.maximum(sums[:, 0], 1.0)
    mean_x = sums[:, 1] / cnt
    mean_x2 = sums[:, 2] / cnt
    units = np.maximum(sums[:, 3], 1.0)
    denom = np.maximum(units - 1.0, 1.0)
    var_x = np.maximum(sums[:, 5] - sums[:, 4] ** 2 / units, 0.0) / denom
    var_x2 = np.maximum(sums[:, 7] - sums[:, 6] ** 2 / units, 0.0) / denom
    ens = PathEnsemble(config, times, mean_x, mean_x2, np.sqrt(var_x / units), np.sqrt(var_x2 / units),
                       run + term, run, term, x_T, overflow, max_viol, states, controls)
    if max_viol > 10 * FEAS_TOL:
        log.warning("control constraint violated by %.3e along simulated paths", max_viol)
    return ens


def moment_ode(problem: StationaryProblem, k_gain, sign: str, t: float, x0: float) -> float:
    """Exact E[x(t)^2] while the state stays in one sign regime."""
    return x0 * x0 * math.exp(stability_scalar(problem, k_gain, sign) * t)


def estimate_value(ensemble: PathEnsemble) -> tuple:
    """Sample mean and standard error of the path costs."""
    return mean_std_error(ensemble.cost_samples, ensemble.config)


def terminal_mean(ensemble: PathEnsemble) -> tuple:
    return mean_std_error(ensemble.terminal_states, ensemble.config)
