"""Strain-structured stochastic epidemic simulator, Latin hypercube design and sweeps.

A deliberately small stand-in for an antigenic-evolution agent-based model:
one deme, one-dimensional antigenic space, hosts carrying a bounded immune
history, and viruses carrying an antigenic type plus a deleterious-mutation
load.  It does not reproduce any reference simulator numerically.
"""
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Optional

import numpy as np

from . import kernels
from .rng import derive_seed
from .series import SurveillanceSeries

log = logging.getLogger(__name__)

# name -> (lower, upper) for the ten sampled dimensions
LHS_BOUNDS = {
    "population_size": (1.0e4, 1.0e4),
    "deme_amplitude": (0.0, 2.0e-1),
    "lambda_antigenic": (8.57e-5, 2.57e-3),
    "mean_antigenic_size": (1.2e-3, 1.2e-1),
    "lambda_deleterious": (9.5e-3, 4.08),
    "mut_cost": (8.0e-4, 8.0e-2),
    "beta": (1.43e-1, 2.25),
    "nu": (7.14e-2, 2.5e-1),
    "epsilon_mut": (5.0e-1, 1.5),
    "initial_i_prop": (1.0e-4, 1.0e-3),
}
PARAM_NAMES = tuple(LHS_BOUNDS)


class RunStatus(str, Enum):
    COMPLETED = "completed"
    WALL_TIME_EXCEEDED = "wall_time_exceeded"
    EXTINCT = "extinct"


@dataclass(frozen=True)
class SimParams:
    """One point of the sampled parameter space plus the fixed constants."""

    population_size: int = 10_000
    deme_amplitude: float = 0.1
    lambda_antigenic: float = 1e-3
    mean_antigenic_size: float = 0.06
    lambda_deleterious: float = 0.1
    mut_cost: float = 0.01
    beta: float = 0.6
    nu: float = 0.2
    epsilon_mut: float = 1.0
    initial_i_prop: float = 5e-4
    # fixed
    birth_rate: float = 0.000091
    death_rate: float = 0.000091
    print_step: int = 7
    end_day: int = 3650
    antigenic_gamma_shape: float = 2.0
    threshold_antigenic_size: float = 0.012
    smith_conversion: float = 0.1
    homologous_immunity: float = 0.95
    deme_baseline: float = 1.0
    deme_offset: float = 0.0
    swap_demography: bool = True
    epsilon: float = 0.16
    external_migration: float = 200.0
    migration_reference_n: float = 1.0e7
    initial_pr_r: float = 0.5088
    history_capacity: int = 8

    def __post_init__(self):
        problems = []
        if self.population_size < 1:
            problems.append("population_size must be >= 1")
        if not self.beta > 0:
            problems.append("beta must be > 0")
        if not self.nu > 0:
            problems.append("nu must be > 0")
        if not 0 <= self.initial_i_prop <= 1:
            problems.append("initial_i_prop must lie in [0, 1]")
        if not 0 <= self.initial_pr_r <= 1:
            problems.append("initial_pr_r must lie in [0, 1]")
        if not 0 <= self.mut_cost < 1:
            problems.append("mut_cost must lie in [0, 1)")
        if not 0 <= self.homologous_immunity <= 1:
            problems.append("homologous_immunity must lie in [0, 1]")
        for name in ("lambda_antigenic", "mean_antigenic_size", "lambda_deleterious", "epsilon",
                     "epsilon_mut", "external_migration", "smith_conversion", "birth_rate", "death_rate"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.antigenic_gamma_shape < 1 or float(self.antigenic_gamma_shape) != int(self.antigenic_gamma_shape):
            problems.append("antigenic_gamma_shape must be a positive integer")
        if self.print_step < 1 or self.end_day < 1 or self.history_capacity < 1:
            problems.append("print_step, end_day and history_capacity must be >= 1")
        if not self.swap_demography:
            problems.append("only swap_demography=True (constant population) is supported")
        if problems:
            raise ValueError("invalid SimParams: " + "; ".join(problems))

    @classmethod
    def from_vector(cls, x, **fixed) -> "SimParams":
        """Build from a row of a design matrix ordered like ``PARAM_NAMES``."""
        values = dict(zip(PARAM_NAMES, (float(v) for v in x)))
        values["population_size"] = int(round(values["population_size"]))
        values.update(fixed)
        return cls(**values)

    def sampled(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "SimParams":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def _kernel_vector(self) -> np.ndarray:
        par = np.zeros(kernels.N_PAR)
        par[kernels.P_BETA] = self.beta
        par[kernels.P_AMPLITUDE] = self.deme_amplitude
        par[kernels.P_BASELINE] = self.deme_baseline
        par[kernels.P_OFFSET] = self.deme_offset
        par[kernels.P_NU] = self.nu
        par[kernels.P_DEATH] = self.death_rate
        par[kernels.P_LAMBDA_DEL] = self.lambda_deleterious
        par[kernels.P_LAMBDA_AG] = self.lambda_antigenic
        par[kernels.P_MEAN_AG] = self.mean_antigenic_size
        par[kernels.P_GAMMA_SHAPE] = self.antigenic_gamma_shape
        par[kernels.P_THRESHOLD] = self.threshold_antigenic_size
        par[kernels.P_SMITH] = self.smith_conversion
        par[kernels.P_HOMOLOGOUS] = self.homologous_immunity
        par[kernels.P_MUT_COST] = self.mut_cost
        par[kernels.P_BENEFICIAL] = self.epsilon * self.epsilon_mut
        par[kernels.P_EXTERNAL] = self.external_migration * self.population_size / self.migration_reference_n
        return par


@dataclass
class LhsDesign:
    n_samples: int
    bounds: dict
    seed: int
    points: np.ndarray

    @property
    def names(self):
        return tuple(self.bounds)

    def params(self, i, **fixed) -> SimParams:
        return SimParams.from_vector(self.points[i], **fixed)


def lhs_sample(bounds, n, seed) -> LhsDesign:
    """Latin hypercube sample with one point per equal-width stratum per dimension.

    ``bounds`` maps parameter name to ``(lower, upper)``.  Within each stratum
    the point is uniform; strata are matched across dimensions by independent
    random permutations.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    bounds = dict(bounds)
    for name, (lo, hi) in bounds.items():
        if not lo <= hi:
            raise ValueError(f"invalid bounds for {name!r}: lower {lo} > upper {hi}")
    rng = np.random.default_rng(seed)
    points = np.empty((n, len(bounds)))
    for j, (lo, hi) in enumerate(bounds.values()):
        strata = rng.permutation(n)
        u = (strata + rng.random(n)) / n
        # keep float rounding from pushing a point into the next stratum
        u = np.minimum(u, np.nextafter((strata + 1) / n, 0.0))
        points[:, j] = lo + u * (hi - lo)
    return LhsDesign(n_samples=n, bounds=bounds, seed=seed, points=points)


@dataclass
class SimOutput:
    tc: SurveillanceSeries
    vacs: dict
    status: RunStatus
    turnover_flag: bool
    params: SimParams
    seed: int
    wall_time: float = 0.0
    days_simulated: int = 0
    strain_positions: np.ndarray = field(default_factory=lambda: np.zeros(0))
    strain_parents: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    population: Optional[np.ndarray] = None
    param_index: Optional[int] = None
    replicate: Optional[int] = None

    @property
    def series_id(self) -> str:
        return self.tc.series_id

    def vac_matrix(self):
        """(variant ids, weeks x variants matrix)."""
        ids = sorted(self.vacs)
        if not ids:
            return ids, np.zeros((len(self.tc), 0))
        return ids, np.column_stack([self.vacs[i].values for i in ids])


_compiled = False


def ensure_compiled():
    """Trigger JIT compilation outside any timed region."""
    global _compiled
    if _compiled:
        return
    p = SimParams(population_size=50, end_day=14, initial_i_prop=0.1, lambda_antigenic=0.5)
    _run(p, 0, wall_budget=math.inf, track_population=True, series_id="warmup", chunk_days=7)
    _compiled = True


def run_sim(params: SimParams, seed: int, wall_budget: float = 600.0, *, track_population=False,
            series_id="run", chunk_days=365, w_min=8) -> SimOutput:
    """Simulate one epidemic and aggregate weekly TC / per-type VAC.

    Parameters
    ----------
    params : SimParams
    seed : int
        Seed of the run's PCG64 stream; ``(params, seed)`` fully determines
        the output.
    wall_budget : float
        Seconds of wall time before the run is cut with status
        ``WALL_TIME_EXCEEDED``.  JIT compilation is excluded.
    track_population : bool
        Record daily (uninfected, infected) host counts in ``population``.
    """
    if not wall_budget > 0:
        raise ValueError("wall_budget must be > 0")
    ensure_compiled()
    return _run(params, seed, wall_budget, track_population, series_id, chunk_days, w_min)


def _run(params, seed, wall_budget, track_population, series_id, chunk_days, w_min=8):
    t0 = time.perf_counter()
    n = int(params.population_size)
    rng = np.random.Generator(np.random.PCG64(seed))
    k_hist = int(params.history_capacity)

    inf_type = np.full(n, -1, dtype=np.int64)
    inf_load = np.zeros(n, dtype=np.int64)
    hist = np.zeros((n, k_hist))
    hist_n = (rng.random(n) < params.initial_pr_r).astype(np.int64)  # founder position is 0.0
    inf_list = np.zeros(n, dtype=np.int64)
    inf_pos = np.full(n, -1, dtype=np.int64)
    n_init = min(n, max(1, int(round(params.initial_i_prop * n))))
    seeds = rng.choice(n, size=n_init, replace=False)
    inf_type[seeds] = 0
    inf_list[:n_init] = seeds
    inf_pos[seeds] = np.arange(n_init)
    cnt = np.zeros(kernels.N_CNT, dtype=np.int64)
    cnt[kernels.C_N_INF] = n_init
    cnt[kernels.C_N_TYPES] = 1
    cnt[kernels.C_EXTINCT_DAY] = -1
    cnt[kernels.C_LAST_TYPE] = 0

    n_weeks = params.end_day // params.print_step
    cap = 64
    types_pos = np.zeros(cap)
    types_parent = np.full(cap, -1, dtype=np.int64)
    weekly = np.zeros((n_weeks, cap))
    pop_trace = np.zeros((params.end_day, 2), dtype=np.int64) if track_population else np.zeros((0, 2), dtype=np.int64)
    par = params._kernel_vector()

    status = RunStatus.COMPLETED
    day = 0
    while day < params.end_day:
        stop = min(params.end_day, day + chunk_days)
        code, types_pos, types_parent, weekly = kernels.sim_advance(
            rng, par, n, day, stop, params.print_step, inf_type, inf_load, hist, hist_n,
            inf_list, inf_pos, cnt, types_pos, types_parent, weekly, pop_trace)
        if code == kernels.STATUS_EXTINCT:
            status = RunStatus.EXTINCT
            day = int(cnt[kernels.C_EXTINCT_DAY])
            break
        day = stop
        if day < params.end_day and time.perf_counter() - t0 > wall_budget:
            status = RunStatus.WALL_TIME_EXCEEDED
            break

    n_types = int(cnt[kernels.C_N_TYPES])
    weekly = weekly[:, :n_types]
    totals = weekly.sum(axis=0)
    tc = SurveillanceSeries(weekly.sum(axis=1), series_id=series_id, kind="tc")
    vacs = {int(v): SurveillanceSeries(weekly[:, v].copy(), series_id=series_id, kind="vac", variant_id=int(v))
            for v in np.flatnonzero(totals > 0)}
    out = SimOutput(
        tc=tc, vacs=vacs, status=status, turnover_flag=False, params=params, seed=int(seed),
        wall_time=time.perf_counter() - t0, days_simulated=day,
        strain_positions=types_pos[:n_types].copy(), strain_parents=types_parent[:n_types].copy(),
        population=pop_trace[:day] if track_population else None,
    )
    if status is RunStatus.COMPLETED:
        out.turnover_flag = classify_turnover(out, w_min=w_min)
    return out


def dominance_runs(out: SimOutput):
    """(variant id, run length) for each maximal run of weekly dominance.

    Weeks without cases break runs.  Ties go to the lowest variant id.
    """
    ids, mat = out.vac_matrix()
    runs = []
    if not ids:
        return runs
    active = mat.sum(axis=1) > 0
    leader = np.asarray(ids)[np.argmax(mat, axis=1)]
    current, length = None, 0
    for w in range(mat.shape[0]):
        who = int(leader[w]) if active[w] else None
        if who is not None and who == current:
            length += 1
            continue
        if current is not None:
            runs.append((current, length))
        current, length = who, (1 if who is not None else 0)
    if current is not None:
        runs.append((current, length))
    return runs


def classify_turnover(out: SimOutput, w_min: int = 8) -> bool:
    """True when at least two antigenic types each lead for ``w_min`` consecutive weeks."""
    holders = {v for v, length in dominance_runs(out) if length >= w_min}
    return len(holders) >= 2


def _sweep_task(task):
    key, params, seed, wall_budget = task
    return key, run_sim(params, seed, wall_budget, series_id=_series_id(*key))


def _series_id(param_index, replicate):
    return f"p{param_index:05d}_r{replicate:03d}" if replicate >= 0 else f"p{param_index:05d}_lhs"


def _map_runs(tasks, workers):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(_sweep_task, tasks))
    else:
        results = dict(map(_sweep_task, tasks))
    # keyed, so completion order never leaks into the result
    return [results[t[0]] for t in tasks]


def worker_count() -> int:
    return max(1, int(os.environ.get("VARCAST_WORKERS", "1")))


def replicate_sweep(design: LhsDesign, reps_per_keeper: int, wall_budget: float, *, master_seed=0,
                    fixed=None, workers=None, w_min=8, screen=None):
    """Screen every design point once, then replicate the turnover keepers.

    Returns ``(screen_outputs, replicate_outputs)``.  Each output is tagged
    with ``param_index`` and ``replicate`` (``-1`` for screening runs).  Seeds
    derive from ``master_seed`` and the (index, replicate) key, so results do
    not depend on worker count or scheduling.
    """
    if reps_per_keeper < 1:
        raise ValueError("reps_per_keeper must be >= 1")
    fixed = dict(fixed or {})
    workers = worker_count() if workers is None else workers
    if screen is None:
        tasks = [((i, -1), design.params(i, **fixed), derive_seed(master_seed, "lhs", i), wall_budget)
                 for i in range(design.n_samples)]
        screen = _map_runs(tasks, workers)
        for (key, _, _, _), out in zip(tasks, screen):
            out.param_index, out.replicate = key
    keepers = [o.param_index for o in screen if o.status is RunStatus.COMPLETED and classify_turnover(o, w_min)]
    log.info("screened %d design points: %d completed, %d with turnover", len(screen),
             sum(o.status is RunStatus.COMPLETED for o in screen), len(keepers))
    tasks = [((i, r), design.params(i, **fixed), derive_seed(master_seed, "rep", i, r), wall_budget)
             for i in keepers for r in range(reps_per_keeper)]
    reps = _map_runs(tasks, workers)
    for (key, _, _, _), out in zip(tasks, reps):
        out.param_index, out.replicate = key
    return screen, reps
