"""Bounded differential evolution (rand/1/bin) with exact evaluation accounting.

Minimizes a black-box fitness over a box-bounded continuous vector. Built for
query-limited settings: every fitness invocation is counted, a stop predicate
runs after each evaluation, and the budget is enforced per evaluation so the
sequential run never exceeds it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(f"bounds must be matching 1-D vectors, got {lo.shape} and {hi.shape}")
        if np.any(lo > hi):
            raise ValueError("every lower bound must be <= its upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


@dataclass(frozen=True)
class DEConfig:
    np: int = 100            # population size
    cr: float = 0.80         # crossover probability
    f: float = 0.50          # differential weight
    max_evals: int = 3000    # fitness evaluation budget
    seed: int = 0
    exclude_base: bool = True  # classic rand/1: donors distinct from the base index too

    def __post_init__(self):
        if self.np < 4:
            raise ValueError("population size must be >= 4 (mutation needs 3 distinct others)")
        if not 0.0 <= self.cr <= 1.0:
            raise ValueError(f"cr must be in [0, 1], got {self.cr}")
        if self.f <= 0.0:
            raise ValueError(f"differential weight must be positive, got {self.f}")


@dataclass(frozen=True)
class EvalInfo:
    """Snapshot passed to the stop predicate after each fitness evaluation."""

    evaluations: int
    last_fitness: float
    best_fitness: float


@dataclass
class RunResult:
    best: np.ndarray
    best_fitness: float
    evaluations: int
    generations: int
    success: bool            # the stop predicate fired
    history: list = field(default_factory=list)  # best-so-far after init and each generation


def _key(value: float) -> float:
    """Comparison key: NaN loses every comparison."""
    return math.inf if math.isnan(value) else value


def initialize(bounds: Bounds, pop_size: int, rng: np.random.Generator) -> np.ndarray:
    """Population of pop_size vectors, each component uniform within its bound interval."""
    if pop_size < 4:
        raise ValueError("population size must be >= 4")
    span = bounds.upper - bounds.lower
    return bounds.lower + rng.random((pop_size, bounds.dim)) * span


def mutate(pop: np.ndarray, i: int, f: float, rng: np.random.Generator,
           bounds: Bounds | None = None, exclude_base: bool = True) -> np.ndarray:
    """rand/1 mutant v = x1 + f * (x2 - x3) from three distinct donors, clamped to bounds.

    With exclude_base the donors are also distinct from index i; set False for
    the looser rule that only requires mutual distinctness.
    """
    n = pop.shape[0]
    if exclude_base:
        if n < 4:
            raise ValueError("need at least 4 individuals to mutate with base exclusion")
        candidates = np.delete(np.arange(n), i)
    else:
        if n < 3:
            raise ValueError("need at least 3 individuals to mutate")
        candidates = np.arange(n)
    x1, x2, x3 = rng.choice(candidates, size=3, replace=False)
    v = pop[x1] + f * (pop[x2] - pop[x3])
    if bounds is not None:
        v = np.clip(v, bounds.lower, bounds.upper)
    return v


def crossover(r: np.ndarray, v: np.ndarray, cr: float, rng: np.random.Generator) -> np.ndarray:
    """Binomial crossover: take the mutant component where rand(0,1) <= cr.

    The draw is taken from (0, 1] (open at 0), so cr = 0 never takes a mutant
    component and cr = 1 always does. No component is force-taken from the
    mutant; the trial can equal the parent when every draw fails.
    """
    if r.shape != v.shape:
        raise ValueError(f"length mismatch: {r.shape} vs {v.shape}")
    draws = 1.0 - rng.random(r.shape[0])
    return np.where(draws <= cr, v, r)


def select(r: np.ndarray, u: np.ndarray, f_r: float, f_u: float):
    """Greedy selection: the trial u survives iff its fitness is <= the parent's.

    Both fitness values must already be computed. NaN is treated as +inf (and
    logged), so it loses every comparison against a finite value.
    """
    if math.isnan(f_u) or math.isnan(f_r):
        log.warning("NaN fitness encountered in selection; treating as +inf")
    if _key(f_u) <= _key(f_r):
        return u, f_u, True
    return r, f_r, False


def run(fitness, bounds: Bounds, cfg: DEConfig, stop=None) -> RunResult:
    """Evolve until the stop predicate fires or the evaluation budget runs out.

    The initial population costs one evaluation per member. Afterwards each
    generation evaluates only trial vectors (parent fitness is cached). The
    budget is checked before every evaluation, so a sequential run performs at
    most max_evals fitness calls; a generation interrupted mid-way keeps the
    selections already paid for. Best-so-far is tracked over every evaluated
    vector, including trials that lose selection.
    """
    if cfg.max_evals < cfg.np:
        raise ValueError(f"budget {cfg.max_evals} cannot even initialize np={cfg.np}")
    if bounds.dim < 1:
        raise ValueError("need at least one dimension")
    rng = np.random.default_rng(cfg.seed)

    evals = 0
    best_vec = None
    best_fit = math.nan
    stopped = False

    def evaluate(vec: np.ndarray) -> float:
        nonlocal evals, best_vec, best_fit, stopped
        value = float(fitness(vec))
        evals += 1
        if best_vec is None or _key(value) < _key(best_fit):
            best_vec = vec.copy()
            best_fit = value
        if stop is not None and stop(EvalInfo(evals, value, best_fit)):
            stopped = True
        return value

    pop = initialize(bounds, cfg.np, rng)
    fit = np.full(cfg.np, math.nan)
    for i in range(cfg.np):
        fit[i] = evaluate(pop[i])
        if stopped:
            break

    history = [best_fit]
    generations = 0
    while not stopped and evals < cfg.max_evals:
        new_pop = pop.copy()
        new_fit = fit.copy()
        completed = True
        for i in range(cfg.np):
            if stopped or evals >= cfg.max_evals:
                completed = False
                break
            v = mutate(pop, i, cfg.f, rng, bounds=bounds, exclude_base=cfg.exclude_base)
            u = crossover(pop[i], v, cfg.cr, rng)
            f_u = evaluate(u)
            new_pop[i], new_fit[i], _ = select(pop[i], u, fit[i], f_u)
        pop, fit = new_pop, new_fit
        if completed:
            generations += 1
        history.append(best_fit)

    return RunResult(
        best=best_vec,
        best_fitness=best_fit,
        evaluations=evals,
        generations=generations,
        success=stopped,
        history=history,
    )
