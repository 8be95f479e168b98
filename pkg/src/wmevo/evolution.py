"""Simple genetic algorithm over world-model genomes.

One generation: every individual gets a single rollout on its own fresh track,
the top ``elite_candidates`` are re-evaluated ``elite_trials`` times, and the
best average becomes the elite (fitness ``inf``).  The top half survives
unchanged; the other half are mutated winners of 2-way tournaments among the
survivors.  There is no crossover.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .model import COMPONENT_NAMES, GENOME_SIZE, PARTITION, Genome, init_genome
from .nn import DTYPE
from .rng import derive_rng, derive_seed

log = logging.getLogger(__name__)

MUTATION_MODES = ("all", "mod", "controller_only", "discrete_mod")
DOMAIN_MIN_FITNESS = -100.0


class OrchestrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FineTune:
    generations: int = 200
    sigma: float = 0.003
    elite_trials: int = 40


@dataclass(frozen=True)
class EvolutionConfig:
    population_size: int = 200
    sigma: float = 0.01
    mutation_mode: str = "mod"
    generations: int = 1000
    elite_candidates: int = 3
    elite_trials: int = 20
    survival_fraction: float = 0.5
    tournament_size: int = 2
    tournament_pool: str = "survivors"
    fine_tune: FineTune | None = None
    early_term_window: int | None = 20
    elite_early_termination: bool = False
    master_seed: int = 0

    def __post_init__(self):
        if self.population_size < 2 or self.population_size % 2:
            raise ValueError("population_size must be an even number >= 2")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.mutation_mode not in MUTATION_MODES:
            raise ValueError(f"mutation_mode must be one of {MUTATION_MODES}")
        if self.generations < 1 or self.elite_candidates < 1 or self.elite_trials < 1:
            raise ValueError("generations, elite_candidates and elite_trials must be >= 1")
        if self.elite_candidates > self.population_size:
            raise ValueError("elite_candidates cannot exceed population_size")
        if self.survival_fraction != 0.5:
            raise ValueError("survival_fraction is fixed at 0.5")
        if self.tournament_size != 2:
            raise ValueError("tournament_size is fixed at 2")
        if self.tournament_pool not in ("survivors", "full"):
            raise ValueError("tournament_pool must be 'survivors' or 'full'")
        if self.early_term_window is not None and self.early_term_window < 1:
            raise ValueError("early_term_window must be >= 1 (or disabled)")
        if self.fine_tune is not None:
            ft = self.fine_tune
            if ft.generations < 1 or not ft.sigma > 0 or ft.elite_trials < 1:
                raise ValueError("fine_tune needs generations >= 1, sigma > 0, elite_trials >= 1")

    @property
    def latent_mode(self) -> str:
        return "discrete" if self.mutation_mode == "discrete_mod" else "continuous"

    @property
    def total_generations(self) -> int:
        return self.generations + (self.fine_tune.generations if self.fine_tune else 0)

    def schedule(self, generation: int) -> tuple[float, int]:
        """``(sigma, elite_trials)`` in force at ``generation``."""
        if self.fine_tune is not None and generation >= self.generations:
            return self.fine_tune.sigma, self.fine_tune.elite_trials
        return self.sigma, self.elite_trials


@dataclass
class Individual:
    genome: Genome
    lineage_id: int
    fitness: float | None = None
    eval_seed: int | None = None
    parent_id: int | None = None


@dataclass
class GenerationStats:
    generation: int
    best_single: float
    elite_avg: float
    elite_std: float
    population_mean: float
    population_std: float
    rollout_count: int
    frames: int
    wall_time: float = 0.0
    sigma: float = 0.0
    elite_id: int = -1
    elite_scores: list[float] = field(default_factory=list)


# -- mutation --------------------------------------------------------------------


def _perturb(params: np.ndarray, start: int, stop: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    out = params.copy()
    out[start:stop] += DTYPE(sigma) * rng.standard_normal(stop - start, dtype=DTYPE)
    return out


def mutate_all(genome: Genome, sigma: float, rng: np.random.Generator) -> Genome:
    """theta' = theta + sigma * eps over every parameter."""
    return Genome(_perturb(genome.params, 0, GENOME_SIZE, sigma, rng))


def mutate_component(genome: Genome, component: str, sigma: float, rng: np.random.Generator) -> Genome:
    part = PARTITION[component]
    return Genome(_perturb(genome.params, part.offset, part.stop, sigma, rng))


def mutate_mod(genome: Genome, sigma: float, rng: np.random.Generator) -> Genome:
    """Perturb one component chosen uniformly among vision, memory, controller."""
    component = COMPONENT_NAMES[int(rng.integers(len(COMPONENT_NAMES)))]
    return mutate_component(genome, component, sigma, rng)


def mutate_controller_only(genome: Genome, sigma: float, rng: np.random.Generator) -> Genome:
    return mutate_component(genome, "controller", sigma, rng)


MUTATORS: dict[str, Callable[[Genome, float, np.random.Generator], Genome]] = {
    "all": mutate_all,
    "mod": mutate_mod,
    "controller_only": mutate_controller_only,
    "discrete_mod": mutate_mod,
}


# -- selection -------------------------------------------------------------------


def rank_order(population: Sequence[Individual]) -> list[int]:
    """Indices sorted best first; ties keep population order."""
    for ind in population:
        if ind.fitness is None or math.isnan(ind.fitness):
            raise OrchestrationError(f"individual {ind.lineage_id} has no fitness")
    return sorted(range(len(population)), key=lambda i: (-population[i].fitness, i))


def tournament(pool: Sequence[int], population: Sequence[Individual], rng: np.random.Generator) -> int:
    """Two distinct contestants drawn uniformly; the fitter one (then the lower index) wins."""
    if len(pool) == 1:
        return pool[0]
    a, b = (pool[i] for i in rng.choice(len(pool), size=2, replace=False))
    fa, fb = population[a].fitness, population[b].fitness
    if fa > fb or (fa == fb and a < b):
        return a
    return b


def next_generation(
    population: Sequence[Individual],
    elite: Individual,
    config: EvolutionConfig,
    rng: np.random.Generator,
    sigma: float | None = None,
    next_id: int | None = None,
) -> list[Individual]:
    """Top half survives unmutated; the rest are mutated tournament winners.

    Survivors come first (best first), so the elite always sits at index 0.
    Survivors get their fitness cleared for the next evaluation wave.
    """
    if not any(ind is elite for ind in population):
        raise OrchestrationError("elite is not a member of the population")
    if not math.isinf(elite.fitness):
        raise OrchestrationError("elite must carry the infinite-fitness sentinel")
    order = rank_order(population)
    half = len(population) // 2
    survivors = order[:half]
    pool = survivors if config.tournament_pool == "survivors" else order
    sigma = config.sigma if sigma is None else sigma
    mutate = MUTATORS[config.mutation_mode]
    next_id = max(ind.lineage_id for ind in population) + 1 if next_id is None else next_id

    new_pop = [
        Individual(population[i].genome, population[i].lineage_id, parent_id=population[i].parent_id)
        for i in survivors
    ]
    for _ in range(len(population) - half):
        parent = population[tournament(pool, population, rng)]
        child = mutate(parent.genome, sigma, rng)
        new_pop.append(Individual(child, next_id, parent_id=parent.lineage_id))
        next_id += 1
    return new_pop


# -- evaluation ------------------------------------------------------------------

# eval_fn receives a list of (genome, track_seed, phase) with phase "train" or
# "elite" and returns, in order, RolloutResult-like objects or plain floats.
EvalFn = Callable[[list], list]


def _outcome(result) -> tuple[float, int]:
    if result is None:
        return DOMAIN_MIN_FITNESS, 0
    fitness = float(getattr(result, "fitness", result))
    frames = int(getattr(result, "frames", 0))
    if getattr(result, "failed", False) or not math.isfinite(fitness):
        log.warning("evaluation failed; scoring domain minimum")
        return DOMAIN_MIN_FITNESS, frames
    return fitness, frames


def run_generation(
    population: list[Individual],
    config: EvolutionConfig,
    eval_fn: EvalFn,
    generation: int,
) -> tuple[list[Individual], Individual, GenerationStats]:
    """Evaluate ``population`` and pick the elite; fitnesses are set in place."""
    t0 = time.perf_counter()
    sigma, elite_trials = config.schedule(generation)
    seed = config.master_seed

    jobs = []
    for i, ind in enumerate(population):
        ind.eval_seed = derive_seed(seed, generation, "train", i)
        jobs.append((ind.genome, ind.eval_seed, "train"))
    frames = 0
    for ind, res in zip(population, eval_fn(jobs)):
        ind.fitness, f = _outcome(res)
        frames += f
    singles = np.array([ind.fitness for ind in population])

    candidates = rank_order(population)[: config.elite_candidates]
    trial_seeds = [derive_seed(seed, generation, "elite", j) for j in range(elite_trials)]
    jobs = [(population[c].genome, s, "elite") for c in candidates for s in trial_seeds]
    outcomes = [_outcome(r) for r in eval_fn(jobs)]
    frames += sum(f for _, f in outcomes)
    scores = np.array([o[0] for o in outcomes]).reshape(len(candidates), elite_trials)
    means = scores.mean(axis=1)
    best = int(np.argmax(means))  # first max wins ties
    elite = population[candidates[best]]
    elite.fitness = math.inf

    stats = GenerationStats(
        generation=generation,
        best_single=float(singles.max()),
        elite_avg=float(means[best]),
        elite_std=float(scores[best].std(ddof=1)) if elite_trials > 1 else 0.0,
        population_mean=float(singles.mean()),
        population_std=float(singles.std()),
        rollout_count=len(population) + len(candidates) * elite_trials,
        frames=frames,
        wall_time=time.perf_counter() - t0,
        sigma=sigma,
        elite_id=elite.lineage_id,
        elite_scores=[float(v) for v in scores[best]],
    )
    return population, elite, stats


def initial_population(config: EvolutionConfig) -> list[Individual]:
    return [
        Individual(init_genome(derive_seed(config.master_seed, "init", i)), i)
        for i in range(config.population_size)
    ]


class Evolution:
    """Generation loop state: population awaiting evaluation plus counters."""

    def __init__(
        self,
        config: EvolutionConfig,
        eval_fn: EvalFn,
        population: list[Individual] | None = None,
        generation: int = 0,
        next_id: int | None = None,
    ):
        self.config = config
        self.eval_fn = eval_fn
        self.population = population if population is not None else initial_population(config)
        if len(self.population) != config.population_size:
            raise OrchestrationError(
                f"population has {len(self.population)} members, config says {config.population_size}"
            )
        self.generation = generation
        self.next_id = next_id if next_id is not None else max(i.lineage_id for i in self.population) + 1
        self.elite: Individual | None = None
        self.history: list[GenerationStats] = []

    @property
    def finished(self) -> bool:
        return self.generation >= self.config.total_generations

    def step(self) -> GenerationStats:
        g = self.generation
        t0 = time.perf_counter()
        pop, elite, stats = run_generation(self.population, self.config, self.eval_fn, g)
        sigma, _ = self.config.schedule(g)
        rng = derive_rng(self.config.master_seed, g, "breed")
        self.population = next_generation(pop, elite, self.config, rng, sigma=sigma, next_id=self.next_id)
        self.next_id += self.config.population_size - self.config.population_size // 2
        self.elite = self.population[0]
        self.generation += 1
        stats.wall_time = time.perf_counter() - t0
        self.history.append(stats)
        return stats

    def run(self, callback: Callable[[GenerationStats], None] | None = None) -> list[GenerationStats]:
        while not self.finished:
            stats = self.step()
            if callback is not None:
                callback(stats)
        return self.history


def with_overrides(config: EvolutionConfig, **changes) -> EvolutionConfig:
    return replace(config, **changes)
