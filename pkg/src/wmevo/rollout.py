"""Agent-environment episodes, generalization runs and the rollout worker pool."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
import multiprocessing as mp

import numpy as np

from . import env as envmod
from .model import LATENT_SIZE, ZERO_ACTION, Agent, EvaluationError, Genome, MemoryState
from .rng import derive_rng, derive_seed

log = logging.getLogger(__name__)

DOMAIN_MIN_FITNESS = -100.0
SOLVED_THRESHOLD = 900.0


@dataclass(frozen=True)
class EvalConfig:
    early_term_window: int | None = 20  # None disables early termination
    frame_cap: int = 1000
    record_traces: bool = False
    latent_mode: str = "continuous"
    sample_latent: bool = False
    check_decomposition: bool = False

    def __post_init__(self):
        if self.early_term_window is not None and self.early_term_window < 1:
            raise ValueError("early_term_window must be >= 1 or None")
        if self.frame_cap < 1:
            raise ValueError("frame_cap must be >= 1")
        if self.latent_mode not in ("continuous", "discrete"):
            raise ValueError(f"unknown latent_mode {self.latent_mode!r}")


@dataclass
class Traces:
    latents: np.ndarray  # (T, 32)
    hidden_means: np.ndarray  # (T,)
    actions: np.ndarray  # (T, 3) steer, gas, brake
    positions: np.ndarray  # (T, 2) car position when frame t was observed


@dataclass
class RolloutResult:
    fitness: float
    frames: int
    tiles_visited: int | None
    n_tiles: int | None
    terminated_early: bool = False
    done_reason: str | None = None
    failed: bool = False
    traces: Traces | None = None


def rollout(
    genome: Genome,
    track_seed: int,
    config: EvalConfig = EvalConfig(),
    env_config: envmod.EnvConfig = envmod.EnvConfig(),
    environment=None,
) -> RolloutResult:
    """Run one episode and return its cumulative reward as fitness.

    Per step: ``z_t = encode(frame_t)``, ``h_t = memory(z_t, a_{t-1}, h_{t-1})``,
    ``a_t = controller(z_t, h_t)``, then the environment advances.  A training
    rollout stops once ``early_term_window`` consecutive steps pass without a
    newly visited tile.  ``environment`` may be any object with the
    :class:`~wmevo.env.TrackEnv` interface (e.g. an external env client).
    """
    env = environment or envmod.TrackEnv(replace(env_config, frame_cap=config.frame_cap))
    native = isinstance(env, envmod.TrackEnv)
    agent = Agent(genome, config.latent_mode)
    noise = derive_rng(track_seed, "latent-noise") if config.sample_latent else None
    penalty = env_config.frame_penalty

    frame = env.reset(track_seed)
    state = MemoryState.zeros()
    action = ZERO_ACTION
    fitness, frames, idle = 0.0, 0, 0
    terminated_early = failed = False
    done = False
    recs = ([], [], [], []) if config.record_traces else None
    tiles_before = env.tiles_visited if native else None
    prev_frame = prev_z = None

    try:
        while not done:
            # encode is pure, so a repeated frame (parked car) reuses its code
            if noise is None and prev_frame is not None and np.array_equal(frame, prev_frame):
                z = prev_z
            else:
                z = agent.encode(frame, noise)
                prev_frame, prev_z = frame, z
            state, _ = agent.memory_step(z, action, state)
            action = agent.act(z, state)
            if recs is not None:
                recs[0].append(z)
                recs[1].append(float(state.h.mean()))
                recs[2].append((action.steer, action.gas, action.brake))
                recs[3].append(env.car_position if native else (math.nan, math.nan))
            frame, reward, done = env.step(action)
            fitness += reward
            frames += 1
            if native:
                progressed = env.tiles_visited > tiles_before
                tiles_before = env.tiles_visited
            else:
                # the first step also pays the start tile, which is not progress
                progressed = frames > 1 and reward > -penalty + 1e-9
            idle = 0 if progressed else idle + 1
            if not done and frames >= config.frame_cap:
                done = True
            if not done and config.early_term_window is not None and idle >= config.early_term_window:
                terminated_early = done = True
    except EvaluationError as exc:
        log.warning("rollout on track %d aborted: %s", track_seed, exc)
        fitness, failed = DOMAIN_MIN_FITNESS, True

    result = RolloutResult(
        fitness=fitness,
        frames=frames,
        tiles_visited=env.tiles_visited if native else None,
        n_tiles=env.n_tiles,
        terminated_early=terminated_early,
        done_reason="early_termination" if terminated_early else (env.state.done_reason if native else None),
        failed=failed,
    )
    if recs is not None:
        result.traces = Traces(
            latents=np.array(recs[0], np.float32).reshape(-1, LATENT_SIZE),
            hidden_means=np.array(recs[1], np.float64),
            actions=np.array(recs[2], np.float64).reshape(-1, 3),
            positions=np.array(recs[3], np.float64).reshape(-1, 2),
        )
    if config.check_decomposition and native and not failed:
        expected = env_config.tile_reward_total * result.tiles_visited / result.n_tiles - penalty * frames
        if abs(expected - fitness) > 1e-6:
            raise AssertionError(f"fitness {fitness} != tile/frame decomposition {expected}")
    return result


@dataclass
class GeneralizationReport:
    mean: float
    std: float
    per_trial: list[float]
    seeds: list[int]

    @property
    def solved(self) -> bool:
        return is_solved(self.mean)


def is_solved(mean_score: float) -> bool:
    return mean_score >= SOLVED_THRESHOLD


def generalization_seeds(base_seed: int, n_trials: int) -> list[int]:
    return [derive_seed(base_seed, "generalization", i) for i in range(n_trials)]


def evaluate_generalization(
    genome: Genome,
    n_trials: int = 100,
    base_seed: int = 0,
    config: EvalConfig = EvalConfig(),
    env_config: envmod.EnvConfig = envmod.EnvConfig(),
    pool: "RolloutPool | None" = None,
) -> GeneralizationReport:
    """Score ``genome`` on ``n_trials`` fresh tracks with full-length episodes."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    config = replace(config, early_term_window=None, record_traces=False)
    seeds = generalization_seeds(base_seed, n_trials)
    pool = pool or RolloutPool(1, env_config)
    results = pool.map([(genome, s, config) for s in seeds])
    scores = [r.fitness for r in results]
    std = float(np.std(scores, ddof=1)) if n_trials > 1 else 0.0
    return GeneralizationReport(float(np.mean(scores)), std, scores, seeds)


# -- worker pool -----------------------------------------------------------------

_WORKER_ENV_CONFIG: envmod.EnvConfig | None = None


def _init_worker(env_config):
    global _WORKER_ENV_CONFIG
    _WORKER_ENV_CONFIG = env_config


def _run_job(job):
    genome, seed, config = job
    return rollout(genome, seed, config, _WORKER_ENV_CONFIG)


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


class RolloutPool:
    """Runs ``(genome, track_seed, EvalConfig)`` jobs, in order, on N processes.

    Results depend only on the jobs, never on the number of workers.
    """

    def __init__(self, workers: int = 1, env_config: envmod.EnvConfig = envmod.EnvConfig()):
        self.workers = max(1, int(workers))
        self.env_config = env_config
        self._executor = None

    def map(self, jobs) -> list[RolloutResult]:
        jobs = list(jobs)
        if self.workers == 1 or len(jobs) <= 1:
            return [rollout(g, s, c, self.env_config) for g, s, c in jobs]
        if self._executor is None:
            ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
            self._executor = ProcessPoolExecutor(
                self.workers, mp_context=ctx, initializer=_init_worker, initargs=(self.env_config,)
            )
        return list(self._executor.map(_run_job, jobs))

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
