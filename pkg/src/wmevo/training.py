"""Training runs on disk: run directories, generation logs, checkpoints, resume.

A run directory holds everything needed to reproduce or continue a run::

    config.ini          configuration snapshot (updated on resume overrides)
    generations.csv     one row per generation
    timing.csv          wall-clock seconds per generation (not reproducible)
    events.jsonl        start / resume / phase-change events
    checkpoints/        gen_NNNNNN.ckpt population snapshots
    elite.genome        elite of the latest completed generation
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import signal
import struct
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import config as cfgmod
from .evolution import Evolution, EvolutionConfig, GenerationStats, Individual
from .model import GENOME_SIZE, Genome, architecture_hash, save_genome
from .nn import DTYPE
from .rollout import EvalConfig, RolloutPool

log = logging.getLogger(__name__)

LOG_NAME = "generations.csv"
TIMING_NAME = "timing.csv"
EVENTS_NAME = "events.jsonl"
CONFIG_NAME = "config.ini"
ELITE_NAME = "elite.genome"
CKPT_DIR = "checkpoints"
LOG_HEADER = "generation,best_single,elite_avg,elite_std,pop_mean,pop_std,rollouts,frames,wall_time_s\n"

CKPT_MAGIC = b"WMEVOCKP"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<8sIQ")
KEEP_CHECKPOINTS = 2

# keys of every random stream a run draws from; recorded in checkpoints
RNG_STREAMS = {
    "init": "(master_seed, 'init', index)",
    "train": "(master_seed, generation, 'train', index)",
    "elite": "(master_seed, generation, 'elite', trial)",
    "breed": "(master_seed, generation, 'breed')",
    "track": "(track_seed, 'track', attempt)",
}


class RunError(RuntimeError):
    """Runtime failure; any checkpoint written before the failure is kept."""


class RunExistsError(RunError):
    pass


class CheckpointError(RunError):
    pass


class Interrupted(RunError):
    pass


def make_eval_fn(cfg: cfgmod.RunConfig, pool: RolloutPool) -> Callable[[list], list]:
    """Map ``(genome, seed, phase)`` jobs onto rollouts with per-phase settings."""
    evo = cfg.evolution
    train = EvalConfig(early_term_window=evo.early_term_window, frame_cap=cfg.frame_cap, latent_mode=evo.latent_mode)
    elite = train if evo.elite_early_termination else replace(train, early_term_window=None)
    configs = {"train": train, "elite": elite}

    def eval_fn(jobs):
        return pool.map([(g, s, configs[phase]) for g, s, phase in jobs])

    return eval_fn


def format_row(stats: GenerationStats, wall_time: bool = False) -> str:
    vals = [
        str(stats.generation),
        repr(stats.best_single),
        repr(stats.elite_avg),
        repr(stats.elite_std),
        repr(stats.population_mean),
        repr(stats.population_std),
        str(stats.rollout_count),
        str(stats.frames),
        f"{stats.wall_time:.3f}" if wall_time else "",
    ]
    return ",".join(vals) + "\n"


# -- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    version: int
    config: cfgmod.RunConfig
    generation: int
    next_id: int
    elite_id: int | None
    log_offset: int
    timing_offset: int
    population: list[Individual]
    rng_streams: dict


def write_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Atomically write ``ckpt``; a trailing sha256 covers every preceding byte."""
    path = Path(path)
    header = {
        "format_version": ckpt.version,
        "architecture": architecture_hash().hex(),
        "genome_size": GENOME_SIZE,
        "config": cfgmod.dumps(ckpt.config),
        "generation": ckpt.generation,
        "next_id": ckpt.next_id,
        "elite_id": ckpt.elite_id,
        "log_offset": ckpt.log_offset,
        "timing_offset": ckpt.timing_offset,
        "lineage_ids": [ind.lineage_id for ind in ckpt.population],
        "parent_ids": [ind.parent_id for ind in ckpt.population],
        "rng_streams": ckpt.rng_streams,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    digest = hashlib.sha256()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in (_CKPT_PREFIX.pack(CKPT_MAGIC, ckpt.version, len(blob)), blob):
                digest.update(chunk)
                fh.write(chunk)
            for ind in ckpt.population:
                data = np.ascontiguousarray(ind.genome.params, dtype="<f4").tobytes()
                digest.update(data)
                fh.write(data)
            fh.write(digest.digest())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if len(raw) < _CKPT_PREFIX.size + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _CKPT_PREFIX.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads version {CKPT_VERSION}")
    if hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    start = _CKPT_PREFIX.size
    header = json.loads(raw[start : start + hlen])
    if header["architecture"] != architecture_hash().hex():
        raise CheckpointError(f"{path}: checkpoint was written for a different network architecture")
    n = len(header["lineage_ids"])
    payload = np.frombuffer(raw, dtype="<f4", count=n * GENOME_SIZE, offset=start + hlen)
    if start + hlen + payload.nbytes + 32 != len(raw):
        raise CheckpointError(f"{path}: payload size does not match header")
    population = [
        Individual(Genome(payload[i * GENOME_SIZE : (i + 1) * GENOME_SIZE].astype(DTYPE)), lid, parent_id=pid)
        for i, (lid, pid) in enumerate(zip(header["lineage_ids"], header["parent_ids"]))
    ]
    return Checkpoint(
        version=version,
        config=cfgmod.loads(header["config"]),
        generation=header["generation"],
        next_id=header["next_id"],
        elite_id=header["elite_id"],
        log_offset=header["log_offset"],
        timing_offset=header["timing_offset"],
        population=population,
        rng_streams=header["rng_streams"],
    )


def latest_checkpoint(run_dir) -> Path:
    found = sorted((Path(run_dir) / CKPT_DIR).glob("gen_*.ckpt"))
    if not found:
        raise CheckpointError(f"no checkpoints in {run_dir}")
    return found[-1]


# -- runs ------------------------------------------------------------------------


@dataclass
class RunOutcome:
    run_dir: Path
    generations: int
    finished: bool
    elite: Genome | None
    last: GenerationStats | None


class _SignalGuard:
    """Turns SIGINT/SIGTERM into a flag checked between generations."""

    def __init__(self):
        self.received: int | None = None
        self._old = {}

    def __enter__(self):
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                self._old[sig] = signal.signal(sig, self._handle)
            except ValueError:  # not the main thread
                pass
        return self

    def _handle(self, signum, frame):
        self.received = signum

    def __exit__(self, *exc):
        for sig, old in self._old.items():
            signal.signal(sig, old)


class Run:
    def __init__(self, run_dir: Path, cfg: cfgmod.RunConfig, evolution: Evolution, pool: RolloutPool):
        self.run_dir = run_dir
        self.cfg = cfg
        self.evolution = evolution
        self.pool = pool

    def _append(self, name: str, text: str):
        with (self.run_dir / name).open("a") as fh:
            fh.write(text)

    def event(self, kind: str, **data):
        rec = {"event": kind, "generation": self.evolution.generation, **data}
        self._append(EVENTS_NAME, json.dumps(rec, sort_keys=True) + "\n")

    def checkpoint(self) -> Path:
        ev = self.evolution
        ckdir = self.run_dir / CKPT_DIR
        ckdir.mkdir(exist_ok=True)
        ckpt = Checkpoint(
            version=CKPT_VERSION,
            config=self.cfg,
            generation=ev.generation,
            next_id=ev.next_id,
            elite_id=ev.elite.lineage_id if ev.elite is not None else None,
            log_offset=(self.run_dir / LOG_NAME).stat().st_size,
            timing_offset=(self.run_dir / TIMING_NAME).stat().st_size,
            population=ev.population,
            rng_streams=RNG_STREAMS,
        )
        path = write_checkpoint(ckdir / f"gen_{ev.generation:06d}.ckpt", ckpt)
        for old in sorted(ckdir.glob("gen_*.ckpt"))[:-KEEP_CHECKPOINTS]:
            old.unlink()
        if ev.elite is not None:
            save_genome(ev.elite.genome, self.run_dir / ELITE_NAME)
        return path

    def run(self, stop_after: int | None = None, progress: Callable[[GenerationStats], None] | None = None) -> RunOutcome:
        ev = self.evolution
        interval = self.cfg.run.checkpoint_interval
        last = None
        with _SignalGuard() as guard:
            while not ev.finished and (stop_after is None or ev.generation < stop_after):
                if ev.generation == ev.config.generations and ev.config.fine_tune is not None:
                    ft = ev.config.fine_tune
                    self.event("phase", name="fine_tune", sigma=ft.sigma, elite_trials=ft.elite_trials)
                try:
                    last = ev.step()
                except Exception as exc:
                    path = self.checkpoint()
                    raise RunError(f"generation {ev.generation} failed ({exc}); state saved to {path}") from exc
                self._append(LOG_NAME, format_row(last, self.cfg.run.log_wall_time))
                self._append(TIMING_NAME, f"{last.generation},{last.wall_time:.3f}\n")
                if progress is not None:
                    progress(last)
                if ev.generation % interval == 0 and not ev.finished:
                    self.checkpoint()
                if guard.received is not None:
                    path = self.checkpoint()
                    self.event("interrupted", signal=int(guard.received))
                    raise Interrupted(f"interrupted at generation {ev.generation}; resume from {path}")
        self.checkpoint()
        if ev.finished:
            self.event("finished")
        return RunOutcome(self.run_dir, ev.generation, ev.finished, ev.elite.genome if ev.elite else None, last)

    def close(self):
        self.pool.close()


def _new_pool(cfg: cfgmod.RunConfig) -> RolloutPool:
    return RolloutPool(cfg.run.resolved_workers(), cfg.env)


def start_run(cfg: cfgmod.RunConfig, force: bool = False, run_dir=None) -> Run:
    """Create (or with ``force`` replace) the run directory and set up generation 0."""
    run_dir = Path(run_dir) if run_dir is not None else cfg.run.resolved_output_dir()
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise RunExistsError(f"{run_dir} already exists; pass --force to overwrite it")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.save(cfg, run_dir / CONFIG_NAME)
    (run_dir / LOG_NAME).write_text(LOG_HEADER)
    (run_dir / TIMING_NAME).write_text("generation,wall_time_s\n")
    (run_dir / EVENTS_NAME).write_text("")
    pool = _new_pool(cfg)
    run = Run(run_dir, cfg, Evolution(cfg.evolution, make_eval_fn(cfg, pool)), pool)
    run.event("start", master_seed=cfg.evolution.master_seed)
    return run


def _changed_keys(old: cfgmod.RunConfig, new: cfgmod.RunConfig) -> dict:
    a, b = cfgmod._items(old), cfgmod._items(new)
    return {f"{s}.{k}": [a[s][k], b[s][k]] for s in a for k in a[s] if a[s][k] != b[s][k]}


def resume_run(target, overrides: dict[str, str] | None = None) -> Run:
    """Reopen a run from a checkpoint file or run directory.

    The generation log is cut back to the checkpoint's offset so a resumed run
    appends exactly the rows an uninterrupted run would have written.
    """
    target = Path(target)
    ckpt_path = latest_checkpoint(target) if target.is_dir() else target
    ckpt = read_checkpoint(ckpt_path)
    run_dir = ckpt_path.parent.parent if ckpt_path.parent.name == CKPT_DIR else ckpt_path.parent
    cfg = ckpt.config
    if overrides:
        cfg = cfgmod.apply_overrides(cfg, overrides)
        if cfg.evolution.population_size != ckpt.config.evolution.population_size:
            raise cfgmod.ConfigError("population_size cannot change on resume")
    for name, offset in ((LOG_NAME, ckpt.log_offset), (TIMING_NAME, ckpt.timing_offset)):
        path = run_dir / name
        if not path.exists() or path.stat().st_size < offset:
            raise CheckpointError(f"{path} is shorter than the checkpoint expects")
        with path.open("r+b") as fh:
            fh.truncate(offset)
    pool = _new_pool(cfg)
    evo = Evolution(
        cfg.evolution,
        make_eval_fn(cfg, pool),
        population=ckpt.population,
        generation=ckpt.generation,
        next_id=ckpt.next_id,
    )
    if ckpt.elite_id is not None:
        evo.elite = next((ind for ind in ckpt.population if ind.lineage_id == ckpt.elite_id), None)
    run = Run(run_dir, cfg, evo, pool)
    run.event("resume", checkpoint=ckpt_path.name)
    changes = _changed_keys(ckpt.config, cfg)
    if changes:
        cfgmod.save(cfg, run_dir / CONFIG_NAME)
        run.event("phase", name="override", changes=changes)
    return run


def smoke_evolution(
    mutation_mode: str = "mod",
    master_seed: int = 0,
    generations: int = 26,
    population_size: int = 30,
    frame_cap: int = 400,
    workers: int = 1,
    progress: Callable[[GenerationStats], None] | None = None,
) -> list[GenerationStats]:
    """Small in-memory evolution run (no run directory) for learning checks.

    ``generations`` counts evaluated generations, so the default 26 covers
    generation 0 plus 25 rounds of selection and mutation.
    """
    evo = EvolutionConfig(
        population_size=population_size,
        mutation_mode=mutation_mode,
        generations=generations,
        master_seed=master_seed,
    )
    cfg = cfgmod.RunConfig(evolution=evo, frame_cap=frame_cap, run=cfgmod.RunSettings(workers=workers))
    with _new_pool(cfg) as pool:
        return Evolution(evo, make_eval_fn(cfg, pool)).run(progress)
