"""Run configuration files.

A run config is an INI file with four sections::

    [evolution]   population, mutation, elite and fine-tune settings
    [eval]        rollout settings (frame cap)
    [env]         track geometry and car physics constants
    [run]         workers, output directory, checkpoint interval

Keys not listed here are rejected by name so typos cannot silently fall back
to defaults.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .env import EnvConfig
from .evolution import EvolutionConfig, FineTune
from .rollout import default_workers

OUTPUT_ROOT_ENV = "WMEVO_OUTPUT_ROOT"
SECTIONS = ("evolution", "eval", "env", "run")
_NULLABLE = {"early_term_window"}
_ENV_KEYS = [f.name for f in fields(EnvConfig) if f.name != "frame_cap"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSettings:
    workers: int = 0  # 0 means one per available CPU
    output_dir: str = "runs/default"
    checkpoint_interval: int = 10
    log_wall_time: bool = False  # off keeps the generation log byte-reproducible

    def __post_init__(self):
        if self.workers < 0:
            raise ValueError("workers must be >= 0")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")

    def resolved_workers(self) -> int:
        return self.workers or default_workers()

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return out if out.is_absolute() or not root else Path(root) / out


@dataclass(frozen=True)
class RunConfig:
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    frame_cap: int = 1000
    env: EnvConfig = field(default_factory=EnvConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def __post_init__(self):
        if self.frame_cap < 1:
            raise ValueError("frame_cap must be >= 1")


def paper_defaults() -> RunConfig:
    """Full-scale settings: pop 200, sigma 0.01, MUT-MOD, 1000 generations,
    top-3 x 20 elite trials, window 20, then 200 fine-tune generations at
    sigma 0.003 with 40 elite trials."""
    evo = EvolutionConfig(
        population_size=200,
        sigma=0.01,
        mutation_mode="mod",
        generations=1000,
        elite_candidates=3,
        elite_trials=20,
        early_term_window=20,
        fine_tune=FineTune(generations=200, sigma=0.003, elite_trials=40),
    )
    return RunConfig(evolution=evo, frame_cap=1000, run=RunSettings(output_dir="runs/paper"))


def smoke_config(output_dir: str = "runs/smoke", master_seed: int = 0) -> RunConfig:
    evo = EvolutionConfig(population_size=16, generations=5, master_seed=master_seed)
    return RunConfig(evolution=evo, frame_cap=200, run=RunSettings(output_dir=output_dir, workers=1))


# -- (de)serialization -----------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, text: str, default):
    text = text.strip()
    if key in _NULLABLE and text.lower() in ("none", "off", ""):
        return None
    kind = type(default) if default is not None else int
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for key '{key}'") from None


def _evolution_items(evo: EvolutionConfig) -> dict:
    items = {f.name: getattr(evo, f.name) for f in fields(evo) if f.name != "fine_tune"}
    ft = evo.fine_tune
    items["fine_tune_generations"] = ft.generations if ft else 0
    items["fine_tune_sigma"] = ft.sigma if ft else FineTune().sigma
    items["fine_tune_elite_trials"] = ft.elite_trials if ft else FineTune().elite_trials
    return items


def _items(cfg: RunConfig) -> dict[str, dict]:
    return {
        "evolution": _evolution_items(cfg.evolution),
        "eval": {"frame_cap": cfg.frame_cap},
        "env": {k: getattr(cfg.env, k) for k in _ENV_KEYS},
        "run": {f.name: getattr(cfg.run, f.name) for f in fields(cfg.run)},
    }


def dumps(cfg: RunConfig) -> str:
    out = io.StringIO()
    for section, items in _items(cfg).items():
        out.write(f"[{section}]\n")
        for k, v in items.items():
            out.write(f"{k} = {_fmt(v)}\n")
        out.write("\n")
    return out.getvalue()


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse INI text over ``base`` (defaults when omitted); unknown keys raise."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__", inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    updates = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section '[{section}]'")
        for key, raw in parser.items(section):
            updates[f"{section}.{key}"] = raw
    return apply_overrides(base or RunConfig(), updates)


def apply_overrides(cfg: RunConfig, updates: dict[str, str]) -> RunConfig:
    """Apply ``{"section.key": "text"}`` updates with the same validation as files."""
    current = _items(cfg)
    new = {s: dict(v) for s, v in current.items()}
    for dotted, raw in updates.items():
        section, _, key = dotted.partition(".")
        if section not in current:
            raise ConfigError(f"unknown section '{section}' in '{dotted}'")
        if key not in current[section]:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        new[section][key] = _parse(key, str(raw), current[section][key])
    return _build(new)


def _build(items: dict[str, dict]) -> RunConfig:
    evo = dict(items["evolution"])
    ft_gens = evo.pop("fine_tune_generations")
    ft = FineTune(ft_gens, evo.pop("fine_tune_sigma"), evo.pop("fine_tune_elite_trials")) if ft_gens else None
    for k in ("fine_tune_sigma", "fine_tune_elite_trials"):
        evo.pop(k, None)
    try:
        return RunConfig(
            evolution=EvolutionConfig(**evo, fine_tune=ft),
            frame_cap=items["eval"]["frame_cap"],
            env=EnvConfig(**items["env"]),
            run=RunSettings(**items["run"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


def save(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(dumps(cfg))
    return path


def with_output_dir(cfg: RunConfig, output_dir) -> RunConfig:
    return replace(cfg, run=replace(cfg.run, output_dir=str(output_dir)))
