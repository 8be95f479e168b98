"""Command line: ``wmevo {train,resume,evaluate,analyze,inspect}``.

Exit codes: 0 success, 1 usage error (bad arguments, config or input file),
2 runtime failure (including interrupted runs, which leave a checkpoint).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis, config as cfgmod, training
from .env import EnvConfig
from .model import (
    ArchitectureMismatch,
    CONTROLLER_LAYERS,
    HIDDEN_SIZE,
    LATENT_SIZE,
    MDN_HEAD_SIZE,
    architecture_table,
    encoder_shape_chain,
    load_genome,
)
from .rollout import EvalConfig, RolloutPool, evaluate_generalization, rollout

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        key, sep, val = pair.partition("=")
        if not sep or "." not in key:
            raise UsageError(f"--set expects section.key=value, got {pair!r}")
        out[key.strip()] = val.strip()
    return out


def _progress(stats):
    print(
        f"gen {stats.generation:5d}  best {stats.best_single:9.3f}  "
        f"elite {stats.elite_avg:9.3f} +- {stats.elite_std:7.3f}  ({stats.wall_time:.1f}s)",
        flush=True,
    )


def _run_config_near(genome_path: Path) -> cfgmod.RunConfig | None:
    path = genome_path.parent / training.CONFIG_NAME
    return cfgmod.load(path) if path.exists() else None


def _load_genome(path):
    path = Path(path)
    try:
        return load_genome(path)
    except FileNotFoundError:
        raise UsageError(f"no such genome file: {path}") from None
    except ArchitectureMismatch as exc:
        raise UsageError(f"refusing {path}: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


# -- commands --------------------------------------------------------------------


def cmd_train(args) -> int:
    if args.paper_defaults:
        cfg = cfgmod.paper_defaults()
        if args.config:
            cfg = cfgmod.loads(Path(args.config).read_text(), base=cfg)
    elif args.config:
        cfg = cfgmod.load(args.config)
    else:
        raise UsageError("train needs a config file or --paper-defaults")
    updates = _overrides(args.set)
    if args.workers is not None:
        updates["run.workers"] = str(args.workers)
    if args.output is not None:
        updates["run.output_dir"] = str(args.output)
    cfg = cfgmod.apply_overrides(cfg, updates)
    if args.print_config:
        sys.stdout.write(cfgmod.dumps(cfg))
        return EXIT_OK
    run = training.start_run(cfg, force=args.force)
    try:
        print(f"run directory: {run.run_dir}")
        out = run.run(stop_after=args.stop_after, progress=None if args.quiet else _progress)
    finally:
        run.close()
    state = "finished" if out.finished else "stopped"
    print(f"{state} after {out.generations} generations; elite saved to {out.run_dir / training.ELITE_NAME}")
    return EXIT_OK


def cmd_resume(args) -> int:
    updates = _overrides(args.set)
    if args.workers is not None:
        updates["run.workers"] = str(args.workers)
    run = training.resume_run(args.checkpoint, updates)
    try:
        print(f"resuming {run.run_dir} at generation {run.evolution.generation}")
        out = run.run(stop_after=args.stop_after, progress=None if args.quiet else _progress)
    finally:
        run.close()
    state = "finished" if out.finished else "stopped"
    print(f"{state} after {out.generations} generations")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    genome_path = Path(args.genome)
    genome = _load_genome(genome_path)
    near = _run_config_near(genome_path)
    env_cfg = near.env if near else EnvConfig()
    mode = args.latent_mode or (near.evolution.latent_mode if near else "continuous")
    eval_cfg = EvalConfig(frame_cap=args.frame_cap, latent_mode=mode)
    with RolloutPool(args.workers or 1, env_cfg) as pool:
        report = evaluate_generalization(genome, args.trials, args.seed, eval_cfg, env_cfg, pool)
    out_csv = Path(args.csv) if args.csv else genome_path.with_suffix(".eval.csv")
    with out_csv.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "track_seed", "score"])
        for i, (seed, score) in enumerate(zip(report.seeds, report.per_trial)):
            w.writerow([i, seed, repr(score)])
    print(f"mean {report.mean:.3f} +- {report.std:.3f} over {args.trials} tracks")
    print(f"solved: {'yes' if report.solved else 'no'}")
    print(f"per-trial scores: {out_csv}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    genome_path = Path(args.genome)
    genome = _load_genome(genome_path)
    near = _run_config_near(genome_path)
    env_cfg = near.env if near else EnvConfig()
    mode = args.latent_mode or (near.evolution.latent_mode if near else "continuous")
    out_dir = Path(args.out) if args.out else genome_path.parent / f"analysis_{args.track_seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    eval_cfg = EvalConfig(early_term_window=None, frame_cap=args.frame_cap, record_traces=True, latent_mode=mode)
    result = rollout(genome, args.track_seed, eval_cfg, env_cfg)
    trace = analysis.export_latents(result, out_dir / "trace.csv")
    profile = analysis.hidden_variance(result.traces.hidden_means)
    var = analysis.write_variance(profile, out_dir / "variance.csv", result.traces.positions)
    print(f"rollout: {result.frames} frames, fitness {result.fitness:.3f}, {result.tiles_visited}/{result.n_tiles} tiles")
    print(f"latent trace: {trace}")
    print(f"variance profile: {var}")
    log_path = Path(args.log) if args.log else genome_path.parent / training.LOG_NAME
    if log_path.exists():
        svg = analysis.emit_fitness_plot(log_path, out_dir / "fitness.svg")
        print(f"fitness plot: {svg}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    rows = architecture_table()
    width = max(len(name) for name, _ in rows)
    print(f"{'component':<{width}}  parameters")
    for name, count in rows:
        print(f"{name:<{width}}  {count:>10,}")
    chain = encoder_shape_chain()
    print()
    print("encoder spatial chain: " + " -> ".join(str(c) for c in chain))
    print(f"encoder flatten width: {chain[-1] * chain[-1] * 256}")
    print(f"controller input width: {CONTROLLER_LAYERS[0].in_size} (z {LATENT_SIZE} + h {HIDDEN_SIZE})")
    print(f"MDN head width: {MDN_HEAD_SIZE}")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wmevo", description="Neuroevolution of world-model car-racing agents.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="start a new evolution run")
    t.add_argument("config", nargs="?", help="INI run config")
    t.add_argument("--paper-defaults", action="store_true", help="start from the full-scale settings")
    t.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    t.add_argument("--output", help="run directory (overrides run.output_dir)")
    t.add_argument("--workers", type=int, help="rollout processes (0 = all CPUs)")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    t.add_argument("--stop-after", type=int, metavar="GEN", help="checkpoint and stop after GEN generations")
    t.add_argument("--force", action="store_true", help="replace an existing run directory")
    t.add_argument("-q", "--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("resume", help="continue a run from a checkpoint")
    r.add_argument("checkpoint", help="checkpoint file or run directory (latest checkpoint)")
    r.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a value (new phase)")
    r.add_argument("--workers", type=int)
    r.add_argument("--stop-after", type=int, metavar="GEN")
    r.add_argument("-q", "--quiet", action="store_true")
    r.set_defaults(func=cmd_resume)

    e = sub.add_parser("evaluate", help="score a genome on fresh tracks")
    e.add_argument("genome")
    e.add_argument("--trials", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--frame-cap", type=int, default=1000)
    e.add_argument("--latent-mode", choices=("continuous", "discrete"))
    e.add_argument("--workers", type=int)
    e.add_argument("--csv", help="per-trial output (default: next to the genome)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="traced rollout, variance profile and fitness plot")
    a.add_argument("genome")
    a.add_argument("--track-seed", type=int, default=0)
    a.add_argument("--frame-cap", type=int, default=1000)
    a.add_argument("--latent-mode", choices=("continuous", "discrete"))
    a.add_argument("--out", help="output directory")
    a.add_argument("--log", help="generation log for the fitness plot")
    a.set_defaults(func=cmd_analyze)

    i = sub.add_parser("inspect", help="print the architecture and parameter counts")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError, training.RunExistsError, analysis.UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (training.RunError, analysis.LogParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
