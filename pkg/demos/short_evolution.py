"""A tiny end-to-end run: train for a few generations, score the elite, analyse it.

Everything goes to a temporary run directory unless one is given. Expect a
minute or less on a single core; the numbers are far too small to learn much.

    python3 demos/short_evolution.py [run_dir]
"""

import sys
import tempfile
from pathlib import Path

from wmevo import cli

run_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "tiny"

config = run_dir.parent / "tiny.ini"
config.parent.mkdir(parents=True, exist_ok=True)
config.write_text(
    "[evolution]\n"
    "population_size = 8\n"
    "generations = 3\n"
    "elite_trials = 4\n"
    "master_seed = 1\n"
    "[eval]\n"
    "frame_cap = 150\n"
    "[run]\n"
    "workers = 1\n"
    "checkpoint_interval = 1\n"
)

# Same entry point as the ``wmevo`` command.
cli.main(["train", str(config), "--output", str(run_dir), "--force"])
cli.main(["evaluate", str(run_dir / "elite.genome"), "--trials", "5", "--frame-cap", "150"])
cli.main(["analyze", str(run_dir / "elite.genome"), "--frame-cap", "150"])

print("\nrun directory contents:")
for path in sorted(run_dir.rglob("*")):
    if path.is_file():
        print(f"  {path.relative_to(run_dir)}  ({path.stat().st_size} bytes)")
