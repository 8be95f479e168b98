"""Drive one lap with the pure-pursuit centerline driver and save a few frames.

The lap score should come out at exactly 100 - 0.1 * T for a T-frame lap.
Frames are written as binary PPM images (viewable by most image tools).

    python3 demos/scripted_lap.py [track_seed] [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from wmevo import env


def write_ppm(path, frame, scale=4):
    img = (np.clip(frame, 0.0, 1.0) * 255).astype(np.uint8)
    img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w, _ = img.shape
    path.write_bytes(f"P6 {w} {h} 255\n".encode() + img.tobytes())


seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
out = Path(sys.argv[2] if len(sys.argv) > 2 else "lap_frames")
out.mkdir(exist_ok=True)

state, frame = env.reset(seed)
print(f"track {seed}: {state.track.n_tiles} tiles")
total, snapshots = 0.0, {0, 100, 200, 300}
while not state.done:
    if state.frame_index in snapshots:
        write_ppm(out / f"frame_{state.frame_index:04d}.ppm", frame)
    state, frame, reward, _ = env.step(state, env.centerline_driver(state))
    total += reward

T = state.frame_index
print(f"done: {state.done_reason} after {T} frames, {state.tiles_visited} tiles")
print(f"total reward {total:.4f}  (100 - 0.1*T = {100 - 0.1 * T:.4f})")
print(f"frames written to {out}/")
