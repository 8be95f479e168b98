"""A walk through the agent: parameter budget, genome layout and one forward step.

Run with ``python3 demos/architecture_tour.py``.
"""

import numpy as np

from wmevo import env, model

print("Parameter counts")
for name, count in model.architecture_table():
    print(f"  {name:<11} {count:>10,}")

print("\nGenome slices (vision, memory, controller)")
for name in model.COMPONENT_NAMES:
    part = model.PARTITION[name]
    print(f"  {name:<11} [{part.offset:>9,} : {part.stop:>9,})")

# One observation from a fresh track, pushed through every component.
state, frame = env.reset(track_seed=3)
genome = model.init_genome(7)
agent = model.Agent(genome)

z = agent.encode(frame)
print(f"\nframe {frame.shape} -> latent z {z.shape}, |z| = {np.linalg.norm(z):.4f}")

memory = model.MemoryState.zeros()
action = agent.act(z, memory)
print(f"first action: steer {action.steer:+.3f}  gas {action.gas:.3f}  brake {action.brake:.3f}")

# The memory only sees the action after it is taken.
memory, _ = agent.memory_step(z, action, memory)
h = memory.h
print(f"hidden state after one step: mean {h.mean():+.5f}, std {h.std():.5f}")

# The zero genome is the neutral policy: no steering, half gas, half brake.
zero = model.Agent(model.Genome.zeros()).act(z, model.MemoryState.zeros())
print(f"zero genome action: steer {zero.steer:+.1f}  gas {zero.gas:.1f}  brake {zero.brake:.1f}")
