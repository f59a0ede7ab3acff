"""
Pixel grid worlds and their exact optimum
=========================================

The agent is trained on small grid worlds rendered as greyscale images. Each
layout is a text file; the environment repeats the previous action with a
fixed probability (sticky actions) and truncates long episodes. Because the
underlying state space is tiny, the best achievable return can be computed
exactly, which is what learning curves are compared against.
"""

import numpy as np

from btr.envs import FrameStack, GridPixelEnv, VectorEnv, builtin_layouts, oracle_optimal_return

print("built-in layouts:", builtin_layouts())

# An 8x8 maze with hazards, rendered at 24x24 pixels.
env = GridPixelEnv("grid8", resolution=(24, 24), sticky_action_prob=0.25, seed=0)
frame = env.reset()
print("frame", frame.shape, frame.dtype, "distinct grey levels", np.unique(frame))

# Exact optimum by backward induction over (cell, previous action, steps left).
best = oracle_optimal_return(env)
print(f"optimal expected return: {best.undiscounted:.6f} undiscounted, "
      f"{best.discounted:.6f} at discount {best.discount}, over {best.num_states} states")

# Sticky actions: the executed action repeats the previous one about a quarter of the
# time (never on the first step of an episode, so the measured rate is a little lower).
rng = np.random.default_rng(1)
env.reset()
repeats = 0
for t in range(20000):
    env.step(int(rng.integers(4)), render_frame=False)
    repeats += env.last_sticky
    if env.steps >= env.max_episode_steps or env.position in env.layout.goals | env.layout.hazards:
        env.reset()
print("sticky repeat rate", repeats / 20000)

# Four stacked frames form one observation; a vector env steps several copies in lockstep
# and resets finished episodes on the spot.
venv = VectorEnv([FrameStack(GridPixelEnv("corridor5", resolution=(24, 24), seed=s), 4) for s in range(3)])
obs = venv.reset()
print("vector observation", obs.shape)
for t in range(5):
    obs, rewards, terms, truncs, info = venv.step(np.full(3, 3))  # always move right
    print(f"step {t + 1}: rewards {rewards} terminal {terms}")
venv.close()
