"""
Prioritized n-step replay
=========================

Transitions enter the buffer through a per-environment n-step window: each
stored item carries the discounted sum of up to ``n`` clipped rewards and the
state ``n`` steps later. Episodes that end inside the window flush shorter
returns, and a truncated episode still bootstraps from its last frame.
Sampling is proportional to ``priority ** alpha`` through a sum tree, with
importance weights correcting the bias.
"""

import numpy as np

from btr.envs import FrameStack, GridPixelEnv, clip_reward
from btr.replay import NStepAccumulator, PrioritizedReplay

# The window on its own: three rewards of 1 with discount 0.5, then a terminal step.
acc = NStepAccumulator(3, 0.5)
for t, (r, done) in enumerate([(1.0, False), (1.0, False), (1.0, False), (1.0, True)]):
    for state, action, ret, m, terminal in acc.push(f"s{t}", 0, r, done, False):
        print(f"step {t}: {state} matured with return {ret} over {m} steps, terminal={terminal}")

# A buffer fed by two environments. Frames are stored once and shared by the
# overlapping four-frame stacks.
envs = [FrameStack(GridPixelEnv("grid8", resolution=(16, 16), seed=s), 4) for s in range(2)]
replay = PrioritizedReplay(4096, 2, n_step=3, discount=0.99, alpha=0.5, frame_shape=(16, 16), seed=0, min_size=64)
rng = np.random.default_rng(0)
obs = [e.reset() for e in envs]
for _ in range(500):
    for i, env in enumerate(envs):
        a = int(rng.integers(4))
        nxt, r, term, trunc = env.step(a)
        replay.push(i, obs[i], a, float(clip_reward(r)), term, trunc, nxt if (term or trunc) else None)
        obs[i] = env.reset() if (term or trunc) else nxt
print("stored transitions", len(replay))

# New transitions get the largest priority seen so far; after an update the
# sampling mass follows |td| ** alpha.
idx, batch, weights = replay.sample(8, beta=0.4)
print("sampled", idx, "states", batch.states.shape, "horizons", batch.horizons)
replay.update_priorities(idx, np.linspace(0.1, 5.0, 8))
probs = replay.probabilities()
print("probability of the updated slots", np.round(probs[idx] * len(replay), 3), "x uniform")
idx, batch, weights = replay.sample(8, beta=1.0)
print("importance weights at beta=1 (max normalised to 1)", np.round(weights, 3))
