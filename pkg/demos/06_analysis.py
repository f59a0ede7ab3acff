"""
Measuring a trained agent
=========================

Score statistics (interquartile mean with bootstrap intervals, human
normalisation, optimality gap) and the network diagnostics tracked during
training: action gap, action swaps, policy churn, dormant neurons, feature
rank and weight norms, plus robustness to forced random actions and
brightness jitter. Run ``05_training.py`` first; this script reads its
checkpoints.
"""

import sys
from pathlib import Path

import numpy as np

from btr import analysis
from btr.config import loads_config
from btr.orchestrator import env_factory_for, load_network

run = Path(__file__).parent / "out" / "grid3"
ckpts = sorted(run.glob("ckpt_*.bin"), key=lambda p: int(p.stem.split("_")[1]))
if not ckpts:
    sys.exit("no checkpoints yet: run demos/05_training.py first")

# Score statistics on a toy score list.
scores = [0.2, 0.9, 0.95, 0.96, 0.96, 0.97, 0.4, 0.96]
lo, hi = analysis.bootstrap_ci(scores, seed=0)
print(f"iqm {analysis.iqm(scores):.3f}, 95% bootstrap interval [{lo:.3f}, {hi:.3f}]")
print("human-normalised Phoenix score", round(float(analysis.human_normalize(427481, 761, 7243)), 2))
print("optimality gap of (0.5, 1.5)", analysis.optimality_gap([0.5, 1.5]))

# One fixed probe set of observations from random rollouts, shared by every checkpoint.
first, meta = load_network(ckpts[0])
cfg = loads_config(meta["config"])
factory = env_factory_for(cfg)
probe = analysis.build_probe(factory, 500, seed=7, stack=cfg.frame_stack)

print("\nframe   gap    swaps%  dormant%  dormant%(0)  srank  weight L2")
nets = []
for path in ckpts:
    net, meta = load_network(path)
    nets.append(net)
    m = analysis.network_metrics(net, probe)
    zero = 100 * analysis.dormant_fraction(net, probe, 0.0)
    print(f"{meta['train_state']['frame_count']:>6}  {m['action_gap']:.4f}  {m['action_swap_pct']:6.2f}  "
          f"{m['dormant_pct']:7.2f}  {zero:10.2f}  {m['srank']:5d}  {m['weight_l2_by_layer']['total']:.3f}")

# Churn between consecutive checkpoints (the training loop records the churn of a
# single extra gradient step in its CSV instead).
for a, b, pa, pb in zip(nets, nets[1:], ckpts, ckpts[1:]):
    print(f"greedy actions changed {pa.stem} -> {pb.stem}: {analysis.policy_churn(a, b, probe):.1f}%")

# Robustness of the final agent.
final = nets[-1]
for eps in (0.0, 0.1, 0.5, 1.0):
    s = analysis.robustness_eval(final, factory, {"epsilon": eps}, 100, seed=1)
    print(f"forced random actions {eps:.1f}: mean return {np.mean(s):+.3f}")
s = analysis.robustness_eval(final, factory, {"brightness_jitter": 0.1}, 100, seed=1)
print(f"brightness jitter 0.1: mean return {np.mean(s):+.3f}")
