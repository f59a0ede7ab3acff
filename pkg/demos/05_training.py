"""
Training end to end
===================

The training loop steps all environments once, pushes the matured n-step
transitions, and after the replay warm-up makes exactly one gradient step per
vector step. Every evaluation appends a row to ``metrics.csv`` and writes a
checkpoint. Here a small agent learns the 3x3 grid (sticky actions on) and the final score
is compared with the exact optimum.
"""

from pathlib import Path

from btr.config import load_config
from btr.envs import GridPixelEnv, oracle_optimal_return
from btr.orchestrator import evaluate, env_factory_for, read_csv, run_training
from btr.plotting import diagnostics, learning_curve

here = Path(__file__).parent
out = here / "out" / "grid3"
cfg = load_config(here.parent / "configs" / "toy.cfg", ["env_layout=grid3", "total_frames=16000", "eval_interval=4000"])
print(f"{cfg.env_layout}: {cfg.num_envs} envs, replay ratio {cfg.replay_ratio:.4f}, {cfg.total_frames} frames")

result = run_training(cfg, out)
s = result.state
print(f"frames {s.frame_count}, gradient steps {s.grad_step_count}, warm-up frames {s.warmup_frames}, "
      f"episodes {s.episodes}")
# one gradient step per vector step once the warm-up is over
assert s.grad_step_count * cfg.num_envs + s.warmup_frames == s.frame_count

for row in read_csv(out / "metrics.csv"):
    print(f"frame {row['frame']:>6.0f}  mean {row['mean']:+.3f}  iqm {row['iqm']:+.3f} "
          f"[{row['ci_low']:+.3f}, {row['ci_high']:+.3f}]  epsilon {row['epsilon']:.3f}")

best = oracle_optimal_return(GridPixelEnv.from_config(cfg, seed=0)).undiscounted
scores = evaluate(result.learner.online, env_factory_for(cfg), 50, 0.0, seed=123)
print(f"greedy return over 50 episodes {sum(scores) / 50:.4f}, optimum {best:.4f}")

rows = {"grid3": read_csv(out / "metrics.csv")}
print("wrote", learning_curve(rows, out / "plots" / "learning_curve.svg"))
print("wrote", diagnostics(rows, out / "plots" / "diagnostics.svg"))
