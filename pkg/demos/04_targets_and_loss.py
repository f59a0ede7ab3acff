"""
Munchausen quantile targets and the quantile Huber loss
=======================================================

Targets add a scaled log-policy bonus to the reward and bootstrap from a
softmax-weighted, entropy-regularised value of the next state, all computed
from the target network. Predictions are fitted with an asymmetric Huber
loss over every pair of predicted and target quantiles.
"""

import numpy as np
import torch
import torch.nn as nn

from btr.config import AgentConfig
from btr.learner import Learner, compute_targets, munchausen_bonus, quantile_huber_loss, soft_policy
from btr.replay import TransitionBatch

torch.manual_seed(0)
cfg = AgentConfig()

# The soft policy is a temperature-scaled softmax of mean Q.
q = torch.tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
print("softmax at tau=1\n", soft_policy(q, 1.0))
print("tau=0.03 is almost greedy\n", soft_policy(q, 0.03))

# The bonus is alpha * clip(tau * ln pi(a|s), l0, 0): zero for the greedy action,
# never below alpha * l0.
uniform = torch.zeros(1, 4)
print("bonus under a uniform policy", float(munchausen_bonus(uniform, torch.tensor([0]), cfg)))
print("bonus for a very unlikely action", float(munchausen_bonus(torch.tensor([[0.0, 10.0]]), torch.tensor([0]), cfg)))


class Table(nn.Module):
    """Quantile table: state id in the first pixel, a per-state, per-action line in tau."""

    def __init__(self, states, actions):
        super().__init__()
        self.base = nn.Parameter(torch.randn(states, actions, dtype=torch.float64))
        self.slope = nn.Parameter(torch.rand(states, actions, dtype=torch.float64))

    def forward(self, obs, taus=None, acts=None):
        s = obs.reshape(len(obs), -1)[:, 0].long()
        return self.base[s][:, None, :] + (taus[:, :, None] - 0.5) * self.slope[s][:, None, :]


net = Table(3, 3)
batch = TransitionBatch(
    states=np.array([0, 1], dtype=np.uint8).reshape(2, 1, 1, 1),
    actions=np.array([2, 0]),
    returns=np.array([0.5, -1.0]),
    next_states=np.array([1, 2], dtype=np.uint8).reshape(2, 1, 1, 1),
    terminals=np.array([False, True]),
    horizons=np.array([3, 2]),
)
taus = torch.rand(2, 8, dtype=torch.float64)
t = compute_targets(batch, net, net, cfg, target_taus=taus)
print("target quantiles (the terminal row is flat: reward plus bonus only)\n", t.numpy().round(4))

# With no bonus and a vanishing temperature the rule becomes a hard max.
hard = cfg.replace(munchausen_alpha=0.0, munchausen_tau=1e-6)
with torch.no_grad():
    z = net(torch.from_numpy(batch.next_states), taus)
greedy = z.mean(1).argmax(1)
ref = batch.returns[0] + cfg.discount**3 * z[0, :, greedy[0]]
print("hard-max limit, max difference", float((compute_targets(batch, net, net, hard, target_taus=taus)[0] - ref).abs().max()))

# One pair with error 0.5 at tau=0.5: |0.5 - 0| * 0.5 * 0.5**2 = 0.0625.
loss, td = quantile_huber_loss(torch.tensor([[0.0]]), torch.tensor([[0.5]]), torch.tensor([[0.5]]), 1.0)
print("single-pair loss", float(loss[0]))

# A few optimizer steps on the batch: Adam, gradient clipping at norm 10, target sync.
learner = Learner(net, cfg.replace(learning_rate=1e-2, target_update_period=50), torch.Generator().manual_seed(0))
for step in range(201):
    report = learner.update(batch)
    if step % 50 == 0:
        print(f"step {step}: loss {report.scalar_loss:.4f} grad norm {report.grad_norm_preclip:.3f}")
