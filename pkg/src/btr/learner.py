"""Munchausen-IQN targets, quantile Huber loss and the gradient step."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import AgentConfig
from .network import as_tensor_obs, sample_taus
from .replay import TransitionBatch


@dataclass
class LossReport:
    scalar_loss: float
    per_sample_td: np.ndarray
    grad_norm_preclip: float


def soft_policy(q_values: torch.Tensor, tau: float) -> torch.Tensor:
    """Row-wise softmax of ``q / tau`` with max subtraction."""
    return torch.exp(log_soft_policy(q_values, tau))


def log_soft_policy(q_values: torch.Tensor, tau: float) -> torch.Tensor:
    z = (q_values - q_values.max(dim=-1, keepdim=True).values) / tau
    return z - torch.logsumexp(z, dim=-1, keepdim=True)


def munchausen_bonus(q_target_s: torch.Tensor, actions: torch.Tensor, cfg: AgentConfig) -> torch.Tensor:
    """``alpha * clip(tau * ln pi(a_t|s_t), l0, 0)`` with pi from the target net's mean Q."""
    log_pi = log_soft_policy(q_target_s, cfg.munchausen_tau)
    log_pi_a = log_pi.gather(1, actions.long().view(-1, 1)).squeeze(1)
    return cfg.munchausen_alpha * torch.clamp(cfg.munchausen_tau * log_pi_a, min=cfg.munchausen_l0, max=0.0)


def target_rule(cfg: AgentConfig) -> str:
    """Name of the bootstrap rule selected by the ablation flags."""
    kind = "munchausen" if cfg.use_munchausen else "double"
    return f"{kind}-{'quantile' if cfg.use_iqn else 'scalar'}"


def _batch_tensors(batch: TransitionBatch, dtype, device):
    states = as_tensor_obs(batch.states).to(device)
    next_states = as_tensor_obs(batch.next_states).to(device)
    actions = torch.as_tensor(batch.actions, dtype=torch.long, device=device)
    returns = torch.as_tensor(batch.returns, dtype=dtype, device=device)
    terminals = torch.as_tensor(batch.terminals, dtype=dtype, device=device)
    horizons = torch.as_tensor(batch.horizons, dtype=dtype, device=device)
    return states, actions, returns, next_states, terminals, horizons


def compute_targets(
    batch: TransitionBatch,
    online: nn.Module,
    target: nn.Module,
    cfg: AgentConfig,
    generator: torch.Generator | None = None,
    target_taus: torch.Tensor | None = None,
    online_taus: torch.Tensor | None = None,
) -> torch.Tensor:
    """Bootstrapped target quantiles, shape ``[B, N']``. Never carries gradient.

    Munchausen rule::

        R + alpha*clip(tau ln pi(a|s)) + (1-done) gamma^m sum_a pi(a|s') (z(s',a) - tau ln pi(a|s'))

    Without Munchausen the double-DQN rule is used: the online network picks
    ``a* = argmax_a Q(s', a)`` and the target network evaluates it.
    """
    dtype = next(target.parameters()).dtype
    device = next(target.parameters()).device
    states, actions, returns, next_states, terminals, horizons = _batch_tensors(batch, dtype, device)
    b = len(batch)
    n_target = cfg.iqn_taus if cfg.use_iqn else 1
    with torch.no_grad():
        if cfg.use_iqn and target_taus is None:
            target_taus = sample_taus(b, n_target, generator, dtype)
        discount = (1.0 - terminals) * cfg.discount**horizons
        if cfg.use_munchausen:
            obs = torch.cat([next_states, states])
            taus = torch.cat([target_taus, target_taus]) if target_taus is not None else None
            z = target(obs, taus)
            z_next, z_cur = z[:b], z[b:]
            log_pi_next = log_soft_policy(z_next.mean(1), cfg.munchausen_tau)
            pi_next = log_pi_next.exp()
            soft_value = (pi_next.unsqueeze(1) * (z_next - cfg.munchausen_tau * log_pi_next.unsqueeze(1))).sum(-1)
            bonus = munchausen_bonus(z_cur.mean(1), actions, cfg)
            return (returns + bonus).unsqueeze(1) + discount.unsqueeze(1) * soft_value
        if cfg.use_iqn and online_taus is None:
            online_taus = sample_taus(b, n_target, generator, dtype)
        best = online(next_states, online_taus).mean(1).argmax(dim=1)
        z_next = target(next_states, target_taus)
        z_best = z_next.gather(2, best.view(b, 1, 1).expand(b, z_next.shape[1], 1)).squeeze(2)
        return returns.unsqueeze(1) + discount.unsqueeze(1) * z_best


def quantile_huber_loss(pred: torch.Tensor, target: torch.Tensor, taus: torch.Tensor | None, kappa: float):
    """Per-sample quantile Huber loss and mean absolute pairwise TD.

    ``pred`` is ``[B, N]``, ``target`` is ``[B, N']`` and ``taus`` the ``[B, N]``
    fractions that produced ``pred``. Per sample the loss is
    ``(1/N') sum_j sum_i |tau_i - 1{d_ij < 0}| * huber(d_ij) / kappa`` with
    ``d_ij = target_j - pred_i``. When ``taus`` is None the plain Huber loss of
    the (single) pair is returned instead.
    """
    delta = target.unsqueeze(1) - pred.unsqueeze(2)
    abs_delta = delta.abs()
    huber = torch.where(abs_delta <= kappa, 0.5 * delta**2, kappa * (abs_delta - 0.5 * kappa))
    td = abs_delta.detach().mean(dim=(1, 2))
    if taus is None:
        return huber.mean(dim=(1, 2)), td
    weight = (taus.unsqueeze(2) - (delta.detach() < 0).to(pred.dtype)).abs()
    per_sample = (weight * huber / kappa).sum(dim=1).mean(dim=1)
    return per_sample, td


def td_loss(
    online: nn.Module,
    target: nn.Module,
    batch: TransitionBatch,
    cfg: AgentConfig,
    weights=None,
    generator: torch.Generator | None = None,
    taus: torch.Tensor | None = None,
    target_taus: torch.Tensor | None = None,
    online_taus: torch.Tensor | None = None,
):
    """Weighted batch loss; returns ``(loss, per_sample_loss, per_sample_td)``."""
    dtype = next(online.parameters()).dtype
    device = next(online.parameters()).device
    targets = compute_targets(batch, online, target, cfg, generator, target_taus, online_taus)
    b = len(batch)
    if cfg.use_iqn and taus is None:
        taus = sample_taus(b, cfg.iqn_taus, generator, dtype)
    states = as_tensor_obs(batch.states).to(device)
    actions = torch.as_tensor(batch.actions, dtype=torch.long, device=device)
    z = online(states, taus if cfg.use_iqn else None)
    pred = z.gather(2, actions.view(b, 1, 1).expand(b, z.shape[1], 1)).squeeze(2)
    per_sample, td = quantile_huber_loss(pred, targets, taus if cfg.use_iqn else None, cfg.huber_kappa)
    if weights is not None:
        w = torch.as_tensor(weights, dtype=per_sample.dtype, device=device)
        loss = (w * per_sample).mean()
    else:
        loss = per_sample.mean()
    return loss, per_sample, td


def clip_grad_norm(parameters, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in parameters if p.grad is not None]
    if not grads:
        return 0.0
    total = float(torch.sqrt(sum((g.detach().double() ** 2).sum() for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


def beta_at(frame: int, cfg: AgentConfig) -> float:
    """Importance-sampling exponent, linear from start to end over the run."""
    if cfg.total_frames <= 0:
        return cfg.per_beta_end
    frac = min(1.0, max(0.0, frame / cfg.total_frames))
    return cfg.per_beta_start + frac * (cfg.per_beta_end - cfg.per_beta_start)


class Learner:
    """Owns the online/target pair, the optimizer and the sync counter."""

    def __init__(self, online: nn.Module, cfg: AgentConfig, generator: torch.Generator | None = None):
        self.online = online
        self.cfg = cfg
        self.generator = generator if generator is not None else torch.Generator().manual_seed(cfg.master_seed)
        self.target = copy.deepcopy(online)
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.optimizer = torch.optim.Adam(
            online.parameters(),
            lr=cfg.learning_rate,
            betas=(cfg.adam_beta1, cfg.adam_beta2),
            eps=cfg.adam_eps,
        )
        self.steps_since_sync = 0
        self.grad_steps = 0

    def sync_target(self) -> None:
        self.target.load_state_dict(self.online.state_dict())
        self.steps_since_sync = 0

    def _prepare_networks(self) -> None:
        self.online.train()
        if hasattr(self.online, "power_iteration"):
            self.online.power_iteration()
        if hasattr(self.online, "sample_noise"):
            self.online.sample_noise(self.generator)
            self.target.sample_noise(self.generator)

    def update(self, batch: TransitionBatch, weights=None) -> LossReport:
        """One optimizer step on ``batch`` (no replay interaction)."""
        self._prepare_networks()
        loss, _, td = td_loss(self.online, self.target, batch, self.cfg, weights, self.generator)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        params = [p for p in self.online.parameters() if p.requires_grad]
        norm = clip_grad_norm(params, self.cfg.grad_clip_max_norm)
        self.optimizer.step()
        self.grad_steps += 1
        self.steps_since_sync += 1
        if self.steps_since_sync >= self.cfg.target_update_period:
            self.sync_target()
        return LossReport(float(loss.detach()), td.cpu().numpy().astype(np.float64), norm)

    def train_step(self, replay, frame: int) -> LossReport:
        """Sample, update, and feed the new TD magnitudes back as priorities."""
        cfg = self.cfg
        idx, batch, weights = replay.sample(cfg.effective_batch_size, beta_at(frame, cfg))
        use_weights = weights if (cfg.use_per and cfg.per_use_is_weights) else None
        report = self.update(batch, use_weights)
        if cfg.use_per:
            replay.update_priorities(idx, report.per_sample_td)
        return report

    def clone(self) -> "Learner":
        """Independent copy (networks, optimizer state, counters) for what-if steps."""
        other = Learner.__new__(Learner)
        other.cfg = self.cfg
        other.online = copy.deepcopy(self.online)
        other.target = copy.deepcopy(self.target)
        other.optimizer = torch.optim.Adam(
            other.online.parameters(),
            lr=self.cfg.learning_rate,
            betas=(self.cfg.adam_beta1, self.cfg.adam_beta2),
            eps=self.cfg.adam_eps,
        )
        other.optimizer.load_state_dict(copy.deepcopy(self.optimizer.state_dict()))
        other.generator = torch.Generator().set_state(self.generator.get_state())
        other.steps_since_sync = self.steps_since_sync
        other.grad_steps = self.grad_steps
        return other
