"""Evaluation statistics and the network diagnostics tracked during training.

Every function that touches a network runs it with zeroed noise under
``torch.no_grad`` and restores the noise buffers afterwards, so analysis is
read-only with respect to both parameters and sampled noise.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .network import BTRNetwork, NoisyLinear, as_tensor_obs, layer_weights, sample_taus

CHUNK = 256


# ---------------------------------------------------------------------------
# score statistics


def iqm(scores) -> float:
    """Mean of the middle half: drop ``floor(n/4)`` scores from each end."""
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    n = s.size
    if n == 0:
        raise ValueError("iqm of an empty score list")
    k = n // 4
    return float(s[k : n - k].mean())


def _iqm_rows(samples: np.ndarray) -> np.ndarray:
    s = np.sort(samples, axis=1)
    n = s.shape[1]
    k = n // 4
    return s[:, k : n - k].mean(axis=1)


def bootstrap_ci(scores, n_resamples: int = 2000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of the IQM."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("bootstrap of an empty score list")
    if n_resamples < 1000:
        raise ValueError("use at least 1000 bootstrap resamples")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    stats = np.empty(n_resamples)
    # resample in blocks to bound memory for long score lists
    block = max(1, 2_000_000 // s.size)
    for start in range(0, n_resamples, block):
        stop = min(n_resamples, start + block)
        idx = rng.integers(0, s.size, size=(stop - start, s.size))
        stats[start:stop] = _iqm_rows(s[idx])
    tail = 100 * (1 - level) / 2
    low, high = np.percentile(stats, [tail, 100 - tail])
    # guard the ci_low <= iqm <= ci_high invariant against float round-off
    centre = iqm(s)
    return float(min(low, centre)), float(max(high, centre))


def human_normalize(score, random_ref: float, human_ref: float):
    if human_ref == random_ref:
        raise ValueError("human and random reference scores must differ")
    return (np.asarray(score, dtype=np.float64) - random_ref) / (human_ref - random_ref)


def optimality_gap(normalized_scores) -> float:
    x = np.asarray(normalized_scores, dtype=np.float64)
    return float(np.mean(np.maximum(0.0, 1.0 - x)))


# ---------------------------------------------------------------------------
# probing networks


@contextlib.contextmanager
def zero_noise(net: torch.nn.Module):
    """Run ``net`` with noise disabled, restoring the sampled noise on exit."""
    layers = [m for m in net.modules() if isinstance(m, NoisyLinear)]
    saved = [(m.eps_in.clone(), m.eps_out.clone()) for m in layers]
    was_training = net.training
    try:
        for m in layers:
            m.zero_noise()
        net.eval()
        with torch.no_grad():
            yield net
    finally:
        for m, (ei, eo) in zip(layers, saved):
            m.eps_in.copy_(ei)
            m.eps_out.copy_(eo)
        net.train(was_training)


@dataclass
class StateProbe:
    """Frozen observation set plus the taus used whenever it is evaluated."""

    observations: np.ndarray  # uint8 [P, k, H, W]
    taus: np.ndarray  # float64 [P, N]
    seed: int

    def __len__(self) -> int:
        return len(self.observations)

    def check(self, net: BTRNetwork) -> None:
        shape = tuple(self.observations.shape[1:])
        if shape != tuple(net.spec.input_shape):
            raise ValueError(f"spec mismatch: probe observations {shape} vs network input {net.spec.input_shape}")
        if len(self) == 0:
            raise ValueError("probe is empty")


def build_probe(env_factory, size: int, seed: int, stack: int = 4, n_taus: int = 8) -> StateProbe:
    """Collect ``size`` stacked observations from seeded uniform-random rollouts."""
    from .envs import FrameStack

    rng = np.random.default_rng(seed)
    env = FrameStack(env_factory(int(rng.integers(2**31))), stack)
    obs = env.reset()
    out = np.empty((size,) + obs.shape, dtype=np.uint8)
    for i in range(size):
        out[i] = obs
        obs, _, term, trunc = env.step(int(rng.integers(env.num_actions)))
        if term or trunc:
            obs = env.reset()
    gen = torch.Generator().manual_seed(seed)
    taus = sample_taus(size, n_taus, gen, torch.float64).numpy()
    return StateProbe(out, taus, seed)


def _forward_chunks(net: BTRNetwork, obs: np.ndarray, taus: np.ndarray | None, acts: dict | None = None):
    dtype = next(net.parameters()).dtype
    outs = []
    chunk_acts: list[dict] = []
    for start in range(0, len(obs), CHUNK):
        o = as_tensor_obs(obs[start : start + CHUNK])
        t = None
        if net.spec.iqn and taus is not None:
            t = torch.as_tensor(taus[start : start + CHUNK], dtype=dtype)
        a = {} if acts is not None else None
        if net.spec.iqn:
            outs.append(net(o, t, a).mean(1))
        else:
            outs.append(net(o, None, a).mean(1))
        if a is not None:
            chunk_acts.append(a)
    if acts is not None:
        for key in chunk_acts[0]:
            acts[key] = [c[key] for c in chunk_acts]
    return torch.cat(outs).double().numpy()


def q_table(net: BTRNetwork, probe: StateProbe) -> np.ndarray:
    """Mean-over-tau Q values ``[P, A]`` with zero noise."""
    probe.check(net)
    with zero_noise(net):
        return _forward_chunks(net, probe.observations, probe.taus)


def features(net: BTRNetwork, probe: StateProbe) -> np.ndarray:
    """Trunk output after the maxpool (before the tau embedding) on the probe."""
    probe.check(net)
    with zero_noise(net):
        rows = [net.features(as_tensor_obs(probe.observations[s : s + CHUNK])) for s in range(0, len(probe), CHUNK)]
    return torch.cat(rows).double().numpy()


def greedy(q: np.ndarray) -> np.ndarray:
    """Argmax with ties broken by the lowest index."""
    return np.argmax(q, axis=-1)


def action_gap_from_q(q: np.ndarray) -> float:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] < 2:
        raise ValueError("action gap needs at least two actions")
    top2 = np.sort(q, axis=1)[:, -2:]
    return float(np.mean(top2[:, 1] - top2[:, 0]))


def action_gap(net: BTRNetwork, probe: StateProbe) -> float:
    if net.spec.num_actions < 2:
        raise ValueError("action gap needs at least two actions")
    return action_gap_from_q(q_table(net, probe))


def action_swaps_from_q(q: np.ndarray) -> float:
    a = greedy(np.asarray(q))
    if a.size < 2:
        raise ValueError("action swaps need a trajectory of at least two states")
    return float(100.0 * np.mean(a[1:] != a[:-1]))


def action_swaps(net: BTRNetwork, trajectory: StateProbe) -> float:
    """Percent of consecutive trajectory states whose greedy action differs."""
    return action_swaps_from_q(q_table(net, trajectory))


def policy_churn(net_before: BTRNetwork, net_after: BTRNetwork, probe: StateProbe) -> float:
    """Percent of probe states whose greedy action differs between two networks."""
    if net_before.spec != net_after.spec:
        raise ValueError("policy churn needs two networks with the same spec")
    a = greedy(q_table(net_before, probe))
    b = greedy(q_table(net_after, probe))
    return float(100.0 * np.mean(a != b))


def neuron_scores(net: BTRNetwork, probe: StateProbe) -> dict[str, np.ndarray]:
    """Normalized mean |activation| per neuron for every post-activation layer.

    Conv layers count one neuron per channel (averaged over positions).
    """
    probe.check(net)
    acts: dict = {}
    with zero_noise(net):
        _forward_chunks(net, probe.observations, probe.taus, acts)
    scores = {}
    for name, chunks in acts.items():
        total = None
        count = 0
        for a in chunks:
            a = a.double().abs()
            dims = [d for d in range(a.dim()) if d != 1]
            s = a.sum(dim=dims)
            total = s if total is None else total + s
            count += a.numel() // a.shape[1]
        mean_abs = (total / count).numpy()
        layer_mean = mean_abs.mean()
        scores[name] = mean_abs / layer_mean if layer_mean > 0 else np.zeros_like(mean_abs)
    return scores


def dormant_fraction(net: BTRNetwork, probe: StateProbe, threshold: float = 0.025) -> float:
    """Fraction of neurons whose normalized score is at most ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    if len(probe) == 0:
        raise ValueError("probe is empty")
    scores = neuron_scores(net, probe)
    dormant = sum(int(np.sum(s <= threshold)) for s in scores.values())
    total = sum(s.size for s in scores.values())
    return dormant / total


def srank(feature_matrix, delta: float = 0.01) -> int:
    """Smallest k whose top-k singular values hold a ``1 - delta`` share of the sum."""
    m = np.asarray(feature_matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ValueError("srank needs a 2-D matrix with at least one row")
    sv = np.linalg.svd(m, compute_uv=False)
    total = sv.sum()
    if total <= 0:
        return 0
    cum = np.cumsum(sv) / total
    # a small slack keeps exactly-representable thresholds (e.g. 9/10 vs 0.9) stable
    return int(np.searchsorted(cum, 1.0 - delta - 1e-12) + 1)


def weight_l2(net: torch.nn.Module) -> dict[str, float]:
    """L2 norm of each layer's weight (``mu`` for noisy layers) and of all of them."""
    out = {}
    sq = 0.0
    with torch.no_grad():
        for name, w in layer_weights(net).items():
            v = float(torch.sum(w.double() ** 2))
            out[name] = math.sqrt(v)
            sq += v
    out["total"] = math.sqrt(sq)
    return out


def robustness_eval(policy, env_factory, perturbation: dict, episodes: int, seed: int = 0, **kwargs):
    """Evaluate under forced random actions or brightness jitter.

    ``perturbation`` is ``{"epsilon": e}`` or ``{"brightness_jitter": j}``;
    both only affect evaluation.
    """
    from .orchestrator import evaluate

    if len(perturbation) != 1:
        raise ValueError("give exactly one perturbation")
    (kind, amount), = perturbation.items()
    if kind == "epsilon":
        if not 0.0 <= amount <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        return evaluate(policy, env_factory, episodes, amount, seed=seed, **kwargs)
    if kind == "brightness_jitter":
        if amount < 0:
            raise ValueError("brightness jitter must be >= 0")

        def jittered(s):
            env = env_factory(s)
            env.brightness_jitter = amount
            return env

        return evaluate(policy, jittered, episodes, kwargs.pop("eval_epsilon", 0.0), seed=seed, **kwargs)
    raise ValueError(f"unknown perturbation {kind!r}")


# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    frame: int
    scores: list = field(default_factory=list)
    episodes: int = 0
    iqm: float = math.nan
    ci_low: float = math.nan
    ci_high: float = math.nan
    loss: float = math.nan
    grad_norm: float = math.nan
    epsilon: float = math.nan
    action_gap: float = math.nan
    action_swap_pct: float = math.nan
    policy_churn_pct: float = math.nan
    dormant_pct: float = math.nan
    srank: float = math.nan
    weight_l2_by_layer: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores)) if self.scores else math.nan

    @property
    def l2_total(self) -> float:
        return self.weight_l2_by_layer.get("total", math.nan)

    def summarize_scores(self, n_resamples: int = 2000, seed: int = 0) -> None:
        if self.scores:
            self.iqm = iqm(self.scores)
            self.ci_low, self.ci_high = bootstrap_ci(self.scores, n_resamples, 0.95, seed)

    def row(self) -> dict:
        return {
            "frame": self.frame,
            "episodes": self.episodes,
            "mean": self.mean,
            "iqm": self.iqm,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "epsilon": self.epsilon,
            "action_gap": self.action_gap,
            "churn": self.policy_churn_pct,
            "dormant_pct": self.dormant_pct,
            "srank": self.srank,
            "l2_total": self.l2_total,
        }


def network_metrics(net: BTRNetwork, probe: StateProbe, threshold: float = 0.025) -> dict:
    """Action gap, swaps along the probe, dormant %, SRank and weight norms."""
    q = q_table(net, probe)
    return {
        "action_gap": action_gap_from_q(q),
        "action_swap_pct": action_swaps_from_q(q) if len(q) >= 2 else math.nan,
        "dormant_pct": 100.0 * dormant_fraction(net, probe, threshold),
        "srank": srank(features(net, probe)),
        "weight_l2_by_layer": weight_l2(net),
    }
