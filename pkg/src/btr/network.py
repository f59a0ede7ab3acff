"""Impala + IQN + noisy dueling Q-network and its ablation variants."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]  # (stacked frames, height, width)
    num_actions: int
    width_scale: int = 2
    trunk_kind: str = "impala"  # or "nature3conv"
    maxpool: bool = True
    maxpool_out: int = 6
    noisy: bool = True
    dueling: bool = True
    iqn: bool = True
    spectral_norm: bool = True
    layer_norm: bool = False
    hidden: int = 512
    cos_embedding: int = 64
    sigma0: float = 0.5

    @classmethod
    def from_config(cls, cfg, input_shape, num_actions: int) -> "NetworkSpec":
        return cls(
            input_shape=tuple(input_shape),
            num_actions=num_actions,
            width_scale=cfg.impala_width,
            trunk_kind="impala" if cfg.use_impala else "nature3conv",
            maxpool=cfg.use_maxpool,
            maxpool_out=cfg.maxpool_out,
            noisy=cfg.use_noisy,
            dueling=cfg.use_dueling,
            iqn=cfg.use_iqn,
            spectral_norm=cfg.use_spectral_norm,
            layer_norm=cfg.use_layer_norm,
            hidden=cfg.dueling_hidden,
            cos_embedding=cfg.iqn_cos_embedding,
            sigma0=cfg.noisy_sigma0,
        )

    def with_input(self, height: int, width: int) -> "NetworkSpec":
        return replace(self, input_shape=(self.input_shape[0], height, width))


# ---------------------------------------------------------------------------
# building blocks


def adaptive_maxpool(features: torch.Tensor, out: int) -> torch.Tensor:
    """Max over windows ``[floor(i*H/out), ceil((i+1)*H/out))`` per output cell.

    Works on ``[C, H, W]`` or ``[B, C, H, W]``; refuses to upsample.
    """
    h, w = features.shape[-2:]
    if h < out or w < out:
        raise ValueError(f"adaptive maxpool needs spatial size >= {out}, got {h}x{w}")
    return F.adaptive_max_pool2d(features, out)


class AdaptiveMaxPool(nn.Module):
    def __init__(self, out: int):
        super().__init__()
        self.out = out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return adaptive_maxpool(x, self.out)


def _scaled_noise(size: int, generator: torch.Generator | None, device, dtype) -> torch.Tensor:
    x = torch.randn(size, generator=generator, dtype=dtype).to(device)
    return x.sign() * x.abs().sqrt()


class NoisyLinear(nn.Module):
    """Linear layer with factorized Gaussian parameter noise.

    Effective weight is ``mu + sigma * outer(f(eps_out), f(eps_in))`` with
    ``f(x) = sign(x) sqrt|x|``. With zeroed noise the layer is exactly the
    ``mu`` linear map.
    """

    def __init__(self, in_features: int, out_features: int, sigma0: float = 0.5):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.sigma0 = sigma0
        self.weight_mu = nn.Parameter(torch.empty(out_features, in_features))
        self.weight_sigma = nn.Parameter(torch.empty(out_features, in_features))
        self.bias_mu = nn.Parameter(torch.empty(out_features))
        self.bias_sigma = nn.Parameter(torch.empty(out_features))
        self.register_buffer("eps_in", torch.zeros(in_features))
        self.register_buffer("eps_out", torch.zeros(out_features))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        bound = 1.0 / math.sqrt(self.in_features)
        nn.init.uniform_(self.weight_mu, -bound, bound)
        nn.init.uniform_(self.bias_mu, -bound, bound)
        nn.init.constant_(self.weight_sigma, self.sigma0 / math.sqrt(self.in_features))
        nn.init.constant_(self.bias_sigma, self.sigma0 / math.sqrt(self.in_features))

    @torch.no_grad()
    def sample_noise(self, generator: torch.Generator | None = None) -> None:
        dev, dt = self.eps_in.device, self.eps_in.dtype
        self.eps_in.copy_(_scaled_noise(self.in_features, generator, dev, dt))
        self.eps_out.copy_(_scaled_noise(self.out_features, generator, dev, dt))

    @torch.no_grad()
    def zero_noise(self) -> None:
        self.eps_in.zero_()
        self.eps_out.zero_()

    def effective_weight(self) -> torch.Tensor:
        return self.weight_mu + self.weight_sigma * torch.outer(self.eps_out, self.eps_in)

    def effective_bias(self) -> torch.Tensor:
        return self.bias_mu + self.bias_sigma * self.eps_out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.effective_weight(), self.effective_bias())


def spectral_normalize_step(weight: torch.Tensor, u: torch.Tensor, eps: float = 1e-12):
    """One power iteration on ``weight`` viewed as ``(out, -1)``.

    Returns ``(weight / sigma, u, v, sigma)`` where ``u``/``v`` are the updated
    unit singular-vector estimates and ``sigma = u^T W v``.
    """
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        v = F.normalize(mat.t() @ u, dim=0, eps=eps)
        u = F.normalize(mat @ v, dim=0, eps=eps)
    sigma = torch.dot(u, mat @ v).clamp_min(eps)
    return weight / sigma, u, v, sigma


class SNConv2d(nn.Conv2d):
    """Conv2d whose kernel is divided by a power-iteration estimate of its top singular value.

    The raw kernel stays the trainable parameter; ``u``/``v`` persist across
    calls and are advanced by :meth:`power_iteration` (once per training step).
    Construction runs ``init_iters`` warm-up iterations, as torch's own
    spectral-norm parametrization does.
    """

    init_iters = 15

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        out = self.weight.shape[0]
        rest = self.weight[0].numel()
        self.register_buffer("sn_u", F.normalize(torch.randn(out), dim=0))
        self.register_buffer("sn_v", torch.zeros(rest))
        self.power_iteration(self.init_iters)

    @torch.no_grad()
    def power_iteration(self, steps: int = 1) -> None:
        u = self.sn_u
        v = self.sn_v
        for _ in range(steps):
            _, u, v, _ = spectral_normalize_step(self.weight, u)
        self.sn_u.copy_(u)
        self.sn_v.copy_(v)

    def sigma(self) -> torch.Tensor:
        mat = self.weight.reshape(self.weight.shape[0], -1)
        return torch.dot(self.sn_u, mat @ self.sn_v).clamp_min(1e-12)

    def normalized_weight(self) -> torch.Tensor:
        return self.weight / self.sigma()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._conv_forward(x, self.normalized_weight(), self.bias)


def _conv3x3(cin: int, cout: int, sn: bool) -> nn.Conv2d:
    cls = SNConv2d if sn else nn.Conv2d
    return cls(cin, cout, kernel_size=3, stride=1, padding=1)


class ResidualUnit(nn.Module):
    def __init__(self, channels: int, sn: bool):
        super().__init__()
        self.conv0 = _conv3x3(channels, channels, sn)
        self.conv1 = _conv3x3(channels, channels, sn)

    def forward(self, x: torch.Tensor, acts: dict | None = None, name: str = "") -> torch.Tensor:
        h = self.conv0(F.relu(x))
        h = F.relu(h)
        if acts is not None:
            acts[name] = h
        return x + self.conv1(h)


def maxpool3s2(x: torch.Tensor) -> torch.Tensor:
    """3x3 max pool, stride 2, padding 1.

    Channels-last input makes the CPU kernel (forward and backward) several
    times faster; values are identical either way.
    """
    return F.max_pool2d(x.contiguous(memory_format=torch.channels_last), 3, 2, 1)


class ImpalaBlock(nn.Module):
    def __init__(self, cin: int, cout: int, sn: bool, layer_norm: bool):
        super().__init__()
        self.stem = nn.Conv2d(cin, cout, kernel_size=3, stride=1, padding=1)
        # GroupNorm with one group normalizes over (C, H, W) like a layer
        # norm but keeps per-channel affine terms, so it is resolution agnostic.
        self.norm = nn.GroupNorm(1, cout) if layer_norm else None
        self.res0 = ResidualUnit(cout, sn)
        self.res1 = ResidualUnit(cout, sn)

    def forward(self, x, acts=None, name=""):
        x = self.stem(x)
        if self.norm is not None:
            x = self.norm(x)
        x = maxpool3s2(x)
        x = self.res0(x, acts, f"{name}.res0")
        return self.res1(x, acts, f"{name}.res1")


class ImpalaTrunk(nn.Module):
    def __init__(self, in_channels: int, width: int, sn: bool, layer_norm: bool):
        super().__init__()
        chans = [16 * width, 32 * width, 32 * width]
        blocks = []
        cin = in_channels
        for c in chans:
            blocks.append(ImpalaBlock(cin, c, sn, layer_norm))
            cin = c
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = cin

    def forward(self, x, acts=None):
        x = x.contiguous(memory_format=torch.channels_last)
        for i, block in enumerate(self.blocks):
            x = block(x, acts, f"trunk.block{i}")
        x = F.relu(x)
        if acts is not None:
            acts["trunk.out"] = x
        return x


class NatureTrunk(nn.Module):
    def __init__(self, in_channels: int, layer_norm: bool = False):
        super().__init__()
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(in_channels, 32, kernel_size=8, stride=4),
                nn.Conv2d(32, 64, kernel_size=4, stride=2),
                nn.Conv2d(64, 64, kernel_size=3, stride=1),
            ]
        )
        self.out_channels = 64

    def forward(self, x, acts=None):
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(x))
            if acts is not None:
                acts[f"trunk.conv{i}" if i < 2 else "trunk.out"] = x
        return x


class CosineEmbedding(nn.Module):
    """``ReLU(Linear(cos(pi * i * tau)))`` for ``i = 0 .. n-1``."""

    def __init__(self, n_cos: int, dim: int):
        super().__init__()
        self.n_cos = n_cos
        self.register_buffer("freqs", math.pi * torch.arange(n_cos, dtype=torch.float32))
        self.linear = nn.Linear(n_cos, dim)

    def forward(self, taus: torch.Tensor) -> torch.Tensor:
        cos = torch.cos(taus.unsqueeze(-1) * self.freqs.to(taus.dtype))
        return F.relu(self.linear(cos))


def _linear(cin: int, cout: int, noisy: bool, sigma0: float) -> nn.Module:
    return NoisyLinear(cin, cout, sigma0) if noisy else nn.Linear(cin, cout)


class Stream(nn.Module):
    def __init__(self, cin: int, hidden: int, cout: int, noisy: bool, sigma0: float, layer_norm: bool):
        super().__init__()
        self.fc = _linear(cin, hidden, noisy, sigma0)
        self.norm = nn.LayerNorm(hidden) if layer_norm else None
        self.out = _linear(hidden, cout, noisy, sigma0)

    def forward(self, x, acts=None, name=""):
        h = self.fc(x)
        if self.norm is not None:
            h = self.norm(h)
        h = F.relu(h)
        if acts is not None:
            acts[name] = h
        return self.out(h)


# ---------------------------------------------------------------------------


class BTRNetwork(nn.Module):
    """Quantile Q-network.

    ``forward(obs, taus)`` returns quantiles of shape ``[B, N, A]``. Without
    IQN the head is a plain Q-head and ``N`` is 1 (``taus`` is ignored).
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        c, h, w = spec.input_shape
        if spec.trunk_kind == "impala":
            self.trunk = ImpalaTrunk(c, spec.width_scale, spec.spectral_norm, spec.layer_norm)
        elif spec.trunk_kind == "nature3conv":
            self.trunk = NatureTrunk(c, spec.layer_norm)
        else:
            raise ValueError(f"unknown trunk {spec.trunk_kind!r}")
        self.pool = AdaptiveMaxPool(spec.maxpool_out) if spec.maxpool else None
        self.feature_dim = self._feature_dim(h, w)
        self.embedding = CosineEmbedding(spec.cos_embedding, self.feature_dim) if spec.iqn else None
        nA = spec.num_actions
        if spec.dueling:
            self.value = Stream(self.feature_dim, spec.hidden, 1, spec.noisy, spec.sigma0, spec.layer_norm)
            self.advantage = Stream(self.feature_dim, spec.hidden, nA, spec.noisy, spec.sigma0, spec.layer_norm)
        else:
            self.value = None
            self.advantage = Stream(self.feature_dim, spec.hidden, nA, spec.noisy, spec.sigma0, spec.layer_norm)

    def _trunk_out_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.spec.trunk_kind == "impala":
            for _ in range(3):
                h, w = (h + 1) // 2, (w + 1) // 2
        else:
            for k, s in ((8, 4), (4, 2), (3, 1)):
                h, w = (h - k) // s + 1, (w - k) // s + 1
        return h, w

    def _feature_dim(self, h: int, w: int) -> int:
        th, tw = self._trunk_out_hw(h, w)
        if th < 1 or tw < 1:
            raise ValueError(f"input {h}x{w} is too small for the {self.spec.trunk_kind} trunk")
        if self.pool is not None:
            if th < self.spec.maxpool_out or tw < self.spec.maxpool_out:
                raise ValueError(
                    f"input {h}x{w} gives a {th}x{tw} trunk output, smaller than the "
                    f"{self.spec.maxpool_out}x{self.spec.maxpool_out} maxpool"
                )
            th = tw = self.spec.maxpool_out
        return self.trunk.out_channels * th * tw

    # noise -------------------------------------------------------------------

    def noisy_layers(self):
        return [m for m in self.modules() if isinstance(m, NoisyLinear)]

    def sample_noise(self, generator: torch.Generator | None = None) -> None:
        for layer in self.noisy_layers():
            layer.sample_noise(generator)

    def zero_noise(self) -> None:
        for layer in self.noisy_layers():
            layer.zero_noise()

    def sn_layers(self):
        return [m for m in self.modules() if isinstance(m, SNConv2d)]

    def power_iteration(self, steps: int = 1) -> None:
        for layer in self.sn_layers():
            layer.power_iteration(steps)

    # forward -------------------------------------------------------------------

    def features(self, obs: torch.Tensor, acts: dict | None = None) -> torch.Tensor:
        """Flattened trunk output (after the adaptive maxpool when enabled)."""
        if obs.dim() != 4 or tuple(obs.shape[1:2]) != (self.spec.input_shape[0],):
            raise ValueError(
                f"expected observations [B, {self.spec.input_shape[0]}, H, W], got {tuple(obs.shape)}"
            )
        if obs.dtype == torch.uint8:
            obs = obs.to(self.trunk_dtype()) / 255.0
        x = self.trunk(obs, acts)
        if self.pool is not None:
            x = self.pool(x)
        x = x.flatten(1)
        if x.shape[1] != self.feature_dim:
            raise ValueError(
                f"trunk produced {x.shape[1]} features, network was built for {self.feature_dim}"
            )
        return x

    def trunk_dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def forward(self, obs: torch.Tensor, taus: torch.Tensor | None = None, acts: dict | None = None):
        phi = self.features(obs, acts)
        b = phi.shape[0]
        if self.embedding is not None:
            if taus is None or taus.dim() != 2 or taus.shape[0] != b:
                raise ValueError(f"expected taus [batch={b}, N]")
            n = taus.shape[1]
            psi = self.embedding(taus.to(phi.dtype))
            if acts is not None:
                acts["embedding"] = psi.reshape(b * n, -1)
            x = (phi.unsqueeze(1) * psi).reshape(b * n, -1)
        else:
            n = 1
            x = phi
        adv = self.advantage(x, acts, "head.advantage")
        if self.value is not None:
            val = self.value(x, acts, "head.value")
            q = val + adv - adv.mean(dim=1, keepdim=True)
        else:
            q = adv
        return q.reshape(b, n, -1)

    def q_values(self, obs: torch.Tensor, taus: torch.Tensor | None = None) -> torch.Tensor:
        """Mean over tau samples of the quantiles: ``[B, A]``."""
        return self.forward(obs, taus).mean(dim=1)


def sample_taus(batch: int, n: int, generator: torch.Generator | None = None, dtype=torch.float32):
    """I.i.d. uniform taus strictly inside (0, 1)."""
    t = torch.rand(batch, n, generator=generator, dtype=torch.float64)
    t = t.clamp(1e-6, 1 - 1e-6)
    return t.to(dtype)


def build_network(spec: NetworkSpec, seed: int | None = None) -> BTRNetwork:
    if seed is None:
        return BTRNetwork(spec)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return BTRNetwork(spec)


# ---------------------------------------------------------------------------
# parameter accounting


def _group_of(name: str) -> str:
    if name.startswith("trunk."):
        return "trunk"
    if name.startswith("embedding."):
        return "embedding"
    return "heads"


def count_parameters(spec: NetworkSpec) -> dict[str, int]:
    """Exact parameter counts by group.

    ``total_mu`` counts every parameter except the sigma tensors of noisy
    layers; ``linear_mu`` is the embedding plus the mu part of the heads.
    """
    net = BTRNetwork(spec)
    counts = {"trunk": 0, "embedding": 0, "heads_mu": 0, "heads_sigma": 0}
    for name, p in net.named_parameters():
        group = _group_of(name)
        if group == "heads":
            group = "heads_sigma" if name.endswith("_sigma") else "heads_mu"
        counts[group] += p.numel()
    counts["total_mu"] = counts["trunk"] + counts["embedding"] + counts["heads_mu"]
    counts["linear_mu"] = counts["embedding"] + counts["heads_mu"]
    counts["total_all"] = counts["total_mu"] + counts["heads_sigma"]
    counts["feature_dim"] = net.feature_dim
    return counts


def layer_weights(net: nn.Module) -> dict[str, torch.Tensor]:
    """Named weight matrices/kernels, using ``mu`` for noisy layers."""
    out = {}
    for name, module in net.named_modules():
        if isinstance(module, NoisyLinear):
            out[name] = module.weight_mu
        elif isinstance(module, (nn.Conv2d, nn.Linear)):
            out[name] = module.weight
    return out


def as_tensor_obs(obs) -> torch.Tensor:
    if isinstance(obs, torch.Tensor):
        return obs
    return torch.from_numpy(np.ascontiguousarray(obs))
