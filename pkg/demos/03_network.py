"""
The quantile network
====================

Three Impala residual stages (spectrally normalized residual convolutions),
an adaptive max-pool that fixes the feature grid regardless of input size,
a cosine embedding of the quantile fraction tau, and noisy dueling heads.
"""

import torch

torch.set_grad_enabled(False)

from btr.network import NetworkSpec, build_network, count_parameters, sample_taus

atari = NetworkSpec((4, 84, 84), 18)
c = count_parameters(atari)
print(f"parameters without noise sigmas: {c['total_mu']:,}, of which linear layers {c['linear_mu']:,}")
print("feature length", c["feature_dim"])

# The pooled feature grid does not depend on the frame size, so neither do the heads.
wide = count_parameters(atari.with_input(140, 114))
print("140x114 input: feature length", wide["feature_dim"], "head parameters equal:",
      wide["heads_mu"] == c["heads_mu"])

no_pool = count_parameters(NetworkSpec((4, 84, 84), 18, maxpool=False))
print(f"without the adaptive pool: {no_pool['total_mu']:,} parameters "
      f"({100 * c['total_mu'] / no_pool['total_mu']:.1f}% kept by pooling)")

# A small instance for the rest of the demo.
spec = NetworkSpec((4, 24, 24), 4, width_scale=1, maxpool_out=2, hidden=64, cos_embedding=32)
net = build_network(spec, seed=0)
obs = torch.randint(0, 256, (2, 4, 24, 24), dtype=torch.uint8)
taus = sample_taus(2, 8, torch.Generator().manual_seed(0))
print("quantiles", tuple(net(obs, taus).shape), "mean-Q", net.q_values(obs, taus))

# Spectral normalization keeps a persistent singular-vector estimate per conv;
# one power iteration per training step refines it. Convergence is slow for a
# kernel whose top two singular values are close, so a value slightly off 1 can remain.
net.power_iteration(100)
sig = [float(torch.linalg.svdvals(l.normalized_weight().detach().reshape(l.out_channels, -1))[0])
       for l in net.sn_layers()]
print(f"{len(sig)} normalized residual convs, top singular values {min(sig):.4f}..{max(sig):.4f}")

# Noisy layers: a fresh factorized noise sample changes the output, zero noise gives the mean map.
g = torch.Generator().manual_seed(1)
net.sample_noise(g)
a = net.q_values(obs, taus)
net.sample_noise(g)
b = net.q_values(obs, taus)
net.zero_noise()
print("two noise samples differ by", float((a - b).abs().max()))
