"""Logit-conditioned generator and projection discriminator.

The generator maps a logit vector ``z`` and a noise vector ``eps`` to an
image. ``eps`` is split into one chunk per conditioning site (the stem and
every residual block); each block's batch norms are modulated by the
logit embedding concatenated with that block's chunk. The discriminator
scores an (image, logit) pair as ``(w1 + W2 z)^T psi(image)``.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import (
    BatchNorm,
    ConditionalBatchNorm,
    SelfAttention,
    SNConv2d,
    SNLinear,
)


def noise_chunk_size(n_z, n_sites):
    return math.ceil(n_z / n_sites)


def split_noise(eps, n_sites):
    """Split (B, n_z) noise into ``n_sites`` equal chunks, zero-padding the last."""
    size = noise_chunk_size(eps.shape[1], n_sites)
    pad = size * n_sites - eps.shape[1]
    if pad:
        eps = F.pad(eps, (0, pad))
    return list(torch.split(eps, size, dim=1))


def project_score(psi, z, w1, W2):
    """Projection score ``(w1 + W2 z)^T psi`` for batched ``psi`` (B, n_d) and ``z`` (B, n_c)."""
    if psi.shape[-1] != w1.shape[-1] or W2.shape != (psi.shape[-1], z.shape[-1]):
        raise ValueError(
            f"dimension mismatch: psi {tuple(psi.shape)}, z {tuple(z.shape)}, "
            f"w1 {tuple(w1.shape)}, W2 {tuple(W2.shape)}"
        )
    return psi @ w1 + ((z @ W2.t()) * psi).sum(dim=-1)


class GBlock(nn.Module):
    """Residual upsampling block with three conditional batch norms."""

    def __init__(self, in_ch, out_ch, cond_dim, cond_hidden=128, bn_eps=1e-5):
        super().__init__()
        self.bn1 = ConditionalBatchNorm(in_ch, cond_dim, cond_hidden, bn_eps)
        self.conv1 = SNConv2d(in_ch, out_ch, 3, padding=1)
        self.bn2 = ConditionalBatchNorm(out_ch, cond_dim, cond_hidden, bn_eps)
        self.conv2 = SNConv2d(out_ch, out_ch, 3, padding=1)
        self.bn3 = ConditionalBatchNorm(out_ch, cond_dim, cond_hidden, bn_eps)
        self.conv3 = SNConv2d(out_ch, out_ch, 1)
        self.shortcut = SNConv2d(in_ch, out_ch, 1)

    def forward(self, x, c):
        h = F.interpolate(F.relu(self.bn1(x, c)), scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.conv2(F.relu(self.bn2(h, c)))
        h = self.conv3(F.relu(self.bn3(h, c)))
        return h + self.shortcut(F.interpolate(x, scale_factor=2, mode="nearest"))


class Generator(nn.Module):
    """``channels[0]`` is the width of the 4x4 seed; each further entry adds an
    upsampling block, so the output side is ``4 * 2**(len(channels) - 1)``."""

    def __init__(self, n_classes, n_z=120, channels=(256, 128, 64, 32), out_channels=3,
                 embed_dim=128, cond_hidden=128, attention_res=None, bn_eps=1e-5):
        super().__init__()
        if len(channels) < 2:
            raise ValueError("generator needs at least one upsampling block")
        self.n_classes = n_classes
        self.n_z = n_z
        self.channels = tuple(channels)
        self.n_blocks = len(channels) - 1
        self.n_sites = self.n_blocks + 1
        self.chunk = noise_chunk_size(n_z, self.n_sites)
        self.resolution = 4 * 2**self.n_blocks
        self.embed = nn.Linear(n_classes, embed_dim, bias=False) if embed_dim else None
        cond_dim = (embed_dim or n_classes) + self.chunk
        self.stem = SNLinear(self.chunk, 4 * 4 * channels[0])
        self.blocks = nn.ModuleList(
            GBlock(cin, cout, cond_dim, cond_hidden, bn_eps)
            for cin, cout in zip(channels[:-1], channels[1:])
        )
        self.attention = nn.ModuleDict()
        if attention_res is not None:
            for i in range(self.n_blocks):
                if 8 * 2**i == attention_res:
                    self.attention[str(i)] = SelfAttention(channels[i + 1])
        self.head_bn = BatchNorm(channels[-1], bn_eps)
        self.head_conv = SNConv2d(channels[-1], out_channels, 3, padding=1)

    def forward(self, z, eps):
        if z.shape[1] != self.n_classes or eps.shape[1] != self.n_z:
            raise ValueError(
                f"expected z width {self.n_classes} and noise width {self.n_z}, "
                f"got {z.shape[1]} and {eps.shape[1]}"
            )
        chunks = split_noise(eps, self.n_sites)
        e = self.embed(z) if self.embed is not None else z
        h = self.stem(chunks[0]).view(-1, self.channels[0], 4, 4)
        h = h.contiguous(memory_format=torch.channels_last)
        for i, block in enumerate(self.blocks):
            h = block(h, torch.cat([e, chunks[i + 1]], dim=1))
            if str(i) in self.attention:
                h = self.attention[str(i)](h)
        return torch.tanh(self.head_conv(F.relu(self.head_bn(h))))


class DBlock(nn.Module):
    def __init__(self, in_ch, out_ch, downsample=True, preactivation=True):
        super().__init__()
        self.conv1 = SNConv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = SNConv2d(out_ch, out_ch, 3, padding=1)
        self.downsample = downsample
        self.preactivation = preactivation
        self.learnable_sc = in_ch != out_ch or downsample
        if self.learnable_sc:
            self.shortcut = SNConv2d(in_ch, out_ch, 1)

    def _sc(self, x):
        if not self.learnable_sc:
            return x
        if self.preactivation:
            x = self.shortcut(x)
            return F.avg_pool2d(x, 2) if self.downsample else x
        x = F.avg_pool2d(x, 2) if self.downsample else x
        return self.shortcut(x)

    def forward(self, x):
        h = F.relu(x) if self.preactivation else x
        h = self.conv2(F.relu(self.conv1(h)))
        if self.downsample:
            h = F.avg_pool2d(h, 2)
        return h + self._sc(x)


class Discriminator(nn.Module):
    """Residual trunk with global sum pooling followed by a logit projection head.

    ``channels`` lists block widths; every block but the last halves the
    resolution, so a ``resolution`` input must satisfy
    ``resolution == 4 * 2**(len(channels) - 1)``.
    """

    def __init__(self, n_classes, in_channels=3, channels=(32, 64, 128, 128), attention_res=None):
        super().__init__()
        self.n_classes = n_classes
        self.in_channels = in_channels
        self.resolution = 4 * 2 ** (len(channels) - 1)
        blocks, res, cin = [], self.resolution, in_channels
        for i, cout in enumerate(channels):
            down = i < len(channels) - 1
            blocks.append(DBlock(cin, cout, downsample=down, preactivation=i > 0))
            res = res // 2 if down else res
            if attention_res is not None and res == attention_res and down:
                blocks.append(SelfAttention(cout))
            cin = cout
        self.trunk = nn.Sequential(*blocks)
        self.n_features = channels[-1]
        self.w1 = SNLinear(self.n_features, 1, bias=False)
        self.W2 = SNLinear(n_classes, self.n_features, bias=False)

    def features(self, x):
        if x.shape[1:] != (self.in_channels, self.resolution, self.resolution):
            raise ValueError(
                f"discriminator expects (C, H, W) = "
                f"{(self.in_channels, self.resolution, self.resolution)}, got {tuple(x.shape[1:])}"
            )
        return F.relu(self.trunk(x)).sum(dim=(2, 3))

    def forward(self, x, z):
        psi = self.features(x)
        return self.w1(psi).squeeze(1) + (self.W2(z) * psi).sum(dim=1)


def orthogonal_init(module):
    """Orthogonal init for convolution and linear weights (conditioning output
    layers keep their identity-preserving zero init)."""
    from .layers import ConditioningHead

    skip = {id(m.out) for m in module.modules() if isinstance(m, ConditioningHead)}
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)) and id(m) not in skip:
            nn.init.orthogonal_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
