"""Trainable patch descriptor: 1x1 channel reduction followed by residual channel attention."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError


def adaptive_kernel_size(channels: int, gamma: int = 2, b: int = 1) -> int:
    """Odd 1D kernel size nearest to log2(channels)/gamma + b/gamma.

    Exact halfway values go to the lower odd number; the result is at least 1.
    """
    if channels < 2:
        raise ValueError(f"channels must be >= 2, got {channels}")
    t = math.log2(channels) / gamma + b / gamma
    below = 2 * math.floor((t - 1) / 2) + 1
    k = below if t - below <= below + 2 - t else below + 2
    return max(1, k)


def reduce_channels(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel affine map ``weight @ x + bias``; ``weight`` is (D', C) or (D', C, 1, 1)."""
    w = weight.reshape(weight.shape[0], -1)
    if x.shape[-3] != w.shape[1]:
        raise ConfigError(f"descriptor expects {w.shape[1]} input channels, got {x.shape[-3]}")
    return F.conv2d(x if x.dim() == 4 else x.unsqueeze(0), w[:, :, None, None], bias).reshape(
        *x.shape[:-3], w.shape[0], *x.shape[-2:]
    )


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel max over space; on ties the gradient goes to the first maximum (row-major)."""
    flat = x.flatten(-2)
    idx = flat.argmax(dim=-1, keepdim=True)
    return flat.gather(-1, idx).squeeze(-1)


def channel_attention(r: Tensor, kernel: Tensor) -> Tensor:
    """sigmoid(conv1d(GMP(r)) + conv1d(GAP(r))) with one shared, bias-free kernel.

    ``r`` is (..., D', H, W); returns (..., D').
    """
    k = kernel.numel()
    lead = r.shape[:-3]
    gmp = global_max_pool(r).reshape(-1, 1, r.shape[-3])
    gap = r.mean(dim=(-2, -1)).reshape(-1, 1, r.shape[-3])
    w = kernel.reshape(1, 1, k)
    pad = (k - 1) // 2
    logits = F.conv1d(gmp, w, padding=pad) + F.conv1d(gap, w, padding=pad)
    return torch.sigmoid(logits).reshape(*lead, r.shape[-3])


def refine(r: Tensor, a: Tensor, epsilon: float) -> Tensor:
    """r + epsilon * (a * r), with ``a`` broadcast over the spatial grid."""
    if epsilon == 0:
        return r
    return r + epsilon * (a[..., None, None] * r)


def flatten_patches(refined: Tensor) -> Tensor:
    """(..., D', H, W) -> (..., H*W, D'); patch t sits at pixel (t // W, t % W)."""
    return refined.flatten(-2).transpose(-1, -2)


def unflatten_patches(patches: Tensor, h: int, w: int) -> Tensor:
    return patches.transpose(-1, -2).reshape(*patches.shape[:-2], patches.shape[-1], h, w)


class PatchDescriptor(nn.Module):
    def __init__(
        self,
        in_channels: int,
        d_prime: int = 448,
        epsilon: float = 0.1,
        gamma: int = 2,
        b: int = 1,
        seed: int = 0,
    ):
        super().__init__()
        if d_prime < 1:
            raise ConfigError(f"d_prime must be positive, got {d_prime}")
        if epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
        self.in_channels = in_channels
        self.d_prime = d_prime
        self.epsilon = float(epsilon)
        self.gamma = gamma
        self.b = b
        self.seed = seed
        self.kernel_size = adaptive_kernel_size(max(d_prime, 2), gamma, b)
        self.reduce = nn.Conv2d(in_channels, d_prime, kernel_size=1, bias=True)
        self.attn = nn.Conv1d(1, 1, self.kernel_size, padding=(self.kernel_size - 1) // 2, bias=False)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            nn.init.kaiming_normal_(self.reduce.weight, mode="fan_in", nonlinearity="relu", generator=gen)
            self.reduce.bias.zero_()
            # zero kernel: attention starts at a uniform 0.5
            self.attn.weight.zero_()

    def config(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "d_prime": self.d_prime,
            "epsilon": self.epsilon,
            "gamma": self.gamma,
            "b": self.b,
            "seed": self.seed,
            "kernel_size": self.kernel_size,
        }

    def reduced(self, x: Tensor) -> Tensor:
        return reduce_channels(x, self.reduce.weight, self.reduce.bias)

    def attention(self, r: Tensor) -> Tensor:
        return channel_attention(r, self.attn.weight)

    def refined(self, x: Tensor) -> Tensor:
        r = self.reduced(x)
        return refine(r, self.attention(r), self.epsilon)

    def forward(self, x: Tensor) -> Tensor:
        """(B, D + 2, H, W) spatial features -> (B, H*W, D') patch vectors."""
        return flatten_patches(self.refined(x))
