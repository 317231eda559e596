"""Small conditional denoiser for masked image generation.

A three-level U-Net (32 -> 16 -> 8) predicting noise from the noisy latent,
the masked input, the mask itself, a prompt embedding, and the timestep.
Conditioning enters through feature-wise modulation (per-block scale/shift
from a shared embedding of timestep and prompt).

The timestep is consumed as normalized time u = t/T, so checkpoints remain
meaningful when the step count of the schedule changes: u indexes the same
underlying noise curve regardless of T.
"""

from __future__ import annotations

import math

import torch
from torch import nn


class TimeFeatures(nn.Module):
    """Sinusoidal features of normalized time u in (0, 1]."""

    def __init__(self, dim: int = 32):
        super().__init__()
        half = dim // 2
        freqs = torch.exp(torch.linspace(math.log(1.0), math.log(1000.0), half))
        self.register_buffer("freqs", freqs)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        ang = u[:, None] * self.freqs[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class FilmResBlock(nn.Module):
    """Residual conv block with scale/shift conditioning."""

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.film = nn.Linear(cond_dim, 2 * channels)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        scale, shift = self.film(cond)[:, :, None, None].chunk(2, dim=1)
        y = self.conv1(torch.nn.functional.silu(self.norm1(h)))
        y = y * (1.0 + scale) + shift
        y = self.conv2(torch.nn.functional.silu(self.norm2(y)))
        return h + y


class CondUNet(nn.Module):
    """Conditional noise predictor: (x_t, x_masked, m, c, u) -> eps_hat.

    Input channels: 3 (noisy latent) + 3 (masked input) + 1 (mask).
    Output matches the latent shape. Deterministic given parameters.
    """

    def __init__(self, prompt_dim: int = 32, base: int = 32, cond_dim: int = 128):
        super().__init__()
        c1, c2, c3 = base, base * 2, base * 3
        self.time_feats = TimeFeatures(32)
        self.cond_mlp = nn.Sequential(
            nn.Linear(32 + prompt_dim, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim)
        )
        self.stem = nn.Conv2d(7, c1, 3, padding=1)
        self.enc1 = FilmResBlock(c1, cond_dim)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = FilmResBlock(c2, cond_dim)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.mid = FilmResBlock(c3, cond_dim)
        self.up2 = nn.Conv2d(c3, c2, 3, padding=1)
        self.fuse2 = nn.Conv2d(2 * c2, c2, 3, padding=1)
        self.dec2 = FilmResBlock(c2, cond_dim)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.fuse1 = nn.Conv2d(2 * c1, c1, 3, padding=1)
        self.dec1 = FilmResBlock(c1, cond_dim)
        self.out_norm = nn.GroupNorm(8, c1)
        self.out_conv = nn.Conv2d(c1, 3, 3, padding=1)

    def forward(
        self,
        x_t: torch.Tensor,
        x_masked: torch.Tensor,
        m: torch.Tensor,
        c: torch.Tensor,
        t_norm: torch.Tensor,
    ) -> torch.Tensor:
        cond = self.cond_mlp(torch.cat([self.time_feats(t_norm), c], dim=1))
        h1 = self.enc1(self.stem(torch.cat([x_t, x_masked, m], dim=1)), cond)
        h2 = self.enc2(self.down1(h1), cond)
        h3 = self.mid(self.down2(h2), cond)
        u2 = torch.nn.functional.interpolate(h3, scale_factor=2, mode="nearest")
        u2 = self.dec2(self.fuse2(torch.cat([self.up2(u2), h2], dim=1)), cond)
        u1 = torch.nn.functional.interpolate(u2, scale_factor=2, mode="nearest")
        u1 = self.dec1(self.fuse1(torch.cat([self.up1(u1), h1], dim=1)), cond)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(u1)))


class ProbeGenerator(nn.Module):
    """~100-parameter denoiser used for finite-difference gradient checks."""

    def __init__(self):
        super().__init__()
        self.mix = nn.Conv2d(7, 3, 1)
        self.conv = nn.Conv2d(3, 3, 3, padding=1)

    def forward(self, x_t, x_masked, m, c, t_norm):
        h = self.mix(torch.cat([x_t, x_masked, m], dim=1))
        return self.conv(torch.tanh(h))

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())
