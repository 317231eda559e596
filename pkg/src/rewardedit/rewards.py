"""The three reward models and their training losses.

Two holistic scorers share one architecture (conv image encoder + prompt
pathway + fusion MLP -> scalar): one is trained for aesthetic preference,
one for image-text alignment. The third is a patch-level critic emitting
one real/fake logit per pixel (upsampled from patch logits); it doubles as
the adversarial discriminator during fine-tuning.

Preference losses are logistic ranking losses:

    L = -E[log sigmoid(score_pos - score_neg)]

and the critic trains with the per-pixel real/fake objective

    L_D = -E[log sigmoid(logit_real)] - E[log(1 - sigmoid(logit_fake))].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import PreferenceTriplet, AlignTriplet, TextEncoder


N_REGION_STATS = 12


def region_stats(x: torch.Tensor) -> torch.Tensor:
    """Fixed differentiable geometry summary of the off-background region.

    A soft foreground weight (distance from the border color) yields mass,
    centroid, normalized second/fourth moments, edge density, covariance-box
    fill, anisotropy, and angular harmonic magnitudes (k = 2, 3, 4). These
    make coarse shape identity nearly linear for the fusion head; a plain
    conv trunk under a ranking loss never develops them on its own.
    """
    B, _, h, w_ = x.shape
    border = torch.cat([x[:, :, 0, :], x[:, :, -1, :], x[:, :, :, 0], x[:, :, :, -1]], dim=2)
    bg = border.mean(dim=2)[:, :, None, None]
    w = torch.tanh(3.0 * ((x - bg).pow(2).sum(dim=1) + 1e-8).sqrt())
    yy, xx = torch.meshgrid(
        torch.linspace(-1, 1, h, dtype=x.dtype, device=x.device),
        torch.linspace(-1, 1, w_, dtype=x.dtype, device=x.device),
        indexing="ij",
    )
    yy, xx = yy[None], xx[None]
    m0 = w.mean((1, 2)) + 1e-6
    cy = (w * yy).mean((1, 2)) / m0
    cx = (w * xx).mean((1, 2)) / m0
    dy, dx = yy - cy[:, None, None], xx - cx[:, None, None]
    r2 = dy * dy + dx * dx
    myy = (w * dy * dy).mean((1, 2)) / m0 + 1e-6
    mxx = (w * dx * dx).mean((1, 2)) / m0 + 1e-6
    mxy = (w * dy * dx).mean((1, 2)) / m0
    m2 = myy + mxx
    m4 = (w * r2 * r2).mean((1, 2)) / m0 / (m2 * m2)
    gy = w[:, 1:, :] - w[:, :-1, :]
    gx = w[:, :, 1:] - w[:, :, :-1]
    edge = (gy.abs().mean((1, 2)) + gx.abs().mean((1, 2))) / m0.sqrt()
    fill = m0 / (4.0 * myy.sqrt() * mxx.sqrt())
    aniso = (myy - mxx).abs() / m2
    # angular harmonics via complex powers of the unit offset (no atan2: its
    # gradient blows up at the centroid)
    r = (r2 + 1e-8).sqrt()
    ck, sk = dx / r, dy / r
    harm = []
    for _ in range(3):  # k = 2, 3, 4
        ck, sk = ck * (dx / r) - sk * (dy / r), ck * (dy / r) + sk * (dx / r)
        hc = (w * ck).mean((1, 2)) / m0
        hs = (w * sk).mean((1, 2)) / m0
        harm.append((hc * hc + hs * hs + 1e-12).sqrt())
    return torch.stack([m0, cy, cx, myy / m2, mxy / m2, m4, edge, fill, aniso] + harm, dim=1)


class FusionScorer(nn.Module):
    """Image + prompt -> raw scalar score (higher = better).

    Three pathways feed the fusion head: a conv trunk pooled to a global
    feature, an embedded prompt, and projected region statistics. The
    multiplicative terms (trunk x prompt, stats x prompt) matter: additive
    image features cancel in score differences between two prompts, so they
    could never influence caption ranking.
    """

    def __init__(self, prompt_dim: int = 32, base: int = 32):
        super().__init__()
        self.image_enc = nn.Sequential(
            nn.Conv2d(3, base, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(base, base * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(base * 2, base * 4, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.prompt_enc = nn.Sequential(nn.Linear(prompt_dim, base * 2), nn.SiLU(), nn.Linear(base * 2, base * 4))
        self.stats_proj = nn.Sequential(nn.Linear(N_REGION_STATS, base * 2), nn.SiLU(), nn.Linear(base * 2, base * 4))
        self.head = nn.Sequential(nn.Linear(base * 16, base * 4), nn.SiLU(), nn.Linear(base * 4, 1))
        # affine output calibration, set once after preference training so the
        # score scale is O(1) when it later drives generator fine-tuning;
        # identity until calibrate() is called, and ranking-invariant
        self.register_buffer("score_mean", torch.tensor(0.0))
        self.register_buffer("score_scale", torch.tensor(1.0))

    def forward(self, c: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        img = self.image_enc(x)
        prm = self.prompt_enc(c)
        st = self.stats_proj(region_stats(x))
        feats = torch.cat([img, prm, img * prm, st * prm], dim=1)
        raw = self.head(feats).squeeze(-1)
        return (raw - self.score_mean) / self.score_scale

    def calibrate(self, scores: torch.Tensor) -> None:
        """Standardize future outputs against a reference score sample."""
        current = scores * self.score_scale + self.score_mean  # undo any prior calibration
        self.score_mean.fill_(current.mean())
        self.score_scale.fill_(current.std().clamp(min=1e-3))


class PixelCritic(nn.Module):
    """Patch-token backbone + per-token head, upsampled to one logit per pixel."""

    def __init__(self, patch: int = 4, width: int = 64):
        super().__init__()
        self.patch = patch
        self.backbone = nn.Sequential(
            nn.Conv2d(3, width, patch, stride=patch),
            nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Conv2d(width, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        logits = self.head(self.backbone(x))
        return F.interpolate(logits, scale_factor=self.patch, mode="nearest")


@dataclass
class RewardSuite:
    """The three scorers used during feedback fine-tuning."""

    aesthetic: FusionScorer
    alignment: FusionScorer
    coherence: PixelCritic

    def freeze_offline(self) -> None:
        """Aesthetic and alignment scorers stay fixed during fine-tuning."""
        for model in (self.aesthetic, self.alignment):
            model.requires_grad_(False)
            model.eval()


def score_aesthetic(model: FusionScorer, c: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Raw scalar score per batch item; rejects non-finite inputs."""
    if not torch.isfinite(x).all() or not torch.isfinite(c).all():
        raise ValueError("non-finite values in scorer input")
    return model(c, x)


def pairwise_logistic_loss(pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    """-mean log sigmoid(pos - neg); softplus keeps it stable for large gaps."""
    return F.softplus(neg - pos).mean()


def aesthetic_pref_loss(model: FusionScorer, c: torch.Tensor, x_p: torch.Tensor, x_n: torch.Tensor) -> torch.Tensor:
    """Preference loss over (prompt, preferred image, rejected image) batches."""
    if c.shape[0] == 0:
        raise ValueError("empty preference batch")
    return pairwise_logistic_loss(model(c, x_p), model(c, x_n))


def alignment_pref_loss(model: FusionScorer, c_p: torch.Tensor, c_n: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Same ranking loss with the roles swapped: two captions, one image."""
    if x.shape[0] == 0:
        raise ValueError("empty alignment batch")
    if torch.equal(c_p, c_n):
        warnings.warn("alignment batch has identical caption pairs; loss is ln 2 by construction")
    return pairwise_logistic_loss(model(c_p, x), model(c_n, x))


def coherence_score_map(model: PixelCritic, x: torch.Tensor) -> torch.Tensor:
    """Per-pixel raw logits, same spatial shape as the input."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    out = model(x)
    if out.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"logit map {tuple(out.shape)} does not match input {tuple(x.shape)}")
    return out[0, 0] if squeeze else out


def coherence_d_loss(model: PixelCritic, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Discriminator loss over all pixels of real and generated batches."""
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("empty real or fake batch")
    real_logits = model(real)
    fake_logits = model(fake)
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def masked_coherence_reward_loss(model: PixelCritic, y: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """-log sigmoid of the critic's mean logit over the generated region.

    Only the masked region carries generator output; unmasked pixels are
    copied from the input and are excluded from the reward.
    """
    logits = model(y)
    denom = m.sum(dim=(1, 2, 3)).clamp(min=1.0)
    mean_logit = (logits * m).sum(dim=(1, 2, 3)) / denom
    return F.softplus(-mean_logit).mean()


# ---------------------------------------------------------------------------
# offline reward-model training
# ---------------------------------------------------------------------------


def _triplet_tensors(triplets: list[PreferenceTriplet], encoder: TextEncoder):
    c = encoder.encode_batch([t.caption for t in triplets])
    x_p = torch.from_numpy(np.stack([t.x_p for t in triplets]))
    x_n = torch.from_numpy(np.stack([t.x_n for t in triplets]))
    return c, x_p, x_n


def _align_tensors(triplets: list[AlignTriplet], encoder: TextEncoder):
    c_p = encoder.encode_batch([t.c_p for t in triplets])
    c_n = encoder.encode_batch([t.c_n for t in triplets])
    x = torch.from_numpy(np.stack([t.image for t in triplets]))
    return c_p, c_n, x


def _rank_accuracy(pos: torch.Tensor, neg: torch.Tensor) -> float:
    return float((pos > neg).float().mean())


def train_preference_model(
    model: FusionScorer,
    triplets: list[PreferenceTriplet] | list[AlignTriplet],
    encoder: TextEncoder,
    mode: str,
    epochs: int = 8,
    batch_size: int = 64,
    lr: float = 1e-3,
    val_frac: float = 0.1,
    seed: int = 0,
) -> tuple[list[dict], float]:
    """Train a scorer on preference triplets; returns (history, held-out accuracy).

    mode "aesthetic": one caption, two images. mode "alignment": two
    captions, one image. The last val_frac of the (shuffled) triplets is
    held out for the accuracy measurement.
    """
    if mode not in ("aesthetic", "alignment"):
        raise ValueError(f"unknown mode {mode!r}")
    gen = torch.Generator().manual_seed(seed)
    order = torch.randperm(len(triplets), generator=gen).tolist()
    n_val = max(1, int(len(triplets) * val_frac))
    train_idx, val_idx = order[:-n_val], order[-n_val:]

    if mode == "aesthetic":
        a_all, b_all, im_all = _triplet_tensors(triplets, encoder)  # c, x_p, x_n
    else:
        a_all, b_all, im_all = _align_tensors(triplets, encoder)  # c_p, c_n, x

    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    for epoch in range(epochs):
        perm = torch.randperm(len(train_idx), generator=gen).tolist()
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, len(perm), batch_size):
            idx = [train_idx[i] for i in perm[start : start + batch_size]]
            if not idx:
                continue
            a, b, im = a_all[idx], b_all[idx], im_all[idx]
            if mode == "aesthetic":
                loss = aesthetic_pref_loss(model, a, b, im)
            else:
                loss = alignment_pref_loss(model, a, b, im)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            n_batches += 1
        history.append({"epoch": epoch, "loss": epoch_loss / max(1, n_batches)})

    model.eval()
    with torch.no_grad():
        # calibrate the score scale on the training pairs, then measure
        # held-out ranking accuracy (invariant under the affine calibration)
        ref = []
        for start in range(0, len(train_idx), 256):
            idx = train_idx[start : start + 256]
            a, b, im = a_all[idx], b_all[idx], im_all[idx]
            if mode == "aesthetic":
                ref.append(model(a, b))
                ref.append(model(a, im))
            else:
                ref.append(model(a, im))
                ref.append(model(b, im))
        model.calibrate(torch.cat(ref))
        a, b, im = a_all[val_idx], b_all[val_idx], im_all[val_idx]
        if mode == "aesthetic":
            acc = _rank_accuracy(model(a, b), model(a, im))
        else:
            acc = _rank_accuracy(model(a, im), model(b, im))
    model.train()
    return history, acc
