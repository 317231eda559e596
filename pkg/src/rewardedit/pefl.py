"""Staged perceptual-feedback fine-tuning of the masked-image generator.

One optimization step walks three stages:

1. entry: skip the heavy-noise steps by diffusing the masked input straight
   to a fixed step T1 (or, with some probability, starting from pure noise);
2. rollout: deterministic denoising without gradient from T1 down to a
   randomly drawn step t' in [1, T2];
3. feedback: a single gradient-carrying denoiser evaluation at t' produces
   the direct clean prediction, which is composed into the unmasked input
   and scored by the reward models; pixel and feature regularizers anchor
   it to the source image.

The per-pixel coherence critic is trained online, alternating with the
generator, as the adversarial half of the objective:

    L_G = (l_aesthetic + l_alignment + adv_weight * l_coherence)
          + eta * (l_reg + l_vgg)
    L_D = -E[log sigmoid(critic(real))] - E[log(1 - sigmoid(critic(fake)))]

Progressive acceleration re-runs the same procedure with a smaller
(T, T1, T2) triple, inheriting parameters from the previous phase.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, asdict

import torch
from torch import nn
from torch.nn import functional as F

from .diffusion import NoiseSchedule, compose_masked, ddim_step, forward_diffuse, predict_x0
from .rewards import RewardSuite, coherence_d_loss, masked_coherence_reward_loss

PHASE_SCHEDULES = {1: (20, 15, 10), 2: (8, 6, 3)}


class NonFiniteLossError(RuntimeError):
    """A loss or gradient stopped being finite; carries step diagnostics."""


@dataclass(frozen=True)
class StageSchedule:
    """(T, T1, T2): total steps, fixed noisy entry step, top of the t' range."""

    T: int
    T1: int
    T2: int

    def __post_init__(self):
        if not 1 <= self.T2 < self.T1 < self.T:
            raise ValueError(f"need 1 <= T2 < T1 < T, got {self}")


def progressive_phase(phase: int) -> StageSchedule:
    """Stage schedule for the two acceleration phases: (20,15,10) then (8,6,3)."""
    if phase not in PHASE_SCHEDULES:
        raise ValueError(f"phase must be 1 or 2, got {phase}")
    return StageSchedule(*PHASE_SCHEDULES[phase])


@dataclass
class PeflConfig:
    """Weights and optimizer settings for feedback fine-tuning.

    lr defaults to 1e-4 for the toy-scale nets here; the reference setting
    for full-scale latent-diffusion backbones is 2e-6. eta weighs the pixel
    and feature regularizers jointly; adv_weight scales the coherence term
    inside the generator reward.
    """

    eta: float = 0.01
    adv_weight: float = 0.05
    lr: float = 1e-4
    warmup_iters: int = 1000
    ema_decay: float = 0.9999
    noisy_start_prob: float = 0.5
    d_lr: float = 1e-4
    batch_size: int = 8
    null_prompt_prob: float = 0.1
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if min(self.eta, self.adv_weight, self.lr, self.d_lr) < 0:
            raise ValueError("weights and learning rates must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if not 0.0 <= self.noisy_start_prob <= 1.0:
            raise ValueError("noisy_start_prob must be in [0, 1]")
        if self.warmup_iters < 1:
            raise ValueError("warmup_iters must be >= 1")


@dataclass
class PeflLossBundle:
    """Per-step loss decomposition; l_total_G follows the fixed assembly."""

    l_reward_aesthetic: float
    l_reward_alignment: float
    l_reward_coherence: float
    l_reg: float
    l_vgg: float
    l_total_G: float
    l_total_D: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


class PerceptualExtractor(nn.Module):
    """Frozen random conv stack with three feature taps.

    Never trained: random frozen features stand in for a pretrained
    perceptual network at this scale. Deterministic given the seed.
    """

    def __init__(self, seed: int = 1234, width: int = 16):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.layers = nn.ModuleList(
            [
                nn.Conv2d(3, width, 3, padding=1),
                nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
                nn.Conv2d(width * 2, width * 4, 3, stride=2, padding=1),
            ]
        )
        with torch.no_grad():
            for layer in self.layers:
                nn.init.normal_(layer.weight, std=0.2, generator=gen)
                nn.init.zeros_(layer.bias)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for layer in self.layers:
            h = torch.tanh(layer(h))
            feats.append(h)
        return feats


def feature_l1(a: list[torch.Tensor], b: list[torch.Tensor]) -> torch.Tensor:
    """Mean absolute feature difference, averaged over taps."""
    terms = [torch.mean(torch.abs(fa - fb)) for fa, fb in zip(a, b)]
    return torch.stack(terms).mean()


def ema_update(ema_params, params, decay: float) -> None:
    """ema <- decay * ema + (1 - decay) * params, elementwise in place."""
    ema_params, params = list(ema_params), list(params)
    if len(ema_params) != len(params) or any(e.shape != p.shape for e, p in zip(ema_params, params)):
        raise ValueError("ema/param shape mismatch")
    with torch.no_grad():
        for e, p in zip(ema_params, params):
            e.mul_(decay).add_(p, alpha=1.0 - decay)


def stage1_latent(
    x: torch.Tensor,
    m: torch.Tensor,
    sched: NoiseSchedule,
    T1: int,
    generator: torch.Generator,
    noisy_start_prob: float,
) -> torch.Tensor:
    """Entry latent at step T1: diffused masked input, or pure noise.

    Each batch item independently starts from pure noise with probability
    noisy_start_prob; otherwise from the masked input diffused to T1.
    """
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    diffused = forward_diffuse(x * (1.0 - m), T1, eps, sched)
    if noisy_start_prob <= 0.0:
        return diffused
    coin = torch.rand(x.shape[0], generator=generator, device=x.device) < noisy_start_prob
    return torch.where(coin[:, None, None, None], eps, diffused)


def stage2_rollout(
    gen,
    x_T1: torch.Tensor,
    T1: int,
    t_prime: int,
    cond: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Deterministic denoising T1 -> t' with no gradient.

    Exactly (T1 - t_prime) denoiser evaluations; the result never connects
    to the generator's autograd graph.
    """
    if not 1 <= t_prime <= T1:
        raise ValueError(f"t_prime must be in [1, T1={T1}], got {t_prime}")
    x_masked, m, c = cond
    x_cur = x_T1
    with torch.no_grad():
        for t in range(T1, t_prime, -1):
            t_norm = torch.full((x_cur.shape[0],), t / sched.T, dtype=x_cur.dtype, device=x_cur.device)
            eps_hat = gen(x_cur, x_masked, m, c, t_norm)
            x_cur = ddim_step(x_cur, eps_hat, t, t - 1, sched)
    return x_cur.detach()


def stage3_losses(
    gen,
    rewards: RewardSuite,
    perceptual: PerceptualExtractor,
    x: torch.Tensor,
    m: torch.Tensor,
    c: torch.Tensor,
    x_tp: torch.Tensor,
    t_prime: int,
    cfg: PeflConfig,
    sched: NoiseSchedule,
) -> tuple[PeflLossBundle, torch.Tensor, torch.Tensor]:
    """One gradient-carrying evaluation at t' and the full generator loss.

    Returns (bundle, differentiable total, composed output detached). The
    clean prediction is clamped to [-1, 1] only where it is handed to the
    reward models; the pixel/feature regularizers see the raw composition so
    out-of-range predictions keep their gradient.
    """
    x_masked = x * (1.0 - m)
    t_norm = torch.full((x.shape[0],), t_prime / sched.T, dtype=x.dtype, device=x.device)
    eps_hat = gen(x_tp, x_masked, m, c, t_norm)
    x0_pred = predict_x0(x_tp, eps_hat, t_prime, sched)
    y_raw = compose_masked(x, m, x0_pred)
    y = y_raw.clamp(-1.0, 1.0)

    l_aes = F.softplus(-rewards.aesthetic(c, y)).mean()
    l_align = F.softplus(-rewards.alignment(c, y)).mean()
    l_coh = masked_coherence_reward_loss(rewards.coherence, y, m)

    mask_px = m.sum().clamp(min=1.0) * x.shape[1]
    l_reg = (torch.abs(x - y_raw) * m).sum() / mask_px
    l_vgg = feature_l1(perceptual(x), perceptual(y_raw))

    total = (l_aes + l_align + cfg.adv_weight * l_coh) + cfg.eta * (l_reg + l_vgg)
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss at t'={t_prime}: aes={l_aes.item()} align={l_align.item()} "
            f"coh={l_coh.item()} reg={l_reg.item()} vgg={l_vgg.item()} "
            f"|x_tp|={x_tp.abs().max().item()}"
        )
    bundle = PeflLossBundle(
        l_reward_aesthetic=l_aes.item(),
        l_reward_alignment=l_align.item(),
        l_reward_coherence=l_coh.item(),
        l_reg=l_reg.item(),
        l_vgg=l_vgg.item(),
        l_total_G=total.item(),
    )
    return bundle, total, y.detach()


def _grads_finite(model: nn.Module) -> bool:
    return all(p.grad is None or torch.isfinite(p.grad).all() for p in model.parameters())


class PeflTrainer:
    """Owns the generator, its EMA copy, the online critic, and both optimizers.

    Single-writer: all parameter updates happen through train_step_G /
    train_step_D on one thread. The aesthetic and alignment scorers are
    frozen at construction (they are trained offline beforehand).
    """

    def __init__(
        self,
        gen: nn.Module,
        rewards: RewardSuite,
        stage: StageSchedule,
        noise_sched: NoiseSchedule,
        cfg: PeflConfig,
        seed: int = 0,
        perceptual: PerceptualExtractor | None = None,
    ):
        if noise_sched.T != stage.T:
            raise ValueError(f"noise schedule T={noise_sched.T} != stage schedule T={stage.T}")
        self.gen = gen
        self.ema_gen = copy.deepcopy(gen).requires_grad_(False)
        self.rewards = rewards
        self.rewards.freeze_offline()
        self.stage = stage
        self.noise_sched = noise_sched
        self.cfg = cfg
        self.perceptual = perceptual if perceptual is not None else PerceptualExtractor()
        self.opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr)
        self.opt_d = torch.optim.Adam(rewards.coherence.parameters(), lr=cfg.d_lr)
        self.rng = torch.Generator().manual_seed(seed)
        self.iteration = 0
        self.skipped_g = 0
        self.skipped_d = 0
        self._last_fake: torch.Tensor | None = None

    def lr_at(self, iteration: int) -> float:
        """Linear warmup to cfg.lr over warmup_iters, then constant."""
        return self.cfg.lr * min(1.0, iteration / self.cfg.warmup_iters)

    def _set_lr(self, opt: torch.optim.Optimizer, lr: float) -> None:
        for group in opt.param_groups:
            group["lr"] = lr

    def draw_t_prime(self) -> int:
        return int(torch.randint(1, self.stage.T2 + 1, (1,), generator=self.rng))

    def _apply_null_prompts(self, c: torch.Tensor) -> torch.Tensor:
        if self.cfg.null_prompt_prob <= 0.0:
            return c
        drop = torch.rand(c.shape[0], generator=self.rng) < self.cfg.null_prompt_prob
        return torch.where(drop[:, None], torch.zeros_like(c), c)

    def train_step_G(self, batch) -> PeflLossBundle:
        """One generator update: stages 1-3, warmup-scheduled Adam step, EMA."""
        x, m, c = batch.x, batch.m, self._apply_null_prompts(batch.c)
        t_prime = self.draw_t_prime()
        x_T1 = stage1_latent(x, m, self.noise_sched, self.stage.T1, self.rng, self.cfg.noisy_start_prob)
        x_tp = stage2_rollout(self.gen, x_T1, self.stage.T1, t_prime, (x * (1.0 - m), m, c), self.noise_sched)
        bundle, total, y = stage3_losses(
            self.gen, self.rewards, self.perceptual, x, m, c, x_tp, t_prime, self.cfg, self.noise_sched
        )
        self._last_fake = y

        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        if _grads_finite(self.gen):
            if self.cfg.max_grad_norm > 0:
                nn.utils.clip_grad_norm_(self.gen.parameters(), self.cfg.max_grad_norm)
            self.iteration += 1
            self._set_lr(self.opt_g, self.lr_at(self.iteration))
            self.opt_g.step()
            ema_update(self.ema_gen.parameters(), self.gen.parameters(), self.cfg.ema_decay)
        else:
            self.iteration += 1
            self.skipped_g += 1
            warnings.warn(f"skipping generator update at iteration {self.iteration}: non-finite gradient")
        return bundle

    def generate_fakes(self, batch) -> torch.Tensor:
        """Composed generator outputs with no gradient, for critic training."""
        x, m, c = batch.x, batch.m, batch.c
        t_prime = self.draw_t_prime()
        x_T1 = stage1_latent(x, m, self.noise_sched, self.stage.T1, self.rng, self.cfg.noisy_start_prob)
        x_tp = stage2_rollout(self.gen, x_T1, self.stage.T1, t_prime, (x * (1.0 - m), m, c), self.noise_sched)
        with torch.no_grad():
            t_norm = torch.full((x.shape[0],), t_prime / self.noise_sched.T, dtype=x.dtype)
            eps_hat = self.gen(x_tp, x * (1.0 - m), m, c, t_norm)
            x0_pred = predict_x0(x_tp, eps_hat, t_prime, self.noise_sched)
            y = compose_masked(x, m, x0_pred).clamp(-1.0, 1.0)
        return y

    def train_step_D(self, batch, fake: torch.Tensor | None = None) -> float:
        """One critic update on real inputs vs detached generator outputs."""
        if fake is None:
            fake = self._last_fake if self._last_fake is not None else self.generate_fakes(batch)
        loss = coherence_d_loss(self.rewards.coherence, batch.x, fake.detach())
        self.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        if _grads_finite(self.rewards.coherence):
            self.opt_d.step()
        else:
            self.skipped_d += 1
            warnings.warn("skipping critic update: non-finite gradient")
        return loss.item()

    def train_step(self, batch) -> PeflLossBundle:
        """Alternate one generator step and one critic step (1:1)."""
        bundle = self.train_step_G(batch)
        bundle.l_total_D = self.train_step_D(batch)
        return bundle


class BaselineTrainer:
    """Plain denoising-objective trainer, the ablation reference.

    Same generator, same data, same optimizer discipline; the loss is the
    usual noise-prediction MSE at per-sample random timesteps.
    """

    def __init__(self, gen: nn.Module, noise_sched: NoiseSchedule, cfg: PeflConfig, seed: int = 0):
        self.gen = gen
        self.ema_gen = copy.deepcopy(gen).requires_grad_(False)
        self.noise_sched = noise_sched
        self.cfg = cfg
        self.opt = torch.optim.Adam(gen.parameters(), lr=cfg.lr)
        self.rng = torch.Generator().manual_seed(seed)
        self.iteration = 0

    def lr_at(self, iteration: int) -> float:
        return self.cfg.lr * min(1.0, iteration / self.cfg.warmup_iters)

    def train_step(self, batch) -> float:
        x, m, c = batch.x, batch.m, batch.c
        if self.cfg.null_prompt_prob > 0:
            drop = torch.rand(c.shape[0], generator=self.rng) < self.cfg.null_prompt_prob
            c = torch.where(drop[:, None], torch.zeros_like(c), c)
        ab = torch.from_numpy(self.noise_sched.alpha_bar).to(x.dtype)
        t = torch.randint(1, self.noise_sched.T + 1, (x.shape[0],), generator=self.rng)
        eps = torch.randn(x.shape, generator=self.rng, dtype=x.dtype)
        coef_s = ab[t].sqrt()[:, None, None, None]
        coef_n = (1.0 - ab[t]).sqrt()[:, None, None, None]
        x_t = coef_s * x + coef_n * eps
        eps_hat = self.gen(x_t, x * (1.0 - m), m, c, t.to(x.dtype) / self.noise_sched.T)
        loss = F.mse_loss(eps_hat, eps)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.iteration += 1
        for group in self.opt.param_groups:
            group["lr"] = self.lr_at(self.iteration)
        self.opt.step()
        ema_update(self.ema_gen.parameters(), self.gen.parameters(), self.cfg.ema_decay)
        return loss.item()
