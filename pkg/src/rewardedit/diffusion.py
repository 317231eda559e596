"""Noise-schedule algebra and deterministic denoising steps.

Everything here is pure tensor math shared by training and inference:

- Forward process:   x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps
- Clean prediction:  x0' = (x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)
- Deterministic step: x_s = sqrt(ab_s) * x0' + sqrt(1 - ab_s) * eps_hat  (s < t)
- Masked composition: y = x * (1 - m) + g * m

``ab`` is the cumulative signal coefficient alpha_bar, indexed 0..T with
alpha_bar[0] = 1 exactly. Schedules are defined by closed forms of the
normalized time u = t/T, so two schedules with different T sample the same
underlying noise curve; model checkpoints trained on one step count stay
meaningful on another.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

# Continuous-time linear beta(u) = BETA_MIN + u * (BETA_MAX - BETA_MIN),
# integrated in closed form. Terminal alpha_bar ~ 4.3e-5 at u = 1.
BETA_MIN = 0.1
BETA_MAX = 20.0

# Squared-cosine schedule offset and per-step beta cap.
COSINE_S = 0.008
COSINE_BETA_MAX = 0.999

SCHEDULE_KINDS = ("linear", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Step count T plus cumulative signal coefficients alpha_bar[0..T]."""

    T: int
    alpha_bar: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if self.T < 1:
            raise ValueError(f"schedule needs T >= 1, got {self.T}")
        if ab.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar must have length T+1={self.T + 1}, got {ab.shape}")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if ab[-1] <= 0.0 or np.any(ab > 1.0):
            raise ValueError("alpha_bar entries must lie in (0, 1]")

    def signal(self, t: int) -> float:
        """sqrt(alpha_bar[t]) as an exact float64 scalar."""
        return math.sqrt(float(self.alpha_bar[t]))

    def noise(self, t: int) -> float:
        """sqrt(1 - alpha_bar[t])."""
        return math.sqrt(1.0 - float(self.alpha_bar[t]))

    def snr(self) -> np.ndarray:
        """Signal-to-noise ratio alpha_bar / (1 - alpha_bar) for t = 1..T."""
        ab = self.alpha_bar[1:]
        return ab / (1.0 - ab)

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind, "alpha_bar": self.alpha_bar.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(T=int(d["T"]), alpha_bar=np.asarray(d["alpha_bar"]), kind=d.get("kind", "custom"))


def make_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    """Build a noise schedule with T steps.

    linear: alpha_bar(u) = exp(-(BETA_MIN*u + (BETA_MAX-BETA_MIN)*u^2/2)),
    the closed-form integral of a linearly increasing beta over u in [0, 1].

    cosine: alpha_bar(u) proportional to cos((u+s)/(1+s) * pi/2)^2, realized
    through per-step betas capped at COSINE_BETA_MAX so the terminal entry
    stays strictly positive.
    """
    if T < 1:
        raise ValueError(f"schedule needs T >= 1, got {T}")
    if kind == "linear":
        u = np.arange(T + 1, dtype=np.float64) / T
        ab = np.exp(-(BETA_MIN * u + 0.5 * (BETA_MAX - BETA_MIN) * u * u))
        ab[0] = 1.0
    elif kind == "cosine":
        def f(u: float) -> float:
            return math.cos((u + COSINE_S) / (1.0 + COSINE_S) * math.pi / 2.0) ** 2

        ab = np.empty(T + 1, dtype=np.float64)
        ab[0] = 1.0
        prev_raw = f(0.0)
        for t in range(1, T + 1):
            raw = f(t / T)
            beta = min(1.0 - raw / prev_raw, COSINE_BETA_MAX)
            prev_raw = raw
            ab[t] = ab[t - 1] * (1.0 - beta)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")
    return NoiseSchedule(T=T, alpha_bar=ab, kind=kind)


def _check_t(t: int, sched: NoiseSchedule, lo: int) -> None:
    if not lo <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [{lo}, {sched.T}]")


def forward_diffuse(x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Noise a clean image to level t: sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps."""
    _check_t(t, sched, lo=0)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    return sched.signal(t) * x0 + sched.noise(t) * eps


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Invert the forward process given predicted noise.

    x0' = (x_t - sqrt(1-ab_t)*eps_hat) / sqrt(ab_t). No clamping here; values
    are clipped to [-1, 1] only where images leave the schedule algebra
    (scoring, files).
    """
    _check_t(t, sched, lo=1)
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    return (x_t - sched.noise(t) * eps_hat) / sched.signal(t)


def ddim_step(
    x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_next: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Deterministic denoising step t -> t_next (t_next < t, zero stochasticity).

    x_{t_next} = sqrt(ab_{t_next}) * x0' + sqrt(1 - ab_{t_next}) * eps_hat
    """
    if not 0 <= t_next < t:
        raise ValueError(f"need 0 <= t_next < t, got t_next={t_next}, t={t}")
    _check_t(t, sched, lo=1)
    x0 = predict_x0(x_t, eps_hat, t, sched)
    return sched.signal(t_next) * x0 + sched.noise(t_next) * eps_hat


def compose_masked(x: torch.Tensor, m: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Replace the masked region of x with g: y = x*(1-m) + g*m.

    Bit-exact: output equals x where m = 0 and g where m = 1. The mask
    broadcasts over the channel dimension.
    """
    if g.shape != x.shape:
        raise ValueError(f"g shape {tuple(g.shape)} != x shape {tuple(x.shape)}")
    mask = m if m.dtype == torch.bool else (m > 0.5)
    try:
        return torch.where(mask, g, x)
    except RuntimeError as exc:
        raise ValueError(f"mask shape {tuple(m.shape)} does not broadcast to {tuple(x.shape)}") from exc


def sampling_timesteps(sched: NoiseSchedule, steps: int) -> list[int]:
    """Descending timestep grid ending at 0, with `steps` denoiser evaluations."""
    if not 1 <= steps <= sched.T:
        raise ValueError(f"steps must be in [1, T={sched.T}], got {steps}")
    grid = np.unique(np.round(np.linspace(sched.T, 0, steps + 1)).astype(int))[::-1]
    return [int(t) for t in grid]


@torch.no_grad()
def sample_edit(
    gen,
    x: torch.Tensor,
    m: torch.Tensor,
    c: torch.Tensor,
    sched: NoiseSchedule,
    steps: int | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Generate the masked region of x conditioned on prompt embedding c.

    Starts from the masked input diffused to the top of the schedule, runs
    deterministic denoising down to 0, then composes the prediction back into
    the unmasked original. One denoiser evaluation per step. Deterministic
    given the torch generator.

    Shapes: x (B,C,H,W), m (B,1,H,W) with values {0,1}, c (B,d_c).
    """
    steps = sched.T if steps is None else steps
    ts = sampling_timesteps(sched, steps)
    x_masked = x * (1.0 - m)
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    x_cur = forward_diffuse(x_masked, ts[0], eps, sched)
    for t, t_next in zip(ts[:-1], ts[1:]):
        t_norm = torch.full((x.shape[0],), t / sched.T, dtype=x.dtype, device=x.device)
        eps_hat = gen(x_cur, x_masked, m, c, t_norm)
        x_cur = ddim_step(x_cur, eps_hat, t, t_next, sched)
    return compose_masked(x, m, x_cur.clamp(-1.0, 1.0))
