"""Deterministic DDIM sampling (with classifier-free guidance) plus ancestral DDPM.

Guidance follows the usual convention

    eps = eps_null + s * (eps_cond - eps_null),

so s=1 is plain conditional prediction and s=0 the unconditional path.  The
DDIM update with eta=0 is fully deterministic given the initial noise, which
a seeded generator supplies.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .schedule import NoiseSchedule, single_step_reverse
from .unet import ConditionToken, DenoiserModel


@dataclass
class SampleConfig:
    num_steps: int = 25
    guidance_scale: float = 3.0
    method: str = "ddim"  # "ddim" | "ddpm"
    seed: int = 0


def _timestep_grid(T: int, num_steps: int) -> list[int]:
    # evenly spaced from T down to round(T / num_steps); the final update
    # jumps from there to the clean state (prev index 0)
    return [max(1, round(T * k / num_steps)) for k in range(num_steps, 0, -1)]


def _guided_eps(
    model: DenoiserModel,
    z: torch.Tensor,
    t: int,
    class_ids: torch.Tensor,
    triggered: torch.Tensor,
    scale: float,
) -> torch.Tensor:
    B = z.shape[0]
    tt = torch.full((B,), t, dtype=torch.int64)
    eps_c = model(z, tt, class_ids, triggered)
    null = torch.ones(B, dtype=torch.bool)
    eps_u = model(z, tt, class_ids, None, null_mask=null)
    return eps_u + scale * (eps_c - eps_u)


def _expand_cond(cond, num_images: int) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(cond, ConditionToken):
        cond = [cond] * num_images
    if len(cond) != num_images:
        raise ValueError(f"got {len(cond)} condition tokens for {num_images} images")
    class_ids = torch.tensor([c.class_id for c in cond], dtype=torch.int64)
    triggered = torch.tensor([c.triggered for c in cond], dtype=torch.bool)
    return class_ids, triggered


@torch.no_grad()
def sample(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    cond: ConditionToken | list[ConditionToken],
    num_images: int,
    config: SampleConfig | None = None,
) -> torch.Tensor:
    """Draw num_images latents; identical inputs and seed give identical output."""
    cfg = config or SampleConfig()
    if cfg.guidance_scale < 0:
        raise ValueError(f"guidance_scale must be >= 0, got {cfg.guidance_scale}")
    if cfg.num_steps < 1 or cfg.num_steps > schedule.T:
        raise ValueError(f"num_steps must lie in 1..{schedule.T}, got {cfg.num_steps}")
    if cfg.method not in ("ddim", "ddpm"):
        raise ValueError(f"unknown sampling method {cfg.method!r}")
    class_ids, triggered = _expand_cond(cond, num_images)

    was_training = model.training
    model.eval()
    g = torch.Generator().manual_seed(cfg.seed)
    c = model.config.latent_channels
    size = model.config.latent_size
    z = torch.randn(num_images, c, size, size, generator=g)
    try:
        if cfg.method == "ddim":
            ts = _timestep_grid(schedule.T, cfg.num_steps)
            for i, t in enumerate(ts):
                eps = _guided_eps(model, z, t, class_ids, triggered, cfg.guidance_scale)
                z0_hat = single_step_reverse(z, t, eps, schedule)
                t_prev = ts[i + 1] if i + 1 < len(ts) else 0
                ab_prev = schedule.alpha_bar[t_prev]
                z = ab_prev.sqrt().to(z.dtype) * z0_hat + (1 - ab_prev).sqrt().to(z.dtype) * eps
        else:
            if cfg.num_steps != schedule.T:
                raise ValueError("ddpm sampling runs the full chain; set num_steps = T")
            for t in range(schedule.T, 0, -1):
                eps = _guided_eps(model, z, t, class_ids, triggered, cfg.guidance_scale)
                ab_t = schedule.alpha_bar[t]
                ab_prev = schedule.alpha_bar[t - 1]
                alpha_t = schedule.alphas[t]
                beta_t = schedule.betas[t]
                mean = (z - (beta_t / (1 - ab_t).sqrt()).to(z.dtype) * eps) / alpha_t.sqrt().to(z.dtype)
                if t > 1:
                    var = beta_t * (1 - ab_prev) / (1 - ab_t)
                    noise = torch.randn(z.shape, generator=g)
                    z = mean + var.sqrt().to(z.dtype) * noise
                else:
                    z = mean
    finally:
        model.train(was_training)
    return z
