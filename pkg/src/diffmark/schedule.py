"""DDPM noise schedule and the closed-form forward / single-step reverse maps.

The forward process with variance schedule beta_1..beta_T admits the usual
closed form

    z_t = sqrt(alpha_bar_t) * z_0 + sqrt(1 - alpha_bar_t) * eps,

with alpha_t = 1 - beta_t and alpha_bar_t = prod_{s<=t} alpha_s.  Inverting it
for a predicted noise eps_hat gives the single-step reconstruction

    z0_hat = (z_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t).

Schedule arrays are kept in float64 so the cumulative products stay accurate
over a thousand steps; values are cast to the input dtype at use sites.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed schedule arrays, indexed by timestep 1..T.

    Index 0 is a padding entry (beta=0, alpha_bar=1) so that ``alpha_bar[t]``
    can be read directly for t in 0..T; t=0 corresponds to the clean sample.
    """

    T: int
    betas: torch.Tensor      # float64, shape [T+1], betas[0] = 0
    alphas: torch.Tensor     # float64, shape [T+1], alphas[0] = 1
    alpha_bar: torch.Tensor  # float64, shape [T+1], alpha_bar[0] = 1


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a linear beta schedule.

    Requires T >= 1 and 0 < beta_start <= beta_end < 1.  The returned
    alpha_bar is strictly decreasing over t = 1..T and lies in (0, 1).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = torch.empty(T + 1, dtype=torch.float64)
    betas[0] = 0.0
    betas[1:] = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bar = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bar=alpha_bar)


def _coeffs(alpha_bar: torch.Tensor, t: torch.Tensor | int, ndim: int, dtype: torch.dtype):
    """sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t), broadcastable over ndim dims.

    Square roots are taken in float64 before casting so the coefficients carry
    full schedule precision into lower-precision tensor math.
    """
    ab = alpha_bar[t] if isinstance(t, int) else alpha_bar[t]
    a = ab.sqrt().to(dtype)
    b = (1.0 - ab).sqrt().to(dtype)
    if not isinstance(t, int):
        shape = (a.shape[0], *([1] * (ndim - 1)))
        a = a.view(shape)
        b = b.view(shape)
    return a, b


def _check_t(t: torch.Tensor | int, T: int) -> None:
    if isinstance(t, int):
        if not (1 <= t <= T):
            raise ValueError(f"timestep {t} outside 1..{T}")
    else:
        if t.ndim != 1:
            raise ValueError(f"batched t must be 1-D, got shape {tuple(t.shape)}")
        if t.numel() == 0 or int(t.min()) < 1 or int(t.max()) > T:
            raise ValueError(f"timesteps must lie in 1..{T}")


def forward_noise(
    z0: torch.Tensor,
    t: torch.Tensor | int,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Closed-form forward diffusion: noise z0 to timestep t with given eps.

    t may be a python int (applied to the whole batch) or a 1-D integer tensor
    with one timestep per batch element.
    """
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    _check_t(t, schedule.T)
    a, b = _coeffs(schedule.alpha_bar, t, z0.ndim, z0.dtype)
    return a * z0 + b * eps


def single_step_reverse(
    z_t: torch.Tensor,
    t: torch.Tensor | int,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Single-step reconstruction of z0 from z_t and a noise estimate."""
    if eps_hat.shape != z_t.shape:
        raise ValueError(
            f"eps_hat shape {tuple(eps_hat.shape)} != z_t shape {tuple(z_t.shape)}"
        )
    _check_t(t, schedule.T)
    a, b = _coeffs(schedule.alpha_bar, t, z_t.ndim, z_t.dtype)
    return (z_t - b * eps_hat) / a
