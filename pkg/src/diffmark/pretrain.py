"""Base training of the conditional denoiser on encoded latents.

Standard noise-prediction objective: sample t uniformly, noise the latent,
regress the noise.  Conditions are dropped to the null embedding with a small
probability so classifier-free guidance works at sampling time.  Trigger rows
are never activated here; the backdoor stage is the only place they matter.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .autoencoder import AutoencoderModel, TrainResult
from .data import ImageDataset
from .schedule import NoiseSchedule, forward_noise
from .unet import DenoiserModel, UNetConfig


@dataclass
class BaseTrainConfig:
    steps: int = 4000
    batch_size: int = 16
    lr: float = 2e-3
    cond_dropout: float = 0.1
    seed: int = 0
    log_every: int = 200


@torch.no_grad()
def encode_dataset(ae: AutoencoderModel, ds: ImageDataset, batch_size: int = 64) -> torch.Tensor:
    """Encode every image into the standardized latent space."""
    ae.eval()
    out = []
    for i in range(0, len(ds), batch_size):
        out.append(ae.encode(ds.images[i : i + batch_size]))
    return torch.cat(out)


def denoising_loss(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    z0: torch.Tensor,
    class_ids: torch.Tensor,
    g: torch.Generator,
    cond_dropout: float = 0.0,
) -> torch.Tensor:
    B = z0.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=g)
    eps = torch.randn(z0.shape, generator=g)
    z_t = forward_noise(z0, t, eps, schedule)
    null_mask = None
    if cond_dropout > 0:
        null_mask = torch.rand(B, generator=g) < cond_dropout
    eps_hat = model(z_t, t, class_ids, None, null_mask=null_mask)
    return (eps_hat - eps).pow(2).mean()


def train_base(
    schedule: NoiseSchedule,
    train_latents: torch.Tensor,
    train_labels: torch.Tensor,
    val_latents: torch.Tensor,
    val_labels: torch.Tensor,
    config: BaseTrainConfig,
    unet_config: UNetConfig | None = None,
) -> tuple[DenoiserModel, TrainResult]:
    torch.manual_seed(config.seed)
    model = DenoiserModel(unet_config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=config.steps, eta_min=config.lr * 0.01
    )
    g = torch.Generator().manual_seed(config.seed + 1)
    n = train_latents.shape[0]
    result = TrainResult()
    model.train()
    for step in range(1, config.steps + 1):
        idx = torch.randint(0, n, (config.batch_size,), generator=g)
        loss = denoising_loss(
            model, schedule, train_latents[idx], train_labels[idx], g, config.cond_dropout
        )
        if not torch.isfinite(loss):
            raise RuntimeError(f"base training diverged at step {step}: loss={float(loss)}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % config.log_every == 0 or step == config.steps:
            result.history.append({"step": step, "train_loss": round(loss.item(), 6)})
    model.eval()
    gv = torch.Generator().manual_seed(config.seed + 2)
    with torch.no_grad():
        val_loss = denoising_loss(model, schedule, val_latents, val_labels, gv).item()
    result.final = {"val_loss": round(val_loss, 6)}
    return model, result
