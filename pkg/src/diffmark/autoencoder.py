"""Convolutional autoencoder defining the latent space.

Two stride-2 stages map 3 x S x S images to latent_channels x S/4 x S/4 with
pre-activation residual blocks at each resolution; the decoder mirrors them
with nearest-neighbor upsampling and ends in tanh so decoded images always
lie in [-1, 1].  Trained on plain reconstruction MSE with cosine lr decay.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .data import ImageDataset


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return self.skip(x) + h


class AutoencoderModel(nn.Module):
    def __init__(self, in_channels: int = 3, latent_channels: int = 4, base_channels: int = 24):
        super().__init__()
        b = base_channels
        self.in_channels = in_channels
        self.latent_channels = latent_channels
        self.base_channels = base_channels
        self.downsample_factor = 4
        # per-channel latent standardization, set after training so encoded
        # latents are unit scale for the diffusion model
        self.register_buffer("latent_mean", torch.zeros(latent_channels, 1, 1))
        self.register_buffer("latent_std", torch.ones(latent_channels, 1, 1))
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, b, 3, padding=1),
            ResBlock(b, b),
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1),
            ResBlock(2 * b, 2 * b),
            nn.Conv2d(2 * b, 2 * b, 3, stride=2, padding=1),
            ResBlock(2 * b, 2 * b),
            nn.GroupNorm(8, 2 * b),
            nn.SiLU(),
            nn.Conv2d(2 * b, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * b, 3, padding=1),
            ResBlock(2 * b, 2 * b),
            nn.Upsample(scale_factor=2, mode="nearest"),
            ResBlock(2 * b, 2 * b),
            nn.Upsample(scale_factor=2, mode="nearest"),
            ResBlock(2 * b, b),
            nn.GroupNorm(8, b),
            nn.SiLU(),
            nn.Conv2d(b, in_channels, 3, padding=1),
            nn.Tanh(),
        )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected [B, 3, H, W] images, got shape {tuple(x.shape)}")
        return (self.encoder(x) - self.latent_mean) / self.latent_std

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ValueError(
                f"expected [B, {self.latent_channels}, h, w] latents, got shape {tuple(z.shape)}"
            )
        return self.decoder(z * self.latent_std + self.latent_mean)

    @torch.no_grad()
    def fit_latent_scale(self, images: torch.Tensor, batch_size: int = 64) -> None:
        """Set the standardization buffers from raw encoder statistics."""
        feats = []
        for i in range(0, images.shape[0], batch_size):
            feats.append(self.encoder(images[i : i + batch_size]))
        z = torch.cat(feats)
        self.latent_mean.copy_(z.mean(dim=(0, 2, 3))[:, None, None])
        self.latent_std.copy_(z.std(dim=(0, 2, 3)).clamp_min(1e-4)[:, None, None])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


@dataclass
class AutoencoderTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0
    log_every: int = 100
    target_val_mse: float = 0.01
    base_channels: int = 24
    latent_channels: int = 4


@dataclass
class TrainResult:
    """History rows plus the final validation metrics of a training run."""

    history: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    meets_targets: bool = True


@torch.no_grad()
def reconstruction_mse(model: AutoencoderModel, ds: ImageDataset, batch_size: int = 64) -> float:
    model.eval()
    total, count = 0.0, 0
    for i in range(0, len(ds), batch_size):
        x = ds.images[i : i + batch_size]
        err = (model(x) - x).pow(2).mean(dim=(1, 2, 3))
        total += float(err.sum())
        count += x.shape[0]
    return total / count


def train_autoencoder(
    train_ds: ImageDataset,
    val_ds: ImageDataset,
    config: AutoencoderTrainConfig,
) -> tuple[AutoencoderModel, TrainResult]:
    """Train from scratch on reconstruction MSE.

    Aborts with a diagnostic if the loss goes nonfinite.  The returned result
    carries the logged history and flags whether target_val_mse was met; a
    miss is reported, never silently accepted.
    """
    torch.manual_seed(config.seed)
    model = AutoencoderModel(
        latent_channels=config.latent_channels, base_channels=config.base_channels
    )
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=config.steps, eta_min=config.lr * 0.01
    )
    g = torch.Generator().manual_seed(config.seed + 1)
    result = TrainResult()
    model.train()
    for step, (x, _) in enumerate(train_ds.batches(config.batch_size, g), start=1):
        if step > config.steps:
            break
        loss = (model(x) - x).pow(2).mean()
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"autoencoder training diverged at step {step}: loss={float(loss)} "
                f"(lr={config.lr}, batch_size={config.batch_size})"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % config.log_every == 0 or step == config.steps:
            result.history.append({"step": step, "train_mse": round(loss.item(), 8)})
    model.eval()
    model.fit_latent_scale(train_ds.images)
    val_mse = reconstruction_mse(model, val_ds)
    result.final = {"val_mse": round(val_mse, 8), "target_val_mse": config.target_val_mse}
    result.meets_targets = val_mse <= config.target_val_mse
    return model, result
