"""Secret message codec: residual embedding and soft-bit extraction.

The secret encoder maps an n-bit message to an additive residual, a function
of the message alone, so one message produces one fixed residual regardless
of the cover (cover-agnostic by construction).  The extractor produces one
logit per bit; public extraction applies a sigmoid, so soft bits always lie
in (0, 1).

Two spaces are supported.  In latent space the residual is added to encoded
covers and extraction runs on re-encoded pixels (the autoencoder is part of
the extraction map).  In pixel space the residual is added to the image
itself and extraction reads pixels directly; that variant trains against the
differentiable distortion pipeline with a Wasserstein critic on top of the
fidelity terms.

Loss: bce + lambda_mse * mse + lambda_perceptual * perceptual, with the
weights 10 and 0.25 as defaults.  The extractor applies dropout just before
its final linear layer (rate 0.3), which decorrelates bit errors on clean
covers and keeps null-hypothesis statistics honest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import AutoencoderModel, TrainResult
from .data import ImageDataset
from .distortions import (
    DistortionSpec,
    TrainDistortionConfig,
    apply_eval_distortion,
    apply_train_distortions,
    sample_train_params,
)
from .features import FrozenFeatures, perceptual_distance
from .verify import bit_accuracy


@dataclass
class CodecConfig:
    num_bits: int = 48
    space: str = "latent"  # "latent" | "pixel"
    latent_channels: int = 4
    latent_size: int = 8
    image_size: int = 32
    hidden: int = 128
    dropout: float = 0.3
    lambda_mse: float = 10.0
    lambda_perceptual: float = 0.25


class SecretEncoder(nn.Module):
    """message bits -> additive residual of the configured space's shape.

    Each bit owns a learned full-field signature pattern (a plain linear map
    from centered bits to the flattened residual); a small conv stack refines
    the superposition for fidelity.  The linear path keeps gradients to every
    bit short and well conditioned, which converges far faster than funneling
    the message through a deconvolution pyramid.
    """

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.space == "latent":
            c, s = cfg.latent_channels, cfg.latent_size
        else:
            c, s = 3, cfg.image_size
        self.shape = (c, s, s)
        self.signatures = nn.Linear(cfg.num_bits, c * s * s, bias=False)
        self.refine = nn.Sequential(
            nn.Conv2d(c, 32, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 32, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, c, 3, padding=1),
        )

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        base = self.signatures(2.0 * m - 1.0).view(m.shape[0], *self.shape)
        return base + self.refine(base)


class ExtractorHead(nn.Module):
    """space tensor -> one logit per message bit.

    The final linear layer sees conv features concatenated with the flattened
    input (a direct correlation view of the signatures), behind dropout."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        cin = cfg.latent_channels if cfg.space == "latent" else 3
        s = cfg.latent_size if cfg.space == "latent" else cfg.image_size
        width = 48 if cfg.space == "latent" else 32
        layers = [nn.Conv2d(cin, width, 3, padding=1), nn.SiLU()]
        side = s
        while side > 4:
            layers += [nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.SiLU()]
            width *= 2
            side //= 2
        layers += [nn.Conv2d(width, width, 3, padding=1), nn.SiLU()]
        self.conv = nn.Sequential(*layers)
        self.dropout = nn.Dropout(cfg.dropout)
        self.fc = nn.Linear(width * side * side + cin * s * s, cfg.num_bits)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.cat([self.conv(x).flatten(1), x.flatten(1)], dim=1)
        return self.fc(self.dropout(h))


class WatermarkCodec(nn.Module):
    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = config or CodecConfig()
        if self.config.space not in ("latent", "pixel"):
            raise ValueError(f"unknown codec space {self.config.space!r}")
        self.secret_encoder = SecretEncoder(self.config)
        self.head = ExtractorHead(self.config)


def _check_message(m: torch.Tensor, n: int) -> torch.Tensor:
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.shape[1] != n:
        raise ValueError(f"message must have {n} bits, got shape {tuple(m.shape)}")
    vals = torch.unique(m.detach())
    if not torch.all((vals == 0) | (vals == 1)):
        raise ValueError("message bits must be 0/1 valued")
    return m.float()


def secret_encode(codec: WatermarkCodec, message: torch.Tensor) -> torch.Tensor:
    """Deterministic residual for a message; [n] input gives [1, ...] output."""
    m = _check_message(message, codec.config.num_bits)
    was_training = codec.training
    codec.eval()
    try:
        with torch.no_grad():
            return codec.secret_encoder(m)
    finally:
        codec.train(was_training)


def embed(cover: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    """Additive embedding; residual broadcasts over the cover batch."""
    if cover.ndim != 4 or residual.ndim != 4:
        raise ValueError("cover and residual must be [B, C, H, W]")
    if cover.shape[1:] != residual.shape[1:]:
        raise ValueError(
            f"shape mismatch: cover {tuple(cover.shape)} vs residual {tuple(residual.shape)}"
        )
    if residual.shape[0] not in (1, cover.shape[0]):
        raise ValueError("residual batch must be 1 or match the cover batch")
    return cover + residual


def extract_bits(
    codec: WatermarkCodec,
    images: torch.Tensor,
    ae: AutoencoderModel | None = None,
) -> torch.Tensor:
    """Soft bits in (0, 1) from images.

    The latent-space codec extracts through the autoencoder's encoder, which
    must be supplied; the pixel codec reads pixels directly.
    """
    if images.ndim != 4:
        raise ValueError(f"expected [B, C, H, W] images, got shape {tuple(images.shape)}")
    was_training = codec.training
    codec.eval()
    try:
        with torch.no_grad():
            if codec.config.space == "latent":
                if ae is None:
                    raise ValueError("latent codec extraction needs the autoencoder")
                if images.shape[2] != codec.config.image_size:
                    raise ValueError(
                        f"expected {codec.config.image_size}px images, got {images.shape[2]}"
                    )
                logits = codec.head(ae.encode(images))
            else:
                logits = codec.head(images)
            return torch.sigmoid(logits)
    finally:
        codec.train(was_training)


def codec_loss(
    x_co: torch.Tensor,
    x_w: torch.Tensor,
    message: torch.Tensor,
    soft_bits: torch.Tensor,
    features: FrozenFeatures,
    lambda_mse: float = 10.0,
    lambda_perceptual: float = 0.25,
) -> tuple[torch.Tensor, dict]:
    """Total stage-1 objective with its three parts reported separately.

    total = bce + lambda_mse * mse + lambda_perceptual * perceptual, exactly;
    soft bits are clamped away from {0, 1} so the bce stays finite.
    """
    m = _check_message(message, soft_bits.shape[-1])
    sb = soft_bits.clamp(1e-7, 1 - 1e-7)
    bce = F.binary_cross_entropy(sb, m.expand_as(sb))
    mse = (x_co - x_w).pow(2).mean()
    perc = perceptual_distance(features, x_co, x_w)
    total = bce + lambda_mse * mse + lambda_perceptual * perc
    parts = {"bce": bce, "mse": mse, "perceptual": perc}
    for name, val in {**parts, "total": total}.items():
        if not torch.isfinite(val):
            raise ValueError(f"nonfinite loss term {name}: {val}")
    return total, {k: float(v) for k, v in parts.items()}


class Critic(nn.Module):
    """Wasserstein critic for the pixel variant; clip weights after each step."""

    def __init__(self, in_channels: int = 3, width: int = 24):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(2 * width, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x).mean(dim=(2, 3))
        return self.fc(h)[:, 0]

    def clip_weights(self, bound: float = 0.1) -> None:
        with torch.no_grad():
            for p in self.parameters():
                p.clamp_(-bound, bound)


def critic_generator_loss(critic: Critic, x_w: torch.Tensor) -> torch.Tensor:
    """The embedder minimizes the critic's score of watermarked images."""
    return critic(x_w).mean()


def critic_adversary_loss(critic: Critic, x_co: torch.Tensor, x_w: torch.Tensor) -> torch.Tensor:
    """score(cover) - score(watermarked); zero for identical inputs."""
    return critic(x_co).mean() - critic(x_w).mean()


def random_messages(num: int, n: int, g: torch.Generator) -> torch.Tensor:
    return (torch.rand(num, n, generator=g) < 0.5).float()


# ---------------------------------------------------------------------------
# stage-1 training
# ---------------------------------------------------------------------------


@dataclass
class CodecTrainConfig:
    steps: int = 8000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 200
    # fidelity weights ramp linearly from zero over this fraction of the run;
    # starting at full strength collapses the residual before the extractor
    # can learn, leaving bit accuracy at chance
    fidelity_ramp_frac: float = 0.4
    # auxiliary bce on extraction straight from the embedded latent, skipping
    # the decode/encode roundtrip; gives the pair a clean channel to agree on
    # a code early, then the roundtrip term aligns it with real extraction
    aux_direct_weight: float = 0.5
    # toy-scale augmentation of the extraction path (see train_codec)
    augment: bool = True
    target_bit_accuracy: float = 0.99
    target_distorted_accuracy: float = 0.90


def _augment_pixels(x: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    """Light differentiable corruption between decode and re-encode so the
    latent extractor tolerates the eval distortion suite; parameters are mild
    compared to the pixel pipeline.  Compression gets two slots because it is
    the hardest channel of the robustness set."""
    choice = int(torch.randint(0, 5, (), generator=g))
    if choice == 0:
        return x
    if choice == 1:
        sigma = 0.05 + 0.1 * torch.rand((), generator=g).item()
        noise = torch.randn(x.shape, generator=g)
        return x + sigma * noise
    if choice == 2:
        from .distortions import _conv_blur, _gaussian_kernel1d

        sigma = 0.5 + 3.0 * torch.rand((), generator=g).item()
        return _conv_blur(x, _gaussian_kernel1d(5, sigma))
    from .distortions import approx_jpeg

    if choice == 3:
        q = 40.0 + 35.0 * torch.rand((), generator=g).item()
    else:
        q = 60.0 + 40.0 * torch.rand((), generator=g).item()
    return approx_jpeg(x.clamp(-1, 1), q)


def train_codec(
    ae: AutoencoderModel,
    train_ds: ImageDataset,
    val_ds: ImageDataset,
    config: CodecTrainConfig,
    codec_config: CodecConfig | None = None,
) -> tuple[WatermarkCodec, TrainResult]:
    """Joint training of the latent-space residual encoder and extractor.

    The autoencoder is frozen; gradients flow through its decoder and encoder
    into the codec parameters.  Messages are drawn fresh and uniformly at
    random for every batch element, which is what keeps extraction on
    unwatermarked covers at chance level.
    """
    cfg = codec_config or CodecConfig()
    if cfg.space != "latent":
        raise ValueError("train_codec trains the latent variant; use train_codec_pixel")
    torch.manual_seed(config.seed)
    codec = WatermarkCodec(cfg)
    features = FrozenFeatures()
    ae.eval()
    for p in ae.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(codec.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=config.steps, eta_min=config.lr * 0.01
    )
    g = torch.Generator().manual_seed(config.seed + 1)
    result = TrainResult()
    codec.train()
    for step, (x, _) in enumerate(train_ds.batches(config.batch_size, g), start=1):
        if step > config.steps:
            break
        with torch.no_grad():
            z_co = ae.encode(x)
            x_co = ae.decode(z_co)
        m = random_messages(x.shape[0], cfg.num_bits, g)
        delta = codec.secret_encoder(m)
        x_w = ae.decode(z_co + delta)
        x_ext = _augment_pixels(x_w, g) if config.augment else x_w
        logits = codec.head(ae.encode(x_ext))
        bce = F.binary_cross_entropy_with_logits(logits, m)
        mse = (x_co - x_w).pow(2).mean()
        perc = perceptual_distance(features, x_co, x_w)
        ramp_steps = max(1, int(config.fidelity_ramp_frac * config.steps))
        ramp = min(1.0, step / ramp_steps)
        loss = bce + ramp * (cfg.lambda_mse * mse + cfg.lambda_perceptual * perc)
        if config.aux_direct_weight > 0:
            direct = codec.head(z_co + delta)
            loss = loss + config.aux_direct_weight * F.binary_cross_entropy_with_logits(direct, m)
        if not torch.isfinite(loss):
            raise RuntimeError(f"codec training diverged at step {step}: loss={float(loss)}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % config.log_every == 0 or step == config.steps:
            result.history.append(
                {
                    "step": step,
                    "bce": round(bce.item(), 6),
                    "mse": round(mse.item(), 6),
                    "perceptual": round(perc.item(), 6),
                }
            )
    metrics = evaluate_codec(codec, ae, val_ds.images, seed=config.seed + 2)
    result.final = metrics
    result.meets_targets = (
        metrics["bit_accuracy"] >= config.target_bit_accuracy
        and min(metrics["distorted"].values()) >= config.target_distorted_accuracy
    )
    return codec, result


def robustness_eval_specs() -> list[DistortionSpec]:
    return [
        DistortionSpec("jpeg", {"quality": 50}),
        DistortionSpec("blur"),
        DistortionSpec("noise", {"sigma": 0.1}),
    ]


@torch.no_grad()
def evaluate_codec(
    codec: WatermarkCodec,
    ae: AutoencoderModel | None,
    images: torch.Tensor,
    seed: int = 0,
) -> dict:
    """Held-out protocol: one fresh message per cover, embed, extract under
    the identity and the robustness distortion set."""
    g = torch.Generator().manual_seed(seed)
    n = codec.config.num_bits
    msgs = random_messages(images.shape[0], n, g)
    if codec.config.space == "latent":
        z = ae.encode(images)
        deltas = codec.secret_encoder(msgs)
        x_w = ae.decode(z + deltas).clamp(-1, 1)
    else:
        deltas = codec.secret_encoder(msgs)
        x_w = (images + deltas).clamp(-1, 1)

    def acc(batch: torch.Tensor) -> float:
        soft = extract_bits(codec, batch, ae)
        return sum(
            bit_accuracy(soft[i], msgs[i]) for i in range(batch.shape[0])
        ) / batch.shape[0]

    out = {
        "bit_accuracy": round(acc(x_w), 6),
        "watermark_mse": round(float((x_w - images).pow(2).mean()), 6),
        "distorted": {},
    }
    for spec in robustness_eval_specs():
        distorted = apply_eval_distortion(x_w, spec, seed=seed)
        out["distorted"][spec.kind] = round(acc(distorted), 6)
    return out


# ---------------------------------------------------------------------------
# pixel variant with distortion layer and critic
# ---------------------------------------------------------------------------


@dataclass
class PixelCodecTrainConfig:
    steps: int = 2500
    batch_size: int = 16
    lr: float = 1e-3
    critic_lr: float = 1e-4
    lambda_critic: float = 0.1
    critic_clip: float = 0.1
    seed: int = 0
    log_every: int = 200
    distortions: TrainDistortionConfig = field(default_factory=TrainDistortionConfig)


def train_codec_pixel(
    train_ds: ImageDataset,
    val_ds: ImageDataset,
    config: PixelCodecTrainConfig,
    codec_config: CodecConfig | None = None,
) -> tuple[WatermarkCodec, TrainResult]:
    """Pixel-space codec against the differentiable distortion pipeline.

    Embedder/extractor updates and critic updates interleave one to one; the
    critic scores watermarked images against covers and its weights are
    clipped to keep the scores Lipschitz.
    """
    cfg = codec_config or CodecConfig(space="pixel")
    if cfg.space != "pixel":
        raise ValueError("train_codec_pixel trains the pixel variant")
    torch.manual_seed(config.seed)
    codec = WatermarkCodec(cfg)
    critic = Critic()
    features = FrozenFeatures()
    opt = torch.optim.Adam(codec.parameters(), lr=config.lr)
    opt_c = torch.optim.Adam(critic.parameters(), lr=config.critic_lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=config.steps, eta_min=config.lr * 0.01
    )
    g = torch.Generator().manual_seed(config.seed + 1)
    result = TrainResult()
    codec.train()
    for step, (x, _) in enumerate(train_ds.batches(config.batch_size, g), start=1):
        if step > config.steps:
            break
        m = random_messages(x.shape[0], cfg.num_bits, g)
        delta = codec.secret_encoder(m)
        x_w = x + delta
        params = sample_train_params(config.distortions, g)
        x_dist = apply_train_distortions(x_w, params)
        logits = codec.head(x_dist)
        bce = F.binary_cross_entropy_with_logits(logits, m)
        mse = (x - x_w).pow(2).mean()
        perc = perceptual_distance(features, x, x_w)
        adv = critic_generator_loss(critic, x_w)
        loss = bce + cfg.lambda_mse * mse + cfg.lambda_perceptual * perc + config.lambda_critic * adv
        if not torch.isfinite(loss):
            raise RuntimeError(f"pixel codec training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        # critic step on the same batch, embedder detached
        c_loss = critic_adversary_loss(critic, x, x_w.detach())
        opt_c.zero_grad()
        c_loss.backward()
        opt_c.step()
        critic.clip_weights(config.critic_clip)
        if step % config.log_every == 0 or step == config.steps:
            result.history.append(
                {
                    "step": step,
                    "bce": round(bce.item(), 6),
                    "mse": round(mse.item(), 6),
                    "critic": round(c_loss.item(), 6),
                }
            )
    metrics = evaluate_codec(codec, None, val_ds.images, seed=config.seed + 2)
    result.final = metrics
    result.meets_targets = metrics["distorted"]["jpeg"] >= 0.9
    return codec, result
