"""Removal and forgery attacks against the embedded watermark.

Three adversaries, all holding the released model weights but not the
message codec's extractor:

  * adapter fine-tuning: low-rank updates on every attention projection,
    trained on a shifted-style dataset with regular conditioning only,
  * full fine-tuning at a conservative learning rate, optionally mixing
    samples generated by the released model back into each batch so the base
    task is preserved while the style shifts,
  * decoder surgery: fine-tune or fully retrain the autoencoder's decoder so
    generated pixels no longer come from the released decoder.

A small supervised probe decides whether an attack actually changed the
output style (the attacker's success criterion); extraction always runs
through the owner's original autoencoder encoder.

The reference scheme used for comparison plants the mark as a vanilla
backdoor: fine-tune everything so the trigger maps to one fixed latent, mix
regular batches in to preserve the base task, and detect by thresholding the
distance of triggered samples to that fixed target.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import AutoencoderModel
from .codec import extract_bits
from .features import FrozenFeatures, perceptual_distance
from .pretrain import denoising_loss
from .sampler import SampleConfig, sample
from .schedule import NoiseSchedule, forward_noise
from .unet import CondAttention, ConditionToken, DenoiserModel
from .verify import detect


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable low-rank update.

    The update starts at exactly zero (B is zero-initialized), so wrapping is
    bitwise output-preserving until the first optimizer step, and the base
    weights are never touched.
    """

    def __init__(self, base: nn.Linear, rank: int, generator: torch.Generator):
        super().__init__()
        max_rank = min(base.in_features, base.out_features)
        if not (1 <= rank <= max_rank):
            raise ValueError(f"rank must lie in 1..{max_rank}, got {rank}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.down = nn.Parameter(
            torch.randn(rank, base.in_features, generator=generator) * 0.01
        )
        self.up = nn.Parameter(torch.zeros(base.out_features, rank))
        self.scale = 1.0 / rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + F.linear(F.linear(x, self.down), self.up) * self.scale


def apply_lora(model: DenoiserModel, rank: int, seed: int = 0) -> list[str]:
    """Wrap the q/k/v/out projections of every attention block; freeze the
    rest of the model.  Returns the wrapped module names."""
    g = torch.Generator().manual_seed(seed)
    for p in model.parameters():
        p.requires_grad_(False)
    wrapped = []
    for name, module in model.named_modules():
        if isinstance(module, CondAttention):
            for proj in ("q", "k", "v", "out"):
                layer = getattr(module, proj)
                setattr(module, proj, LoRALinear(layer, rank, g))
                wrapped.append(f"{name}.{proj}")
    return wrapped


@dataclass
class LoraAttackConfig:
    rank: int = 8
    steps: int = 800
    batch_size: int = 16
    lr: float = 1e-4
    cond_dropout: float = 0.1
    seed: int = 0
    checkpoint_every: int = 200


def lora_finetune(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    latents: torch.Tensor,
    labels: torch.Tensor,
    config: LoraAttackConfig,
    run_dir: str | Path | None = None,
) -> tuple[DenoiserModel, list[dict]]:
    """Adversarial adapter training on the attacker's data; regular
    conditioning only, since the attacker does not know the trigger.

    Snapshots of the model land under run_dir/checkpoints/step_{k} when a
    run directory is given.
    """
    apply_lora(model, config.rank, seed=config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    g = torch.Generator().manual_seed(config.seed + 23)
    history = []
    model.train()
    for step in range(1, config.steps + 1):
        idx = torch.randint(0, latents.shape[0], (config.batch_size,), generator=g)
        loss = denoising_loss(
            model, schedule, latents[idx], labels[idx], g, config.cond_dropout
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.checkpoint_every == 0 or step == config.steps:
            history.append({"step": step, "loss": round(loss.item(), 6)})
            if run_dir is not None:
                snap = Path(run_dir) / "checkpoints" / f"step_{step}"
                snap.mkdir(parents=True, exist_ok=True)
                torch.save(model.state_dict(), snap / "model.pt")
    return model, history


@dataclass
class FullFinetuneConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 5e-6
    preservation: bool = True
    pool_size: int = 128
    pool_sample_steps: int = 15
    pool_guidance: float = 2.0
    cond_dropout: float = 0.1
    seed: int = 0
    checkpoint_every: int = 200


@torch.no_grad()
def _preservation_pool(
    model: DenoiserModel, schedule: NoiseSchedule, config: FullFinetuneConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    num_classes = model.config.num_classes
    per_class = max(1, config.pool_size // num_classes)
    zs, ys = [], []
    for c in range(num_classes):
        cfg = SampleConfig(
            num_steps=config.pool_sample_steps,
            guidance_scale=config.pool_guidance,
            seed=config.seed * 1000 + c,
        )
        zs.append(sample(model, schedule, ConditionToken(c), per_class, cfg))
        ys.append(torch.full((per_class,), c, dtype=torch.int64))
    return torch.cat(zs), torch.cat(ys)


def full_finetune(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    latents: torch.Tensor,
    labels: torch.Tensor,
    config: FullFinetuneConfig,
    run_dir: str | Path | None = None,
) -> tuple[DenoiserModel, list[dict]]:
    """Whole-model fine-tuning on attacker data.  With preservation on, half
    of every batch is drawn from a pool of samples the unattacked model
    generated for its own classes, so the base task anchors the update."""
    pool_z = pool_y = None
    if config.preservation:
        pool_z, pool_y = _preservation_pool(copy.deepcopy(model).eval(), schedule, config)
    for p in model.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    g = torch.Generator().manual_seed(config.seed + 29)
    history = []
    model.train()
    n_pool = config.batch_size // 2 if config.preservation else 0
    for step in range(1, config.steps + 1):
        idx = torch.randint(
            0, latents.shape[0], (config.batch_size - n_pool,), generator=g
        )
        z0, y = latents[idx], labels[idx]
        if n_pool:
            pidx = torch.randint(0, pool_z.shape[0], (n_pool,), generator=g)
            z0 = torch.cat([z0, pool_z[pidx]])
            y = torch.cat([y, pool_y[pidx]])
        loss = denoising_loss(model, schedule, z0, y, g, config.cond_dropout)
        if not torch.isfinite(loss):
            raise RuntimeError(f"fine-tuning diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.checkpoint_every == 0 or step == config.steps:
            history.append({"step": step, "loss": round(loss.item(), 6)})
            if run_dir is not None:
                snap = Path(run_dir) / "checkpoints" / f"step_{step}"
                snap.mkdir(parents=True, exist_ok=True)
                torch.save(model.state_dict(), snap / "model.pt")
    return model, history


@dataclass
class DecoderAttackConfig:
    mode: str = "finetune"  # "finetune" | "replace"
    steps: int = 600
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0


def decoder_attack(
    ae: AutoencoderModel,
    codec,
    images: torch.Tensor,
    config: DecoderAttackConfig,
) -> tuple[AutoencoderModel, list[dict]]:
    """Return an autoencoder whose decoder was fine-tuned (perceptual loss
    only) or retrained from scratch against the frozen original encoder.

    The encoder is shared infrastructure and stays bitwise intact; owner-side
    extraction keeps using the original encoder regardless of what the
    attacker does to the decoder.
    """
    if config.mode not in ("finetune", "replace"):
        raise ValueError(f"unknown decoder attack mode {config.mode!r}")
    if codec is not None and codec.config.space != "latent":
        raise ValueError("decoder attacks apply to the latent variant only")
    attacked = copy.deepcopy(ae)
    for p in attacked.parameters():
        p.requires_grad_(False)
    if config.mode == "replace":
        torch.manual_seed(config.seed)
        fresh = AutoencoderModel(
            in_channels=attacked.in_channels,
            latent_channels=attacked.latent_channels,
            base_channels=attacked.base_channels,
        )
        attacked.decoder = fresh.decoder
    for p in attacked.decoder.parameters():
        p.requires_grad_(True)
    features = FrozenFeatures()
    opt = torch.optim.Adam(attacked.decoder.parameters(), lr=config.lr)
    g = torch.Generator().manual_seed(config.seed + 31)
    history = []
    for step in range(1, config.steps + 1):
        idx = torch.randint(0, images.shape[0], (config.batch_size,), generator=g)
        x = images[idx]
        with torch.no_grad():
            z = attacked.encode(x)
        recon = attacked.decode(z)
        if config.mode == "replace":
            # a decoder training from scratch needs the pixel anchor too
            loss = perceptual_distance(features, recon, x) + (recon - x).pow(2).mean()
        else:
            loss = perceptual_distance(features, recon, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0 or step == config.steps:
            history.append({"step": step, "loss": round(loss.item(), 6)})
    attacked.eval()
    return attacked, history


# ---------------------------------------------------------------------------
# style probe
# ---------------------------------------------------------------------------


class StyleProbe(nn.Module):
    """Binary classifier separating shifted-style images from base images."""

    def __init__(self, in_channels: int = 3, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Flatten(),
            nn.Linear(2 * width * 16, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)[:, 0]


@dataclass
class ProbeConfig:
    steps: int = 300
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    val_fraction: float = 0.15


def train_style_probe(
    base_images: torch.Tensor,
    style_images: torch.Tensor,
    config: ProbeConfig | None = None,
) -> tuple[StyleProbe, float]:
    """Supervised probe training; returns the probe and held-out accuracy."""
    cfg = config or ProbeConfig()
    torch.manual_seed(cfg.seed)
    probe = StyleProbe()
    x = torch.cat([base_images, style_images])
    y = torch.cat(
        [torch.zeros(base_images.shape[0]), torch.ones(style_images.shape[0])]
    )
    g = torch.Generator().manual_seed(cfg.seed + 37)
    perm = torch.randperm(x.shape[0], generator=g)
    x, y = x[perm], y[perm]
    n_val = max(1, int(cfg.val_fraction * x.shape[0]))
    x_val, y_val = x[:n_val], y[:n_val]
    x_tr, y_tr = x[n_val:], y[n_val:]
    opt = torch.optim.Adam(probe.parameters(), lr=cfg.lr)
    for step in range(cfg.steps):
        idx = torch.randint(0, x_tr.shape[0], (cfg.batch_size,), generator=g)
        loss = F.binary_cross_entropy_with_logits(probe(x_tr[idx]), y_tr[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    probe.eval()
    with torch.no_grad():
        acc = float(((probe(x_val) > 0) == (y_val > 0.5)).float().mean())
    return probe, acc


@torch.no_grad()
def probe_style_rate(probe: StyleProbe, images: torch.Tensor) -> float:
    """Fraction of images the probe assigns to the shifted style."""
    probe.eval()
    return float((probe(images) > 0).float().mean())


# ---------------------------------------------------------------------------
# reference single-target backdoor scheme
# ---------------------------------------------------------------------------


@dataclass
class BaselineBackdoorConfig:
    steps: int = 1200
    batch_size: int = 16
    lr: float = 2e-4
    mix: float = 0.5
    seed: int = 0


def train_baseline_backdoor(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    latents: torch.Tensor,
    labels: torch.Tensor,
    target_latent: torch.Tensor,
    config: BaselineBackdoorConfig,
) -> tuple[DenoiserModel, list[dict]]:
    """Vanilla trigger-to-fixed-image backdoor: every parameter trains, and
    each batch mixes regular denoising with triggered batches whose clean
    state is the single fixed target."""
    if target_latent.ndim == 3:
        target_latent = target_latent[None]
    for p in model.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    g = torch.Generator().manual_seed(config.seed + 41)
    history = []
    model.train()
    n_trig = max(1, int(config.mix * config.batch_size))
    n_reg = config.batch_size - n_trig
    for step in range(1, config.steps + 1):
        idx = torch.randint(0, latents.shape[0], (n_reg,), generator=g)
        z0 = torch.cat([latents[idx], target_latent.expand(n_trig, -1, -1, -1)])
        y = torch.cat(
            [labels[idx], torch.zeros(n_trig, dtype=torch.int64)]
        )
        trig = torch.cat(
            [torch.zeros(n_reg, dtype=torch.bool), torch.ones(n_trig, dtype=torch.bool)]
        )
        t = torch.randint(1, schedule.T + 1, (config.batch_size,), generator=g)
        eps = torch.randn(z0.shape, generator=g)
        z_t = forward_noise(z0, t, eps, schedule)
        pred = model(z_t, t, y, trig)
        loss = (pred - eps).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 200 == 0 or step == config.steps:
            history.append({"step": step, "loss": round(loss.item(), 6)})
    return model, history


@torch.no_grad()
def baseline_target_mse(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    target_latent: torch.Tensor,
    num_images: int = 32,
    sample_config: SampleConfig | None = None,
    triggered: bool = True,
) -> torch.Tensor:
    """Per-sample latent distance of (triggered) samples to the fixed target."""
    cfg = sample_config or SampleConfig(num_steps=20, guidance_scale=1.0)
    if target_latent.ndim == 3:
        target_latent = target_latent[None]
    z = sample(model, schedule, ConditionToken(0, triggered=triggered), num_images, cfg)
    return (z - target_latent).pow(2).flatten(1).mean(dim=1)


def calibrate_baseline_threshold(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    target_latent: torch.Tensor,
    num_images: int = 32,
    sample_config: SampleConfig | None = None,
) -> float:
    """Midpoint between triggered and regular distances to the target before
    any attack; detection below this distance counts as present."""
    trig = baseline_target_mse(
        model, schedule, target_latent, num_images, sample_config, triggered=True
    )
    reg = baseline_target_mse(
        model, schedule, target_latent, num_images, sample_config, triggered=False
    )
    return float((trig.mean() + reg.mean()) / 2)


def baseline_detection_rate(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    target_latent: torch.Tensor,
    threshold: float,
    num_images: int = 32,
    sample_config: SampleConfig | None = None,
) -> float:
    mse = baseline_target_mse(
        model, schedule, target_latent, num_images, sample_config, triggered=True
    )
    return float((mse < threshold).float().mean())


# ---------------------------------------------------------------------------
# robustness curves
# ---------------------------------------------------------------------------


@torch.no_grad()
def retention_point(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    ae: AutoencoderModel,
    codec,
    message: torch.Tensor,
    threshold,
    step: int = 0,
    num_per_class: int = 8,
    sample_config: SampleConfig | None = None,
    probe: StyleProbe | None = None,
) -> dict:
    """Watermark retention of one attack checkpoint: triggered bit accuracy
    and TPR, plus the regular-condition bit accuracy (which should stay near
    chance whether or not the attack succeeded).  With a probe, the row also
    carries the style rate of the regular samples as adaptation evidence."""
    cfg = sample_config or SampleConfig(num_steps=15, guidance_scale=2.0)
    trig, reg, reg_pixels = [], [], []
    for c in range(model.config.num_classes):
        per_class = SampleConfig(
            num_steps=cfg.num_steps,
            guidance_scale=cfg.guidance_scale,
            method=cfg.method,
            seed=cfg.seed * 100 + c,
        )
        for triggered, bucket in ((True, trig), (False, reg)):
            z = sample(
                model,
                schedule,
                ConditionToken(c, triggered=triggered),
                num_per_class,
                per_class,
            )
            x = ae.decode(z).clamp(-1.0, 1.0)
            bucket.append(extract_bits(codec, x, ae))
            if not triggered and probe is not None:
                reg_pixels.append(x)
    report = detect(torch.cat(trig), message, threshold)
    hard = (torch.cat(reg) >= 0.5).float()
    regular_acc = float((hard == message.flatten()[None, :]).float().mean())
    row = {
        "step": step,
        "bit_accuracy": round(report.mean_bit_accuracy, 6),
        "tpr": round(report.tpr, 6),
        "regular_bit_accuracy": round(regular_acc, 6),
    }
    if probe is not None:
        row["style_rate"] = round(probe_style_rate(probe, torch.cat(reg_pixels)), 6)
    return row


def robustness_curve(
    checkpoints: list[tuple[int, DenoiserModel]],
    schedule: NoiseSchedule,
    ae: AutoencoderModel,
    codec,
    message: torch.Tensor,
    threshold,
    num_per_class: int = 8,
    sample_config: SampleConfig | None = None,
    run_dir: str | Path | None = None,
) -> list[dict]:
    """Retention at each (step, model) pair, sorted by step; when a run
    directory is given the rows land as curve.json plus a rendered plot."""
    if codec is None:
        raise ValueError("robustness curve needs the trained codec")
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    rows = [
        retention_point(
            model,
            schedule,
            ae,
            codec,
            message,
            threshold,
            step=step,
            num_per_class=num_per_class,
            sample_config=sample_config,
        )
        for step, model in checkpoints
    ]
    rows.sort(key=lambda r: r["step"])
    if run_dir is not None:
        write_robustness_curve(run_dir, rows)
    return rows


def write_robustness_curve(run_dir: str | Path, rows: list[dict]) -> None:
    """Persist attack-vs-retention rows as curve.json and a rendered plot."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "curve.json", "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in rows]
    for key in sorted(rows[0]):
        if key == "step":
            continue
        ax.plot(steps, [r[key] for r in rows], marker="o", label=key)
    ax.set_xlabel("attack steps")
    ax.set_ylabel("metric")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(run_dir / "curve.png", dpi=120)
    plt.close(fig)
