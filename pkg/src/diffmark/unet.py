"""Conditional denoiser backbone for the latent diffusion model.

A small two-level UNet over latents with residual blocks (time and class
conditioning via FiLM) and single-head self-attention at both resolutions.
Each attention block additionally attends over one projected condition token,
so the class signal reaches attention parameters directly; this is the
pathway the backdoor stage trains.

Class conditioning uses an embedding table with three kinds of rows:

  * trained class rows, one per dataset class,
  * a trained null row used for classifier-free guidance dropout,
  * reserved trigger rows, randomly initialized from a pinned seed and
    registered as a buffer, never as a parameter.

Trigger rows therefore cannot drift during any training stage, and a copy of
the model always carries the identical trigger vector, the same way a rare
token embedding stays fixed in a frozen text encoder.  A triggered condition
adds the sum of the first trigger_len trigger rows to its class embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ConditionToken:
    """A class id plus a trigger flag; the unit of conditioning in this package."""

    class_id: int
    triggered: bool = False


def make_triggered(cond: ConditionToken) -> ConditionToken:
    """Return the triggered version of a condition token, class id preserved."""
    if cond.triggered:
        raise ValueError(f"condition {cond} already carries the trigger")
    return ConditionToken(class_id=cond.class_id, triggered=True)


@dataclass
class UNetConfig:
    latent_channels: int = 4
    latent_size: int = 8
    base_channels: int = 48
    emb_dim: int = 128
    num_classes: int = 4
    trigger_slots: int = 5
    trigger_len: int = 1
    trigger_seed: int = 1234


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal embedding of integer timesteps, shape [B, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class CondResBlock(nn.Module):
    """Residual block with the pooled embedding injected after the first conv."""

    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.emb_proj(self.act(emb))[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return self.skip(x) + h


class CondAttention(nn.Module):
    """Self-attention over spatial tokens plus one projected condition token.

    Queries come from spatial positions only; keys and values cover spatial
    positions and the condition token, so attention can route conditioning
    into any location.  q/k/v/out are plain Linear layers, which is what the
    low-rank attack adapters wrap.
    """

    def __init__(self, channels: int, emb_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)
        self.cond_proj = nn.Linear(emb_dim, channels)
        self.scale = channels**-0.5

    def forward(self, x: torch.Tensor, cond_emb: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        h = self.norm(x).view(B, C, H * W).transpose(1, 2)
        ctx = torch.cat([h, self.cond_proj(cond_emb)[:, None, :]], dim=1)
        q = self.q(h)
        k = self.k(ctx)
        v = self.v(ctx)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.out(attn @ v).transpose(1, 2).view(B, C, H, W)
        return x + out


class DenoiserModel(nn.Module):
    def __init__(self, config: UNetConfig | None = None):
        super().__init__()
        cfg = config or UNetConfig()
        if not (1 <= cfg.trigger_len <= cfg.trigger_slots):
            raise ValueError(
                f"trigger_len must lie in 1..{cfg.trigger_slots}, got {cfg.trigger_len}"
            )
        self.config = cfg
        b, ed = cfg.base_channels, cfg.emb_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(ed, ed), nn.SiLU(), nn.Linear(ed, ed)
        )
        # trained rows: one per class plus the null row at index num_classes
        self.class_table = nn.Parameter(torch.zeros(cfg.num_classes + 1, ed))
        nn.init.normal_(self.class_table, std=0.1)
        g = torch.Generator().manual_seed(cfg.trigger_seed)
        trigger = torch.randn(cfg.trigger_slots, ed, generator=g) * 0.5
        self.register_buffer("trigger_table", trigger)

        self.conv_in = nn.Conv2d(cfg.latent_channels, b, 3, padding=1)
        self.down_res1 = CondResBlock(b, b, ed)
        self.down_attn1 = CondAttention(b, ed)
        self.downsample = nn.Conv2d(b, b, 3, stride=2, padding=1)
        self.down_res2 = CondResBlock(b, 2 * b, ed)
        self.down_attn2 = CondAttention(2 * b, ed)
        self.mid_res1 = CondResBlock(2 * b, 2 * b, ed)
        self.mid_attn = CondAttention(2 * b, ed)
        self.mid_res2 = CondResBlock(2 * b, 2 * b, ed)
        self.up_res1 = CondResBlock(4 * b, 2 * b, ed)
        self.up_attn1 = CondAttention(2 * b, ed)
        self.up_conv = nn.Conv2d(2 * b, b, 3, padding=1)
        self.up_res2 = CondResBlock(2 * b, b, ed)
        self.up_attn2 = CondAttention(b, ed)
        self.norm_out = nn.GroupNorm(8, b)
        self.conv_out = nn.Conv2d(b, cfg.latent_channels, 3, padding=1)

    @property
    def trigger_vector(self) -> torch.Tensor:
        return self.trigger_table[: self.config.trigger_len].sum(dim=0)

    def condition_embedding(
        self,
        class_ids: torch.Tensor,
        triggered: torch.Tensor | None,
        null_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        nc = self.config.num_classes
        if class_ids.ndim != 1:
            raise ValueError(f"class_ids must be 1-D, got shape {tuple(class_ids.shape)}")
        if int(class_ids.min()) < 0 or int(class_ids.max()) >= nc:
            raise ValueError(f"class ids must lie in 0..{nc - 1}")
        emb = self.class_table[class_ids]
        if triggered is not None and triggered.any():
            emb = emb + triggered.float()[:, None] * self.trigger_vector[None, :]
        if null_mask is not None and null_mask.any():
            null = self.class_table[nc][None, :].expand_as(emb)
            emb = torch.where(null_mask[:, None], null, emb)
        return emb

    def forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        class_ids: torch.Tensor,
        triggered: torch.Tensor | None = None,
        null_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Predict the noise component of z_t.  Output shape equals input shape."""
        if z_t.ndim != 4 or z_t.shape[1] != self.config.latent_channels:
            raise ValueError(
                f"expected [B, {self.config.latent_channels}, h, w] input, "
                f"got shape {tuple(z_t.shape)}"
            )
        if t.ndim != 1 or t.shape[0] != z_t.shape[0]:
            raise ValueError("t must be 1-D and match the batch size")
        c_emb = self.condition_embedding(class_ids, triggered, null_mask)
        emb = self.time_mlp(timestep_embedding(t, self.config.emb_dim)) + c_emb

        h = self.conv_in(z_t)
        h = self.down_res1(h, emb)
        h = self.down_attn1(h, c_emb)
        skip1 = h
        h = self.downsample(h)
        h = self.down_res2(h, emb)
        h = self.down_attn2(h, c_emb)
        skip2 = h
        h = self.mid_res1(h, emb)
        h = self.mid_attn(h, c_emb)
        h = self.mid_res2(h, emb)
        h = self.up_res1(torch.cat([h, skip2], dim=1), emb)
        h = self.up_attn1(h, c_emb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up_conv(h)
        h = self.up_res2(torch.cat([h, skip1], dim=1), emb)
        h = self.up_attn2(h, c_emb)
        return self.conv_out(F.silu(self.norm_out(h)))

    def attention_groups(self) -> dict[str, list[str]]:
        """Disjoint named groups of attention parameter names by location."""
        groups = {"down_attn": [], "mid_attn": [], "up_attn": []}
        for module_name, module in self.named_modules():
            if not isinstance(module, CondAttention):
                continue
            if module_name.startswith("down_"):
                key = "down_attn"
            elif module_name.startswith("mid_"):
                key = "mid_attn"
            else:
                key = "up_attn"
            for pname, _ in module.named_parameters():
                groups[key].append(f"{module_name}.{pname}")
        return groups


def predict_noise(
    model: DenoiserModel,
    z_t: torch.Tensor,
    t: torch.Tensor | int,
    cond: ConditionToken,
) -> torch.Tensor:
    """Single-condition convenience wrapper around the model forward."""
    B = z_t.shape[0]
    if isinstance(t, int):
        t = torch.full((B,), t, dtype=torch.int64)
    class_ids = torch.full((B,), cond.class_id, dtype=torch.int64)
    triggered = torch.full((B,), cond.triggered, dtype=torch.bool)
    return model(z_t, t, class_ids, triggered)
