"""Versioned checkpoint container for every model kind in the package.

Each file stores the format version, the model kind, the constructor config,
and the state dict.  Loading rebuilds the model from the stored config, so a
checkpoint is self-describing; a version or kind mismatch is an error, not a
best-effort load.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

from .autoencoder import AutoencoderModel
from .codec import CodecConfig, WatermarkCodec
from .unet import DenoiserModel, UNetConfig

FORMAT_VERSION = 1

KINDS = ("autoencoder", "denoiser", "codec")


def _config_of(model) -> dict:
    if isinstance(model, AutoencoderModel):
        return {
            "in_channels": model.in_channels,
            "latent_channels": model.latent_channels,
            "base_channels": model.base_channels,
        }
    if isinstance(model, DenoiserModel):
        return asdict(model.config)
    if isinstance(model, WatermarkCodec):
        return asdict(model.config)
    raise TypeError(f"no checkpoint support for {type(model).__name__}")


def _kind_of(model) -> str:
    if isinstance(model, AutoencoderModel):
        return "autoencoder"
    if isinstance(model, DenoiserModel):
        return "denoiser"
    if isinstance(model, WatermarkCodec):
        return "codec"
    raise TypeError(f"no checkpoint support for {type(model).__name__}")


def save_checkpoint(path: str | Path, model, extra: dict | None = None) -> None:
    """Write a self-describing checkpoint; parent directories must exist."""
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": _kind_of(model),
        "config": _config_of(model),
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path: str | Path, expected_kind: str | None = None):
    """Rebuild the model stored at path; returns (model, extra dict)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    payload = torch.load(path, weights_only=True)
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ValueError(f"{path} is not a checkpoint written by this package")
    version = payload["format_version"]
    if version != FORMAT_VERSION:
        raise ValueError(
            f"checkpoint format version {version} is not supported "
            f"(this build reads version {FORMAT_VERSION})"
        )
    kind = payload["kind"]
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    if expected_kind is not None and kind != expected_kind:
        raise ValueError(f"expected a {expected_kind} checkpoint, found {kind}")
    cfg = payload["config"]
    if kind == "autoencoder":
        model = AutoencoderModel(**cfg)
    elif kind == "denoiser":
        model = DenoiserModel(UNetConfig(**cfg))
    else:
        model = WatermarkCodec(CodecConfig(**cfg))
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload.get("extra", {})
