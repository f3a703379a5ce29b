"""Latent watermarking for toy diffusion models.

The package covers the full pipeline: a convolutional autoencoder defining the
latent space, a conditional denoiser trained on synthetic data, a secret
message codec operating on latents (or pixels), trigger-conditioned backdoor
injection by self-distillation, exact binomial ownership verification, and a
harness of removal attacks (LoRA / full fine-tuning / decoder surgery).
"""

__version__ = "0.1.0"

from .schedule import NoiseSchedule, build_schedule, forward_noise, single_step_reverse
from .verify import (
    DetectionThreshold,
    WatermarkReport,
    bit_accuracy,
    bits_to_hex,
    fpr,
    hex_to_bits,
    threshold_for_fpr,
)

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "forward_noise",
    "single_step_reverse",
    "DetectionThreshold",
    "WatermarkReport",
    "fpr",
    "threshold_for_fpr",
    "bit_accuracy",
    "hex_to_bits",
    "bits_to_hex",
]
