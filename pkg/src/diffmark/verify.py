"""Exact binomial ownership verification.

Under the null hypothesis (no watermark) each extracted bit matches the key
message independently with probability 1/2, so the match count M over n bits
is Binomial(n, 1/2).  The false positive rate of the decision rule "M > k" is

    FPR(k) = sum_{i=k+1}^{n} C(n, i) / 2^n,

computed here in exact integer arithmetic (fractions.Fraction).  The detection
threshold k* for a target FPR is the smallest k whose tail falls at or below
the target, so FPR(k*) <= target < FPR(k* - 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
import torch


def hex_to_bits(message: str, n: int) -> torch.Tensor:
    """Decode a hex string into a float tensor of n bits, most significant first.

    The string must have exactly ceil(n/4) hex digits (an optional ``0x``
    prefix is allowed) and any padding bits above bit n-1 must be zero.
    """
    s = message.lower().removeprefix("0x")
    want = (n + 3) // 4
    if len(s) != want:
        raise ValueError(f"message {message!r}: expected {want} hex digits for n={n}, got {len(s)}")
    try:
        value = int(s, 16)
    except ValueError as e:
        raise ValueError(f"message {message!r} is not valid hex") from e
    if value >> n:
        raise ValueError(f"message {message!r} has bits set beyond n={n}")
    bits = [(value >> (n - 1 - i)) & 1 for i in range(n)]
    return torch.tensor(bits, dtype=torch.float32)


def bits_to_hex(bits: torch.Tensor | Sequence[int]) -> str:
    """Inverse of hex_to_bits; rounds soft bits at 0.5 first."""
    hard = _as_bit_list(bits)
    n = len(hard)
    value = 0
    for b in hard:
        value = (value << 1) | b
    return format(value, f"0{(n + 3) // 4}x")


def _as_bit_list(bits) -> list[int]:
    if isinstance(bits, torch.Tensor):
        arr = bits.detach().cpu().numpy()
    else:
        arr = np.asarray(bits)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D bit sequence, got shape {arr.shape}")
    return [1 if float(v) >= 0.5 else 0 for v in arr]


def fpr(n: int, k: int) -> Fraction:
    """Exact P(M > k) for M ~ Binomial(n, 1/2), as a Fraction."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not (0 <= k <= n):
        raise ValueError(f"k must lie in 0..{n}, got {k}")
    tail = sum(math.comb(n, i) for i in range(k + 1, n + 1))
    return Fraction(tail, 2**n)


def threshold_for_fpr(n: int, target: float) -> "DetectionThreshold":
    """Smallest k with fpr(n, k) <= target.

    target is accepted on the closed interval [0, 1]; Fraction/float
    comparison in python is exact, so no tolerance is involved.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not (0.0 <= target <= 1.0):
        raise ValueError(f"target FPR must lie in [0, 1], got {target}")
    for k in range(n + 1):
        f = fpr(n, k)
        if f <= target:
            return DetectionThreshold(n=n, k_star=k, target_fpr=float(target), achieved_fpr=f)
    # fpr(n, n) == 0 <= target always, so this is unreachable
    raise AssertionError("no threshold found")


@dataclass(frozen=True)
class DetectionThreshold:
    n: int
    k_star: int
    target_fpr: float
    achieved_fpr: Fraction

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "k_star": self.k_star,
            "target_fpr": self.target_fpr,
            "achieved_fpr": float(self.achieved_fpr),
            "achieved_fpr_exact": f"{self.achieved_fpr.numerator}/{self.achieved_fpr.denominator}",
        }


def bit_accuracy(extracted: torch.Tensor | Sequence[int], message: torch.Tensor | Sequence[int]) -> float:
    """Fraction of matching bits; soft inputs are rounded at 0.5."""
    a = _as_bit_list(extracted)
    b = _as_bit_list(message)
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    return sum(int(x == y) for x, y in zip(a, b)) / len(a)


@dataclass
class WatermarkReport:
    """Outcome of running the detector over a set of images."""

    n: int
    k_star: int
    target_fpr: float
    achieved_fpr: float
    achieved_fpr_exact: str
    num_images: int
    match_counts: list[int]
    detected: list[bool]
    tpr: float
    mean_bit_accuracy: float
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "n": self.n,
            "k_star": self.k_star,
            "target_fpr": self.target_fpr,
            "achieved_fpr": self.achieved_fpr,
            "achieved_fpr_exact": self.achieved_fpr_exact,
            "num_images": self.num_images,
            "match_counts": self.match_counts,
            "detected": self.detected,
            "tpr": self.tpr,
            "mean_bit_accuracy": self.mean_bit_accuracy,
        }
        d.update(self.extras)
        return d


def detect(
    soft_bits: torch.Tensor,
    message: torch.Tensor | Sequence[int],
    threshold: DetectionThreshold,
) -> WatermarkReport:
    """Apply the M > k* rule to a batch of extracted soft bit vectors.

    soft_bits has shape [num_images, n]; the verdict for each image is
    independent and the aggregate TPR is the detected fraction.
    """
    if soft_bits.ndim != 2:
        raise ValueError(f"soft_bits must be [num_images, n], got shape {tuple(soft_bits.shape)}")
    if soft_bits.shape[0] == 0:
        raise ValueError("empty image set")
    key = _as_bit_list(message)
    if soft_bits.shape[1] != len(key) or len(key) != threshold.n:
        raise ValueError(
            f"bit length mismatch: soft_bits n={soft_bits.shape[1]}, "
            f"message n={len(key)}, threshold n={threshold.n}"
        )
    hard = (soft_bits.detach().cpu() >= 0.5).to(torch.int64).numpy()
    key_arr = np.asarray(key, dtype=np.int64)
    matches = (hard == key_arr[None, :]).sum(axis=1)
    detected = [int(m) > threshold.k_star for m in matches]
    return WatermarkReport(
        n=threshold.n,
        k_star=threshold.k_star,
        target_fpr=threshold.target_fpr,
        achieved_fpr=float(threshold.achieved_fpr),
        achieved_fpr_exact=f"{threshold.achieved_fpr.numerator}/{threshold.achieved_fpr.denominator}",
        num_images=int(soft_bits.shape[0]),
        match_counts=[int(m) for m in matches],
        detected=detected,
        tpr=sum(detected) / len(detected),
        mean_bit_accuracy=float((hard == key_arr[None, :]).mean()),
    )


def bernoulli_diagnostics(
    soft_bits: torch.Tensor,
    mean_bounds: tuple[float, float] = (0.4, 0.6),
    max_offdiag_corr: float = 0.2,
) -> dict:
    """Check extracted bits from clean images against the Bernoulli(1/2) null.

    Returns per-bit means, the max absolute off-diagonal correlation of the
    hardened bits, and pass flags for both against the given bounds.  Needs at
    least 2 images to form correlations.
    """
    if soft_bits.ndim != 2:
        raise ValueError(f"soft_bits must be [num_images, n], got shape {tuple(soft_bits.shape)}")
    num, n = soft_bits.shape
    if num < 2:
        raise ValueError(f"need at least 2 images for diagnostics, got {num}")
    hard = (soft_bits.detach().cpu() >= 0.5).to(torch.float64).numpy()
    means = hard.mean(axis=0)
    lo, hi = mean_bounds
    means_ok = bool(np.all((means >= lo) & (means <= hi)))
    # constant columns have zero variance; their mean is 0 or 1 and already
    # fails the mean check, so define their correlations as 0 here
    std = hard.std(axis=0)
    safe = np.where(std > 0, std, 1.0)
    centered = (hard - means[None, :]) / safe[None, :]
    corr = centered.T @ centered / num
    np.fill_diagonal(corr, 1.0)
    offdiag = np.abs(corr - np.eye(n)).max()
    return {
        "num_images": num,
        "n": n,
        "per_bit_means": means.tolist(),
        "max_abs_offdiag_corr": float(offdiag),
        "means_in_bounds": means_ok,
        "corr_in_bounds": bool(offdiag <= max_offdiag_corr),
        "passed": bool(means_ok and offdiag <= max_offdiag_corr),
    }
