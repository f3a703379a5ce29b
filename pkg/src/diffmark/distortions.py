"""Image distortions in two families with different contracts.

Train-time distortions are differentiable end to end so extraction gradients
flow back to the pixel codec; randomness enters only through parameters drawn
ahead of the forward pass.  The differentiable JPEG uses the smooth rounding
surrogate r(x) = x - sin(2*pi*x) / (2*pi), whose derivative 1 - cos(2*pi*x)
is the true derivative of the op actually applied, so finite differences and
autograd agree to first order (a straight-through round would not satisfy
this).

Eval-time distortions are bit-exact reproducible given the seed and use
reference implementations (PIL's real JPEG codec, torchvision color ops).

Unit conventions: the public API takes images in [-1, 1]; internally every op
works in [0, 1], which is the domain the parameter ranges (noise sigma,
brightness offset, etc.) are stated in.

The eval blur is specified as a 3x3 kernel of "intensity 4"; that is read
here as a Gaussian with sigma = 4 truncated to the 3x3 support, which at this
kernel size is close to a box blur.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from PIL import Image

# ---------------------------------------------------------------------------
# eval-time family
# ---------------------------------------------------------------------------

_EVAL_KINDS = {
    "resize": {"scale": 0.5},
    "jpeg": {"quality": 50},
    "blur": {"kernel": 3, "sigma": 4.0},
    "noise": {"sigma": 0.1},
    "brightness": {"lo": 0.8, "hi": 1.2},
    "contrast": {"lo": 0.8, "hi": 1.2},
    "saturation": {"lo": 0.8, "hi": 1.2},
    "sharpness": {"factor": 10.0},
    "identity": {},
}


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _EVAL_KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}; known: {sorted(_EVAL_KINDS)}")
        allowed = _EVAL_KINDS[self.kind]
        for key in self.params:
            if key not in allowed and not (key == "factor" and ("lo" in allowed)):
                raise ValueError(f"distortion {self.kind!r} does not take parameter {key!r}")
        _validate_params(self.kind, {**allowed, **self.params})

    def resolved(self) -> dict:
        return {**_EVAL_KINDS[self.kind], **self.params}


def _validate_params(kind: str, p: dict) -> None:
    if kind == "resize" and not (0 < p["scale"] <= 1):
        raise ValueError(f"resize scale must lie in (0, 1], got {p['scale']}")
    if kind == "jpeg" and not (1 <= p["quality"] <= 100):
        raise ValueError(f"jpeg quality must lie in 1..100, got {p['quality']}")
    if kind == "blur" and (p["sigma"] <= 0 or int(p["kernel"]) % 2 != 1):
        raise ValueError(f"blur needs odd kernel and sigma > 0, got {p}")
    if kind == "noise" and p["sigma"] < 0:
        raise ValueError(f"noise sigma must be >= 0, got {p['sigma']}")
    if kind in ("brightness", "contrast", "saturation") and "factor" not in p:
        if not (0 < p["lo"] <= p["hi"]):
            raise ValueError(f"{kind} range must satisfy 0 < lo <= hi, got {p}")
    if kind == "sharpness" and p["factor"] < 0:
        raise ValueError(f"sharpness factor must be >= 0, got {p['factor']}")


def parse_distortion_spec(text: str) -> DistortionSpec:
    """Parse "kind:param=value,param=value" (params optional)."""
    kind, _, rest = text.partition(":")
    params: dict = {}
    if rest:
        for item in rest.split(","):
            key, sep, value = item.partition("=")
            if not sep or not key:
                raise ValueError(f"bad distortion parameter {item!r} in {text!r}")
            try:
                params[key] = int(value) if key in ("kernel", "quality") else float(value)
            except ValueError as e:
                raise ValueError(f"bad numeric value in {item!r}") from e
    return DistortionSpec(kind=kind, params=params)


def eval_suite() -> list[DistortionSpec]:
    """The standard robustness evaluation set."""
    return [
        DistortionSpec("resize"),
        DistortionSpec("jpeg"),
        DistortionSpec("blur"),
        DistortionSpec("noise"),
        DistortionSpec("brightness"),
        DistortionSpec("contrast"),
        DistortionSpec("saturation"),
        DistortionSpec("sharpness"),
    ]


def _to_unit(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def _from_unit(u: torch.Tensor) -> torch.Tensor:
    return u * 2.0 - 1.0


def _gaussian_kernel1d(kernel: int, sigma: float) -> torch.Tensor:
    half = (kernel - 1) / 2
    xs = torch.arange(kernel, dtype=torch.float32) - half
    k = torch.exp(-(xs**2) / (2 * sigma**2))
    return k / k.sum()


def _conv_blur(u: torch.Tensor, k1d: torch.Tensor) -> torch.Tensor:
    c = u.shape[1]
    pad = (k1d.shape[0] - 1) // 2
    kx = k1d.view(1, 1, 1, -1).repeat(c, 1, 1, 1).to(u.dtype)
    ky = k1d.view(1, 1, -1, 1).repeat(c, 1, 1, 1).to(u.dtype)
    u = F.conv2d(F.pad(u, (pad, pad, 0, 0), mode="replicate"), kx, groups=c)
    u = F.conv2d(F.pad(u, (0, 0, pad, pad), mode="replicate"), ky, groups=c)
    return u


def _grayscale(u: torch.Tensor) -> torch.Tensor:
    w = torch.tensor([0.299, 0.587, 0.114], dtype=u.dtype)
    return (u * w[None, :, None, None]).sum(dim=1, keepdim=True)


def _pil_roundtrip(u: torch.Tensor, op) -> torch.Tensor:
    out = []
    for img in u:
        arr = (img.clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
        pil = op(Image.fromarray(arr))
        out.append(torch.from_numpy(_np_asarray(pil)).permute(2, 0, 1).float() / 255.0)
    return torch.stack(out)


def _np_asarray(img: Image.Image):
    import numpy as np

    return np.array(img.convert("RGB"), dtype=np.uint8)


def apply_eval_distortion(
    images: torch.Tensor, spec: DistortionSpec, seed: int = 0
) -> torch.Tensor:
    """Apply one eval-family distortion; identical inputs and seed give
    identical bytes.  Per-image random factors come from one generator seeded
    at the call, so a whole run shares a single seed."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected [B, 3, H, W] images, got shape {tuple(images.shape)}")
    p = spec.resolved()
    if spec.kind == "identity":
        return images.clone()
    if spec.kind in ("brightness", "contrast", "saturation") and spec.params.get("factor") == 1.0:
        # factor 1.0 is the identity by contract, bit for bit
        return images.clone()
    u = _to_unit(images)
    g = torch.Generator().manual_seed(seed)
    if spec.kind == "resize":
        h, w = u.shape[2], u.shape[3]
        dh, dw = max(1, round(h * p["scale"])), max(1, round(w * p["scale"]))
        down = F.interpolate(u, size=(dh, dw), mode="bilinear", align_corners=False)
        u = F.interpolate(down, size=(h, w), mode="bilinear", align_corners=False)
    elif spec.kind == "jpeg":

        def roundtrip(img: Image.Image) -> Image.Image:
            buf = io.BytesIO()
            img.save(buf, format="JPEG", quality=int(p["quality"]))
            buf.seek(0)
            return Image.open(buf)

        u = _pil_roundtrip(u, roundtrip)
    elif spec.kind == "blur":
        u = _conv_blur(u, _gaussian_kernel1d(int(p["kernel"]), p["sigma"]))
    elif spec.kind == "noise":
        u = u + p["sigma"] * torch.randn(u.shape, generator=g)
    elif spec.kind in ("brightness", "contrast", "saturation"):
        if "factor" in spec.params:
            f = torch.full((u.shape[0],), float(spec.params["factor"]))
        else:
            f = p["lo"] + (p["hi"] - p["lo"]) * torch.rand(u.shape[0], generator=g)
        f = f[:, None, None, None]
        if spec.kind == "brightness":
            u = u * f
        elif spec.kind == "contrast":
            mean = _grayscale(u).mean(dim=(2, 3), keepdim=True)
            u = mean + f * (u - mean)
        else:
            gray = _grayscale(u)
            u = gray + f * (u - gray)
    elif spec.kind == "sharpness":
        from torchvision.transforms.functional import adjust_sharpness

        u = torch.stack([adjust_sharpness(img.clamp(0, 1), p["factor"]) for img in u])
    return _from_unit(u.clamp(0.0, 1.0))


# ---------------------------------------------------------------------------
# differentiable train-time family
# ---------------------------------------------------------------------------


def smooth_round(x: torch.Tensor) -> torch.Tensor:
    """Rounding surrogate with exact autograd: r(x) = x - sin(2 pi x)/(2 pi)."""
    return x - torch.sin(2 * math.pi * x) / (2 * math.pi)


# standard JPEG base quantization tables (luma, chroma)
_LUMA_TABLE = torch.tensor(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=torch.float32,
)
_CHROMA_TABLE = torch.tensor(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=torch.float32,
)


def _dct_matrix(n: int = 8, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    i = torch.arange(n, dtype=torch.float64)
    mat = torch.cos((2 * i[None, :] + 1) * i[:, None] * math.pi / (2 * n))
    mat[0] *= 1 / math.sqrt(2)
    return (mat * math.sqrt(2 / n)).to(dtype)


def _quality_scaled(table: torch.Tensor, quality: float) -> torch.Tensor:
    # libjpeg quality scaling; tables are constants, so floor is harmless here
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return torch.clamp(torch.floor((table * scale + 50.0) / 100.0), min=1.0)


def _blockify(ch: torch.Tensor) -> torch.Tensor:
    # [B, H, W] -> [B, nblocks, 8, 8]
    B, H, W = ch.shape
    ch = ch.view(B, H // 8, 8, W // 8, 8).permute(0, 1, 3, 2, 4)
    return ch.reshape(B, -1, 8, 8)


def _unblockify(blocks: torch.Tensor, H: int, W: int) -> torch.Tensor:
    B = blocks.shape[0]
    ch = blocks.view(B, H // 8, W // 8, 8, 8).permute(0, 1, 3, 2, 4)
    return ch.reshape(B, H, W)


def approx_jpeg(images: torch.Tensor, quality: float) -> torch.Tensor:
    """Differentiable JPEG on [-1, 1] images: YCbCr, 4:2:0 chroma pooling,
    blockwise DCT, smooth-rounded quantization, inverse transform.

    Image sides must be multiples of 16.  No clamping inside the pipeline so
    the map stays smooth; callers clamp afterwards if they need a valid image.
    """
    if not (1 <= quality <= 100):
        raise ValueError(f"jpeg quality must lie in 1..100, got {quality}")
    B, C, H, W = images.shape
    if C != 3 or H % 16 or W % 16:
        raise ValueError(f"expected [B, 3, 16k, 16k] images, got shape {tuple(images.shape)}")
    dt = images.dtype
    u = (images + 1.0) * 127.5  # [0, 255], no clamp

    r, g, b = u[:, 0], u[:, 1], u[:, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    cb = F.avg_pool2d(cb[:, None], 2)[:, 0]
    cr = F.avg_pool2d(cr[:, None], 2)[:, 0]

    D = _dct_matrix(8, dt)
    qy = _quality_scaled(_LUMA_TABLE, quality).to(dt)
    qc = _quality_scaled(_CHROMA_TABLE, quality).to(dt)

    def codec(ch: torch.Tensor, table: torch.Tensor, h: int, w: int) -> torch.Tensor:
        blocks = _blockify(ch - 128.0)
        coeff = D @ blocks @ D.T
        coeff = smooth_round(coeff / table) * table
        rec = D.T @ coeff @ D
        return _unblockify(rec, h, w) + 128.0

    y = codec(y, qy, H, W)
    cb = codec(cb, qc, H // 2, W // 2)
    cr = codec(cr, qc, H // 2, W // 2)
    cb = F.interpolate(cb[:, None], scale_factor=2, mode="bilinear", align_corners=False)[:, 0]
    cr = F.interpolate(cr[:, None], scale_factor=2, mode="bilinear", align_corners=False)[:, 0]

    cb = cb - 128.0
    cr = cr - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return torch.stack([r, g, b], dim=1) / 127.5 - 1.0


@dataclass
class TrainDistortionConfig:
    """Parameter ranges for the randomized train-time pipeline."""

    motion_len: tuple[int, int] = (3, 7)
    gaussian_kernel: int = 7
    gaussian_sigma: tuple[float, float] = (1.0, 3.0)
    noise_sigma: tuple[float, float] = (0.0, 0.2)
    hue_offset: float = 0.1
    desat: tuple[float, float] = (0.0, 1.0)
    contrast: tuple[float, float] = (0.5, 1.5)
    brightness: tuple[float, float] = (-0.3, 0.3)
    jpeg_quality: tuple[float, float] = (50.0, 100.0)


def sample_train_params(config: TrainDistortionConfig, g: torch.Generator) -> dict:
    """Draw one parameter set for the composed train pipeline."""

    def u(lo, hi):
        return lo + (hi - lo) * torch.rand((), generator=g).item()

    return {
        "motion_angle": u(0.0, math.pi),
        "motion_len": int(torch.randint(config.motion_len[0], config.motion_len[1] + 1, (), generator=g)),
        "gaussian_sigma": u(*config.gaussian_sigma),
        "noise_sigma": u(*config.noise_sigma),
        "noise_seed": int(torch.randint(0, 2**31 - 1, (), generator=g)),
        "hue": [u(-config.hue_offset, config.hue_offset) for _ in range(3)],
        "desat": u(*config.desat),
        "contrast": u(*config.contrast),
        "brightness": u(*config.brightness),
        "jpeg_quality": u(*config.jpeg_quality),
    }


def identity_train_params() -> dict:
    """Zero-strength parameter set; the pipeline is then a near-identity
    (only the q=100 JPEG quantization remains)."""
    return {
        "motion_angle": 0.0,
        "motion_len": 1,
        "gaussian_sigma": 1e-3,
        "noise_sigma": 0.0,
        "noise_seed": 0,
        "hue": [0.0, 0.0, 0.0],
        "desat": 0.0,
        "contrast": 1.0,
        "brightness": 0.0,
        "jpeg_quality": 100.0,
    }


def _motion_kernel(length: int, angle: float, dtype: torch.dtype) -> torch.Tensor:
    if length <= 1:
        k = torch.zeros(1, 1, dtype=dtype)
        k[0, 0] = 1.0
        return k
    size = length if length % 2 == 1 else length + 1
    k = torch.zeros(size, size, dtype=dtype)
    c = (size - 1) / 2
    # bilinear splat of points along the line through the center
    for s in torch.linspace(-(length - 1) / 2, (length - 1) / 2, 4 * length):
        yy = c + float(s) * math.sin(angle)
        xx = c + float(s) * math.cos(angle)
        y0, x0 = int(math.floor(yy)), int(math.floor(xx))
        fy, fx = yy - y0, xx - x0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                if 0 <= y0 + dy < size and 0 <= x0 + dx < size:
                    k[y0 + dy, x0 + dx] += wy * wx
    return k / k.sum()


def _conv2d_same(u: torch.Tensor, kernel2d: torch.Tensor) -> torch.Tensor:
    c = u.shape[1]
    kh, kw = kernel2d.shape
    k = kernel2d[None, None].repeat(c, 1, 1, 1).to(u.dtype)
    pad = (kw // 2, kw - 1 - kw // 2, kh // 2, kh - 1 - kh // 2)
    return F.conv2d(F.pad(u, pad, mode="replicate"), k, groups=c)


def apply_train_distortions(images: torch.Tensor, params: dict) -> torch.Tensor:
    """Composed differentiable pipeline with fixed drawn parameters.

    Order: motion blur, gaussian blur, noise, hue offsets, desaturation,
    contrast, brightness, differentiable JPEG.  Works on [-1, 1] images,
    parameter units refer to the internal [0, 1] domain.  The output is not
    clamped, preserving smoothness for gradient checks.
    """
    u = (images + 1.0) / 2.0
    dt = images.dtype
    u = _conv2d_same(u, _motion_kernel(params["motion_len"], params["motion_angle"], dt))
    u = _conv_blur(u, _gaussian_kernel1d(7, params["gaussian_sigma"]).to(dt))
    if params["noise_sigma"] > 0:
        g = torch.Generator().manual_seed(params["noise_seed"])
        u = u + params["noise_sigma"] * torch.randn(u.shape, generator=g, dtype=dt)
    hue = torch.tensor(params["hue"], dtype=dt)
    u = u + hue[None, :, None, None]
    gray = _grayscale(u)
    u = u + params["desat"] * (gray - u)
    mean = gray.mean(dim=(2, 3), keepdim=True)
    u = mean + params["contrast"] * (u - mean)
    u = u + params["brightness"]
    x = u * 2.0 - 1.0
    return approx_jpeg(x, params["jpeg_quality"])
