"""Distortion families: eval-time reproducibility and train-time smoothness.

The finite-difference checks are the oracle for the differentiable pipeline:
autograd must agree with central differences to 1e-3 relative in float64.
"""

import math

import pytest
import torch

from diffmark.distortions import (
    DistortionSpec,
    TrainDistortionConfig,
    apply_eval_distortion,
    apply_train_distortions,
    approx_jpeg,
    eval_suite,
    identity_train_params,
    parse_distortion_spec,
    sample_train_params,
    smooth_round,
)


def rand_images(b, size, seed, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(b, 3, size, size, generator=g, dtype=dtype) * 1.6 - 0.8)


def smooth_images(b, size, seed, dtype=torch.float32):
    # low-frequency content, the regime real images live in; per-pixel noise
    # is the worst case for chroma subsampling and not representative
    g = torch.Generator().manual_seed(seed)
    ys, xs = torch.meshgrid(
        torch.linspace(-1, 1, size, dtype=dtype),
        torch.linspace(-1, 1, size, dtype=dtype),
        indexing="ij",
    )
    out = []
    for _ in range(b):
        chans = []
        for _ in range(3):
            fy, fx, py, px = (torch.rand(4, generator=g, dtype=dtype) * 2).tolist()
            chans.append(0.6 * torch.sin(fy * 2 * ys + py * 3) * torch.cos(fx * 2 * xs + px * 3))
        out.append(torch.stack(chans))
    return torch.stack(out)


def fd_directional(func, x, seed, h=1e-5):
    """Central-difference directional derivative vs autograd, both as scalars."""
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(x.shape, generator=g, dtype=x.dtype)
    w = torch.randn(func(x).shape, generator=g, dtype=x.dtype)

    def scalar(inp):
        return (func(inp) * w).sum()

    xx = x.clone().requires_grad_(True)
    scalar(xx).backward()
    auto = float((xx.grad * v).sum())
    num = float((scalar(x + h * v) - scalar(x - h * v)) / (2 * h))
    return auto, num


class TestSpecs:
    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            DistortionSpec("warp")

    def test_param_validation(self):
        with pytest.raises(ValueError):
            DistortionSpec("jpeg", {"quality": 0})
        with pytest.raises(ValueError):
            DistortionSpec("resize", {"scale": 0.0})
        with pytest.raises(ValueError):
            DistortionSpec("blur", {"sigma": -1.0})
        with pytest.raises(ValueError):
            DistortionSpec("jpeg", {"sigma": 1.0})

    def test_parse(self):
        spec = parse_distortion_spec("jpeg:quality=50")
        assert spec.kind == "jpeg" and spec.params == {"quality": 50}
        spec = parse_distortion_spec("blur:kernel=3,sigma=4.0")
        assert spec.params == {"kernel": 3, "sigma": 4.0}
        assert parse_distortion_spec("noise").params == {}

    def test_parse_errors(self):
        with pytest.raises(ValueError):
            parse_distortion_spec("jpeg:quality")
        with pytest.raises(ValueError):
            parse_distortion_spec("jpeg:quality=abc")

    def test_eval_suite_parameterization(self):
        # the standard operating points of the evaluation protocol
        by_kind = {s.kind: s.resolved() for s in eval_suite()}
        assert by_kind["resize"]["scale"] == 0.5
        assert by_kind["jpeg"]["quality"] == 50
        assert by_kind["blur"] == {"kernel": 3, "sigma": 4.0}
        assert by_kind["noise"]["sigma"] == 0.1
        for kind in ("brightness", "contrast", "saturation"):
            assert (by_kind[kind]["lo"], by_kind[kind]["hi"]) == (0.8, 1.2)
        assert by_kind["sharpness"]["factor"] == 10.0


class TestEvalFamily:
    def test_brightness_factor_one_is_identity(self):
        x = rand_images(3, 32, 0)
        out = apply_eval_distortion(x, DistortionSpec("brightness", {"factor": 1.0}))
        assert torch.equal(out, x)

    def test_shapes_preserved(self):
        x = rand_images(2, 32, 1)
        for spec in eval_suite():
            out = apply_eval_distortion(x, spec, seed=3)
            assert out.shape == x.shape, spec.kind
            assert out.min() >= -1.0 and out.max() <= 1.0, spec.kind

    def test_deterministic_given_seed(self):
        x = rand_images(2, 32, 2)
        for spec in eval_suite():
            a = apply_eval_distortion(x, spec, seed=9)
            b = apply_eval_distortion(x, spec, seed=9)
            assert torch.equal(a, b), spec.kind

    def test_noise_seed_matters(self):
        x = rand_images(2, 32, 3)
        a = apply_eval_distortion(x, DistortionSpec("noise"), seed=1)
        b = apply_eval_distortion(x, DistortionSpec("noise"), seed=2)
        assert not torch.equal(a, b)

    def test_jpeg_actually_compresses(self):
        x = smooth_images(2, 32, 4)
        out = apply_eval_distortion(x, DistortionSpec("jpeg"))
        assert not torch.equal(out, x)
        mse = (out - x).pow(2).mean()
        assert mse < 0.01  # recognizable image, not garbage

    def test_bad_input_shape(self):
        with pytest.raises(ValueError):
            apply_eval_distortion(torch.zeros(3, 32, 32), DistortionSpec("noise"))


class TestSmoothRound:
    def test_near_integers(self):
        x = torch.tensor([0.0, 1.0, -2.0, 5.0])
        assert torch.allclose(smooth_round(x), x, atol=1e-7)

    def test_derivative_matches_closed_form(self):
        x = torch.linspace(-2, 2, 41, dtype=torch.float64, requires_grad=True)
        smooth_round(x).sum().backward()
        want = 1 - torch.cos(2 * math.pi * x.detach())
        assert torch.allclose(x.grad, want, atol=1e-12)


class TestApproxJpeg:
    def test_quality_100_near_identity_constant(self):
        x = torch.full((1, 3, 16, 16), 0.2)
        out = approx_jpeg(x, 100.0)
        assert (out - x).abs().max() < 1e-2

    def test_shape_and_validation(self):
        with pytest.raises(ValueError):
            approx_jpeg(torch.zeros(1, 3, 20, 20), 75.0)
        with pytest.raises(ValueError):
            approx_jpeg(torch.zeros(1, 3, 16, 16), 0.0)

    def test_finite_difference_agreement(self):
        x = rand_images(1, 16, 5, dtype=torch.float64)
        for q in (50.0, 75.0, 95.0):
            auto, num = fd_directional(lambda a: approx_jpeg(a, q), x, seed=11)
            assert abs(auto - num) <= 1e-3 * max(abs(num), 1e-8), (q, auto, num)

    def test_quality_monotone_error_trend(self):
        x = rand_images(2, 32, 6)
        e50 = (approx_jpeg(x, 50.0) - x).pow(2).mean()
        e95 = (approx_jpeg(x, 95.0) - x).pow(2).mean()
        assert e95 < e50

    def test_divergence_from_real_codec_recorded(self):
        # the surrogate is not the real codec; record the gap, no assertion
        # beyond it being a sane image-to-image distance
        x = smooth_images(2, 32, 7)
        approx = approx_jpeg(x, 50.0).clamp(-1, 1)
        real = apply_eval_distortion(x, DistortionSpec("jpeg", {"quality": 50}))
        gap = (approx - real).pow(2).mean().item()
        print(f"approx-vs-real jpeg q50 mse: {gap:.5f}")
        assert gap < 0.5


class TestTrainPipeline:
    def test_sampled_params_in_ranges(self):
        cfg = TrainDistortionConfig()
        g = torch.Generator().manual_seed(13)
        for _ in range(200):
            p = sample_train_params(cfg, g)
            assert 3 <= p["motion_len"] <= 7
            assert 1.0 <= p["gaussian_sigma"] <= 3.0
            assert 0.0 <= p["noise_sigma"] <= 0.2
            assert all(-0.1 <= h <= 0.1 for h in p["hue"])
            assert 0.0 <= p["desat"] <= 1.0
            assert 0.5 <= p["contrast"] <= 1.5
            assert -0.3 <= p["brightness"] <= 0.3
            assert 50.0 <= p["jpeg_quality"] <= 100.0

    def test_zero_strength_near_identity(self):
        # residual error is the q=100 quantization plus 4:2:0 chroma loss,
        # a few pixels deep in edge regions; energy-wise the map is tiny
        x = smooth_images(2, 32, 8)
        out = apply_train_distortions(x, identity_train_params())
        assert (out - x).abs().max() < 0.1
        assert (out - x).pow(2).mean() < 1e-3

    def test_composed_finite_difference_agreement(self):
        cfg = TrainDistortionConfig()
        g = torch.Generator().manual_seed(17)
        x = rand_images(1, 16, 9, dtype=torch.float64)
        for trial in range(3):
            params = sample_train_params(cfg, g)
            auto, num = fd_directional(lambda a: apply_train_distortions(a, params), x, seed=trial)
            assert abs(auto - num) <= 1e-3 * max(abs(num), 1e-8), (trial, auto, num)

    def test_deterministic_given_params(self):
        x = rand_images(2, 32, 10)
        cfg = TrainDistortionConfig()
        g = torch.Generator().manual_seed(19)
        params = sample_train_params(cfg, g)
        assert torch.equal(
            apply_train_distortions(x, params), apply_train_distortions(x, params)
        )

    def test_gradient_reaches_input(self):
        x = rand_images(1, 16, 11).requires_grad_(True)
        g = torch.Generator().manual_seed(23)
        params = sample_train_params(TrainDistortionConfig(), g)
        apply_train_distortions(x, params).pow(2).sum().backward()
        assert x.grad is not None
        assert float(x.grad.abs().max()) > 0
