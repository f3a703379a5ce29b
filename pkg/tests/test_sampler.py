"""Sampler units: timestep grid, guidance algebra, determinism."""

import pytest
import torch

from diffmark.sampler import SampleConfig, _timestep_grid, sample
from diffmark.schedule import build_schedule, single_step_reverse
from diffmark.unet import ConditionToken, DenoiserModel, UNetConfig


def small_model():
    torch.manual_seed(0)
    return DenoiserModel(UNetConfig(base_channels=16, emb_dim=32))


class StubModel(DenoiserModel):
    """Noise prediction that depends only on the conditioning branch."""

    def __init__(self, null_value=100.0):
        super().__init__(UNetConfig(base_channels=16, emb_dim=32))
        self.null_value = null_value

    def forward(self, z_t, t, class_ids, triggered=None, null_mask=None):
        out = torch.zeros(z_t.shape)
        for i in range(z_t.shape[0]):
            if null_mask is not None and bool(null_mask[i]):
                out[i] = self.null_value
            else:
                out[i] = float(class_ids[i]) * 0.01
        return out


class TestTimestepGrid:
    def test_endpoints_and_length(self):
        grid = _timestep_grid(1000, 25)
        assert len(grid) == 25
        assert grid[0] == 1000
        assert grid[-1] == 40

    def test_strictly_decreasing(self):
        grid = _timestep_grid(1000, 50)
        assert all(a > b for a, b in zip(grid, grid[1:]))

    def test_single_step(self):
        assert _timestep_grid(1000, 1) == [1000]

    def test_full_chain(self):
        assert _timestep_grid(10, 10) == list(range(10, 0, -1))


class TestValidation:
    def setup_method(self):
        self.model = small_model()
        self.schedule = build_schedule(T=50)

    def test_negative_guidance_rejected(self):
        with pytest.raises(ValueError, match="guidance_scale"):
            sample(self.model, self.schedule, ConditionToken(0), 1,
                   SampleConfig(guidance_scale=-1))

    def test_bad_num_steps_rejected(self):
        with pytest.raises(ValueError, match="num_steps"):
            sample(self.model, self.schedule, ConditionToken(0), 1,
                   SampleConfig(num_steps=51))

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError, match="method"):
            sample(self.model, self.schedule, ConditionToken(0), 1,
                   SampleConfig(method="euler"))

    def test_ddpm_needs_full_chain(self):
        with pytest.raises(ValueError, match="full chain"):
            sample(self.model, self.schedule, ConditionToken(0), 1,
                   SampleConfig(method="ddpm", num_steps=10))

    def test_cond_list_length_must_match(self):
        with pytest.raises(ValueError, match="condition tokens"):
            sample(self.model, self.schedule, [ConditionToken(0)] * 3, 2,
                   SampleConfig(num_steps=2))


class TestDeterminism:
    def setup_method(self):
        self.model = small_model()
        self.schedule = build_schedule(T=50)

    def test_same_seed_same_output(self):
        cfg = SampleConfig(num_steps=5, seed=3)
        a = sample(self.model, self.schedule, ConditionToken(1), 2, cfg)
        b = sample(self.model, self.schedule, ConditionToken(1), 2, cfg)
        assert torch.equal(a, b)

    def test_different_seed_different_output(self):
        a = sample(self.model, self.schedule, ConditionToken(1), 2,
                   SampleConfig(num_steps=5, seed=0))
        b = sample(self.model, self.schedule, ConditionToken(1), 2,
                   SampleConfig(num_steps=5, seed=1))
        assert not torch.equal(a, b)

    def test_ddpm_runs(self):
        schedule = build_schedule(T=10)
        out = sample(self.model, schedule, ConditionToken(0), 2,
                     SampleConfig(method="ddpm", num_steps=10, seed=0))
        assert out.shape == (2, 4, 8, 8)
        assert torch.isfinite(out).all()

    def test_training_mode_restored(self):
        self.model.train()
        sample(self.model, self.schedule, ConditionToken(0), 1, SampleConfig(num_steps=2))
        assert self.model.training


class TestGuidance:
    def setup_method(self):
        self.schedule = build_schedule(T=50)

    def test_zero_scale_ignores_class(self):
        model = StubModel()
        a = sample(model, self.schedule, ConditionToken(0), 2,
                   SampleConfig(num_steps=4, guidance_scale=0.0, seed=0))
        b = sample(model, self.schedule, ConditionToken(3), 2,
                   SampleConfig(num_steps=4, guidance_scale=0.0, seed=0))
        assert torch.equal(a, b)

    def test_unit_scale_cancels_null_branch(self):
        # eps_null + 1 * (eps_cond - eps_null) must reduce to eps_cond
        huge = StubModel(null_value=1000.0)
        tiny = StubModel(null_value=0.0)
        a = sample(huge, self.schedule, ConditionToken(2), 2,
                   SampleConfig(num_steps=4, guidance_scale=1.0, seed=0))
        b = sample(tiny, self.schedule, ConditionToken(2), 2,
                   SampleConfig(num_steps=4, guidance_scale=1.0, seed=0))
        assert torch.allclose(a, b, atol=1e-4)

    def test_single_ddim_step_is_one_reverse_jump(self):
        model = small_model()
        model.eval()
        schedule = build_schedule(T=50)
        cfg = SampleConfig(num_steps=1, guidance_scale=0.0, seed=7)
        out = sample(model, schedule, ConditionToken(0), 2, cfg)
        g = torch.Generator().manual_seed(7)
        z = torch.randn(2, 4, 8, 8, generator=g)
        with torch.no_grad():
            ids = torch.tensor([0, 0])
            trig = torch.zeros(2, dtype=torch.bool)
            null = torch.ones(2, dtype=torch.bool)
            eps = model(z, torch.tensor([50, 50]), ids, trig, null)
        expected = single_step_reverse(z, 50, eps, schedule)
        assert torch.allclose(out, expected, atol=1e-6)

    def test_mixed_condition_list(self):
        model = small_model()
        conds = [ConditionToken(0), ConditionToken(1, triggered=True)]
        out = sample(model, self.schedule, conds, 2, SampleConfig(num_steps=3, seed=0))
        assert out.shape == (2, 4, 8, 8)
