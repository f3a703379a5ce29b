"""Backbone fine-tuning units: gate weights, loss closed form, selectors."""

import copy

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffmark.backdoor import (
    SELECTORS,
    BackdoorTrainConfig,
    backdoor_loss,
    fine_tune_backbone,
    select_trainable,
    sigmoid_weights,
)
from diffmark.schedule import build_schedule
from diffmark.unet import DenoiserModel, UNetConfig


class TestSigmoidWeights:
    def test_complement_at_center(self):
        w1, w2 = sigmoid_weights(250.0)
        assert float(w1) == 0.5
        assert float(w2) == 0.5

    def test_known_offset_value(self):
        # two gate widths below center: w1 = sigmoid(2)
        w1, _ = sigmoid_weights(50.0, tau=250.0, beta=100.0)
        expected = float(torch.sigmoid(torch.tensor(2.0, dtype=torch.float64)))
        assert abs(float(w1) - expected) < 1e-12

    @given(
        t=st.floats(min_value=0, max_value=1000),
        tau=st.floats(min_value=1, max_value=999),
        beta=st.floats(min_value=1, max_value=500),
    )
    @settings(max_examples=200, deadline=None)
    def test_weights_sum_to_one(self, t, tau, beta):
        w1, w2 = sigmoid_weights(t, tau, beta)
        assert abs(float(w1 + w2) - 1.0) < 1e-12

    def test_monotone_handover(self):
        t = torch.arange(0, 1001, dtype=torch.float64)
        w1, w2 = sigmoid_weights(t)
        assert torch.all(w1[1:] < w1[:-1])
        assert torch.all(w2[1:] > w2[:-1])

    def test_late_steps_weight_the_shift(self):
        w1_low, _ = sigmoid_weights(10.0)
        w1_high, _ = sigmoid_weights(990.0)
        assert float(w1_low) > 0.9
        assert float(w1_high) < 0.1

    def test_bad_width_rejected(self):
        with pytest.raises(ValueError, match="beta"):
            sigmoid_weights(100.0, beta=0.0)


def random_batch(seed=0, batch=6):
    g = torch.Generator().manual_seed(seed)
    mk = lambda: torch.randn(batch, 4, 8, 8, generator=g)
    t = torch.randint(1, 1001, (batch,), generator=g)
    return mk(), mk(), mk(), t


class TestBackdoorLoss:
    def test_closed_form_when_student_equals_teacher(self):
        trig, reg, delta, t = random_batch()
        total, parts = backdoor_loss(trig, trig, reg, reg, delta[:1], t, eta=0.02)
        w1, _ = sigmoid_weights(t)
        expected = 0.02 * float((w1 * delta[:1].pow(2).sum().double()).mean())
        assert abs(float(total) - expected) / expected < 1e-5
        assert parts["consistency"] == 0.0
        assert parts["regular"] == 0.0

    @given(seed=st.integers(min_value=0, max_value=2**16))
    @settings(max_examples=25, deadline=None)
    def test_closed_form_random_inputs(self, seed):
        trig, reg, delta, t = random_batch(seed)
        total, _ = backdoor_loss(trig, trig, reg, reg, delta[:1], t)
        w1, _ = sigmoid_weights(t)
        expected = 0.02 * float((w1 * delta[:1].pow(2).sum().double()).mean())
        assert abs(float(total) - expected) <= 1e-5 * max(expected, 1.0)

    def test_shift_term_scales_with_eta(self):
        trig, reg, delta, t = random_batch(3)
        _, parts1 = backdoor_loss(trig, trig, reg, reg, delta[:1], t, eta=0.02)
        _, parts2 = backdoor_loss(trig, trig, reg, reg, delta[:1], t, eta=0.04)
        assert abs(parts2["shift"] - 2 * parts1["shift"]) < 1e-9

    def test_terms_reported_separately(self):
        g = torch.Generator().manual_seed(7)
        trig, reg, delta, t = random_batch(7)
        s_trig = trig + 0.1 * torch.randn(trig.shape, generator=g)
        s_reg = reg + 0.1 * torch.randn(reg.shape, generator=g)
        total, parts = backdoor_loss(s_trig, trig, s_reg, reg, delta[:1], t)
        assert set(parts) == {"shift", "consistency", "regular"}
        assert all(v > 0 for v in parts.values())
        assert abs(float(total) - sum(parts.values())) < 1e-5

    def test_per_sample_sum_reduction(self):
        # doubling the residual quadruples the closed-form total
        trig, reg, delta, t = random_batch(11)
        a, _ = backdoor_loss(trig, trig, reg, reg, delta[:1], t)
        b, _ = backdoor_loss(trig, trig, reg, reg, 2 * delta[:1], t)
        assert abs(float(b) / float(a) - 4.0) < 1e-4

    def test_t_shape_mismatch_rejected(self):
        trig, reg, delta, _ = random_batch()
        with pytest.raises(ValueError, match="batch"):
            backdoor_loss(trig, trig, reg, reg, delta[:1], torch.ones(2, dtype=torch.int64))

    def test_nonfinite_rejected(self):
        trig, reg, delta, t = random_batch()
        bad = trig.clone()
        bad[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError, match="nonfinite"):
            backdoor_loss(bad, trig, reg, reg, delta[:1], t)


class TestSelectTrainable:
    def setup_method(self):
        self.model = DenoiserModel()

    def test_every_selector_valid(self):
        for sel in SELECTORS:
            names = select_trainable(self.model, sel)
            assert names == sorted(names)
            trainable = {n for n, p in self.model.named_parameters() if p.requires_grad}
            assert trainable == set(names)

    def test_mid_up_is_superset_of_up(self):
        up = set(select_trainable(self.model, "up_attn"))
        mid_up = set(select_trainable(self.model, "mid_up_attn"))
        assert up < mid_up

    def test_all_attn_is_union(self):
        down = set(select_trainable(self.model, "down_attn"))
        mid_up = set(select_trainable(self.model, "mid_up_attn"))
        assert set(select_trainable(self.model, "all_attn")) == down | mid_up

    def test_down_and_up_disjoint(self):
        down = set(select_trainable(self.model, "down_attn"))
        up = set(select_trainable(self.model, "up_attn"))
        assert not down & up

    def test_embedding_tables_never_selected(self):
        names = select_trainable(self.model, "all_attn")
        assert not any("class_table" in n for n in names)

    def test_unknown_selector_rejected(self):
        with pytest.raises(ValueError, match="selector"):
            select_trainable(self.model, "everything")


def tiny_finetune(selector="up_attn", steps=3):
    torch.manual_seed(0)
    model = DenoiserModel(UNetConfig(base_channels=16, emb_dim=32))
    schedule = build_schedule(T=100)
    g = torch.Generator().manual_seed(5)
    residual = torch.randn(1, 4, 8, 8, generator=g) * 0.3
    config = BackdoorTrainConfig(
        steps=steps,
        batch_size=4,
        selector=selector,
        pool_size=8,
        pool_sample_steps=2,
        log_every=1,
    )
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    model, info = fine_tune_backbone(model, schedule, residual, config)
    return model, info, before


class TestFineTuneBackbone:
    def test_frozen_parameters_bitwise_unchanged(self):
        model, info, before = tiny_finetune()
        selected = set(info["trainable"])
        for name, p in model.named_parameters():
            if name not in selected:
                assert torch.equal(p, before[name]), f"{name} drifted while frozen"

    def test_selected_parameters_updated(self):
        model, info, before = tiny_finetune()
        changed = [
            n for n in info["trainable"]
            if not torch.equal(dict(model.named_parameters())[n], before[n])
        ]
        assert changed, "no selected parameter moved"

    def test_trigger_rows_not_trainable(self):
        # trigger rows live in a buffer, so they cannot appear here at all
        model, info, _ = tiny_finetune()
        assert not any("trigger" in n for n in info["trainable"])

    def test_history_recorded(self):
        _, info, _ = tiny_finetune(steps=4)
        assert [row["step"] for row in info["history"]] == [1, 2, 3, 4]
        assert {"shift", "consistency", "regular"} <= set(info["history"][0])

    def test_batched_residual_rejected(self):
        model = DenoiserModel(UNetConfig(base_channels=16, emb_dim=32))
        schedule = build_schedule(T=100)
        with pytest.raises(ValueError, match="single"):
            fine_tune_backbone(
                model, schedule, torch.zeros(2, 4, 8, 8), BackdoorTrainConfig(steps=1)
            )
