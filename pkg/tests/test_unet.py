"""Denoiser units: conditioning, trigger rows, attention bookkeeping."""

import dataclasses

import pytest
import torch

from diffmark.unet import (
    ConditionToken,
    DenoiserModel,
    UNetConfig,
    make_triggered,
    predict_noise,
    timestep_embedding,
)


def small_model(**kwargs):
    torch.manual_seed(0)
    cfg = UNetConfig(base_channels=16, emb_dim=32, **kwargs)
    return DenoiserModel(cfg)


class TestConditionToken:
    def test_frozen(self):
        cond = ConditionToken(1)
        with pytest.raises(dataclasses.FrozenInstanceError):
            cond.class_id = 2

    def test_make_triggered_preserves_class(self):
        cond = make_triggered(ConditionToken(3))
        assert cond.class_id == 3
        assert cond.triggered

    def test_make_triggered_rejects_double_trigger(self):
        with pytest.raises(ValueError):
            make_triggered(ConditionToken(0, triggered=True))


class TestTimestepEmbedding:
    def test_shape_and_bounds(self):
        emb = timestep_embedding(torch.arange(1, 11), 32)
        assert emb.shape == (10, 32)
        assert torch.all(emb.abs() <= 1.0)

    def test_distinct_timesteps_distinct_embeddings(self):
        emb = timestep_embedding(torch.tensor([1, 500, 1000]), 32)
        assert not torch.equal(emb[0], emb[1])
        assert not torch.equal(emb[1], emb[2])


class TestTriggerRows:
    def test_trigger_table_is_a_buffer(self):
        model = small_model()
        buffers = dict(model.named_buffers())
        assert "trigger_table" in buffers
        assert "trigger_table" not in dict(model.named_parameters())

    def test_optimizer_cannot_reach_trigger_rows(self):
        # parameters() feeds optimizers; the rows must not be in it
        model = small_model()
        ids = {id(p) for p in model.parameters()}
        assert id(model.trigger_table) not in ids

    def test_pinned_seed_reproducible(self):
        a = small_model()
        b = small_model()
        assert torch.equal(a.trigger_table, b.trigger_table)

    def test_different_seed_different_rows(self):
        a = small_model()
        b = small_model(trigger_seed=999)
        assert not torch.equal(a.trigger_table, b.trigger_table)

    def test_row_scale(self):
        model = small_model()
        std = model.trigger_table.std()
        assert 0.3 < float(std) < 0.7

    def test_trigger_vector_sums_first_rows(self):
        model = small_model(trigger_len=2)
        expected = model.trigger_table[0] + model.trigger_table[1]
        assert torch.equal(model.trigger_vector, expected)

    def test_trigger_len_bounded_by_slots(self):
        with pytest.raises(ValueError):
            DenoiserModel(UNetConfig(base_channels=16, emb_dim=32, trigger_len=9, trigger_slots=5))


class TestConditionEmbedding:
    def test_trigger_adds_exact_vector(self):
        model = small_model()
        ids = torch.tensor([0, 1, 2])
        plain = model.condition_embedding(ids, torch.zeros(3, dtype=torch.bool), None)
        trig = model.condition_embedding(ids, torch.ones(3, dtype=torch.bool), None)
        diff = trig - plain
        for row in diff:
            assert torch.allclose(row, model.trigger_vector, atol=1e-6)

    def test_null_mask_overrides_trigger(self):
        # the unconditional branch must not carry the trigger
        model = small_model()
        ids = torch.tensor([1, 1])
        null = torch.ones(2, dtype=torch.bool)
        with_trig = model.condition_embedding(ids, torch.ones(2, dtype=torch.bool), null)
        without = model.condition_embedding(ids, torch.zeros(2, dtype=torch.bool), null)
        assert torch.equal(with_trig, without)
        null_row = model.class_table[model.config.num_classes]
        assert torch.allclose(with_trig[0], null_row)

    def test_class_range_validated(self):
        model = small_model()
        with pytest.raises(ValueError, match="class ids"):
            model.condition_embedding(torch.tensor([7]), None, None)


class TestForward:
    def test_output_shape_matches_input(self):
        model = small_model()
        z = torch.randn(3, 4, 8, 8)
        t = torch.tensor([1, 500, 1000])
        out = model(z, t, torch.tensor([0, 1, 2]))
        assert out.shape == z.shape

    def test_wrong_channel_count_rejected(self):
        model = small_model()
        with pytest.raises(ValueError, match="expected"):
            model(torch.randn(1, 3, 8, 8), torch.tensor([1]), torch.tensor([0]))

    def test_t_batch_mismatch_rejected(self):
        model = small_model()
        with pytest.raises(ValueError, match="batch"):
            model(torch.randn(2, 4, 8, 8), torch.tensor([1]), torch.tensor([0, 1]))

    def test_eval_deterministic(self):
        model = small_model()
        model.eval()
        z = torch.randn(2, 4, 8, 8)
        t = torch.tensor([10, 20])
        ids = torch.tensor([0, 1])
        with torch.no_grad():
            assert torch.equal(model(z, t, ids), model(z, t, ids))

    def test_trigger_changes_prediction(self):
        model = small_model()
        model.eval()
        z = torch.randn(2, 4, 8, 8)
        t = torch.tensor([100, 100])
        ids = torch.tensor([0, 0])
        with torch.no_grad():
            plain = model(z, t, ids, torch.zeros(2, dtype=torch.bool))
            trig = model(z, t, ids, torch.ones(2, dtype=torch.bool))
        assert not torch.allclose(plain, trig)

    def test_predict_noise_broadcasts_int_t(self):
        model = small_model()
        model.eval()
        z = torch.randn(2, 4, 8, 8)
        with torch.no_grad():
            a = predict_noise(model, z, 55, ConditionToken(1))
            b = predict_noise(model, z, torch.tensor([55, 55]), ConditionToken(1))
        assert torch.equal(a, b)


class TestAttentionGroups:
    def test_keys(self):
        groups = small_model().attention_groups()
        assert set(groups) == {"down_attn", "mid_attn", "up_attn"}

    def test_disjoint_and_real(self):
        model = small_model()
        groups = model.attention_groups()
        all_names = [n for names in groups.values() for n in names]
        assert len(all_names) == len(set(all_names))
        params = dict(model.named_parameters())
        assert all(n in params for n in all_names)

    def test_only_attention_parameters(self):
        groups = small_model().attention_groups()
        for names in groups.values():
            for n in names:
                assert "attn" in n

    def test_projection_layers_present(self):
        # the fine-tuning surface: query/key/value/out of each block
        groups = small_model().attention_groups()
        up = "\n".join(groups["up_attn"])
        for part in ("q.weight", "k.weight", "v.weight", "out.weight"):
            assert part in up
