import numpy as np
import pytest
import torch

from urbanprofile.model import (
    ModelConfig,
    RegionVLM,
    estimate_cost,
    load_checkpoint,
    patchify,
    save_checkpoint,
    unpatchify,
)
from urbanprofile.objectives import BatchEmbeddings, LossWeights, lm_targets, total_loss
from urbanprofile.textpipe import BOS_ID, CLS_ID, EOS_ID

from conftest import tiny_model_config


def make_model(seed=0, **overrides) -> RegionVLM:
    torch.manual_seed(seed)
    return RegionVLM(tiny_model_config(vocab_size=32, **overrides))


def token_batch(lengths, vocab_size=32, max_len=None, seed=0):
    g = torch.Generator().manual_seed(seed)
    max_len = max_len or max(lengths)
    ids = torch.zeros(len(lengths), max_len, dtype=torch.int64)
    mask = torch.zeros(len(lengths), max_len, dtype=torch.bool)
    for i, n in enumerate(lengths):
        words = torch.randint(6, vocab_size, (n - 3,), generator=g)
        row = torch.cat([torch.tensor([BOS_ID]), words, torch.tensor([EOS_ID, CLS_ID])])
        ids[i, :n] = row
        mask[i, :n] = True
    return ids, mask


class TestPatchify:
    def test_paper_scale_patch_count(self):
        images = torch.rand(1, 256, 256, 3)
        assert patchify(images, 16).shape == (1, 256, 16 * 16 * 3)

    def test_single_patch_equals_flat_image(self):
        image = torch.rand(1, 8, 8, 3)
        patches = patchify(image, 8)
        assert patches.shape == (1, 1, 192)
        assert torch.equal(patches[0, 0], image.reshape(-1))

    def test_round_trip_exact(self):
        images = torch.rand(2, 32, 48, 3)
        assert torch.equal(unpatchify(patchify(images, 8), 32, 48, 8), images)

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError):
            patchify(torch.rand(1, 30, 32, 3), 8)

    def test_row_major_patch_order(self):
        # mark one patch and find it at the expected index
        image = torch.zeros(1, 16, 24, 3)
        image[0, 8:16, 16:24] = 1.0  # patch row 1, col 2 at patch size 8 (3 cols)
        patches = patchify(image, 8)
        hot = patches.abs().sum(dim=-1)[0]
        assert int(hot.nonzero()[0]) == 1 * 3 + 2


class TestModelConfig:
    def test_m1(self):
        assert tiny_model_config(vocab_size=8).m1 == 16
        assert ModelConfig(vocab_size=8).m1 == 64

    def test_default_split_is_half(self):
        assert ModelConfig(vocab_size=8, n_text_layers=4).split_index == 2

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=8, image_height=30)
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=8, embed_dim=30, n_heads=4)
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=8, n_text_layers=2, split_index=2)

    def test_round_trip(self):
        config = tiny_model_config(vocab_size=40)
        assert ModelConfig.from_dict(config.to_dict()) == config


class TestEncodeImage:
    def test_shapes(self):
        model = make_model()
        images = torch.rand(3, 32, 32, 3)
        seq, pooled, caption_seq = model.encode_image(images)
        m1 = model.config.m1
        assert seq.shape == (3, m1 + 1, 32)
        assert pooled.shape == (3, 32)
        assert caption_seq.shape == (3, m1, 32)

    def test_pooled_norm_is_one(self):
        model = make_model()
        _, pooled, _ = model.encode_image(torch.rand(4, 32, 32, 3))
        assert torch.allclose(pooled.norm(dim=-1), torch.ones(4), atol=1e-5)

    def test_single_query_mean_equals_attention_output(self):
        model = make_model()
        seq = torch.randn(2, 17, 32)
        pooled_seq = model.contrastive_pooler(seq)
        assert pooled_seq.shape[1] == 1
        assert torch.equal(pooled_seq.mean(dim=1), pooled_seq[:, 0])

    def test_different_images_different_embeddings(self):
        model = make_model()
        images = torch.rand(8, 32, 32, 3)
        _, pooled, _ = model.encode_image(images)
        for i in range(7):
            assert not torch.equal(pooled[i], pooled[i + 1])


class TestEncodeTextUnimodal:
    def test_causality_exact(self):
        model = make_model()
        ids, mask = token_batch([10])
        states, _ = model.encode_text_unimodal(ids, mask)
        ids2 = ids.clone()
        ids2[0, 7] = (ids2[0, 7] + 5) % 26 + 6
        states2, _ = model.encode_text_unimodal(ids2, mask)
        assert torch.equal(states[0, :7], states2[0, :7])
        assert not torch.equal(states[0, 7:], states2[0, 7:])

    def test_pad_tail_invariance(self):
        model = make_model()
        ids, mask = token_batch([8], max_len=14)
        _, cls_a = model.encode_text_unimodal(ids, mask)
        ids2 = ids.clone()
        ids2[0, 8:] = 9  # garbage in the pad tail
        _, cls_b = model.encode_text_unimodal(ids2, mask)
        assert torch.equal(cls_a, cls_b)

    def test_deterministic(self):
        model = make_model()
        ids, mask = token_batch([9])
        _, a = model.encode_text_unimodal(ids, mask)
        _, b = model.encode_text_unimodal(ids, mask)
        assert torch.equal(a, b)

    def test_too_long_rejected(self):
        model = make_model()
        n = model.config.max_text_len + 1
        ids = torch.zeros(1, n, dtype=torch.int64)
        mask = torch.ones(1, n, dtype=torch.bool)
        with pytest.raises(ValueError, match="max_text_len"):
            model.encode_text_unimodal(ids, mask)


class TestDecodeMultimodal:
    def test_cross_attention_is_live(self):
        model = make_model()
        ids, mask = token_batch([9])
        states, _ = model.encode_text_unimodal(ids, mask)
        _, _, caption_seq = model.encode_image(torch.rand(1, 32, 32, 3))
        _, logits_a = model.decode_multimodal(states, caption_seq)
        _, logits_b = model.decode_multimodal(states, torch.zeros_like(caption_seq))
        assert not torch.equal(logits_a, logits_b)

    def test_token_logit_causality_exact(self):
        model = make_model()
        ids, mask = token_batch([12])
        _, _, caption_seq = model.encode_image(torch.rand(1, 32, 32, 3))
        states, _ = model.encode_text_unimodal(ids, mask)
        _, logits = model.decode_multimodal(states, caption_seq)
        ids2 = ids.clone()
        ids2[0, 9] = 7
        states2, _ = model.encode_text_unimodal(ids2, mask)
        _, logits2 = model.decode_multimodal(states2, caption_seq)
        assert torch.equal(logits[0, :9], logits2[0, :9])

    def test_shape_contract(self):
        model = make_model()
        ids, mask = token_batch([11, 9], max_len=11)
        _, _, caption_seq = model.encode_image(torch.rand(2, 32, 32, 3))
        states, _ = model.encode_text_unimodal(ids, mask)
        mm_seq, logits = model.decode_multimodal(states, caption_seq)
        assert mm_seq.shape == (2, 11, 32)
        assert logits.shape == (2, 11, model.config.vocab_size)


class TestDecoupling:
    def test_text_embedding_invariant_to_image(self):
        model = make_model()
        ids, mask = token_batch([10])
        _, cls_a = model.encode_text_unimodal(ids, mask)
        # decode against two different images; unimodal output must not move
        for seed in (0, 1):
            g = torch.Generator().manual_seed(seed)
            _, _, caption_seq = model.encode_image(torch.rand(1, 32, 32, 3, generator=g))
            model.decode_multimodal(*model.encode_text_unimodal(ids, mask)[:1], caption_seq)
        _, cls_b = model.encode_text_unimodal(ids, mask)
        assert torch.equal(cls_a, cls_b)

    def test_image_embedding_invariant_to_text(self):
        model = make_model()
        images = torch.rand(2, 32, 32, 3)
        _, pooled_a, _ = model.encode_image(images)
        ids, mask = token_batch([9])
        model.encode_text_unimodal(ids, mask)
        _, pooled_b, _ = model.encode_image(images)
        assert torch.equal(pooled_a, pooled_b)

    def test_unimodal_output_identical_with_or_without_decode(self):
        model = make_model()
        ids, mask = token_batch([10])
        _, cls_before = model.encode_text_unimodal(ids, mask)
        _, _, caption_seq = model.encode_image(torch.rand(1, 32, 32, 3))
        states, cls_with = model.encode_text_unimodal(ids, mask)
        model.decode_multimodal(states, caption_seq)
        assert torch.equal(cls_before, cls_with)


class TestSinglePass:
    def test_joint_forward_runs_each_submodule_once(self):
        model = make_model()
        model.reset_call_counts()
        ids, mask = token_batch([9, 9], max_len=9)
        model(torch.rand(2, 32, 32, 3), ids, mask)
        assert model.call_counts == {
            "encode_image": 1,
            "encode_text_unimodal": 1,
            "decode_multimodal": 1,
        }

    def test_one_pass_supplies_both_losses(self):
        model = make_model()
        model.reset_call_counts()
        ids, mask = token_batch([9, 10], max_len=10)
        out = model(torch.rand(2, 32, 32, 3), ids, mask)
        targets, predict_mask = lm_targets(ids, mask)
        batch = BatchEmbeddings(
            out["image_pooled"], out["text_cls"], out["token_logits"],
            targets, predict_mask, out["temperature"],
        )
        loss, components = total_loss(batch, LossWeights())
        assert torch.isfinite(loss)
        assert set(components) == {"contrastive", "lm"}
        assert model.call_counts["encode_image"] == 1
        assert model.call_counts["decode_multimodal"] == 1


class TestGradientFlow:
    def test_no_dead_parameters_on_generic_batch(self):
        model = make_model(seed=2)
        max_len = model.config.max_text_len
        ids, mask = token_batch([max_len, max_len - 2], max_len=max_len, vocab_size=32)
        out = model(torch.rand(2, 32, 32, 3), ids, mask)
        targets, predict_mask = lm_targets(ids, mask)
        batch = BatchEmbeddings(
            out["image_pooled"], out["text_cls"], out["token_logits"],
            targets, predict_mask, out["temperature"],
        )
        loss, _ = total_loss(batch, LossWeights())
        loss.backward()
        for name, p in model.named_parameters():
            assert p.grad is not None, f"no grad for {name}"
            if name == "text_pos":
                # rows beyond the longest sequence in the batch stay untouched
                assert p.grad[:, :max_len].abs().sum() > 0
            else:
                assert p.grad.abs().sum() > 0, f"dead parameter {name}"

    def test_positional_rows_beyond_longest_sequence_get_zero_grad(self):
        model = make_model(seed=3)
        ids, mask = token_batch([10, 8], max_len=10)
        out = model(torch.rand(2, 32, 32, 3), ids, mask)
        targets, predict_mask = lm_targets(ids, mask)
        batch = BatchEmbeddings(
            out["image_pooled"], out["text_cls"], out["token_logits"],
            targets, predict_mask, out["temperature"],
        )
        loss, _ = total_loss(batch, LossWeights())
        loss.backward()
        grad = dict(model.named_parameters())["text_pos"].grad
        assert grad[:, 10:].abs().sum() == 0
        assert grad[:, :10].abs().sum() > 0


class TestEstimateCost:
    def test_hand_evaluated_terms(self):
        terms = estimate_cost(1, 1, 2, 2)
        assert terms == {"vit": 6, "pool": 4, "embed": 2, "text": 6, "cross": 4, "total": 22}

    def test_empty_sequences_cost_nothing(self):
        assert estimate_cost(3, 16, 0, 0)["total"] == 0

    def test_doubling_width_roughly_doubles_dominant_terms(self):
        small = estimate_cost(4, 8, 512, 256)["total"]
        large = estimate_cost(4, 16, 512, 256)["total"]
        assert large / small == pytest.approx(2.0, rel=0.1)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            estimate_cost(-1, 4, 4, 4)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = make_model(seed=4)
        path = tmp_path / "m.uckpt"
        save_checkpoint(path, model, "vhash", extra={"lm_weight": 1.0})
        loaded, config, vocab_hash = load_checkpoint(path)
        assert vocab_hash == "vhash"
        assert config == model.config
        for (na, pa), (nb, pb) in zip(
            model.named_parameters(), loaded.named_parameters()
        ):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_same_outputs_after_reload(self, tmp_path):
        model = make_model(seed=5)
        model.eval()
        path = tmp_path / "m.uckpt"
        save_checkpoint(path, model, "h")
        loaded, _, _ = load_checkpoint(path)
        images = torch.rand(2, 32, 32, 3)
        with torch.no_grad():
            _, a, _ = model.encode_image(images)
            _, b, _ = loaded.encode_image(images)
        assert torch.equal(a, b)

    def test_header_is_length_prefixed_json(self, tmp_path):
        import json, struct

        model = make_model()
        path = tmp_path / "m.uckpt"
        save_checkpoint(path, model, "h")
        raw = path.read_bytes()
        (n,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8 : 8 + n])
        assert header["kind"] == "region_vlm"
        assert {"name", "dtype", "shape", "byte_offset", "byte_len"} <= set(header["tensors"][0])

    def test_wrong_kind_rejected(self, tmp_path):
        from urbanprofile.model import save_tensors

        path = tmp_path / "bad.uckpt"
        save_tensors(path, {"w": torch.zeros(2)}, {"kind": "other"})
        with pytest.raises(ValueError, match="kind"):
            load_checkpoint(path)


class TestPostNormMode:
    def test_post_norm_forward_runs_and_differs(self):
        pre = make_model(seed=6)
        torch.manual_seed(6)
        post = RegionVLM(tiny_model_config(vocab_size=32, post_norm=True))
        images = torch.rand(2, 32, 32, 3)
        with torch.no_grad():
            _, a, _ = pre.encode_image(images)
            _, b, _ = post.encode_image(images)
        assert a.shape == b.shape
        assert not torch.allclose(a, b)


class TestLearnableTemperature:
    def test_temperature_is_trainable_parameter(self):
        torch.manual_seed(0)
        model = RegionVLM(tiny_model_config(vocab_size=32, learnable_temperature=True, temperature=0.5))
        value = model.temperature_value()
        assert isinstance(value, torch.Tensor)
        assert float(value.detach()) == pytest.approx(0.5)
        assert any(n == "log_temperature" for n, _ in model.named_parameters())
