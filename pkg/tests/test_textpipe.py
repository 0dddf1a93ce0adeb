import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urbanprofile.corpus import Coverage, SceneSpec, generate_scene
from urbanprofile import textpipe
from urbanprofile.textpipe import (
    BOS_ID,
    CLS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    RefineRules,
    SyntheticCaptionProvider,
    TokenSequence,
    Vocab,
    build_vocab,
    clean_text,
    detokenize,
    normalize_words,
    refine_captions,
    split_sentences,
    synth_caption,
    tokenize,
    verify_factuality,
)


def scene_with(b=0.0, r=0.0, g=0.0, w=0.0, **counts) -> SceneSpec:
    defaults = dict(
        building_count=5, road_count=2, green_blob_count=1, water_blob_count=0
    )
    defaults.update(counts)
    return SceneSpec(seed=0, coverage=Coverage(b=b, r=r, g=g, w=w), **defaults)


RULES = RefineRules.default()


class TestSynthCaption:
    def test_forced_water_injection_on_dry_scene(self):
        scene = scene_with(b=0.2, r=0.1, w=0.0)
        caption = synth_caption(scene, seed=1, inject_bad_prob=1.0)[0]
        assert any(
            kw in caption.lower() for kw in RULES.feature_keywords["water"]
        ), caption

    def test_density_word_thresholds(self):
        assert "dense" in synth_caption(scene_with(b=0.35), 0, 0.0)[0]
        assert "moderate" in synth_caption(scene_with(b=0.15), 0, 0.0)[0]
        assert "sparse" in synth_caption(scene_with(b=0.05), 0, 0.0)[0]

    def test_deterministic_without_injection(self):
        scene = scene_with(b=0.2, g=0.05)
        assert synth_caption(scene, 7, 0.0, 3) == synth_caption(scene, 7, 0.0, 3)

    def test_exact_counts_in_caption(self):
        scene = scene_with(b=0.2, r=0.1, building_count=12, road_count=3)
        caption = synth_caption(scene, 0, 0.0)[0]
        assert "12 buildings" in caption
        assert "3 roads" in caption

    def test_presence_mentions_follow_coverage_threshold(self):
        wet = synth_caption(scene_with(b=0.2, w=0.05), 1, 0.0)[0].lower()
        dry = synth_caption(scene_with(b=0.2, w=0.0), 1, 0.0)[0].lower()
        assert any(k in wet for k in RULES.feature_keywords["water"])
        assert not any(k in dry for k in RULES.feature_keywords["water"])

    def test_provider_caption_count(self):
        provider = SyntheticCaptionProvider(captions_per_image=4.5)
        counts = []
        for seed in range(300):
            caps = provider.generate(None, scene_with(b=0.2), "", seed)
            assert all(c for c in caps)
            counts.append(len(caps))
        assert set(counts) <= {4, 5}
        assert abs(np.mean(counts) - 4.5) < 0.15


class TestCleanText:
    def test_appendix_style_vague_sentence_removed(self):
        caption = "The image offers a comprehensive view of the city's layout and infrastructure."
        report = clean_text(caption, RULES)
        assert report.kept == []
        assert report.removed == [(caption, "vague")]

    def test_duplicate_second_occurrence_removed(self):
        caption = "It contains 12 buildings and 3 roads. It contains 12 buildings and 3 roads."
        report = clean_text(caption, RULES)
        assert report.kept == ["It contains 12 buildings and 3 roads."]
        assert report.removed == [("It contains 12 buildings and 3 roads.", "duplicate")]

    def test_possibly_a_phrase_removed(self):
        caption = (
            "The image features a large body of water, possibly a river or a lake, "
            "running through the city."
        )
        report = clean_text(caption, RULES)
        assert report.removed[0][1] == "vague"

    def test_short_and_long_sentences_removed(self):
        report = clean_text("Too short. " + " ".join(["word"] * 45) + ".", RULES)
        reasons = dict(report.removed)
        assert "Too short." in reasons and reasons["Too short."] == "too_short"
        assert any(r == "too_long" for _, r in report.removed)

    def test_empty_input(self):
        report = clean_text("", RULES)
        assert report.kept == [] and report.removed == []

    def test_partition_and_order_preserved(self):
        caption = "One two three. Four five six. One two three."
        report = clean_text(caption, RULES)
        sentences = split_sentences(caption)
        assert report.kept + [s for s, _ in report.removed] and sorted(
            report.kept + [s for s, _ in report.removed]
        ) == sorted(sentences)
        assert report.kept == ["One two three.", "Four five six."]

    @given(st.lists(st.sampled_from([
        "This is a dense urban area.",
        "It contains 4 buildings and 2 roads.",
        "The overall impression is pleasant.",
        "Water covers part of the area.",
        "Too short.",
    ]), min_size=1, max_size=6))
    @settings(max_examples=40, deadline=None)
    def test_idempotent_on_terminated_sentences(self, sentences):
        caption = " ".join(sentences)
        first = clean_text(caption, RULES)
        second = clean_text(" ".join(first.kept), RULES)
        assert second.kept == first.kept


class TestVerifyFactuality:
    def test_water_sentence_removed_when_dry(self):
        scene = scene_with(b=0.2, w=0.0)
        report = clean_text("A river or lake is present in the region.", RULES)
        verified = verify_factuality(report, scene, RULES)
        assert verified.kept == []
        assert verified.removed[-1][1] == "unfactual"

    def test_all_factual_scores(self):
        scene = scene_with(b=0.2, r=0.1)
        report = clean_text("This is a dense urban area. It contains 5 buildings.", RULES)
        verified = verify_factuality(report, scene, RULES)
        assert verified.scores == (1.0, 1.0)

    def test_mixed_caption_factual_fraction(self):
        scene = scene_with(b=0.2, r=0.1, g=0.05, w=0.0)
        caption = (
            "This is a dense urban area. It contains 5 buildings and 2 roads. "
            "Several parks and trees are visible. Water covers part of the area."
        )
        report = clean_text(caption, RULES)
        assert len(report.kept) == 4
        verified = verify_factuality(report, scene, RULES)
        assert verified.scores[1] == pytest.approx(0.75)

    def test_kept_only_shrinks(self):
        scene = scene_with(b=0.0, r=0.0, g=0.0, w=0.0)
        caption = "A river or lake is present in the region. Clusters of residential buildings dominate the scene."
        report = clean_text(caption, RULES)
        verified = verify_factuality(report, scene, RULES)
        assert set(verified.kept) <= set(report.kept)

    def test_no_scene_flags_without_removal(self):
        report = clean_text("A river or lake is present in the region.", RULES)
        verified = verify_factuality(report, None, RULES)
        assert verified.kept == report.kept
        assert verified.flagged and verified.flagged[0][1] == "water"
        assert verified.scores[1] == 0.0

    def test_injection_always_caught(self, ):
        removed = 0
        total = 0
        for seed in range(100):
            img, scene = generate_scene(seed, "moderate", 32, 32, 8)
            if scene.coverage.w >= 0.01:
                continue
            total += 1
            caption = synth_caption(scene, seed, inject_bad_prob=1.0)[0]
            report = verify_factuality(clean_text(caption, RULES), scene, RULES)
            if any(reason == "unfactual" for _, reason in report.removed):
                removed += 1
        assert total > 10
        assert removed == total


class TestRefineCaptions:
    def test_never_empty(self):
        scene = scene_with(b=0.0, r=0.0, g=0.0, w=0.0, building_count=0, road_count=0)
        captions = synth_caption(scene, 3, inject_bad_prob=1.0, n_captions=3)
        refined = refine_captions(captions, scene, RULES)
        assert refined and all(refined)

    def test_drops_vague_and_unfactual(self):
        scene = scene_with(b=0.2, r=0.1, w=0.0)
        captions = synth_caption(scene, 5, inject_bad_prob=1.0, n_captions=2)
        refined = refine_captions(captions, scene, RULES)
        for caption in refined:
            lowered = caption.lower()
            assert not any(p in lowered for p in [v.lower() for v in RULES.vague_phrases])
            assert not any(k in lowered for k in RULES.feature_keywords["water"])


class TestRules:
    def test_json_round_trip(self, tmp_path):
        path = tmp_path / "refine_rules.json"
        RULES.to_json(path)
        loaded = RefineRules.from_json(path)
        assert loaded == RULES
        raw = json.loads(path.read_text())
        assert set(raw) == {
            "vague_phrases", "feature_keywords", "min_words", "max_words", "coverage_threshold",
        }


class TestVocab:
    def test_frequency_then_lexicographic_order(self):
        vocab = build_vocab(["a a b"])
        assert vocab.id_for("a") < vocab.id_for("b")

    def test_truncation_to_max_size(self):
        captions = [" ".join(f"w{i}" for i in range(3000))]
        vocab = build_vocab(captions, max_size=2048)
        assert len(vocab) == 2048

    def test_rebuild_identical(self, tiny_corpus):
        captions = [c for r in tiny_corpus for c in r.captions]
        assert build_vocab(captions).tokens == build_vocab(captions).tokens

    def test_specials_first(self):
        vocab = build_vocab(["hello world"])
        assert vocab.tokens[:6] == list(textpipe.SPECIAL_TOKENS)
        assert vocab.id_for("[PAD]") == PAD_ID

    def test_save_load(self, tmp_path):
        vocab = build_vocab(["hello world again"])
        vocab.save(tmp_path / "vocab.json")
        loaded = Vocab.load(tmp_path / "vocab.json")
        assert loaded.tokens == vocab.tokens
        assert loaded.content_hash() == vocab.content_hash()

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            build_vocab([])


class TestTokenize:
    def test_empty_text(self):
        vocab = build_vocab(["hello"])
        seq = tokenize("", vocab, 8)
        assert seq.ids == [BOS_ID, EOS_ID, CLS_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]
        assert seq.mask == [True] * 3 + [False] * 5
        assert seq.text_length == 3

    def test_word_count_between_specials(self):
        vocab = build_vocab(["contains 12 buildings ."])
        seq = tokenize("contains 12 buildings .", vocab, 16)
        words = seq.ids[1 : seq.text_length - 2]
        assert len(words) == 4
        assert seq.ids[0] == BOS_ID
        assert seq.ids[seq.text_length - 2] == EOS_ID
        assert seq.ids[seq.text_length - 1] == CLS_ID

    def test_truncation_drops_words_not_specials(self):
        vocab = build_vocab(["a b c d e f g h"])
        seq = tokenize("a b c d e f g h", vocab, 6)
        assert seq.text_length == 6
        assert seq.ids[0] == BOS_ID
        assert seq.ids[4] == EOS_ID and seq.ids[5] == CLS_ID

    def test_max_len_too_small_rejected(self):
        vocab = build_vocab(["a"])
        with pytest.raises(ValueError):
            tokenize("a", vocab, 3)

    def test_oov_maps_to_unk(self):
        vocab = build_vocab(["known words"])
        seq = tokenize("unknown", vocab, 8)
        assert seq.ids[1] == UNK_ID

    def test_round_trip_over_seeded_captions(self):
        rng = np.random.default_rng(0)
        captions = []
        for seed in range(100):
            _, scene = generate_scene(seed, "moderate", 32, 32, 8)
            captions.extend(synth_caption(scene, seed, inject_bad_prob=0.0))
        vocab = build_vocab(captions)
        for caption in captions[:100]:
            seq = tokenize(caption, vocab, 64)
            assert detokenize(seq.ids, vocab) == " ".join(normalize_words(caption))

    def test_type_invariants_over_corpus(self, tiny_corpus, tiny_vocab):
        for record in tiny_corpus:
            for caption in record.captions:
                seq = tokenize(caption, tiny_vocab, 48)
                assert seq.ids[0] == BOS_ID
                real = [i for i, m in zip(seq.ids, seq.mask) if m]
                assert real[-1] == CLS_ID and real[-2] == EOS_ID
                assert len(seq.ids) == 48
                # pads only at the tail
                assert all(not m for m in seq.mask[seq.text_length:])
                assert all(i == PAD_ID for i in seq.ids[seq.text_length:])
