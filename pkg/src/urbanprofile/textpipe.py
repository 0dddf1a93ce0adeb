"""Caption providers, two-stage caption refinement, and word-level tokenization.

Stage 1 (clean_text) removes vague, duplicated, and degenerate sentences with
pre-configured filters. Stage 2 (verify_factuality) checks kept sentences
against scene ground truth: a sentence mentioning a feature whose rendered
coverage is below threshold is unfactual. Rule lists live in a JSON file so
real-corpus users can extend them without code changes.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .corpus import FEATURES, SceneSpec

SPECIAL_TOKENS = ("[PAD]", "[BOS]", "[EOS]", "[CLS]", "[UNK]", "[MASK]")
PAD_ID, BOS_ID, EOS_ID, CLS_ID, UNK_ID, MASK_ID = range(6)

REMOVAL_REASONS = ("vague", "unfactual", "duplicate", "too_short", "too_long")

_DEFAULT_VAGUE_PHRASES = [
    "comprehensive view",
    "layout and infrastructure",
    "possibly a",
    "overall",
]

_DEFAULT_FEATURE_KEYWORDS = {
    "water": ["water", "river", "lake"],
    "green": ["park", "greenery", "trees", "green"],
    "road": ["road", "highway", "street"],
    "building": ["building", "residential", "houses"],
}


@dataclass
class RefineRules:
    vague_phrases: list[str]
    feature_keywords: dict[str, list[str]]
    min_words: int = 3
    max_words: int = 40
    coverage_threshold: float = 0.01

    @classmethod
    def default(cls) -> "RefineRules":
        return cls(
            vague_phrases=list(_DEFAULT_VAGUE_PHRASES),
            feature_keywords={k: list(v) for k, v in _DEFAULT_FEATURE_KEYWORDS.items()},
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "RefineRules":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(
            vague_phrases=list(d["vague_phrases"]),
            feature_keywords={k: list(v) for k, v in d["feature_keywords"].items()},
            min_words=d.get("min_words", 3),
            max_words=d.get("max_words", 40),
            coverage_threshold=d.get("coverage_threshold", 0.01),
        )

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "vague_phrases": self.vague_phrases,
                    "feature_keywords": self.feature_keywords,
                    "min_words": self.min_words,
                    "max_words": self.max_words,
                    "coverage_threshold": self.coverage_threshold,
                },
                fh,
                indent=2,
            )


@dataclass
class RefinementReport:
    kept: list[str]
    removed: list[tuple[str, str]]  # (sentence, reason)
    scores: tuple[float, float]  # (kept_fraction, factual_fraction)
    flagged: list[tuple[str, str]] = field(default_factory=list)  # (sentence, feature)


# ---------------------------------------------------------------------------
# Caption generation
# ---------------------------------------------------------------------------

_DENSITY_TEMPLATES = [
    "This is a {} urban area.",
    "The region shows {} development.",
    "A {} district fills the frame.",
    "Density of construction here is {}.",
]

_COUNT_TEMPLATES = [
    "It contains {}.",
    "There are {} in this area.",
    "The image shows {}.",
]

_GREEN_TEMPLATES = [
    "Several parks and trees are visible.",
    "Patches of greenery spread across the area.",
    "Green spaces and trees dot the region.",
]

_WATER_TEMPLATES = [
    "A river or lake is present in the region.",
    "Water covers part of the area.",
    "A body of water crosses the region.",
]

_VAGUE_FILLERS = [
    "The image offers a comprehensive view of the city's layout and infrastructure.",
    "The overall impression is one of a typical city scene.",
    "There is possibly a lot more going on beyond what is visible.",
    "It gives a comprehensive view of the area at a glance.",
]

_UNFACTUAL_TEMPLATES = {
    "water": "A broad river runs across the region.",
    "green": "Large parks and green fields cover the area.",
    "road": "A busy highway cuts through the area.",
    "building": "Clusters of residential buildings dominate the scene.",
}


def density_word(building_coverage: float) -> str:
    if building_coverage < 0.1:
        return "sparse"
    if building_coverage < 0.3:
        return "moderate"
    return "dense"


def _count_phrase(n: int, noun: str) -> str:
    return f"{n} {noun}" if n == 1 else f"{n} {noun}s"


def synth_caption(
    scene: SceneSpec, seed: int, inject_bad_prob: float, n_captions: int = 1
) -> list[str]:
    """Templated captions for a synthetic scene, with optional injected noise.

    Each caption states the density bucket, the exact primitive counts,
    greenery/water presence (mentioned iff coverage >= 0.01), and one vague
    filler. With probability inject_bad_prob an unfactual sentence asserting
    an absent feature (water preferred) is appended.
    """
    rng = np.random.default_rng(seed)
    cov = scene.coverage
    captions = []
    for _ in range(max(1, n_captions)):
        sentences = []
        sentences.append(
            _DENSITY_TEMPLATES[rng.integers(len(_DENSITY_TEMPLATES))].format(
                density_word(cov.b)
            )
        )
        parts = []
        if scene.building_count > 0:
            parts.append(_count_phrase(scene.building_count, "building"))
        if scene.road_count > 0:
            parts.append(_count_phrase(scene.road_count, "road"))
        body = " and ".join(parts) if parts else "no major structures"
        sentences.append(_COUNT_TEMPLATES[rng.integers(len(_COUNT_TEMPLATES))].format(body))
        if cov.g >= 0.01:
            sentences.append(_GREEN_TEMPLATES[rng.integers(len(_GREEN_TEMPLATES))])
        if cov.w >= 0.01:
            sentences.append(_WATER_TEMPLATES[rng.integers(len(_WATER_TEMPLATES))])
        sentences.append(_VAGUE_FILLERS[rng.integers(len(_VAGUE_FILLERS))])
        if inject_bad_prob > 0 and rng.random() < inject_bad_prob:
            absent = [f for f in FEATURES if cov.for_feature(f) < 0.01]
            if absent:
                feature = "water" if "water" in absent else absent[int(rng.integers(len(absent)))]
                sentences.append(_UNFACTUAL_TEMPLATES[feature])
        captions.append(" ".join(sentences))
    return captions


class CaptionProvider(Protocol):
    name: str

    def generate(
        self, image, scene: SceneSpec | None, instruction: str, seed: int
    ) -> list[str]: ...


class SyntheticCaptionProvider:
    """Built-in provider describing scenes from their ground truth.

    Stands in for an image-to-text model; a real provider would look at the
    image and the instruction instead.
    """

    name = "synthetic"

    def __init__(self, captions_per_image: float = 1.0, inject_bad_prob: float = 0.0):
        self.captions_per_image = captions_per_image
        self.inject_bad_prob = inject_bad_prob

    def generate(self, image, scene, instruction: str, seed: int) -> list[str]:
        if scene is None:
            raise ValueError("synthetic provider requires a SceneSpec")
        rng = np.random.default_rng(seed)
        base = int(self.captions_per_image)
        frac = self.captions_per_image - base
        n = base + (1 if rng.random() < frac else 0)
        return synth_caption(scene, int(rng.integers(0, 2**63)), self.inject_bad_prob, max(1, n))


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------


def split_sentences(text: str) -> list[str]:
    text = text.strip()
    if not text:
        return []
    return [s.strip() for s in re.split(r"(?<=[.!?])\s+", text) if s.strip()]


def _word_count(sentence: str) -> int:
    return len(sentence.rstrip(".!?").split())


def clean_text(caption: str, rules: RefineRules) -> RefinementReport:
    """Stage 1: rule-based removal of vague, duplicate, and degenerate sentences."""
    sentences = split_sentences(caption)
    kept: list[str] = []
    removed: list[tuple[str, str]] = []
    seen: set[str] = set()
    for sentence in sentences:
        lowered = sentence.lower()
        normalized = lowered.strip()
        reason = None
        if any(phrase.lower() in lowered for phrase in rules.vague_phrases):
            reason = "vague"
        elif normalized in seen:
            reason = "duplicate"
        elif _word_count(sentence) < rules.min_words:
            reason = "too_short"
        elif _word_count(sentence) > rules.max_words:
            reason = "too_long"
        seen.add(normalized)
        if reason is None:
            kept.append(sentence)
        else:
            removed.append((sentence, reason))
    total = len(sentences)
    kept_fraction = len(kept) / total if total else 0.0
    return RefinementReport(kept=kept, removed=removed, scores=(kept_fraction, 1.0))


def mentioned_features(sentence: str, rules: RefineRules) -> list[str]:
    lowered = sentence.lower()
    found = []
    for feature, keywords in rules.feature_keywords.items():
        for kw in keywords:
            if re.search(rf"\b{re.escape(kw.lower())}", lowered):
                found.append(feature)
                break
    return found


def verify_factuality(
    report: RefinementReport, scene: SceneSpec | None, rules: RefineRules | None = None
) -> RefinementReport:
    """Stage 2: counterfactual check of kept sentences against scene coverage.

    With a scene, sentences mentioning a feature whose coverage is below the
    threshold move to removed as unfactual. Without one, such sentences are
    only flagged. Dual scores are (kept_fraction, factual_fraction).
    """
    if rules is None:
        rules = RefineRules.default()
    checked = len(report.kept)
    kept: list[str] = []
    removed = list(report.removed)
    flagged = list(report.flagged)
    failures = 0
    for sentence in report.kept:
        mentions = mentioned_features(sentence, rules)
        if scene is None:
            # No ground truth: flag feature mentions for manual review.
            if mentions:
                failures += 1
                flagged.extend((sentence, f) for f in mentions)
            kept.append(sentence)
            continue
        bad = [
            f for f in mentions
            if scene.coverage.for_feature(f) < rules.coverage_threshold
        ]
        if bad:
            failures += 1
            removed.append((sentence, "unfactual"))
        else:
            kept.append(sentence)
    total = len(kept) + len(removed)
    kept_fraction = len(kept) / total if total else 0.0
    factual_fraction = (checked - failures) / checked if checked else 1.0
    return RefinementReport(
        kept=kept, removed=removed, scores=(kept_fraction, factual_fraction), flagged=flagged
    )


def refine_caption(
    caption: str, scene: SceneSpec | None, rules: RefineRules | None = None
) -> RefinementReport:
    if rules is None:
        rules = RefineRules.default()
    return verify_factuality(clean_text(caption, rules), scene, rules)


def refine_captions(
    captions: list[str],
    scene: SceneSpec | None,
    rules: RefineRules | None = None,
    keep_threshold: float = 0.5,
) -> list[str]:
    """Apply both stages to each caption; keep those scoring factual enough.

    Falls back to the best-scoring caption so a region never ends up with an
    empty caption list.
    """
    if rules is None:
        rules = RefineRules.default()
    reports = [refine_caption(c, scene, rules) for c in captions]
    out = [
        " ".join(r.kept)
        for r in reports
        if r.kept and r.scores[1] >= keep_threshold
    ]
    if out:
        return out
    with_kept = [r for r in reports if r.kept]
    if with_kept:
        best = max(with_kept, key=lambda r: r.scores[1])
        return [" ".join(best.kept)]
    return captions[:1]


# ---------------------------------------------------------------------------
# Vocabulary and tokenization
# ---------------------------------------------------------------------------


@dataclass
class TokenSequence:
    ids: list[int]
    mask: list[bool]  # True = real token
    text_length: int  # number of non-pad positions


class Vocab:
    """Word-level vocabulary; token id = index into the ordered token list."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the special tokens")
        self.tokens = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("vocab tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_for(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.tokens).encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.tokens, fh)

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))


def normalize_words(text: str) -> list[str]:
    """Lowercase, drop punctuation except periods (kept as their own token)."""
    text = text.lower()
    text = re.sub(r"[^\w\s.]", "", text)
    text = text.replace(".", " . ")
    return text.split()


def build_vocab(captions: list[str], max_size: int = 2048) -> Vocab:
    if not captions:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: dict[str, int] = {}
    for caption in captions:
        for word in normalize_words(caption):
            counts[word] = counts.get(word, 0) + 1
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocab(list(SPECIAL_TOKENS) + ranked[: max_size - len(SPECIAL_TOKENS)])


def tokenize(text: str, vocab: Vocab, max_text_len: int) -> TokenSequence:
    """[BOS] words [EOS] [CLS] then pad; truncation drops words, never specials."""
    if max_text_len < 4:
        raise ValueError(f"max_text_len must be >= 4, got {max_text_len}")
    words = normalize_words(text)[: max_text_len - 3]
    ids = [BOS_ID] + [vocab.id_for(w) for w in words] + [EOS_ID, CLS_ID]
    length = len(ids)
    ids = ids + [PAD_ID] * (max_text_len - length)
    mask = [True] * length + [False] * (max_text_len - length)
    return TokenSequence(ids=ids, mask=mask, text_length=length)


def detokenize(ids: list[int], vocab: Vocab) -> str:
    words = []
    for i in ids:
        if i == EOS_ID:
            break
        if i in (PAD_ID, BOS_ID, CLS_ID):
            continue
        words.append(vocab.tokens[i] if i < len(vocab.tokens) else SPECIAL_TOKENS[UNK_ID])
    return " ".join(words)
