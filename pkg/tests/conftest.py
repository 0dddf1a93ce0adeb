"""Shared fixtures: a small corpus, vocabulary, and a briefly trained model.

Session-scoped so the expensive pieces (corpus rendering, a short pretraining
run) happen once. Unit tests that need a checkpoint reuse `tiny_run`; the
acceptance suite builds its own full-scale artifacts.
"""
from __future__ import annotations

import numpy as np
import pytest
import torch

from urbanprofile import corpus, downstream, textpipe, train
from urbanprofile.model import ModelConfig


def tiny_model_config(vocab_size: int = 0, **overrides) -> ModelConfig:
    base = dict(
        vocab_size=vocab_size,
        image_height=32,
        image_width=32,
        patch_size=8,
        embed_dim=32,
        n_heads=2,
        n_image_layers=2,
        n_text_layers=2,
        max_text_len=48,
        proj_dim=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    config = corpus.CorpusConfig(
        height=32, width=32, patch_size=8, captions_per_image=2.0, inject_bad_prob=0.3
    )
    return corpus.build_records("T", 60, (6, 10), config, city_seed=11)


@pytest.fixture(scope="session")
def tiny_split(tiny_corpus):
    return corpus.split_corpus([r.region_id for r in tiny_corpus], seed=3)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    return textpipe.build_vocab([c for r in tiny_corpus for c in r.captions])


@pytest.fixture(scope="session")
def tiny_run(tiny_corpus, tiny_split, tiny_vocab, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_run")
    config = train.TrainConfig(
        lr=2e-4, batch_size=16, epochs=4, seed=5,
        model=tiny_model_config(learnable_temperature=True, temperature=0.07),
    )
    record, model = train.pretrain(tiny_corpus, tiny_split, tiny_vocab, config, out_dir=out)
    return record, model, out


@pytest.fixture(scope="session")
def tiny_embeddings(tiny_run, tiny_corpus):
    _, model, _ = tiny_run
    return downstream.extract_embeddings(model, tiny_corpus)


@pytest.fixture(scope="session")
def overfit_corpus():
    """32-record corpus used by run-and-measure wiring checks."""
    config = corpus.CorpusConfig(
        height=32, width=32, patch_size=8, captions_per_image=1.0, inject_bad_prob=0.0
    )
    return corpus.build_records("O", 32, (4, 8), config, city_seed=21)
