#!/usr/bin/env python3
"""Record a small set of real service responses as the explorer test fixture.

Builds a tiny corpus, briefly pretrains, fits a head, boots the service
in-process, and dumps every endpoint the explorer consumes (images as
base64) to frontend/tests/fixtures/service.json.
"""
from __future__ import annotations

import base64
import json
import tempfile
from pathlib import Path

from fastapi.testclient import TestClient

from urbanprofile import cli, train
from urbanprofile.model import ModelConfig
from urbanprofile.service import ServiceState, build_app


def main() -> None:
    root = Path(tempfile.mkdtemp(prefix="fixture_"))
    corpus_dir = root / "cityS"
    assert cli.dispatch([
        "gen-corpus", "--city", "S", "--regions", "20", "--grid", "4x5",
        "--seed", "8", "--out", str(corpus_dir),
        "--height", "32", "--width", "32", "--captions-per-image", "2.0",
    ]) == 0
    assert cli.dispatch([
        "build-vocab", "--corpus", str(corpus_dir), "--out", str(root / "vocab.json"),
    ]) == 0
    config = train.TrainConfig(
        epochs=2, batch_size=16, seed=1,
        model=ModelConfig(
            vocab_size=0, image_height=32, image_width=32, patch_size=8,
            embed_dim=32, n_heads=2, n_image_layers=2, n_text_layers=2,
            max_text_len=48, proj_dim=32,
            learnable_temperature=True, temperature=0.07,
        ),
    )
    config.to_json(root / "train.json")
    assert cli.dispatch([
        "pretrain", "--config", str(root / "train.json"), "--corpus", str(corpus_dir),
        "--vocab", str(root / "vocab.json"), "--out", str(root / "run"),
    ]) == 0
    assert cli.dispatch([
        "finetune", "--checkpoint", str(root / "run" / "checkpoint.uckpt"),
        "--corpus", str(corpus_dir), "--out", str(root / "head.uckpt"), "--epochs", "5",
    ]) == 0

    state = ServiceState.load(
        checkpoint=root / "run" / "checkpoint.uckpt",
        vocab_path=root / "vocab.json",
        head_path=root / "head.uckpt",
        corpus_dirs=[corpus_dir],
    )
    client = TestClient(build_app(state))

    fixture = {
        "base_url": "http://service.test",
        "cities": client.get("/cities").json(),
        "regions": {"S": client.get("/regions", params={"city": "S"}).json()},
        "region": {},
        "similar": {},
        "image_b64": {},
    }
    for region_id in sorted(state.records):
        fixture["region"][region_id] = client.get(f"/region/{region_id}").json()
        fixture["similar"][region_id] = client.get(
            f"/region/{region_id}/similar", params={"k": 5}
        ).json()
        fixture["image_b64"][region_id] = base64.b64encode(
            client.get(f"/region/{region_id}/image").content
        ).decode()

    out = Path(__file__).resolve().parent.parent / "frontend" / "tests" / "fixtures"
    out.mkdir(parents=True, exist_ok=True)
    (out / "service.json").write_text(json.dumps(fixture, indent=1))
    print(f"wrote {out / 'service.json'} with {len(fixture['region'])} regions")


if __name__ == "__main__":
    main()
