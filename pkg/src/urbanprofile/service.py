"""Read-only HTTP inference service backing the region explorer.

All state is loaded at startup and never mutated; every endpoint is a pure
read. Predictions are returned on the raw indicator scale (expm1 of the
log-scale head output) with the log values nested alongside. Captions are
generated lazily per region and memoized, so repeated requests are cheap and
identical.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from . import corpus, downstream, textpipe
from .corpus import INDICATORS, RegionRecord
from .model import RegionVLM, load_checkpoint, load_tensors

MAX_PREDICT_BYTES = 8 * 1024 * 1024

API_ENDPOINTS = [
    {"method": "GET", "path": "/health", "description": "liveness check"},
    {"method": "GET", "path": "/api", "description": "this endpoint listing"},
    {"method": "GET", "path": "/cities", "description": "loaded cities and grid shapes"},
    {"method": "GET", "path": "/regions", "description": "grid metadata for ?city=X"},
    {"method": "GET", "path": "/region/{region_id}", "description": "record detail with predictions and caption"},
    {"method": "GET", "path": "/region/{region_id}/image", "description": "raw .imgf32 payload"},
    {"method": "GET", "path": "/region/{region_id}/similar", "description": "top-k cosine neighbours, ?k=K"},
    {"method": "POST", "path": "/predict", "description": "predict indicators for an .imgf32 body"},
]


def _raw_scale(log_values: dict[str, float]) -> dict[str, float]:
    return {k: float(math.expm1(v)) for k, v in log_values.items()}


@dataclass
class ServiceState:
    model: RegionVLM
    vocab: textpipe.Vocab
    head: downstream.IndicatorHead
    records: dict[str, RegionRecord]
    cities: dict[str, list[str]]  # city -> region ids in corpus order
    embeddings: dict[str, np.ndarray]
    predictions_log: dict[str, dict[str, float]]
    lm_weight: float | None = None
    _caption_cache: dict[str, str] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    @classmethod
    def load(
        cls,
        checkpoint: str | Path,
        vocab_path: str | Path,
        head_path: str | Path,
        corpus_dirs: list[str | Path],
    ) -> "ServiceState":
        model, _, vocab_hash = load_checkpoint(checkpoint)
        header, _ = load_tensors(checkpoint)
        vocab = textpipe.Vocab.load(vocab_path)
        if vocab.content_hash() != vocab_hash:
            raise ValueError("vocabulary does not match the checkpoint's vocab hash")
        head = downstream.load_head(head_path)

        records: dict[str, RegionRecord] = {}
        cities: dict[str, list[str]] = {}
        for corpus_dir in corpus_dirs:
            for record in corpus.load_corpus(corpus_dir):
                records[record.region_id] = record
                cities.setdefault(record.city, []).append(record.region_id)

        embeddings = {
            rid: downstream.embed_image(model, records[rid].image) for rid in records
        }
        predictions_log = {
            rid: dict(zip(INDICATORS, downstream.predict_one(head, embeddings[rid]).tolist()))
            for rid in records
        }
        return cls(
            model=model,
            vocab=vocab,
            head=head,
            records=records,
            cities=cities,
            embeddings=embeddings,
            predictions_log=predictions_log,
            lm_weight=(header.get("extra") or {}).get("lm_weight"),
        )

    def caption_for(self, region_id: str) -> str:
        with self._lock:
            cached = self._caption_cache.get(region_id)
        if cached is not None:
            return cached
        caption = downstream.greedy_caption(
            self.model, self.vocab, self.records[region_id].image, lm_weight=self.lm_weight
        )
        with self._lock:
            self._caption_cache[region_id] = caption
        return caption

    def region_payload(self, region_id: str) -> dict:
        record = self.records[region_id]
        log_pred = self.predictions_log[region_id]
        payload = {
            "region_id": region_id,
            "city": record.city,
            "grid_ij": list(record.grid_ij),
            "indicators_predicted": _raw_scale(log_pred),
            "indicators_predicted_log": {k: float(v) for k, v in log_pred.items()},
            "indicators_true": {k: float(v) for k, v in record.indicators_raw.items()},
            "caption": self.caption_for(region_id),
            "scene": record.scene.to_dict() if record.scene is not None else None,
        }
        return payload


def build_app(state: ServiceState, cors_origin: str = "*") -> FastAPI:
    app = FastAPI(title="urbanprofile service", docs_url=None, redoc_url=None)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=[cors_origin],
        allow_methods=["GET", "POST"],
        allow_headers=["*"],
    )

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/api")
    def api_listing():
        return {"endpoints": API_ENDPOINTS}

    @app.get("/cities")
    def cities():
        out = []
        for city, ids in state.cities.items():
            cells = [state.records[i].grid_ij for i in ids]
            out.append(
                {
                    "name": city,
                    "n_regions": len(ids),
                    "grid_rows": max(c[0] for c in cells) + 1,
                    "grid_cols": max(c[1] for c in cells) + 1,
                }
            )
        return {"cities": out}

    @app.get("/regions")
    def regions(city: str):
        if city not in state.cities:
            return JSONResponse({"error": f"unknown city {city!r}"}, status_code=404)
        rows = []
        for rid in state.cities[city]:
            record = state.records[rid]
            rows.append(
                {
                    "region_id": rid,
                    "grid_ij": list(record.grid_ij),
                    "indicators_predicted": _raw_scale(state.predictions_log[rid]),
                    "indicators_true": {k: float(v) for k, v in record.indicators_raw.items()},
                }
            )
        return {"city": city, "regions": rows}

    @app.get("/region/{region_id}")
    def region(region_id: str):
        if region_id not in state.records:
            return JSONResponse({"error": f"unknown region {region_id!r}"}, status_code=404)
        return state.region_payload(region_id)

    @app.get("/region/{region_id}/image")
    def region_image(region_id: str):
        if region_id not in state.records:
            return JSONResponse({"error": f"unknown region {region_id!r}"}, status_code=404)
        payload = corpus.encode_imgf32(state.records[region_id].image)
        return Response(content=payload, media_type="application/octet-stream")

    @app.get("/region/{region_id}/similar")
    def region_similar(region_id: str, k: int = 5):
        if region_id not in state.records:
            return JSONResponse({"error": f"unknown region {region_id!r}"}, status_code=404)
        city = state.records[region_id].city
        index = {
            city: {rid: state.embeddings[rid] for rid in state.cities[city]}
        }
        results = downstream.find_similar(index, region_id, city, city, k)
        return {
            "query": region_id,
            "results": [{"region_id": rid, "cosine": cos} for rid, cos in results],
        }

    @app.post("/predict")
    async def predict(request: Request):
        body = await request.body()
        if len(body) > MAX_PREDICT_BYTES:
            return JSONResponse({"error": "payload exceeds 8 MiB"}, status_code=413)
        try:
            image = corpus.decode_imgf32(body)
        except ValueError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        config = state.model.config
        if image.shape != (config.image_height, config.image_width, 3):
            return JSONResponse(
                {
                    "error": f"image shape {list(image.shape)} does not match model "
                    f"input {[config.image_height, config.image_width, 3]}"
                },
                status_code=400,
            )
        embedding = downstream.embed_image(state.model, image)
        log_pred = dict(zip(INDICATORS, downstream.predict_one(state.head, embedding).tolist()))
        caption = downstream.greedy_caption(
            state.model, state.vocab, image, lm_weight=state.lm_weight
        )
        return {
            "indicators_predicted": _raw_scale(log_pred),
            "indicators_predicted_log": {k: float(v) for k, v in log_pred.items()},
            "caption": caption,
        }

    return app
