"""Frozen-encoder indicator prediction, metrics, transfer, search, captioning.

The deployed representation is the pooled contrastive image embedding; no
text enters the pipeline at inference time. Heads are small MLPs fitted on
precomputed embeddings, so encoder parameters can never drift during
fine-tuning. Metrics operate on log-scale targets.
"""
from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import nnkit
from .corpus import IMGF32_MAGIC, INDICATORS, CorpusSplit, RegionRecord
from .model import RegionVLM, load_tensors, save_tensors
from .textpipe import BOS_ID, EOS_ID, UNK_ID, Vocab, detokenize, tokenize


@dataclass
class HeadConfig:
    hidden: int = 256
    lr: float = 1e-3
    epochs: int = 150
    batch_size: int = 64
    seed: int = 0


class IndicatorHead(nn.Module):
    """One hidden ReLU layer over frozen embeddings."""

    def __init__(self, input_dim: int, n_outputs: int = 3, hidden: int = 256):
        super().__init__()
        self.input_dim = input_dim
        self.n_outputs = n_outputs
        self.hidden = hidden
        self.fc1 = nn.Linear(input_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_outputs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x)))


@dataclass
class MetricsReport:
    source_city: str
    target_city: str
    indicator: str
    r2: float
    rmse: float
    mae: float
    n_samples: int
    seed: int


# ---------------------------------------------------------------------------
# Embedding extraction
# ---------------------------------------------------------------------------


def embed_image(model: RegionVLM, image: np.ndarray) -> np.ndarray:
    """Canonical single-image embedding path.

    Deployed inference always goes through this one-image forward so that a
    region embedded anywhere (evaluation, service lookup, raw-image
    prediction) produces bitwise-identical vectors.
    """
    model.eval()
    with torch.no_grad():
        _, pooled, _ = model.encode_image(torch.from_numpy(image).unsqueeze(0))
    return pooled[0].numpy().astype(np.float32)


def extract_embeddings(
    model: RegionVLM, records: list[RegionRecord]
) -> dict[str, np.ndarray]:
    """Pooled image embedding per region; captions are ignored entirely."""
    return {r.region_id: embed_image(model, r.image) for r in records}


def save_embeddings(path: str | Path, ids: list[str], matrix: np.ndarray) -> None:
    """emb.f32 uses the image header scheme with shape [N, proj, 1], plus a
    sidecar json naming the rows."""
    path = Path(path)
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    n, proj = matrix.shape
    if n != len(ids):
        raise ValueError(f"{len(ids)} ids for {n} embedding rows")
    with open(path, "wb") as fh:
        fh.write(IMGF32_MAGIC)
        fh.write(struct.pack("<III", n, proj, 1))
        fh.write(matrix.tobytes())
    with open(path.parent / (path.stem + "_ids.json"), "w", encoding="utf-8") as fh:
        json.dump(list(ids), fh)


def load_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != IMGF32_MAGIC:
        raise ValueError("bad embeddings file magic")
    n, proj, _ = struct.unpack("<III", data[4:16])
    matrix = np.frombuffer(data[16:], dtype="<f4").reshape(n, proj).copy()
    with open(path.parent / (path.stem + "_ids.json"), encoding="utf-8") as fh:
        ids = json.load(fh)
    return ids, matrix


# ---------------------------------------------------------------------------
# Head fitting
# ---------------------------------------------------------------------------


def _matrix_for(ids, embeddings) -> torch.Tensor:
    return torch.from_numpy(np.stack([embeddings[i] for i in ids]).astype(np.float32))


def _targets_for(ids, targets) -> torch.Tensor:
    return torch.tensor([targets[i] for i in ids], dtype=torch.float32)


def fit_head(
    embeddings: dict[str, np.ndarray],
    targets_log: dict[str, list[float]],
    split: CorpusSplit,
    config: HeadConfig | None = None,
) -> IndicatorHead:
    """Adam on MSE over log targets; best epoch chosen on validation MSE."""
    config = config or HeadConfig()
    if not split.train_ids:
        raise ValueError("empty training split")
    x_train = _matrix_for(split.train_ids, embeddings)
    y_train = _targets_for(split.train_ids, targets_log)
    x_val = _matrix_for(split.val_ids, embeddings)
    y_val = _targets_for(split.val_ids, targets_log)

    torch.manual_seed(config.seed)
    head = IndicatorHead(x_train.shape[1], y_train.shape[1], config.hidden)
    params = nnkit.parameter_set(head)
    state = nnkit.AdamState.for_params(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    best = (float("inf"), {k: v.clone() for k, v in head.state_dict().items()})
    for _ in range(config.epochs):
        order = rng.permutation(len(x_train))
        for lo in range(0, len(x_train), config.batch_size):
            rows = [int(i) for i in order[lo : lo + config.batch_size]]
            loss = torch.nn.functional.mse_loss(head(x_train[rows]), y_train[rows])
            for p in params.values():
                p.grad = None
            loss.backward()
            nnkit.adam_step(params, {n: p.grad for n, p in params.items()}, state)
        if len(x_val):
            with torch.no_grad():
                val = float(torch.nn.functional.mse_loss(head(x_val), y_val))
            if val < best[0]:
                best = (val, {k: v.detach().clone() for k, v in head.state_dict().items()})
    if len(x_val):
        head.load_state_dict(best[1])
    head.eval()
    return head


def predict_one(head: IndicatorHead, embedding: np.ndarray) -> np.ndarray:
    """Canonical per-region head prediction (log scale)."""
    with torch.no_grad():
        return head(torch.from_numpy(embedding.astype(np.float32)).unsqueeze(0))[0].numpy()


def predict_head(head: IndicatorHead, embeddings: dict[str, np.ndarray], ids) -> np.ndarray:
    return np.stack([predict_one(head, embeddings[i]) for i in ids])


class PromptHead(nn.Module):
    """Indicator head with an aligned frozen-prompt channel.

    The aligner starts at zero, so the prompt path is inert at initialization
    and only opens up as training moves it.
    """

    def __init__(self, input_dim: int, prompt_vec: torch.Tensor, hidden: int = 256):
        super().__init__()
        self.register_buffer("prompt_vec", prompt_vec.detach().clone())
        self.aligner = nn.Linear(prompt_vec.shape[-1], input_dim)
        nn.init.zeros_(self.aligner.weight)
        nn.init.zeros_(self.aligner.bias)
        self.mlp = IndicatorHead(2 * input_dim, 1, hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        aligned = self.aligner(self.prompt_vec).expand(x.shape[0], -1)
        return self.mlp(torch.cat([x, aligned], dim=-1))


def encode_prompt(model: RegionVLM, vocab: Vocab, prompt_text: str) -> torch.Tensor:
    """Frozen unimodal text encoding of an indicator prompt."""
    tokens = tokenize(prompt_text, vocab, model.config.max_text_len)
    content = tokens.ids[1 : tokens.text_length - 2]  # words between BOS and EOS
    if content and all(i == UNK_ID for i in content):
        warnings.warn("prompt tokenizes entirely to [UNK]; proceeding anyway")
    ids = torch.tensor([tokens.ids[: tokens.text_length]], dtype=torch.int64)
    mask = torch.tensor([tokens.mask[: tokens.text_length]], dtype=torch.bool)
    model.eval()
    with torch.no_grad():
        _, text_cls = model.encode_text_unimodal(ids, mask)
    return text_cls[0]


def prompt_fit_head(
    embeddings: dict[str, np.ndarray],
    targets_log: dict[str, float],
    prompt_text: str,
    model: RegionVLM,
    vocab: Vocab,
    split: CorpusSplit,
    config: HeadConfig | None = None,
) -> PromptHead:
    """Single-indicator head guided by a frozen prompt embedding."""
    config = config or HeadConfig()
    prompt_vec = encode_prompt(model, vocab, prompt_text)
    x_train = _matrix_for(split.train_ids, embeddings)
    y_train = torch.tensor(
        [[targets_log[i]] for i in split.train_ids], dtype=torch.float32
    )
    x_val = _matrix_for(split.val_ids, embeddings)
    y_val = torch.tensor([[targets_log[i]] for i in split.val_ids], dtype=torch.float32)

    torch.manual_seed(config.seed)
    head = PromptHead(x_train.shape[1], prompt_vec, config.hidden)
    params = nnkit.parameter_set(head)
    state = nnkit.AdamState.for_params(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    best = (float("inf"), {k: v.clone() for k, v in head.state_dict().items()})
    for _ in range(config.epochs):
        order = rng.permutation(len(x_train))
        for lo in range(0, len(x_train), config.batch_size):
            rows = [int(i) for i in order[lo : lo + config.batch_size]]
            loss = torch.nn.functional.mse_loss(head(x_train[rows]), y_train[rows])
            for p in params.values():
                p.grad = None
            loss.backward()
            nnkit.adam_step(params, {n: p.grad for n, p in params.items()}, state)
        if len(x_val):
            with torch.no_grad():
                val = float(torch.nn.functional.mse_loss(head(x_val), y_val))
            if val < best[0]:
                best = (val, {k: v.detach().clone() for k, v in head.state_dict().items()})
    if len(x_val):
        head.load_state_dict(best[1])
    head.eval()
    return head


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def r2(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise ValueError("r2 expects two equal-length vectors")
    if len(y) < 2:
        raise ValueError("r2 needs at least 2 samples")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("r2 undefined: target variance is zero")
    ss_res = float(((y - y_hat) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def rmse(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError("rmse expects matching shapes")
    return float(np.sqrt(((y - y_hat) ** 2).mean()))


def mae(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError("mae expects matching shapes")
    return float(np.abs(y - y_hat).mean())


def reports_from_predictions(
    predictions: np.ndarray,
    records: list[RegionRecord],
    source_city: str,
    target_city: str,
    seed: int,
) -> list[MetricsReport]:
    reports = []
    for col, indicator in enumerate(INDICATORS):
        y = np.array([r.indicators_log[indicator] for r in records])
        y_hat = predictions[:, col]
        reports.append(
            MetricsReport(
                source_city=source_city,
                target_city=target_city,
                indicator=indicator,
                r2=r2(y, y_hat),
                rmse=rmse(y, y_hat),
                mae=mae(y, y_hat),
                n_samples=len(records),
                seed=seed,
            )
        )
    return reports


def evaluate_head(
    head: IndicatorHead,
    embeddings: dict[str, np.ndarray],
    records: list[RegionRecord],
    eval_ids,
    source_city: str,
    target_city: str,
    seed: int = 0,
) -> list[MetricsReport]:
    by_id = {r.region_id: r for r in records}
    eval_records = [by_id[i] for i in eval_ids]
    preds = predict_head(head, embeddings, eval_ids)
    return reports_from_predictions(preds, eval_records, source_city, target_city, seed)


def transfer_eval(
    model: RegionVLM,
    head: IndicatorHead,
    target_records: list[RegionRecord],
    source_city: str,
    eval_ids=None,
    seed: int = 0,
    refit_split: CorpusSplit | None = None,
    head_config: HeadConfig | None = None,
) -> list[MetricsReport]:
    """Frozen source encoder + source head on a target corpus.

    eval_ids restricts evaluation (used for the source==target diagonal,
    where only held-out regions are fair). refit_split optionally refits the
    head on the target instead of reusing the source head.
    """
    target_city = target_records[0].city
    embeddings = extract_embeddings(model, target_records)
    if refit_split is not None:
        head = fit_head(
            embeddings,
            {
                r.region_id: [r.indicators_log[k] for k in INDICATORS]
                for r in target_records
            },
            refit_split,
            head_config,
        )
    ids = list(eval_ids) if eval_ids is not None else [r.region_id for r in target_records]
    return evaluate_head(head, embeddings, target_records, ids, source_city, target_city, seed)


# ---------------------------------------------------------------------------
# Similarity search
# ---------------------------------------------------------------------------


def find_similar(
    index: dict[str, dict[str, np.ndarray]],
    query_id: str,
    source_city: str,
    target_city: str,
    k: int,
) -> list[tuple[str, float]]:
    """Top-k target regions by cosine similarity, ties broken by region id."""
    query = np.asarray(index[source_city][query_id], dtype=np.float64)
    qn = np.linalg.norm(query)
    scored = []
    for region_id, vec in index[target_city].items():
        v = np.asarray(vec, dtype=np.float64)
        denom = qn * np.linalg.norm(v)
        cosine = float(query @ v / denom) if denom > 0 else 0.0
        scored.append((region_id, cosine))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


# ---------------------------------------------------------------------------
# Greedy captioning
# ---------------------------------------------------------------------------


def greedy_caption(
    model: RegionVLM,
    vocab: Vocab,
    image: np.ndarray,
    max_len: int | None = None,
    lm_weight: float | None = None,
) -> str:
    """Argmax decoding from [BOS] until [EOS] or the length cap."""
    if lm_weight is not None and lm_weight == 0:
        warnings.warn("model was trained without the captioning loss; output is likely degenerate")
    max_len = min(max_len or model.config.max_text_len, model.config.max_text_len)
    model.eval()
    images = torch.from_numpy(image).unsqueeze(0)
    with torch.no_grad():
        _, _, caption_seq = model.encode_image(images)
        ids = [BOS_ID]
        while len(ids) < max_len:
            ids_t = torch.tensor([ids], dtype=torch.int64)
            mask = torch.ones(1, len(ids), dtype=torch.bool)
            states, _ = model.encode_text_unimodal(ids_t, mask)
            _, logits = model.decode_multimodal(states, caption_seq)
            nxt = int(logits[0, -1].argmax())
            if nxt == EOS_ID:
                break
            ids.append(nxt)
    return detokenize(ids, vocab)


# ---------------------------------------------------------------------------
# Head persistence and the metrics table
# ---------------------------------------------------------------------------


def save_head(path: str | Path, head: IndicatorHead) -> None:
    save_tensors(
        path,
        dict(head.named_parameters()),
        {
            "kind": "indicator_head",
            "input_dim": head.input_dim,
            "n_outputs": head.n_outputs,
            "hidden": head.hidden,
        },
    )


def load_head(path: str | Path) -> IndicatorHead:
    header, tensors = load_tensors(path)
    if header.get("kind") != "indicator_head":
        raise ValueError(f"{path} is not an indicator head (kind={header.get('kind')!r})")
    head = IndicatorHead(header["input_dim"], header["n_outputs"], header["hidden"])
    with torch.no_grad():
        for name, param in head.named_parameters():
            param.copy_(tensors[name])
    head.eval()
    return head


METRICS_COLUMNS = (
    "model",
    "ablation",
    "source_city",
    "target_city",
    "indicator",
    "r2",
    "rmse",
    "mae",
    "seed",
)


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in METRICS_COLUMNS})


def read_metrics_csv(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path} is empty")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append(
                    {
                        **row,
                        "r2": float(row["r2"]),
                        "rmse": float(row["rmse"]),
                        "mae": float(row["mae"]),
                    }
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"malformed metrics row at line {lineno}: {row}") from exc
    if not rows:
        raise ValueError(f"{path} contains no metric rows")
    return rows


def reports_to_rows(reports: list[MetricsReport], model: str, ablation: str) -> list[dict]:
    return [
        {
            "model": model,
            "ablation": ablation,
            "source_city": r.source_city,
            "target_city": r.target_city,
            "indicator": r.indicator,
            "r2": r.r2,
            "rmse": r.rmse,
            "mae": r.mae,
            "seed": r.seed,
        }
        for r in reports
    ]
