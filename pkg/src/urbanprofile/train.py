"""Pretraining loop, hyperparameter grid search, and the ablation suite.

One seeded process per run: shuffling, caption selection, and parameter
initialization all derive from the run seed, so two runs with the same
(seed, config, corpus) produce bitwise-identical checkpoints. The ablation
suite covers the joint model, its single-loss variants, raw-caption training,
a supervised image-only network, and the self-supervised baselines.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import downstream, nnkit, objectives
from .corpus import INDICATORS, CorpusSplit, RegionRecord
from .model import ImageEncoder, AttentionPooler, ModelConfig, RegionVLM, save_checkpoint
from .objectives import BatchEmbeddings, LossWeights, lm_targets, total_loss
from .textpipe import Vocab, tokenize

ABLATIONS = (
    "full",
    "no_lm",
    "no_con",
    "image_only",
    "text_simclr",
    "tile2vec",
    "autoencoder",
    "pca",
    "unrefined_text",
)

GRID_LRS = (2e-6, 2e-5, 2e-4, 2e-3, 2e-2)
GRID_BATCHES = (4, 8, 16, 32, 64)


@dataclass
class TrainConfig:
    # Within the grid-search range; rates above ~1e-3 collapse the
    # contrastive towers at this scale.
    lr: float = 2e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: str = "full"
    grid_lrs: tuple[float, ...] = GRID_LRS
    grid_batches: tuple[int, ...] = GRID_BATCHES
    model: ModelConfig | None = None
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")

    def resolved_weights(self) -> LossWeights:
        """Loss weights consistent with the named ablation."""
        if self.ablation == "no_lm":
            return LossWeights(contrastive=self.weights.contrastive, lm=0.0)
        if self.ablation == "no_con":
            return LossWeights(contrastive=0.0, lm=self.weights.lm)
        return self.weights

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "weights": {"contrastive": self.weights.contrastive, "lm": self.weights.lm},
            "ablation": self.ablation,
            "grid": {"lrs": list(self.grid_lrs), "batches": list(self.grid_batches)},
            "model": self.model.to_dict() if self.model else None,
            "max_steps": self.max_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        grid = d.get("grid", {})
        return cls(
            lr=d.get("lr", 1e-3),
            batch_size=d.get("batch_size", 32),
            epochs=d.get("epochs", 10),
            seed=d.get("seed", 0),
            weights=LossWeights(**d.get("weights", {})),
            ablation=d.get("ablation", "full"),
            grid_lrs=tuple(grid.get("lrs", GRID_LRS)),
            grid_batches=tuple(grid.get("batches", GRID_BATCHES)),
            model=ModelConfig.from_dict(d["model"]) if d.get("model") else None,
            max_steps=d.get("max_steps"),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


@dataclass
class RunRecord:
    config: dict
    seed: int
    history: list[dict]
    wall_time: float
    checkpoint_path: str | None
    best_val: float
    steps: int

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "config": self.config,
                    "seed": self.seed,
                    "wall_time": self.wall_time,
                    "checkpoint_path": self.checkpoint_path,
                    "best_val": self.best_val,
                    "steps": self.steps,
                    "history": self.history,
                },
                fh,
            )


def _write_loss_csv(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "contrastive", "lm", "total"])
        for row in history:
            writer.writerow([row["step"], row["contrastive"], row["lm"], row["total"]])


# ---------------------------------------------------------------------------
# Batching helpers
# ---------------------------------------------------------------------------


def _image_tensor(records: list[RegionRecord]) -> torch.Tensor:
    return torch.from_numpy(np.stack([r.image for r in records]))


def _token_cache(records: list[RegionRecord], vocab: Vocab, max_text_len: int):
    return [
        [tokenize(c, vocab, max_text_len) for c in r.captions]
        for r in records
    ]


def _token_batch(token_lists, caption_idx) -> tuple[torch.Tensor, torch.Tensor]:
    chosen = [tokens[i] for tokens, i in zip(token_lists, caption_idx)]
    length = max(t.text_length for t in chosen)
    ids = torch.zeros(len(chosen), length, dtype=torch.int64)
    mask = torch.zeros(len(chosen), length, dtype=torch.bool)
    for row, t in enumerate(chosen):
        ids[row, : t.text_length] = torch.tensor(t.ids[: t.text_length])
        mask[row, : t.text_length] = True
    return ids, mask


def _vlm_batch_loss(model: RegionVLM, images, ids, mask, weights):
    if weights.lm == 0:
        # contrastive-only arms never need the multimodal half
        _, image_pooled, _ = model.encode_image(images)
        _, text_cls = model.encode_text_unimodal(ids, mask)
        batch = BatchEmbeddings(
            image_pooled=image_pooled,
            text_cls=text_cls,
            temperature=model.temperature_value(),
        )
        return total_loss(batch, weights)
    out = model(images, ids, mask)
    targets, predict_mask = lm_targets(ids, mask)
    batch = BatchEmbeddings(
        image_pooled=out["image_pooled"],
        text_cls=out["text_cls"],
        token_logits=out["token_logits"],
        target_ids=targets,
        target_mask=predict_mask,
        temperature=out["temperature"],
    )
    return total_loss(batch, weights)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def pretrain(
    records: list[RegionRecord],
    split: CorpusSplit,
    vocab: Vocab,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> tuple[RunRecord, RegionVLM]:
    """Train the joint model; checkpoint the best validation loss."""
    start = time.perf_counter()
    weights = config.resolved_weights()
    model_config = config.model or ModelConfig(vocab_size=0)
    model_config = replace(model_config, vocab_size=len(vocab))

    torch.manual_seed(config.seed)
    model = RegionVLM(model_config)
    params = nnkit.parameter_set(model)
    state = nnkit.AdamState.for_params(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)

    by_id = {r.region_id: r for r in records}
    train_records = [by_id[i] for i in split.train_ids]
    val_records = [by_id[i] for i in split.val_ids]
    train_images = _image_tensor(train_records)
    val_images = _image_tensor(val_records)
    train_tokens = _token_cache(train_records, vocab, model_config.max_text_len)
    val_tokens = _token_cache(val_records, vocab, model_config.max_text_len)

    def validation_loss() -> float:
        model.eval()
        losses, counts = [], []
        with torch.no_grad():
            for lo in range(0, len(val_records), config.batch_size):
                rows = list(range(lo, min(lo + config.batch_size, len(val_records))))
                ids, mask = _token_batch([val_tokens[i] for i in rows], [0] * len(rows))
                loss, _ = _vlm_batch_loss(model, val_images[rows], ids, mask, weights)
                losses.append(float(loss))
                counts.append(len(rows))
        model.train()
        return float(np.average(losses, weights=counts))

    history: list[dict] = []
    best_val = float("inf")
    best_state: dict[str, torch.Tensor] | None = None
    step = 0
    done = False
    model.train()
    for _ in range(config.epochs):
        if done:
            break
        order = rng.permutation(len(train_records))
        for lo in range(0, len(train_records), config.batch_size):
            rows = [int(i) for i in order[lo : lo + config.batch_size]]
            caption_idx = [int(rng.integers(len(train_tokens[i]))) for i in rows]
            ids, mask = _token_batch([train_tokens[i] for i in rows], caption_idx)
            try:
                loss, components = _vlm_batch_loss(model, train_images[rows], ids, mask, weights)
            except FloatingPointError as exc:
                raise RuntimeError(f"training diverged at step {step}: {exc}") from exc
            if not torch.isfinite(loss):
                raise RuntimeError(f"training diverged (non-finite loss) at step {step}")
            for p in params.values():
                p.grad = None
            loss.backward()
            grads = {name: p.grad for name, p in params.items()}
            nnkit.adam_step(params, grads, state)
            step += 1
            lm_component = components.get("lm")
            history.append(
                {
                    "step": step,
                    "contrastive": float(components["contrastive"].detach()),
                    "lm": float(lm_component.detach()) if lm_component is not None else float("nan"),
                    "total": float(loss.detach()),
                }
            )
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        val = validation_loss()
        if val < best_val:
            best_val = val
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()

    checkpoint_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        checkpoint_path = str(out / "checkpoint.uckpt")
        save_checkpoint(
            checkpoint_path,
            model,
            vocab.content_hash(),
            extra={
                "ablation": config.ablation,
                "lm_weight": weights.lm,
                "contrastive_weight": weights.contrastive,
            },
        )
    record = RunRecord(
        config=config.to_dict(),
        seed=config.seed,
        history=history,
        wall_time=time.perf_counter() - start,
        checkpoint_path=checkpoint_path,
        best_val=best_val,
        steps=step,
    )
    if out_dir is not None:
        record.save(Path(out_dir) / "run.json")
        _write_loss_csv(Path(out_dir) / "loss.csv", history)
    return record, model


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


def grid_search(
    records: list[RegionRecord],
    split: CorpusSplit,
    vocab: Vocab,
    config: TrainConfig,
    budget_steps: int = 60,
) -> tuple[TrainConfig, list[dict]]:
    """Train every (lr, batch) cell for a budgeted step count; pick the
    lowest validation loss."""
    if not config.grid_lrs or not config.grid_batches:
        raise ValueError("grid search needs non-empty lr and batch ranges")
    table = []
    best_cell = None
    for lr in config.grid_lrs:
        for batch_size in config.grid_batches:
            cell = replace(
                config, lr=lr, batch_size=batch_size, max_steps=budget_steps, epochs=10**9
            )
            record, _ = pretrain(records, split, vocab, cell)
            table.append(
                {"lr": lr, "batch_size": batch_size, "val_loss": record.best_val}
            )
            if best_cell is None or record.best_val < best_cell[0]:
                best_cell = (record.best_val, lr, batch_size)
    _, lr, batch_size = best_cell
    return replace(config, lr=lr, batch_size=batch_size), table


# ---------------------------------------------------------------------------
# Baseline towers and trainers
# ---------------------------------------------------------------------------


class ImageTower(nn.Module):
    """Image encoder + contrastive pooler + projection, used by the
    image-only baselines."""

    def __init__(self, config: ModelConfig, normalize: bool = True):
        super().__init__()
        self.config = config
        self.normalize = normalize
        self.encoder = ImageEncoder(config)
        self.pooler = AttentionPooler(config.embed_dim, config.n_heads, config.n_contrastive_queries)
        self.proj = nn.Linear(config.embed_dim, config.proj_dim, bias=False)
        nnkit.trunc_normal_(self.proj.weight)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        pooled = self.pooler(self.encoder(images)).mean(dim=1)
        pooled = self.proj(pooled)
        if self.normalize:
            pooled = pooled / pooled.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return pooled


class SupervisedViT(nn.Module):
    """Image-only ViT trained end to end on log indicators."""

    def __init__(self, config: ModelConfig, hidden: int = 256, n_outputs: int = 3):
        super().__init__()
        self.tower = ImageTower(config, normalize=False)
        self.head = nn.Sequential(
            nn.Linear(config.proj_dim, hidden), nn.ReLU(), nn.Linear(hidden, n_outputs)
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.tower(images))


class ImageAutoencoder(nn.Module):
    def __init__(self, input_dim: int, hidden: int = 512, latent: int = 128):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Linear(input_dim, hidden), nn.ReLU(), nn.Linear(hidden, latent)
        )
        self.decoder = nn.Sequential(
            nn.Linear(latent, hidden), nn.ReLU(), nn.Linear(hidden, input_dim)
        )

    def forward(self, flat_images: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(flat_images))


def _train_generic(model, loss_of_batch, n_train, config: TrainConfig, val_loss=None):
    """Shared seeded epoch/batch loop for the baseline arms."""
    params = nnkit.parameter_set(model)
    state = nnkit.AdamState.for_params(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    best = (float("inf"), None)
    step = 0
    model.train()
    for _ in range(config.epochs):
        order = rng.permutation(n_train)
        for lo in range(0, n_train, config.batch_size):
            rows = [int(i) for i in order[lo : lo + config.batch_size]]
            loss = loss_of_batch(rows, rng)
            if loss is None:
                continue
            if not torch.isfinite(loss):
                raise RuntimeError(f"training diverged (non-finite loss) at step {step}")
            for p in params.values():
                p.grad = None
            loss.backward()
            nnkit.adam_step(params, {n: p.grad for n, p in params.items()}, state)
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                break
        if val_loss is not None:
            model.eval()
            with torch.no_grad():
                v = float(val_loss())
            model.train()
            if v < best[0]:
                best = (v, {k: t.detach().clone() for k, t in model.state_dict().items()})
        if config.max_steps is not None and step >= config.max_steps:
            break
    if best[1] is not None:
        model.load_state_dict(best[1])
    model.eval()
    return model


def train_supervised_vit(
    records: list[RegionRecord], split: CorpusSplit, config: TrainConfig
) -> SupervisedViT:
    model_config = replace(config.model or ModelConfig(vocab_size=8), vocab_size=8)
    torch.manual_seed(config.seed)
    model = SupervisedViT(model_config)
    by_id = {r.region_id: r for r in records}
    train_records = [by_id[i] for i in split.train_ids]
    val_records = [by_id[i] for i in split.val_ids]
    images = _image_tensor(train_records)
    targets = torch.tensor(
        [[r.indicators_log[k] for k in INDICATORS] for r in train_records], dtype=torch.float32
    )
    val_images = _image_tensor(val_records)
    val_targets = torch.tensor(
        [[r.indicators_log[k] for k in INDICATORS] for r in val_records], dtype=torch.float32
    )

    def loss_of_batch(rows, rng):
        return torch.nn.functional.mse_loss(model(images[rows]), targets[rows])

    def val_loss():
        return torch.nn.functional.mse_loss(model(val_images), val_targets)

    return _train_generic(model, loss_of_batch, len(train_records), config, val_loss)


def train_text_simclr(
    records: list[RegionRecord],
    split: CorpusSplit,
    config: TrainConfig,
    threshold: float = 0.8,
    temperature: float = 0.5,
) -> ImageTower:
    model_config = replace(config.model or ModelConfig(vocab_size=8), vocab_size=8)
    torch.manual_seed(config.seed)
    tower = ImageTower(model_config)
    by_id = {r.region_id: r for r in records}
    train_records = [by_id[i] for i in split.train_ids]
    images = _image_tensor(train_records)

    def loss_of_batch(rows, rng):
        if len(rows) < 2:
            return None
        captions = [
            train_records[i].captions[int(rng.integers(len(train_records[i].captions)))]
            for i in rows
        ]
        mask = objectives.tfidf_positive_mask(captions, threshold)
        if not (mask & ~np.eye(len(rows), dtype=bool)).any(axis=1).any():
            return None  # no informative pairs in this batch
        return objectives.text_simclr_loss(tower(images[rows]), mask, temperature)

    return _train_generic(tower, loss_of_batch, len(train_records), config)


def train_tile2vec(
    records: list[RegionRecord],
    split: CorpusSplit,
    config: TrainConfig,
    margin: float = 1.0,
    far_threshold: int = 5,
) -> ImageTower:
    """Triplet training: positives are grid-adjacent regions, negatives sit
    at Chebyshev grid distance above the threshold."""
    model_config = replace(config.model or ModelConfig(vocab_size=8), vocab_size=8)
    torch.manual_seed(config.seed)
    tower = ImageTower(model_config, normalize=False)
    by_id = {r.region_id: r for r in records}
    train_records = [by_id[i] for i in split.train_ids]
    images = _image_tensor(train_records)
    cells = np.array([r.grid_ij for r in train_records])

    cheb = np.abs(cells[:, None, :] - cells[None, :, :]).max(axis=2)
    near = cheb == 1
    far = cheb > far_threshold

    def loss_of_batch(rows, rng):
        anchors, positives, negatives = [], [], []
        for i in rows:
            near_idx = np.flatnonzero(near[i])
            far_idx = np.flatnonzero(far[i])
            if near_idx.size == 0 or far_idx.size == 0:
                continue
            anchors.append(i)
            positives.append(int(near_idx[rng.integers(near_idx.size)]))
            negatives.append(int(far_idx[rng.integers(far_idx.size)]))
        if not anchors:
            return None
        emb = tower(images[anchors + positives + negatives])
        n = len(anchors)
        return objectives.triplet_loss(emb[:n], emb[n : 2 * n], emb[2 * n :], margin)

    return _train_generic(tower, loss_of_batch, len(train_records), config)


def train_autoencoder(
    records: list[RegionRecord], split: CorpusSplit, config: TrainConfig
) -> ImageAutoencoder:
    torch.manual_seed(config.seed)
    by_id = {r.region_id: r for r in records}
    train_records = [by_id[i] for i in split.train_ids]
    flat = _image_tensor(train_records).reshape(len(train_records), -1)
    model = ImageAutoencoder(flat.shape[1])

    def loss_of_batch(rows, rng):
        x = flat[rows]
        return objectives.autoencoder_loss(x, model(x))

    return _train_generic(model, loss_of_batch, len(train_records), config)


# ---------------------------------------------------------------------------
# Ablation suite
# ---------------------------------------------------------------------------

ABLATION_SUITE = ("full", "no_lm", "no_con", "image_only", "text_simclr", "unrefined_text")


def _tower_embeddings(tower, records: list[RegionRecord], batch_size: int = 64):
    images = _image_tensor(records)
    out = {}
    tower.eval()
    with torch.no_grad():
        for lo in range(0, len(records), batch_size):
            embs = tower(images[lo : lo + batch_size])
            for r, e in zip(records[lo : lo + batch_size], embs):
                out[r.region_id] = e.numpy().astype(np.float32)
    return out


def run_ablation_arm(
    arm: str,
    corpora: dict[str, list[RegionRecord]],
    split: CorpusSplit,
    vocab: Vocab,
    config: TrainConfig,
    head_config: "downstream.HeadConfig | None" = None,
) -> list[downstream.MetricsReport]:
    """Train one ablation arm with one seed and evaluate it on the test split."""
    refined = corpora["refined"]
    city = refined[0].city
    head_config = head_config or downstream.HeadConfig(seed=config.seed)
    config = replace(config, ablation=arm)

    if arm == "image_only":
        model = train_supervised_vit(refined, split, config)
        by_id = {r.region_id: r for r in refined}
        test_records = [by_id[i] for i in split.test_ids]
        with torch.no_grad():
            preds = model(_image_tensor(test_records)).numpy()
        return downstream.reports_from_predictions(
            preds, test_records, city, city, config.seed
        )

    if arm in ("full", "no_lm", "no_con", "unrefined_text"):
        data = corpora["unrefined"] if arm == "unrefined_text" else refined
        _, model = pretrain(data, split, vocab, config)
        embeddings = downstream.extract_embeddings(model, refined)
    elif arm == "text_simclr":
        tower = train_text_simclr(refined, split, config)
        embeddings = _tower_embeddings(tower, refined)
    elif arm == "tile2vec":
        tower = train_tile2vec(refined, split, config)
        embeddings = _tower_embeddings(tower, refined)
    elif arm == "autoencoder":
        ae = train_autoencoder(refined, split, config)
        images = _image_tensor(refined).reshape(len(refined), -1)
        with torch.no_grad():
            latent = ae.encoder(images).numpy().astype(np.float32)
        embeddings = {r.region_id: latent[i] for i, r in enumerate(refined)}
    elif arm == "pca":
        by_id = {r.region_id: r for r in refined}
        train_images = np.stack([by_id[i].image for i in split.train_ids])
        basis = objectives.pca_fit(train_images, k=10)
        projected = basis.project(np.stack([r.image for r in refined])).astype(np.float32)
        embeddings = {r.region_id: projected[i] for i, r in enumerate(refined)}
    else:
        raise ValueError(f"unknown ablation arm {arm!r}")

    head = downstream.fit_head(
        embeddings,
        {r.region_id: [r.indicators_log[k] for k in INDICATORS] for r in refined},
        split,
        head_config,
    )
    return downstream.evaluate_head(
        head, embeddings, refined, split.test_ids, city, city, config.seed
    )


def run_ablation_suite(
    corpora: dict[str, list[RegionRecord]],
    split: CorpusSplit,
    vocab: Vocab,
    seeds: list[int],
    config: TrainConfig,
    arms: tuple[str, ...] = ABLATION_SUITE,
    out_dir: str | Path | None = None,
) -> tuple[list[dict], list[dict]]:
    """Every arm x seed, evaluated downstream; returns (rows, per-arm means)."""
    if not seeds:
        raise ValueError("need at least one seed")
    rows = []
    for arm in arms:
        for seed in seeds:
            reports = run_ablation_arm(
                arm, corpora, split, vocab, replace(config, seed=seed)
            )
            for report in reports:
                rows.append(
                    {
                        "model": "region_vlm",
                        "ablation": arm,
                        "source_city": report.source_city,
                        "target_city": report.target_city,
                        "indicator": report.indicator,
                        "r2": report.r2,
                        "rmse": report.rmse,
                        "mae": report.mae,
                        "seed": seed,
                    }
                )
    summary = []
    for arm in arms:
        for indicator in INDICATORS:
            vals = [
                r["r2"] for r in rows if r["ablation"] == arm and r["indicator"] == indicator
            ]
            summary.append(
                {
                    "ablation": arm,
                    "indicator": indicator,
                    "r2_mean": float(np.mean(vals)),
                    "r2_std": float(np.std(vals)),
                    "n_seeds": len(vals),
                }
            )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        downstream.write_metrics_csv(out / "metrics.csv", rows)
        with open(out / "ablation_summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
    return rows, summary
