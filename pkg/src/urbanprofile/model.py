"""Vision-language model for region profiling, plus its checkpoint format.

A ViT image encoder feeds two task-specific attention poolers: a single-query
pooler for the contrastive embedding and an m1-query pooler whose output
sequence the caption decoder cross-attends to. The text decoder is decoupled:
the first half is text-only causal self-attention (its [CLS] state is the
contrastive text embedding), the second half adds cross-attention to the
pooled image sequence and drives the language-modeling head. One joint
forward pass produces every activation both losses need.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import nnkit
from .nnkit import AttentionParams

CHECKPOINT_MAGIC_LEN = 8  # little-endian u64 header length prefix

_DTYPE_NAMES = {torch.float32: "f32", torch.float64: "f64"}
_DTYPES_BY_NAME = {v: k for k, v in _DTYPE_NAMES.items()}


@dataclass
class ModelConfig:
    vocab_size: int
    image_height: int = 64
    image_width: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    n_heads: int = 4
    n_image_layers: int = 4
    n_text_layers: int = 4
    split_index: int | None = None  # text-only layers before the multimodal half
    max_text_len: int = 64
    n_contrastive_queries: int = 1
    n_caption_queries: int | None = None  # defaults to m1
    proj_dim: int = 128
    mlp_ratio: int = 4
    normalize_embeddings: bool = True
    temperature: float = 1.0
    learnable_temperature: bool = False
    post_norm: bool = False
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError(
                f"image {self.image_height}x{self.image_width} not divisible by "
                f"patch size {self.patch_size}"
            )
        if self.embed_dim % self.n_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.split_index is None:
            self.split_index = self.n_text_layers // 2
        if not 1 <= self.split_index < self.n_text_layers:
            raise ValueError(
                f"split_index {self.split_index} must be in [1, {self.n_text_layers})"
            )
        if self.n_caption_queries is None:
            self.n_caption_queries = self.m1

    @property
    def m1(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Patch handling
# ---------------------------------------------------------------------------


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, m1, P*P*C): non-overlapping patches in row-major
    order, each flattened channel-last."""
    if images.ndim == 3:
        images = images.unsqueeze(0)
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, h // p, p, w // p, p, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(patches: torch.Tensor, height: int, width: int, patch_size: int) -> torch.Tensor:
    b, m1, flat = patches.shape
    p = patch_size
    c = flat // (p * p)
    gh, gw = height // p, width // p
    if m1 != gh * gw:
        raise ValueError(f"{m1} patches do not tile {height}x{width} at patch {p}")
    x = patches.reshape(b, gh, gw, p, p, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, height, width, c)


_causal_masks: dict[int, torch.Tensor] = {}


def causal_mask(length: int) -> torch.Tensor:
    if length not in _causal_masks:
        _causal_masks[length] = torch.ones(length, length, dtype=torch.bool).tril_()
    return _causal_masks[length]


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.wq = nn.Parameter(torch.empty(dim, dim))
        self.wk = nn.Parameter(torch.empty(dim, dim))
        self.wv = nn.Parameter(torch.empty(dim, dim))
        self.wo = nn.Parameter(torch.empty(dim, dim))
        for w in (self.wq, self.wk, self.wv, self.wo):
            nnkit.trunc_normal_(w)

    def forward(self, x_q, x_kv, mask=None):
        params = AttentionParams(wq=self.wq, wk=self.wk, wv=self.wv, wo=self.wo)
        return nnkit.multi_head_attention(x_q, x_kv, params, self.n_heads, mask=mask)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mlp_ratio: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)
        self.drop = nn.Dropout(dropout)
        nnkit.trunc_normal_(self.fc1.weight)
        nnkit.trunc_normal_(self.fc2.weight)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(self.drop(torch.nn.functional.gelu(self.fc1(x))))


class TransformerBlock(nn.Module):
    """Self-attention block, optionally with a cross-attention sublayer.

    Pre-norm by default; post_norm restores the literal
    norm(residual + sublayer) ordering.
    """

    def __init__(self, dim, n_heads, mlp_ratio, cross: bool = False,
                 post_norm: bool = False, dropout: float = 0.0):
        super().__init__()
        self.post_norm = post_norm
        self.attn = MultiHeadAttention(dim, n_heads)
        self.norm_attn = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, n_heads) if cross else None
        self.norm_cross = nn.LayerNorm(dim) if cross else None
        self.mlp = FeedForward(dim, mlp_ratio, dropout)
        self.norm_mlp = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, self_mask=None, kv=None, cross_mask=None):
        if self.post_norm:
            x = self.norm_attn(x + self.drop(self.attn(x, x, mask=self_mask)))
            if self.cross_attn is not None:
                x = self.norm_cross(x + self.drop(self.cross_attn(x, kv, mask=cross_mask)))
            x = self.norm_mlp(x + self.drop(self.mlp(x)))
            return x
        h = self.norm_attn(x)
        x = x + self.drop(self.attn(h, h, mask=self_mask))
        if self.cross_attn is not None:
            x = x + self.drop(self.cross_attn(self.norm_cross(x), kv, mask=cross_mask))
        x = x + self.drop(self.mlp(self.norm_mlp(x)))
        return x


class AttentionPooler(nn.Module):
    """Learned query tokens cross-attending to an encoder output sequence.

    An optional per-sample anchor is added to the queries; the contrastive
    pooler anchors on the encoder's [CLS] output so its queries track image
    content rather than starting from a shared constant.
    """

    def __init__(self, dim: int, n_heads: int, n_queries: int):
        super().__init__()
        self.queries = nn.Parameter(torch.empty(n_queries, dim))
        nnkit.trunc_normal_(self.queries)
        self.attn = MultiHeadAttention(dim, n_heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, seq: torch.Tensor, query_anchor: torch.Tensor | None = None) -> torch.Tensor:
        q = self.queries.unsqueeze(0).expand(seq.shape[0], -1, -1)
        if query_anchor is not None:
            q = q + query_anchor
        return self.norm(self.attn(q, seq))


class ImageEncoder(nn.Module):
    """ViT over flat image patches with a prepended image [CLS] token."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        self.config = c
        self.patch_proj = nn.Linear(c.patch_size * c.patch_size * 3, c.embed_dim)
        self.cls_token = nn.Parameter(torch.empty(1, 1, c.embed_dim))
        self.pos_embed = nn.Parameter(torch.empty(1, c.m1 + 1, c.embed_dim))
        # Fan-in scaled init for the pixel projection: at 0.02 the pixel
        # content drowns under the positional/[CLS] components and the
        # contrastive towers cannot break symmetry at this scale.
        fan_in = c.patch_size * c.patch_size * 3
        nnkit.trunc_normal_(self.patch_proj.weight, std=(2.0 / fan_in) ** 0.5)
        nn.init.zeros_(self.patch_proj.bias)
        nnkit.trunc_normal_(self.cls_token)
        nnkit.trunc_normal_(self.pos_embed)
        self.blocks = nn.ModuleList(
            TransformerBlock(c.embed_dim, c.n_heads, c.mlp_ratio,
                             post_norm=c.post_norm, dropout=c.dropout)
            for _ in range(c.n_image_layers)
        )
        self.final_norm = nn.Identity() if c.post_norm else nn.LayerNorm(c.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_proj(patchify(images, self.config.patch_size))
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)


class RegionVLM(nn.Module):
    """Contrastive-plus-captioning model over region images and captions."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        self.config = c
        self.image_encoder = ImageEncoder(c)
        self.contrastive_pooler = AttentionPooler(c.embed_dim, c.n_heads, c.n_contrastive_queries)
        self.caption_pooler = AttentionPooler(c.embed_dim, c.n_heads, c.n_caption_queries)
        self.image_proj = nn.Linear(c.embed_dim, c.proj_dim, bias=False)

        self.token_embed = nn.Embedding(c.vocab_size, c.embed_dim)
        self.text_pos = nn.Parameter(torch.empty(1, c.max_text_len, c.embed_dim))
        nnkit.trunc_normal_(self.token_embed.weight)
        nnkit.trunc_normal_(self.text_pos)
        self.uni_blocks = nn.ModuleList(
            TransformerBlock(c.embed_dim, c.n_heads, c.mlp_ratio,
                             post_norm=c.post_norm, dropout=c.dropout)
            for _ in range(c.split_index)
        )
        self.mm_blocks = nn.ModuleList(
            TransformerBlock(c.embed_dim, c.n_heads, c.mlp_ratio, cross=True,
                             post_norm=c.post_norm, dropout=c.dropout)
            for _ in range(c.n_text_layers - c.split_index)
        )
        self.uni_norm = nn.Identity() if c.post_norm else nn.LayerNorm(c.embed_dim)
        self.mm_norm = nn.Identity() if c.post_norm else nn.LayerNorm(c.embed_dim)
        self.text_proj = nn.Linear(c.embed_dim, c.proj_dim, bias=False)
        self.lm_head = nn.Linear(c.embed_dim, c.vocab_size)

        nnkit.trunc_normal_(self.image_proj.weight)
        nnkit.trunc_normal_(self.text_proj.weight)
        nnkit.trunc_normal_(self.lm_head.weight)
        nn.init.zeros_(self.lm_head.bias)

        if c.learnable_temperature:
            self.log_temperature = nn.Parameter(torch.tensor(float(np.log(c.temperature))))
        else:
            self.log_temperature = None

        self.call_counts = {"encode_image": 0, "encode_text_unimodal": 0, "decode_multimodal": 0}

    def reset_call_counts(self) -> None:
        for k in self.call_counts:
            self.call_counts[k] = 0

    def temperature_value(self):
        if self.log_temperature is not None:
            # Clamp so a learnable temperature cannot collapse the softmax.
            return self.log_temperature.clamp(np.log(0.01), np.log(100.0)).exp()
        return self.config.temperature

    def _maybe_normalize(self, x: torch.Tensor) -> torch.Tensor:
        if self.config.normalize_embeddings:
            return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return x

    def encode_image(self, images: torch.Tensor):
        """Returns (image_seq, pooled_contrastive, pooled_caption_seq)."""
        self.call_counts["encode_image"] += 1
        seq = self.image_encoder(images)
        # the [CLS] output anchors the contrastive query (it is the e_q of
        # the pooling step), with the learned query added on top
        pooled = self.contrastive_pooler(seq, query_anchor=seq[:, :1]).mean(dim=1)
        pooled = self._maybe_normalize(self.image_proj(pooled))
        caption_seq = self.caption_pooler(seq)
        return seq, pooled, caption_seq

    def encode_text_unimodal(self, ids: torch.Tensor, mask: torch.Tensor):
        """First half of the decoder under a causal mask; e^T reads the final
        [CLS] position. Returns (states, text_cls)."""
        self.call_counts["encode_text_unimodal"] += 1
        b, length = ids.shape
        if length > self.config.max_text_len:
            raise ValueError(
                f"sequence length {length} exceeds max_text_len {self.config.max_text_len}"
            )
        x = self.token_embed(ids) + self.text_pos[:, :length]
        cmask = causal_mask(length)
        for block in self.uni_blocks:
            x = block(x, self_mask=cmask)
        cls_index = mask.to(torch.int64).sum(dim=1) - 1
        cls_state = self.uni_norm(x[torch.arange(b), cls_index])
        text_cls = self._maybe_normalize(self.text_proj(cls_state))
        return x, text_cls

    def decode_multimodal(self, text_states: torch.Tensor, caption_seq: torch.Tensor):
        """Second half of the decoder: causal self-attention plus
        cross-attention with text queries over the pooled image sequence.
        Returns (multimodal_seq, token_logits)."""
        self.call_counts["decode_multimodal"] += 1
        length = text_states.shape[1]
        cmask = causal_mask(length)
        x = text_states
        for block in self.mm_blocks:
            x = block(x, self_mask=cmask, kv=caption_seq)
        x = self.mm_norm(x)
        return x, self.lm_head(x)

    def forward(self, images: torch.Tensor, ids: torch.Tensor, mask: torch.Tensor) -> dict:
        """Single joint pass serving both losses."""
        _, image_pooled, caption_seq = self.encode_image(images)
        text_states, text_cls = self.encode_text_unimodal(ids, mask)
        mm_seq, token_logits = self.decode_multimodal(text_states, caption_seq)
        return {
            "image_pooled": image_pooled,
            "text_cls": text_cls,
            "multimodal_seq": mm_seq,
            "token_logits": token_logits,
            "temperature": self.temperature_value(),
        }


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------


def estimate_cost(n_layers: int, dim: int, m1: int, m2: int) -> dict[str, int]:
    """Term-wise op counts for the encoder/decoder stack at the given sizes."""
    for name, v in (("n_layers", n_layers), ("dim", dim), ("m1", m1), ("m2", m2)):
        if v < 0:
            raise ValueError(f"{name} must be >= 0, got {v}")
    terms = {
        "vit": n_layers * (m1**2 * dim + m1 * dim**2),
        "pool": m1**2 * dim,
        "embed": m2 * dim,
        "text": n_layers * (m2**2 * dim + m2 * dim**2),
        "cross": n_layers * m1 * m2 * dim,
    }
    terms["total"] = sum(terms.values())
    return terms


# ---------------------------------------------------------------------------
# Checkpoint I/O (.uckpt)
# ---------------------------------------------------------------------------


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().numpy()
    return np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    """Length-prefixed JSON header (meta + tensor directory), then payloads."""
    directory = []
    payload = bytearray()
    for name in sorted(tensors):
        t = tensors[name]
        data = _tensor_bytes(t)
        directory.append(
            {
                "name": name,
                "dtype": _DTYPE_NAMES[t.dtype],
                "shape": list(t.shape),
                "byte_offset": len(payload),
                "byte_len": len(data),
            }
        )
        payload.extend(data)
    header = dict(meta)
    header["tensors"] = directory
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_tensors(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<Q", fh.read(CHECKPOINT_MAGIC_LEN))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    tensors = {}
    for entry in header.pop("tensors"):
        start, n = entry["byte_offset"], entry["byte_len"]
        dtype = _DTYPES_BY_NAME[entry["dtype"]]
        np_dtype = "<f4" if entry["dtype"] == "f32" else "<f8"
        arr = np.frombuffer(payload[start : start + n], dtype=np_dtype).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(dtype)
    return header, tensors


def save_checkpoint(
    path: str | Path, model: RegionVLM, vocab_hash: str, extra: dict | None = None
) -> None:
    meta = {"kind": "region_vlm", "config": model.config.to_dict(), "vocab_hash": vocab_hash}
    if extra:
        meta["extra"] = extra
    save_tensors(path, dict(model.named_parameters()), meta)


def load_checkpoint(path: str | Path) -> tuple[RegionVLM, ModelConfig, str]:
    header, tensors = load_tensors(path)
    if header.get("kind") != "region_vlm":
        raise ValueError(f"{path} is not a model checkpoint (kind={header.get('kind')!r})")
    config = ModelConfig.from_dict(header["config"])
    model = RegionVLM(config)
    own = dict(model.named_parameters())
    if set(own) != set(tensors):
        missing = set(own) ^ set(tensors)
        raise ValueError(f"checkpoint tensor names do not match the model: {sorted(missing)}")
    with torch.no_grad():
        for name, param in own.items():
            stored = tensors[name]
            if tuple(stored.shape) != tuple(param.shape):
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(stored.shape)} "
                    f"vs config {tuple(param.shape)}"
                )
            param.copy_(stored)
    model.eval()
    return model, config, header["vocab_hash"]
