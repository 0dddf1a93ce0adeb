"""Pretraining losses and the ablation/baseline objectives.

The two pretraining terms (symmetric batch contrastive loss and next-token
language-modeling loss) consume one shared forward pass. Batch means are used
for both so the loss weights are batch-size independent. The remaining
functions back the baseline arms: triplet loss over grid neighbors,
image-image NT-Xent with caption-similarity positives, reconstruction error,
and PCA.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .textpipe import CLS_ID


@dataclass
class LossWeights:
    contrastive: float = 1.0
    lm: float = 1.0

    def __post_init__(self) -> None:
        if self.contrastive < 0 or self.lm < 0:
            raise ValueError("loss weights must be >= 0")
        if self.contrastive == 0 and self.lm == 0:
            raise ValueError("at least one loss weight must be nonzero")


@dataclass
class BatchEmbeddings:
    """Paired outputs of one joint forward pass (i-th image <-> i-th text)."""

    image_pooled: torch.Tensor  # [m, proj]
    text_cls: torch.Tensor  # [m, proj]
    token_logits: torch.Tensor | None = None  # [m, L, vocab]
    target_ids: torch.Tensor | None = None  # [m, L]
    target_mask: torch.Tensor | None = None  # [m, L] bool
    temperature: float | torch.Tensor = 1.0

    def __post_init__(self) -> None:
        if self.image_pooled.shape[0] < 1:
            raise ValueError("batch must contain at least one pair")
        if self.image_pooled.shape[0] != self.text_cls.shape[0]:
            raise ValueError("image and text batches differ in size")


def similarity_matrix(batch: BatchEmbeddings) -> torch.Tensor:
    """S[i][j] = <image_i, text_j> / temperature."""
    s = (batch.image_pooled @ batch.text_cls.T) / batch.temperature
    if not torch.isfinite(s).all():
        raise FloatingPointError("non-finite similarity matrix")
    return s


def contrastive_loss(batch: BatchEmbeddings) -> torch.Tensor:
    """Image->text plus text->image cross entropy against the paired diagonal,
    each averaged over the batch."""
    s = similarity_matrix(batch)
    diag = torch.arange(s.shape[0])
    image_to_text = -F.log_softmax(s, dim=1)[diag, diag].mean()
    text_to_image = -F.log_softmax(s, dim=0)[diag, diag].mean()
    return image_to_text + text_to_image


def lm_targets(ids: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Shift for next-token prediction: position l predicts ids[l+1].

    Pads and the trailing [CLS] are excluded (the readout token is not text).
    """
    targets = torch.roll(ids, shifts=-1, dims=1)
    predict = torch.roll(mask, shifts=-1, dims=1) & (targets != CLS_ID)
    predict[:, -1] = False
    return targets, predict


def lm_loss(
    token_logits: torch.Tensor, target_ids: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean negative log-likelihood over unmasked predicted positions."""
    if not mask.any():
        raise ValueError("lm_loss: all positions are masked")
    log_probs = F.log_softmax(token_logits, dim=-1)
    picked = log_probs.gather(-1, target_ids.unsqueeze(-1)).squeeze(-1)
    return -(picked[mask]).mean()


def total_loss(
    batch: BatchEmbeddings, weights: LossWeights
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of the two terms; components returned for logging even
    when their weight is zero (zero-weight terms stay out of the graph)."""
    components = {"contrastive": contrastive_loss(batch)}
    if batch.token_logits is not None:
        components["lm"] = lm_loss(batch.token_logits, batch.target_ids, batch.target_mask)
    elif weights.lm != 0:
        raise ValueError("lm weight is nonzero but the batch has no token logits")

    total = None
    for name, weight in (("contrastive", weights.contrastive), ("lm", weights.lm)):
        if weight == 0 or name not in components:
            continue
        term = weight * components[name] if weight != 1.0 else components[name]
        total = term if total is None else total + term
    return total, components


# ---------------------------------------------------------------------------
# Baseline objectives
# ---------------------------------------------------------------------------


def triplet_loss(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negative: torch.Tensor,
    margin: float = 1.0,
) -> torch.Tensor:
    """max(0, ||a-p|| - ||a-n|| + margin), averaged over any batch axis."""
    if anchor.shape != positive.shape or anchor.shape != negative.shape:
        raise ValueError("triplet embeddings must share a shape")
    d_pos = (anchor - positive).norm(dim=-1)
    d_neg = (anchor - negative).norm(dim=-1)
    return F.relu(d_pos - d_neg + margin).mean()


def tfidf_positive_mask(captions: list[str], threshold: float = 0.8) -> np.ndarray:
    """Pairs whose TF-IDF caption cosine reaches the threshold are positives."""
    from sklearn.feature_extraction.text import TfidfVectorizer
    from sklearn.metrics.pairwise import cosine_similarity

    tfidf = TfidfVectorizer().fit_transform(captions)
    return cosine_similarity(tfidf) >= threshold


def text_simclr_loss(
    image_embeddings: torch.Tensor,
    positive_mask: torch.Tensor | np.ndarray,
    temperature: float = 0.5,
) -> torch.Tensor:
    """NT-Xent over image embeddings with caption-derived positives.

    Anchors without any positive are skipped; if every anchor is skipped
    there is nothing to optimize and an error is raised.
    """
    if isinstance(positive_mask, np.ndarray):
        positive_mask = torch.from_numpy(positive_mask)
    z = F.normalize(image_embeddings, dim=-1)
    m = z.shape[0]
    s = (z @ z.T) / temperature
    eye = torch.eye(m, dtype=torch.bool)
    positives = positive_mask.to(torch.bool) & ~eye
    # log softmax over all non-self candidates per anchor
    logits = s.masked_fill(eye, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    anchored = []
    for i in range(m):
        idx = positives[i].nonzero(as_tuple=True)[0]
        if idx.numel() == 0:
            continue
        anchored.append(-log_prob[i, idx].mean())
    if not anchored:
        raise ValueError("text_simclr_loss: no positive pairs above the threshold")
    return torch.stack(anchored).mean()


def autoencoder_loss(image: torch.Tensor, reconstruction: torch.Tensor) -> torch.Tensor:
    if image.shape != reconstruction.shape:
        raise ValueError(
            f"shape mismatch: image {tuple(image.shape)} vs "
            f"reconstruction {tuple(reconstruction.shape)}"
        )
    return F.mse_loss(reconstruction, image)


@dataclass
class PCABasis:
    components: np.ndarray  # [k, D], rows ordered by descending eigenvalue
    mean: np.ndarray  # [D]
    eigenvalues: np.ndarray  # [k]

    def project(self, images: np.ndarray) -> np.ndarray:
        x = images.reshape(images.shape[0], -1).astype(np.float64)
        return (x - self.mean) @ self.components.T

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        return self.project(images) @ self.components + self.mean


def pca_fit(images: np.ndarray, k: int = 10) -> PCABasis:
    """Principal components of flattened images via covariance
    eigendecomposition (dual Gram form when D > N), descending eigenvalue."""
    x = images.reshape(images.shape[0], -1).astype(np.float64)
    n, d = x.shape
    if k > n:
        raise ValueError(f"k={k} exceeds sample count {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    denom = max(n - 1, 1)
    if d <= n:
        cov = xc.T @ xc / denom
        eigenvalues, eigenvectors = np.linalg.eigh(cov)
        order = np.argsort(eigenvalues)[::-1]
        eigenvalues = eigenvalues[order]
        top = eigenvectors[:, order[:k]].T
    else:
        # Dual (Gram) form of the same eigenproblem; identical spectrum and
        # components, tractable when D greatly exceeds N.
        gram = xc @ xc.T / denom
        eigenvalues, eigenvectors = np.linalg.eigh(gram)
        order = np.argsort(eigenvalues)[::-1]
        eigenvalues = eigenvalues[order]
        top = (xc.T @ eigenvectors[:, order[:k]]).T
        norms = np.linalg.norm(top, axis=1, keepdims=True)
        top = top / np.where(norms > 0, norms, 1.0)
    tol = max(eigenvalues.max(), 0.0) * 1e-10 + 1e-12
    rank = int((eigenvalues > tol).sum())
    if k > rank:
        raise ValueError(f"k={k} exceeds the data rank {rank}")
    return PCABasis(components=top, mean=mean, eigenvalues=eigenvalues[:k])
