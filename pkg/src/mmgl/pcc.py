"""Part-aware cycle-contrastive learning over patch embeddings.

Each patch embedding acts as a query. Its soft nearest neighbor is
retrieved from all counterpart-modality patches in the mini-batch
(forward), then the retrieved vector is matched back against the patches
of the query's own image (backward). The forward/backward pair is treated
as a positive for an InfoNCE-style loss whose negatives are the forward
retrievals of the other queries in the same modality direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class BatchContractError(ValueError):
    """The patch batch violates a precondition of the cycle construction."""


@dataclass
class PatchEmbeddingBatch:
    """Flat table of patch embeddings tagged by modality, image, and stripe.

    Rows must be unit-norm (the encoder's patch head guarantees this) and
    (modality, image_index, patch_index) must be unique per row.
    """

    embeddings: Tensor
    modality: np.ndarray
    image_index: np.ndarray
    patch_index: np.ndarray

    def __post_init__(self):
        self.modality = np.asarray(self.modality)
        self.image_index = np.asarray(self.image_index)
        self.patch_index = np.asarray(self.patch_index)
        r = self.embeddings.shape[0]
        if not (len(self.modality) == len(self.image_index) == len(self.patch_index) == r):
            raise BatchContractError("tag arrays must match the embedding row count")
        norms = np.sqrt((self.embeddings.data**2).sum(axis=1))
        if np.abs(norms - 1.0).max(initial=0.0) > 1e-5:
            raise BatchContractError("embedding rows must be unit-norm within 1e-5")
        keys = list(zip(self.modality.tolist(), self.image_index.tolist(), self.patch_index.tolist()))
        if len(set(keys)) != r:
            raise BatchContractError("(modality, image_index, patch_index) must be unique per row")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def modalities(self) -> list[str]:
        seen = []
        for m in self.modality.tolist():
            if m not in seen:
                seen.append(m)
        return seen


def build_patch_batch(per_modality: dict[str, Tensor]) -> PatchEmbeddingBatch:
    """Assemble a batch from per-modality [B, N, D] embedding tensors.

    Rows are laid out modality block by modality block, image-major within
    a block; image indices are global across modalities of the same pair
    (image i of modality A and image i of modality B are different images).
    """
    blocks, mods, imgs, pats = [], [], [], []
    for tag, emb in per_modality.items():
        b, n, d = emb.shape
        blocks.append(T.reshape(emb, (b * n, d)))
        mods.extend([tag] * (b * n))
        imgs.extend(np.repeat(np.arange(b), n).tolist())
        pats.extend(np.tile(np.arange(n), b).tolist())
    return PatchEmbeddingBatch(
        embeddings=T.concatenate(blocks, axis=0),
        modality=np.array(mods),
        image_index=np.array(imgs),
        patch_index=np.array(pats),
    )


@dataclass
class CyclePair:
    """Forward and backward soft retrievals for one query row.

    Both vectors are convex combinations of unit vectors (norm <= 1).
    """

    q_hat_counter: Tensor
    q_hat_back: Tensor
    row: int


def soft_nn(q: Tensor, candidates: Tensor, tau: float = 0.07) -> Tensor:
    """Similarity-weighted convex combination of the candidate rows.

    Weights are a softmax over cosine(q, candidate)/tau; the combination is
    taken over the rows as given. Differentiable in both arguments.
    """
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise BatchContractError(f"candidate set must be non-empty [K, D], got {candidates.shape}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    qn = T.l2_normalize(T.reshape(q, (1, q.shape[-1])), axis=1)
    cn = T.l2_normalize(candidates, axis=1)
    sims = qn @ cn.transpose((1, 0))
    alpha = T.softmax(sims / tau, axis=1)
    return T.reshape(alpha @ candidates, (q.shape[-1],))


def cycle_retrieve(row: int, batch: PatchEmbeddingBatch, tau: float = 0.07) -> CyclePair:
    """Forward retrieval into the counterpart modality, then backward within
    the query's own image."""
    mod = batch.modality[row]
    counter_idx = np.nonzero(batch.modality != mod)[0]
    if counter_idx.size == 0:
        raise BatchContractError(f"no counterpart modality rows for query modality {mod!r}")
    own_idx = np.nonzero((batch.modality == mod) & (batch.image_index == batch.image_index[row]))[0]

    q = T.take_rows(batch.embeddings, [row]).reshape(batch.embeddings.shape[1])
    counter_set = T.take_rows(batch.embeddings, counter_idx)
    q_hat_counter = soft_nn(q, counter_set, tau)
    own_set = T.take_rows(batch.embeddings, own_idx)
    q_hat_back = soft_nn(q_hat_counter, own_set, tau)
    return CyclePair(q_hat_counter=q_hat_counter, q_hat_back=q_hat_back, row=row)


def _direction_retrievals(
    batch: PatchEmbeddingBatch, mod: str, tau: float
) -> tuple[Tensor, Tensor]:
    """Vectorized forward/backward retrievals for every query of one modality.

    Returns (q_hat_counter [K, D], q_hat_back [K, D]) in query (row) order.
    """
    emb = batch.embeddings
    q_idx = np.nonzero(batch.modality == mod)[0]
    c_idx = np.nonzero(batch.modality != mod)[0]
    queries = T.take_rows(emb, q_idx)
    counters = T.take_rows(emb, c_idx)
    sims = T.l2_normalize(queries, axis=1) @ T.l2_normalize(counters, axis=1).transpose((1, 0))
    alpha = T.softmax(sims / tau, axis=1)
    q_counter = alpha @ counters

    images = batch.image_index[q_idx]
    back_blocks = []
    order = []
    for img in dict.fromkeys(images.tolist()):
        in_dir = np.nonzero(images == img)[0]
        own_rows = q_idx[in_dir]
        own_set = T.take_rows(emb, own_rows)
        qc = T.take_rows(q_counter, in_dir)
        sims_b = T.l2_normalize(qc, axis=1) @ T.l2_normalize(own_set, axis=1).transpose((1, 0))
        beta = T.softmax(sims_b / tau, axis=1)
        back_blocks.append(beta @ own_set)
        order.extend(in_dir.tolist())
    stacked = T.concatenate(back_blocks, axis=0)
    q_back = T.take_rows(stacked, np.argsort(np.asarray(order), kind="stable"))
    return q_counter, q_back


def pcc_loss(batch: PatchEmbeddingBatch, tau: float = 0.07) -> Tensor:
    """Cycle-contrastive loss averaged over every query of both directions.

    For query i (anchor = its backward retrieval), the positive is its own
    forward retrieval and the negatives are the forward retrievals of the
    other queries of the same direction; the positive term appears in the
    denominator (standard InfoNCE form).
    """
    mods = batch.modalities
    if len(mods) != 2:
        raise BatchContractError(f"need exactly two modalities, got {mods}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    per_query_terms = []
    for mod in mods:
        count = int((batch.modality == mod).sum())
        if count < 2:
            raise BatchContractError(
                f"direction {mod!r} has {count} query(s); need >= 2 so negatives exist"
            )
        q_counter, q_back = _direction_retrievals(batch, mod, tau)
        logits = (
            T.l2_normalize(q_back, axis=1)
            @ T.l2_normalize(q_counter, axis=1).transpose((1, 0))
        ) / tau
        logp = T.log_softmax(logits, axis=1)
        eye = Tensor(np.eye(count), dtype=logp.dtype)
        per_query_terms.append(-T.tsum(logp * eye, axis=1))
    return T.concatenate(per_query_terms, axis=0).mean()
