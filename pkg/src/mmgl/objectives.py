"""Training objectives: permutation reconstruction, the combined
pre-training loss, and the fine-tuning identity/triplet losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pcc import PatchEmbeddingBatch, pcc_loss
from .patches import PermutationRecord
from .sinkhorn import SoftAssignment
from .tensor import ShapeError, Tensor


@dataclass
class LossBreakdown:
    """Components of the combined objective: total = loss_p + lam * loss_pcc."""

    loss_p: Tensor
    loss_pcc: Tensor
    total: Tensor
    lam: float


def _reconstruction_error(s: Tensor, target: np.ndarray) -> Tensor:
    """|| I - S^T P ||_F^2 for one soft assignment and its ground truth.

    The transpose stands in for the inverse, exact when S is a true
    permutation matrix.
    """
    n = s.shape[-1]
    p = Tensor(target, dtype=s.dtype)
    recovered = s.transpose((1, 0)) @ p
    diff = Tensor(np.eye(n), dtype=s.dtype) - recovered
    return (diff * diff).sum()


def permutation_loss(samples: list[SoftAssignment], rec: PermutationRecord) -> Tensor:
    """Mean reconstruction error of the relaxed assignments for one image.

    Ranking vectors are compared in one-hot matrix form: with the original
    order fixed to the identity, the error reduces to ||I - S^T P||_F^2
    averaged over the Gumbel samples.
    """
    if not samples:
        raise ValueError("need at least one soft assignment sample")
    n = rec.n
    target = rec.matrix(dtype=np.float64)
    terms = []
    for sa in samples:
        s = sa.matrix if isinstance(sa, SoftAssignment) else sa
        if s.shape != (n, n):
            raise ShapeError(f"assignment shape {s.shape} does not match record N={n}")
        terms.append(_reconstruction_error(s, target.astype(s.dtype)))
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc / float(len(terms))


def permutation_loss_stack(s_stack: Tensor, targets: np.ndarray) -> Tensor:
    """Batched twin of :func:`permutation_loss`.

    ``s_stack`` is [S, M, N, N] (S Gumbel samples for each of M images) and
    ``targets`` [M, N, N] holds the ground-truth permutation matrices. The
    result is the mean over samples and images of ||I - S^T P||_F^2.
    """
    if s_stack.ndim != 4:
        raise ShapeError(f"expected [S, M, N, N], got {s_stack.shape}")
    ns, m, n, _ = s_stack.shape
    if targets.shape != (m, n, n):
        raise ShapeError(f"targets shape {targets.shape} does not match stack {s_stack.shape}")
    p = Tensor(np.broadcast_to(targets, (ns, m, n, n)).copy(), dtype=s_stack.dtype)
    recovered = s_stack.transpose((0, 1, 3, 2)) @ p
    eye = Tensor(np.broadcast_to(np.eye(n), (ns, m, n, n)).copy(), dtype=s_stack.dtype)
    diff = eye - recovered
    return (diff * diff).sum(axis=(2, 3)).mean()


def mmgl_loss(
    samples_per_image: list[list[SoftAssignment]],
    recs: list[PermutationRecord],
    patch_batch: PatchEmbeddingBatch,
    lam: float = 0.2,
    tau: float = 0.07,
) -> LossBreakdown:
    """Combined objective over a batch: mean permutation loss over both
    modalities' images plus ``lam`` times the cycle-contrastive loss.

    With ``lam == 0`` the contrastive term is still evaluated for reporting
    but on detached embeddings, so no gradient flows through it.
    """
    if len(samples_per_image) != len(recs):
        raise ValueError("need one record per image")
    per_image = [permutation_loss(s, r) for s, r in zip(samples_per_image, recs)]
    acc = per_image[0]
    for t in per_image[1:]:
        acc = acc + t
    loss_p = acc / float(len(per_image))
    if lam == 0.0:
        detached = PatchEmbeddingBatch(
            embeddings=patch_batch.embeddings.detach(),
            modality=patch_batch.modality,
            image_index=patch_batch.image_index,
            patch_index=patch_batch.patch_index,
        )
        loss_pcc = pcc_loss(detached, tau)
        total = loss_p
    else:
        loss_pcc = pcc_loss(patch_batch, tau)
        total = loss_p + lam * T.cast(loss_pcc, loss_p.dtype)
    return LossBreakdown(loss_p=loss_p, loss_pcc=loss_pcc, total=total, lam=lam)


def mmgl_loss_batched(
    s_stack: Tensor,
    targets: np.ndarray,
    patch_batch: PatchEmbeddingBatch,
    lam: float = 0.2,
    tau: float = 0.07,
) -> LossBreakdown:
    """Batched twin of :func:`mmgl_loss` over stacked Gumbel samples.

    Semantics match exactly (including the detached contrastive term when
    ``lam == 0``); only the graph layout differs.
    """
    loss_p = permutation_loss_stack(s_stack, targets)
    if lam == 0.0:
        detached = PatchEmbeddingBatch(
            embeddings=patch_batch.embeddings.detach(),
            modality=patch_batch.modality,
            image_index=patch_batch.image_index,
            patch_index=patch_batch.patch_index,
        )
        loss_pcc = pcc_loss(detached, tau)
        total = loss_p
    else:
        loss_pcc = pcc_loss(patch_batch, tau)
        total = loss_p + lam * T.cast(loss_pcc, loss_p.dtype)
    return LossBreakdown(loss_p=loss_p, loss_pcc=loss_pcc, total=total, lam=lam)


def cross_entropy_terms(logits: Tensor, labels) -> Tensor:
    """Per-row negative log-likelihood of the given class labels."""
    labels = np.asarray(labels)
    m, c = logits.shape
    if labels.shape != (m,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= c:
        raise ValueError(f"labels out of range [0, {c})")
    onehot = np.zeros((m, c))
    onehot[np.arange(m), labels] = 1.0
    logp = T.log_softmax(logits, axis=1)
    return -(logp * Tensor(onehot, dtype=logits.dtype)).sum(axis=1)


def id_ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy for identity classification."""
    return cross_entropy_terms(logits, labels).mean()


def triplet_loss(embeddings: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss with Euclidean distances.

    Every anchor contributes max(0, hardest_positive - hardest_negative +
    margin), where the hardest positive is the farthest same-label sample
    (anchor excluded) and the hardest negative the closest other-label one.
    Requires >= 2 identities and >= 2 samples per identity in the batch.
    """
    labels = np.asarray(labels)
    m = embeddings.shape[0]
    if labels.shape != (m,):
        raise ShapeError(f"labels shape {labels.shape} does not match embeddings {embeddings.shape}")
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2 or counts.min() < 2:
        raise ValueError(
            "batch-hard mining needs >= 2 identities and >= 2 samples per identity "
            f"(got identities {uniq.tolist()} with counts {counts.tolist()})"
        )
    sq_norms = (embeddings * embeddings).sum(axis=1, keepdims=True)
    sq = sq_norms + sq_norms.transpose((1, 0)) - 2.0 * (embeddings @ embeddings.transpose((1, 0)))
    # Clamp at a small floor with zero gradient below it; sqrt'(0) is infinite.
    floor = 1e-12
    dist = T.sqrt(T.relu(sq - floor) + floor)

    same = labels[:, None] == labels[None, :]
    d = dist.data
    pos_mask = same & ~np.eye(m, dtype=bool)
    neg_mask = ~same
    hardest_pos = np.where(pos_mask, d, -np.inf).argmax(axis=1)
    hardest_neg = np.where(neg_mask, d, np.inf).argmin(axis=1)

    rows = np.arange(m) * m
    flat = T.reshape(dist, (m * m, 1))
    d_ap = T.take_rows(flat, rows + hardest_pos)
    d_an = T.take_rows(flat, rows + hardest_neg)
    hinge = T.relu(d_ap - d_an + margin)
    return hinge.mean()
