"""Retrieval evaluation (CMC and mAP) and pretext-quality probes."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import DatasetSpec, LabeledImage, render_indexed
from .encoder import EncoderParams, encode_batch, forward_features
from .patches import ImageTensor, permute_stripes, sample_permutation
from .sinkhorn import gumbel_sinkhorn_stack, hard_assignment, standardize_logits
from .tensor import ShapeError, Tensor


@dataclass
class RetrievalResult:
    """CMC curve, mAP, and per-query APs, averaged over gallery draws."""

    cmc: np.ndarray
    map: float
    per_query_ap: np.ndarray
    splits: int

    def rank(self, k: int) -> float:
        idx = min(k, len(self.cmc)) - 1
        return float(self.cmc[idx])

    def to_json(self) -> dict:
        return {
            "rank1": self.rank(1),
            "rank5": self.rank(5),
            "rank10": self.rank(10),
            "mAP": self.map,
            "splits": self.splits,
        }


def rank_gallery(query_emb: np.ndarray, gallery_embs: np.ndarray) -> np.ndarray:
    """Gallery indices by ascending Euclidean distance on L2-normalized
    features; equidistant items keep gallery order (lower index first)."""
    query_emb = np.asarray(query_emb, dtype=np.float64)
    gallery_embs = np.asarray(gallery_embs, dtype=np.float64)
    if query_emb.ndim != 1 or gallery_embs.ndim != 2 or gallery_embs.shape[1] != query_emb.shape[0]:
        raise ShapeError(
            f"dimension mismatch: query {query_emb.shape} vs gallery {gallery_embs.shape}"
        )
    q = query_emb / max(np.linalg.norm(query_emb), 1e-12)
    g = gallery_embs / np.maximum(np.linalg.norm(gallery_embs, axis=1, keepdims=True), 1e-12)
    dists = np.linalg.norm(g - q[None, :], axis=1)
    return np.argsort(dists, kind="stable")


def _cmc_ap_single(order_labels: np.ndarray, query_label) -> tuple[np.ndarray, float]:
    relevant = order_labels == query_label
    hits = np.cumsum(relevant) > 0
    ranks = np.nonzero(relevant)[0] + 1
    ap = float(np.mean(np.arange(1, len(ranks) + 1) / ranks))
    return hits.astype(np.float64), ap


def evaluate(
    query_embs: np.ndarray,
    query_labels,
    gallery_embs: np.ndarray,
    gallery_labels,
    num_splits: int = 10,
    seed: int = 0,
    threads: int = 1,
) -> RetrievalResult:
    """Single-shot retrieval averaged over random gallery draws.

    Each split samples one gallery image per identity; CMC@k is the
    fraction of queries whose first relevant item ranks <= k and AP is the
    mean over relevant positions j of j / rank_j.
    """
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    missing = set(query_labels.tolist()) - set(gallery_labels.tolist())
    if missing:
        raise ValueError(f"query labels absent from gallery: {sorted(missing)}")

    uniq = np.unique(gallery_labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    draws = []
    for _ in range(num_splits):
        chosen = [rng.choice(np.nonzero(gallery_labels == ident)[0]) for ident in uniq]
        draws.append(np.asarray(chosen))

    def run_split(chosen: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        sub_embs = gallery_embs[chosen]
        sub_labels = gallery_labels[chosen]
        cmc_acc = np.zeros(len(chosen))
        aps = np.zeros(len(query_labels))
        for qi in range(len(query_labels)):
            order = rank_gallery(query_embs[qi], sub_embs)
            hits, ap = _cmc_ap_single(sub_labels[order], query_labels[qi])
            cmc_acc += hits
            aps[qi] = ap
        return cmc_acc / len(query_labels), aps

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_split, draws))
    else:
        results = [run_split(d) for d in draws]

    cmc = np.mean([r[0] for r in results], axis=0)
    per_query = np.mean([r[1] for r in results], axis=0)
    return RetrievalResult(
        cmc=cmc, map=float(per_query.mean()), per_query_ap=per_query, splits=num_splits
    )


# -- encoder-backed helpers ----------------------------------------------------


def embed_images(params: EncoderParams, images: list[ImageTensor], batch: int = 64) -> np.ndarray:
    """Global descriptors for a list of images, computed without a graph."""
    feats = []
    with T.no_grad():
        for lo in range(0, len(images), batch):
            chunk = np.stack([img.data for img in images[lo : lo + batch]])
            feats.append(forward_features(Tensor(chunk), params).data)
    return np.concatenate(feats, axis=0)


def evaluate_retrieval(
    params: EncoderParams,
    query: list[LabeledImage],
    gallery: list[LabeledImage],
    num_splits: int = 10,
    seed: int = 0,
    threads: int = 1,
) -> RetrievalResult:
    q_embs = embed_images(params, [item.image for item in query])
    g_embs = embed_images(params, [item.image for item in gallery])
    return evaluate(
        q_embs,
        [item.identity for item in query],
        g_embs,
        [item.identity for item in gallery],
        num_splits=num_splits,
        seed=seed,
        threads=threads,
    )


def permutation_accuracy(
    params: EncoderParams,
    images: list[ImageTensor],
    tau: float,
    sinkhorn_iters: int,
    rng: np.random.Generator,
    batch: int = 64,
    logit_scale: float = 0.0,
) -> float:
    """Fraction of shuffled images whose noise-free relaxed assignment
    hard-decodes to the permutation that produced them."""
    n = params.config.n_stripes
    correct = 0
    with T.no_grad():
        for lo in range(0, len(images), batch):
            chunk = images[lo : lo + batch]
            recs = [sample_permutation(n, rng) for _ in chunk]
            shuffled = np.stack(
                [permute_stripes(img.data, rec.shuffled) for img, rec in zip(chunk, recs)]
            )
            affinity = encode_batch(shuffled, params).affinity
            if logit_scale > 0:
                affinity = standardize_logits(affinity, logit_scale)
            stack = gumbel_sinkhorn_stack(affinity, tau, sinkhorn_iters, 1, zero_noise=True)
            for i, rec in enumerate(recs):
                decoded = hard_assignment(stack.data[0, i])
                correct += decoded.mapping == rec.permutation.mapping
    return correct / max(len(images), 1)


def patch_retrieval_accuracy(
    params: EncoderParams,
    spec: DatasetSpec,
    identity_ids: list[int],
    pairs_per_identity: int = 2,
) -> float:
    """Cross-modality stripe matching on paired renderings.

    For each identity, patch k of one modality queries the counterpart
    rendering's patches by cosine; a hit means argmax lands on stripe k.
    Both directions count.
    """
    n = spec.n_stripes
    hits = 0
    total = 0
    with T.no_grad():
        for ident in identity_ids:
            for k in range(min(pairs_per_identity, spec.images_per_identity_per_modality)):
                img_a = render_indexed(spec, ident, "A", k)
                img_b = render_indexed(spec, ident, "B", k)
                out = encode_batch(np.stack([img_a.data, img_b.data]), params)
                emb = out.patch_embeddings.data
                sims = emb[0] @ emb[1].T
                hits += int((sims.argmax(axis=1) == np.arange(n)).sum())
                hits += int((sims.argmax(axis=0) == np.arange(n)).sum())
                total += 2 * n
    return hits / max(total, 1)
