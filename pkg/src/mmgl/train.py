"""Optimization and the pre-training / fine-tuning loops.

One logical thread owns the parameters; batches are prepared inline from
pre-rendered pools, every random draw flows from a single seeded generator
in a fixed order, and metric emission is append-only. Fixed seed therefore
means identical metric streams and final checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, serialize_config
from .data import MODALITIES, LabeledImage
from .encoder import (
    EncoderConfig,
    EncoderParams,
    add_classifier,
    classify,
    encode_batch,
    forward_features,
    init_params,
)
from .objectives import id_ce_loss, mmgl_loss_batched, triplet_loss
from .patches import ImageTensor, permute_stripes, sample_permutation
from .sinkhorn import gumbel_sinkhorn_stack, standardize_logits
from .pcc import build_patch_batch
from .tensor import Tensor


class DivergenceError(FloatingPointError):
    """Training hit NaN or a runaway loss."""


class ArchitectureMismatchError(CheckpointError):
    """Checkpoint tensors do not fit the configured architecture."""


def encoder_config(cfg: Config) -> EncoderConfig:
    return EncoderConfig(
        image_shape=(cfg.data.channels, cfg.data.image_height, cfg.data.image_width),
        n_stripes=cfg.train.n_stripes,
    )


# -- optimizer --------------------------------------------------------------


def sgd_step(
    params: dict[str, Tensor],
    state: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """Classical momentum SGD with coupled weight decay, in place.

    Gradients are read from each tensor's grad buffer; parameters without a
    gradient this step are left untouched. A NaN gradient aborts with the
    offending parameter's name.
    """
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise DivergenceError(f"NaN/Inf gradient for parameter {name!r}")
        g = g + weight_decay * p.data
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + g
        state[name] = v
        p.data -= lr * v


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Backward through a sharply saturated Sinkhorn occasionally spikes (the
    column-sum denominators get tiny); clipping keeps momentum sane.
    Returns the pre-clip norm.
    """
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def lr_at(epoch: int, cfg) -> float:
    """Linear warm-up to lr0, then cosine decay without restarts.

    ``cfg`` needs lr0, warmup_epochs, and epochs attributes.
    """
    if epoch < 0 or epoch >= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr0 * (epoch + 1) / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    t = (epoch - cfg.warmup_epochs) / span if span > 0 else 1.0
    return 0.5 * cfg.lr0 * (1.0 + float(np.cos(np.pi * t)))


@dataclass(frozen=True)
class _ScheduleView:
    lr0: float
    warmup_epochs: int
    epochs: int


# -- augmentation ------------------------------------------------------------


def _crop_flip(data: np.ndarray, pad: int, dy: int, dx: int, flip: bool) -> np.ndarray:
    c, h, w = data.shape
    if pad > 0:
        canvas = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=data.dtype)
        canvas[:, pad : pad + h, pad : pad + w] = data
        data = canvas[:, dy : dy + h, dx : dx + w]
    if flip:
        data = data[:, :, ::-1]
    return np.ascontiguousarray(data)


def augment_pair(
    img_a: np.ndarray, img_b: np.ndarray, rng: np.random.Generator, pad: int, hflip_prob: float
) -> tuple[np.ndarray, np.ndarray]:
    """Random crop with zero padding plus horizontal flip, with the SAME
    geometry applied to both images of a cross-modality pair."""
    dy = int(rng.integers(0, 2 * pad + 1)) if pad > 0 else 0
    dx = int(rng.integers(0, 2 * pad + 1)) if pad > 0 else 0
    flip = bool(rng.random() < hflip_prob)
    return (
        _crop_flip(img_a, pad, dy, dx, flip),
        _crop_flip(img_b, pad, dy, dx, flip),
    )


def augment_single(img: np.ndarray, rng: np.random.Generator, pad: int, hflip_prob: float) -> np.ndarray:
    dy = int(rng.integers(0, 2 * pad + 1)) if pad > 0 else 0
    dx = int(rng.integers(0, 2 * pad + 1)) if pad > 0 else 0
    flip = bool(rng.random() < hflip_prob)
    return _crop_flip(img, pad, dy, dx, flip)


# -- checkpoint plumbing -------------------------------------------------------


def params_to_checkpoint(
    params: EncoderParams,
    opt_state: dict[str, np.ndarray],
    epoch: int,
    rng: np.random.Generator | None,
    cfg: Config,
) -> Checkpoint:
    return Checkpoint(
        params={name: t.data.copy() for name, t in params.items()},
        opt_state={name: v.copy() for name, v in opt_state.items()},
        epoch=epoch,
        rng_state=rng.bit_generator.state if rng is not None else None,
        config_text=serialize_config(cfg),
    )


def _restore_params(params: EncoderParams, stored: dict[str, np.ndarray], subset=None) -> None:
    names = list(params.tensors) if subset is None else [n for n in params.tensors if subset(n)]
    mismatches = []
    for name in names:
        want = params[name].data.shape
        have = stored.get(name)
        if have is None:
            mismatches.append(f"{name}: missing (want shape {tuple(want)})")
        elif have.shape != want:
            mismatches.append(f"{name}: shape {tuple(have.shape)} vs configured {tuple(want)}")
    if mismatches:
        raise ArchitectureMismatchError(
            "checkpoint does not match the configured architecture:\n  " + "\n  ".join(mismatches)
        )
    for name in names:
        params[name].data[...] = stored[name]


# -- pre-training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    params: EncoderParams
    opt_state: dict[str, np.ndarray]
    metrics: list[dict] = field(default_factory=list)
    checkpoint: Checkpoint | None = None
    checkpoint_path: Path | None = None
    steps_run: int = 0


class _MetricsWriter:
    def __init__(self, out_dir: Path | None, name: str = "metrics.jsonl"):
        self.records: list[dict] = []
        self._fh = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            self._fh = open(out_dir / name, "w", encoding="utf-8")

    def emit(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _guard_divergence(total: float) -> None:
    if not np.isfinite(total) or total > 1e3:
        raise DivergenceError(f"total loss diverged: {total}")


def pretrain(
    cfg: Config,
    pool: dict[str, list[ImageTensor]],
    out_dir=None,
    resume_from: Checkpoint | str | Path | None = None,
    step_hook=None,
) -> TrainResult:
    """Self-supervised pre-training on unlabeled cross-modality pools.

    Per step: compose random pairs, augment each pair with shared geometry,
    shuffle with one shared permutation per pair, encode both shuffled
    images, relax the affinity logits with Gumbel-Sinkhorn samples, and
    minimize reconstruction error plus the weighted cycle-contrastive term.

    ``step_hook(step, record, params)`` may return True to stop early.
    """
    tr = cfg.train
    T.set_finite_checks(tr.finite_checks)
    out_dir = Path(out_dir) if out_dir is not None else None

    pool_a, pool_b = pool[MODALITIES[0]], pool[MODALITIES[1]]
    if not pool_a or not pool_b:
        raise ValueError("both modality pools must be non-empty")
    batch = tr.batch_per_modality
    if len(pool_a) < batch or len(pool_b) < batch:
        raise ValueError(f"pool smaller than batch size {batch}")

    init_rng = np.random.default_rng(np.random.SeedSequence([tr.seed, 0]))
    train_rng = np.random.default_rng(np.random.SeedSequence([tr.seed, 1]))
    params = init_params(encoder_config(cfg), init_rng)
    opt_state: dict[str, np.ndarray] = {}
    start_epoch = 0

    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        _restore_params(params, ckpt.params)
        opt_state = {name: arr.copy() for name, arr in ckpt.opt_state.items()}
        if ckpt.rng_state is not None:
            train_rng.bit_generator.state = ckpt.rng_state
        start_epoch = ckpt.epoch

    n = tr.n_stripes
    steps_per_epoch = max(1, min(len(pool_a), len(pool_b)) // batch)
    writer = _MetricsWriter(out_dir)
    global_step = start_epoch * steps_per_epoch
    stop = False
    try:
        for epoch in range(start_epoch, tr.epochs):
            lr = lr_at(epoch, tr)
            for _ in range(steps_per_epoch):
                if tr.max_steps and global_step >= tr.max_steps:
                    stop = True
                    break
                global_step += 1

                idx_a = train_rng.choice(len(pool_a), size=batch, replace=False)
                idx_b = train_rng.choice(len(pool_b), size=batch, replace=False)
                imgs = np.empty(
                    (2 * batch, cfg.data.channels, cfg.data.image_height, cfg.data.image_width),
                    dtype=np.float32,
                )
                recs = []
                for i in range(batch):
                    a, b = augment_pair(
                        pool_a[idx_a[i]].data, pool_b[idx_b[i]].data,
                        train_rng, tr.crop_padding, tr.hflip_prob,
                    )
                    rec = sample_permutation(n, train_rng)
                    recs.append(rec)
                    imgs[i] = permute_stripes(a, rec.shuffled)
                    imgs[batch + i] = permute_stripes(b, rec.shuffled)
                targets = np.stack([r.matrix() for r in recs + recs])

                out = encode_batch(imgs, params)
                # The relaxation runs in float64: exp at tau=0.07 needs the
                # headroom once the affinity logits sharpen.
                affinity = standardize_logits(T.cast(out.affinity, np.float64), tr.logit_scale)
                s_stack = gumbel_sinkhorn_stack(
                    affinity, tr.sinkhorn_tau, tr.sinkhorn_iters, tr.gumbel_samples, train_rng,
                )
                patch_batch = build_patch_batch(
                    {
                        MODALITIES[0]: out.patch_embeddings[:batch],
                        MODALITIES[1]: out.patch_embeddings[batch:],
                    }
                )
                bd = mmgl_loss_batched(s_stack, targets, patch_batch, tr.lambda_pcc, tr.tau)
                total = bd.total.item()
                _guard_divergence(total)

                params.zero_grad()
                bd.total.backward()
                clip_gradients(params.tensors, tr.grad_clip)
                sgd_step(params.tensors, opt_state, lr, tr.momentum, tr.weight_decay)

                record = {
                    "step": global_step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss_p": bd.loss_p.item(),
                    "loss_pcc": bd.loss_pcc.item(),
                    "loss_total": total,
                }
                if global_step == 1 or global_step % tr.log_interval == 0:
                    writer.emit(record)
                if step_hook is not None and step_hook(global_step, record, params):
                    stop = True
                    break
            if stop:
                break
            if out_dir is not None and (epoch + 1) % tr.checkpoint_interval == 0 and epoch + 1 < tr.epochs:
                ck = params_to_checkpoint(params, opt_state, epoch + 1, train_rng, cfg)
                save_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1:04d}.mmgl", ck)
    finally:
        writer.close()

    final = params_to_checkpoint(params, opt_state, tr.epochs, train_rng, cfg)
    path = None
    if out_dir is not None:
        path = out_dir / "checkpoint_final.mmgl"
        save_checkpoint(path, final)
    return TrainResult(
        params=params,
        opt_state=opt_state,
        metrics=writer.records,
        checkpoint=final,
        checkpoint_path=path,
        steps_run=global_step,
    )


# -- fine-tuning loop -------------------------------------------------------------


def finetune(
    cfg: Config,
    labeled: list[LabeledImage],
    init: Checkpoint | str | Path | None = None,
    out_dir=None,
) -> TrainResult:
    """Supervised fine-tuning: stem initialized from a pre-training
    checkpoint (projection and affinity heads dropped) or randomly, a fresh
    classifier head on top, identity cross-entropy plus batch-hard triplet
    on unshuffled images. The global descriptor is the retrieval embedding.
    """
    tr = cfg.train
    T.set_finite_checks(tr.finite_checks)
    out_dir = Path(out_dir) if out_dir is not None else None

    identities = sorted({item.identity for item in labeled})
    class_of = {ident: i for i, ident in enumerate(identities)}
    by_identity: dict[int, list[int]] = {ident: [] for ident in identities}
    for i, item in enumerate(labeled):
        by_identity[item.identity].append(i)
    if len(identities) < 2:
        raise ValueError("fine-tuning needs at least 2 identities")
    if min(len(v) for v in by_identity.values()) < tr.k_instances:
        raise ValueError(f"every identity needs >= k_instances={tr.k_instances} images")
    p_ids = min(tr.p_identities, len(identities))

    init_rng = np.random.default_rng(np.random.SeedSequence([tr.seed, 2]))
    train_rng = np.random.default_rng(np.random.SeedSequence([tr.seed, 3]))
    params = init_params(encoder_config(cfg), init_rng)
    for head in ("affinity.weight", "affinity.bias", "patch.weight", "patch.bias"):
        del params.tensors[head]

    if init is not None:
        ckpt = init if isinstance(init, Checkpoint) else load_checkpoint(init)
        _restore_params(params, ckpt.params, subset=lambda n: n.startswith("stem."))
    add_classifier(params, len(identities), init_rng)

    sched = _ScheduleView(lr0=tr.finetune_lr0, warmup_epochs=tr.finetune_warmup_epochs, epochs=tr.finetune_epochs)
    opt_state: dict[str, np.ndarray] = {}
    writer = _MetricsWriter(out_dir, name="finetune_metrics.jsonl")
    batch_size = p_ids * tr.k_instances
    steps_per_epoch = max(1, len(labeled) // batch_size)
    global_step = 0
    try:
        for epoch in range(tr.finetune_epochs):
            lr = lr_at(epoch, sched)
            for _ in range(steps_per_epoch):
                global_step += 1
                chosen = train_rng.choice(len(identities), size=p_ids, replace=False)
                rows, labels = [], []
                for ci in chosen:
                    ident = identities[ci]
                    pick = train_rng.choice(len(by_identity[ident]), size=tr.k_instances, replace=False)
                    rows.extend(by_identity[ident][k] for k in pick)
                    labels.extend([class_of[ident]] * tr.k_instances)
                imgs = np.stack(
                    [
                        augment_single(labeled[r].image.data, train_rng, tr.crop_padding, tr.hflip_prob)
                        for r in rows
                    ]
                )
                feats = forward_features(Tensor(imgs), params)
                logits = classify(feats, params)
                loss_id = id_ce_loss(logits, labels)
                # Triplet distances live in the retrieval geometry
                # (L2-normalized descriptors); raw-scale distances at init
                # dwarf the margin and destabilize the first steps.
                loss_tri = triplet_loss(T.l2_normalize(feats, axis=1), labels, tr.triplet_margin)
                loss = loss_id + loss_tri
                _guard_divergence(loss.item())

                params.zero_grad()
                loss.backward()
                clip_gradients(params.tensors, tr.grad_clip)
                sgd_step(params.tensors, opt_state, lr, tr.momentum, tr.weight_decay)

                if global_step == 1 or global_step % tr.log_interval == 0:
                    writer.emit(
                        {
                            "step": global_step,
                            "epoch": epoch,
                            "lr": lr,
                            "loss_id": loss_id.item(),
                            "loss_tri": loss_tri.item(),
                        }
                    )
    finally:
        writer.close()

    final = params_to_checkpoint(params, opt_state, tr.finetune_epochs, train_rng, cfg)
    path = None
    if out_dir is not None:
        path = out_dir / "finetune_final.mmgl"
        save_checkpoint(path, final)
    return TrainResult(
        params=params,
        opt_state=opt_state,
        metrics=writer.records,
        checkpoint=final,
        checkpoint_path=path,
        steps_run=global_step,
    )
