"""Small convolutional encoder with affinity and per-stripe projection heads.

The stem is a stack of stride-2 conv blocks (ReLU, average pooling heads).
Three read-outs share it:

- a global descriptor: the feature map averaged over width and flattened
  over (channel, row), which keeps vertical structure available to the
  permutation read-out and doubles as the retrieval embedding;
- the affinity head, a linear map from that descriptor to an N x N logit
  matrix scoring which original stripe sits at which position;
- the patch head, which pools the map into N horizontal bands and projects
  each through a shared linear layer to a unit-norm embedding.

The same parameters process both modalities (shared-weight encoder).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DEFAULT_BLOCKS = ((16, 3, 2, 1), (32, 3, 2, 1), (64, 3, 2, 1), (128, 3, 2, 1))


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters.

    ``blocks`` is a tuple of (out_channels, kernel, stride, padding). The
    stem must downsample so the final map height is a positive multiple of
    ``n_stripes``.
    """

    image_shape: tuple[int, int, int] = (3, 96, 48)
    n_stripes: int = 6
    blocks: tuple[tuple[int, int, int, int], ...] = DEFAULT_BLOCKS
    patch_dim: int = 256

    def feature_shape(self) -> tuple[int, int, int]:
        c, h, w = self.image_shape
        for out_ch, k, s, p in self.blocks:
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
            c = out_ch
        return c, h, w

    @property
    def global_dim(self) -> int:
        c, h, _ = self.feature_shape()
        return c * h

    def validate(self) -> None:
        c, h, w = self.feature_shape()
        if h <= 0 or w <= 0:
            raise ShapeError(f"stem downsamples {self.image_shape} to empty map {(c, h, w)}")
        if h % self.n_stripes != 0:
            raise ShapeError(
                f"feature map height {h} not divisible by {self.n_stripes} stripes"
            )


@dataclass
class EncoderParams:
    """Named parameter tensors plus the architecture they instantiate."""

    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    @property
    def num_classes(self) -> int | None:
        w = self.tensors.get("classifier.weight")
        return None if w is None else w.shape[1]


@dataclass
class EncoderOutput:
    global_feature: Tensor
    affinity: Tensor
    patch_embeddings: Tensor


RELU_GAIN_SQ = 6.0  # He bound^2 * fan_in for uniform init under ReLU
LINEAR_GAIN_SQ = 1.0


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape, dtype, gain_sq: float) -> Tensor:
    bound = np.sqrt(gain_sq / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def init_params(
    config: EncoderConfig, rng: np.random.Generator, dtype=np.float32
) -> EncoderParams:
    """Fan-in-scaled uniform weights, zero biases; deterministic under a seed.

    Conv blocks use the ReLU-preserving bound sqrt(6/fan_in); the linear
    heads use sqrt(1/fan_in).
    """
    config.validate()
    params = EncoderParams(config=config)
    in_ch = config.image_shape[0]
    for i, (out_ch, k, _s, _p) in enumerate(config.blocks):
        fan_in = k * k * in_ch
        params.tensors[f"stem.{i}.weight"] = _uniform_fan_in(
            rng, fan_in, (fan_in, out_ch), dtype, RELU_GAIN_SQ
        )
        params.tensors[f"stem.{i}.bias"] = _zeros(out_ch, dtype)
        in_ch = out_ch
    c_last, h_f, _ = config.feature_shape()
    d = config.global_dim
    n2 = config.n_stripes**2
    params.tensors["affinity.weight"] = _uniform_fan_in(rng, d, (d, n2), dtype, LINEAR_GAIN_SQ)
    params.tensors["affinity.bias"] = _zeros(n2, dtype)
    params.tensors["patch.weight"] = _uniform_fan_in(
        rng, c_last, (c_last, config.patch_dim), dtype, LINEAR_GAIN_SQ
    )
    params.tensors["patch.bias"] = _zeros(config.patch_dim, dtype)
    return params


def add_classifier(
    params: EncoderParams, num_classes: int, rng: np.random.Generator, dtype=np.float32
) -> None:
    d = params.config.global_dim
    params.tensors["classifier.weight"] = _uniform_fan_in(
        rng, d, (d, num_classes), dtype, LINEAR_GAIN_SQ
    )
    params.tensors["classifier.bias"] = _zeros(num_classes, dtype)


def _conv_block(x: Tensor, weight: Tensor, bias: Tensor, kernel: int, stride: int, pad: int) -> Tensor:
    """im2col convolution followed by ReLU; returns [B, C_out, H_o, W_o]."""
    b, c = x.shape[0], x.shape[1]
    patches = T.im2col(x, kernel, stride, pad)
    _b, h_o, w_o, cols = patches.shape
    flat = T.reshape(patches, (b * h_o * w_o, cols))
    out = T.relu(flat @ weight + bias)
    c_out = weight.shape[1]
    return T.transpose(T.reshape(out, (b, h_o, w_o, c_out)), (0, 3, 1, 2))


def stem_forward(images: Tensor, params: EncoderParams) -> Tensor:
    cfg = params.config
    if images.ndim != 4 or images.shape[1:] != cfg.image_shape:
        raise ShapeError(
            f"expected batch of images {cfg.image_shape}, got {tuple(images.shape)}"
        )
    x = images
    for i, (_out, k, s, p) in enumerate(cfg.blocks):
        x = _conv_block(x, params[f"stem.{i}.weight"], params[f"stem.{i}.bias"], k, s, p)
    return x


def global_descriptor(fmap: Tensor) -> Tensor:
    """Average over width, flatten (channel, row) -> [B, D]."""
    b, c, h, _w = fmap.shape
    return T.reshape(fmap.mean(axis=3), (b, c * h))


def forward_features(images: Tensor, params: EncoderParams) -> Tensor:
    """Stem + global descriptor only (the fine-tuning/retrieval path)."""
    return global_descriptor(stem_forward(images, params))


def classify(features: Tensor, params: EncoderParams) -> Tensor:
    if "classifier.weight" not in params.tensors:
        raise KeyError("params carry no classifier head; call add_classifier first")
    return features @ params["classifier.weight"] + params["classifier.bias"]


def encode_batch(images: Tensor | np.ndarray, params: EncoderParams) -> EncoderOutput:
    """Full forward pass for a batch: descriptor, affinity logits, patch embeddings."""
    if not isinstance(images, Tensor):
        images = Tensor(images, dtype=next(iter(params.tensors.values())).dtype)
    cfg = params.config
    n = cfg.n_stripes
    fmap = stem_forward(images, params)
    b, c, h_f, _w_f = fmap.shape

    feats = global_descriptor(fmap)
    affinity = T.reshape(feats @ params["affinity.weight"] + params["affinity.bias"], (b, n, n))

    band = h_f // n
    pooled = [
        T.reshape(fmap[:, :, k * band : (k + 1) * band, :].mean(axis=(2, 3)), (b, 1, c))
        for k in range(n)
    ]
    bands = T.reshape(T.concatenate(pooled, axis=1), (b * n, c))
    proj = bands @ params["patch.weight"] + params["patch.bias"]
    # A band whose features die (all-zero ReLUs) would otherwise produce a
    # zero projection and abort normalization; the anchor keeps such rows
    # well-defined while perturbing live ones by at most ~1e-4.
    anchor = np.zeros(cfg.patch_dim, dtype=proj.data.dtype)
    anchor[0] = 1e-4
    proj = proj + Tensor(anchor, dtype=proj.dtype)
    patches = T.reshape(T.l2_normalize(proj, axis=1, eps=1e-8), (b, n, cfg.patch_dim))
    return EncoderOutput(global_feature=feats, affinity=affinity, patch_embeddings=patches)


def encode(image, params: EncoderParams) -> EncoderOutput:
    """Single-image forward pass; accepts an ImageTensor or a [C, H, W] array."""
    data = image.data if hasattr(image, "modality") else np.asarray(image)
    out = encode_batch(data[None, ...], params)
    return EncoderOutput(
        global_feature=out.global_feature[0],
        affinity=out.affinity[0],
        patch_embeddings=out.patch_embeddings[0],
    )
