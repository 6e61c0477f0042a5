"""Stripe splitting and modality-shared shuffling of image pairs.

An image is cut into N equal horizontal stripes. A shuffled order is a
random permutation placing original stripe ``shuffled[i]`` at position i;
the same order is applied to both images of a cross-modality pair so the
pair lands in a common permutation subspace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sinkhorn import HardPermutation


class PairShapeError(ValueError):
    """The two images of a pair disagree in shape."""


@dataclass
class ImageTensor:
    """A channels x H x W image in [0, 1] tagged with its modality ('A' or 'B')."""

    data: np.ndarray
    modality: str

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class PermutationRecord:
    """Original order, shuffled order, and the ground-truth permutation matrix.

    ``original`` is always the identity ranking; ``shuffled`` carries all the
    randomness. The matrix form has a 1 at (i, shuffled[i]), so applying its
    transpose to the shuffled stripe sequence restores the original order.
    """

    original: np.ndarray
    shuffled: np.ndarray
    permutation: HardPermutation = field(init=False)

    def __post_init__(self):
        n = len(self.original)
        if not np.array_equal(self.original, np.arange(n)):
            raise ValueError("original order must be the identity ranking")
        self.permutation = HardPermutation(mapping=tuple(int(i) for i in self.shuffled))

    @property
    def n(self) -> int:
        return len(self.original)

    def matrix(self, dtype=np.float32) -> np.ndarray:
        return self.permutation.matrix(dtype=dtype)

    def one_hot_original(self, dtype=np.float32) -> np.ndarray:
        return np.eye(self.n, dtype=dtype)

    def one_hot_shuffled(self, dtype=np.float32) -> np.ndarray:
        return self.matrix(dtype=dtype)


def sample_permutation(n: int, rng: np.random.Generator) -> PermutationRecord:
    """Uniformly random shuffled order over all n! permutations (Fisher-Yates)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return PermutationRecord(original=np.arange(n), shuffled=rng.permutation(n))


def split_stripes(img: ImageTensor, n: int) -> list[np.ndarray]:
    """Cut into n horizontal stripes, top to bottom, each channels x H/n x W."""
    c, h, w = img.data.shape
    if h % n != 0:
        raise ValueError(f"image height {h} not divisible by stripe count {n}")
    band = h // n
    return [img.data[:, i * band : (i + 1) * band, :] for i in range(n)]


def permute_stripes(data: np.ndarray, order) -> np.ndarray:
    """Reorder the horizontal stripes of a [C, H, W] array; position i of the
    result holds original stripe order[i]."""
    order = np.asarray(order)
    c, h, w = data.shape
    n = len(order)
    if h % n != 0:
        raise ValueError(f"image height {h} not divisible by stripe count {n}")
    stripes = data.reshape(c, n, h // n, w)
    return np.ascontiguousarray(stripes[:, order].reshape(c, h, w))


def shuffle_pair(
    img_a: ImageTensor, img_b: ImageTensor, rec: PermutationRecord
) -> tuple[ImageTensor, ImageTensor]:
    """Apply the SAME shuffled order to both modalities of a pair.

    Position i of each output holds original stripe ``rec.shuffled[i]``.
    """
    if img_a.data.shape != img_b.data.shape:
        raise PairShapeError(
            f"pair shape mismatch: {img_a.data.shape} vs {img_b.data.shape}"
        )
    h = img_a.data.shape[1]
    if h % rec.n != 0:
        raise ValueError(f"image height {h} not divisible by stripe count {rec.n}")
    return (
        ImageTensor(permute_stripes(img_a.data, rec.shuffled), img_a.modality),
        ImageTensor(permute_stripes(img_b.data, rec.shuffled), img_b.modality),
    )


def unshuffle(img: ImageTensor, rec: PermutationRecord) -> ImageTensor:
    """Invert :func:`shuffle_pair` via the transpose of the permutation matrix."""
    inverse = np.argsort(rec.shuffled)
    return ImageTensor(permute_stripes(img.data, inverse), img.modality)
