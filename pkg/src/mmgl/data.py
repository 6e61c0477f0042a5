"""Synthetic two-modality identity data plus minimal PGM/PPM ingestion.

Each identity owns per-stripe pattern parameters (frequency, phase, base
intensity). Stripe brightness follows a monotone top-to-bottom gradient
shared by all identities, standing in for body topology: it is what makes
the original stripe order recoverable on identities never seen in
training. Identity-specific frequencies and phases make retrieval
learnable. Modality A applies a channel mix; modality B inverts intensity,
applies a different gain, and collapses channels, so pixel statistics
differ strongly across modalities while stripe structure is shared.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .patches import ImageTensor

MODALITIES = ("A", "B")

# Channel mix applied by modality A (modality B collapses channels).
CHANNEL_MIX_A = (1.0, 0.85, 0.7)

PATTERN_AMPLITUDE = 0.16
BASE_RANGE = (0.22, 0.78)
BASE_JITTER = 0.02
# Vertical texture frequency rises with the stripe's original index: a second
# position cue, like the brightness gradient a stand-in for body topology.
FY_BASE = 0.6
FY_STEP = 0.55
FY_JITTER = 0.1


class SplitError(ValueError):
    """The dataset is too small for the requested split."""


class ImageFormatError(ValueError):
    """A PGM/PPM file failed to parse."""


@dataclass(frozen=True)
class Identity:
    """One synthetic person: a label and per-stripe pattern parameters."""

    id: int
    latent: np.ndarray  # [n_stripes, 4]: fx, fy, phase, base


@dataclass(frozen=True)
class DatasetSpec:
    num_identities: int = 32
    images_per_identity_per_modality: int = 8
    image_height: int = 96
    image_width: int = 48
    channels: int = 3
    n_stripes: int = 6
    noise_level: float = 0.02
    split_ratio: float = 0.5
    gain_a: float = 1.0
    gain_b: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if self.image_height % self.n_stripes != 0:
            raise ValueError(
                f"image height {self.image_height} not divisible by {self.n_stripes} stripes"
            )
        if self.channels != 3:
            raise ValueError("the synthetic renderer produces 3-channel images")


@dataclass
class LabeledImage:
    image: ImageTensor
    identity: int


@dataclass
class Splits:
    """Identity-disjoint training and evaluation pools."""

    pretrain_pool: dict[str, list[ImageTensor]]
    finetune_train: list[LabeledImage]
    query: list[LabeledImage]
    gallery: list[LabeledImage]
    train_identities: list[int]
    test_identities: list[int]


def make_identity(spec: DatasetSpec, identity_id: int) -> Identity:
    """Latent parameters, deterministic in (dataset seed, identity id)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, identity_id]))
    n = spec.n_stripes
    lo, hi = BASE_RANGE
    latent = np.zeros((n, 4))
    latent[:, 0] = rng.uniform(1.5, 4.5, size=n)  # horizontal frequency (identity cue)
    latent[:, 1] = FY_BASE + FY_STEP * np.arange(n) + rng.uniform(
        -FY_JITTER, FY_JITTER, size=n
    )  # vertical frequency (position cue)
    latent[:, 2] = rng.uniform(0.0, 2 * np.pi, size=n)  # phase (identity cue)
    grad = lo + (hi - lo) * (np.arange(n) / max(n - 1, 1))
    latent[:, 3] = grad + rng.uniform(-BASE_JITTER, BASE_JITTER, size=n)  # brightness gradient
    return Identity(id=identity_id, latent=latent)


def render(
    identity: Identity, modality: str, spec: DatasetSpec, rng: np.random.Generator
) -> ImageTensor:
    """Draw one image of the identity in the given modality.

    Per-image variation: a small brightness shift, a small phase shift, and
    additive pixel noise drawn from ``rng``.
    """
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    n = spec.n_stripes
    h, w = spec.image_height, spec.image_width
    band = h // n
    brightness = rng.uniform(-0.03, 0.03)
    phase_shift = rng.uniform(-0.4, 0.4)

    ys = (np.arange(band) + 0.5) / band
    xs = (np.arange(w) + 0.5) / w
    pattern = np.zeros((h, w))
    for s in range(n):
        fx, fy, phase, base = identity.latent[s]
        arg = 2 * np.pi * (fx * xs[None, :] + fy * ys[:, None]) + phase + phase_shift
        pattern[s * band : (s + 1) * band] = base + PATTERN_AMPLITUDE * np.sin(arg)
    pattern = pattern + brightness

    if modality == "A":
        img = np.stack([m * spec.gain_a * pattern for m in CHANNEL_MIX_A])
    else:
        inverted = spec.gain_b * (1.0 - pattern)
        img = np.stack([inverted] * 3)
    img = img + rng.normal(0.0, spec.noise_level, size=img.shape)
    return ImageTensor(np.clip(img, 0.0, 1.0).astype(np.float32), modality)


def _image_rng(spec: DatasetSpec, identity_id: int, modality: str, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([spec.seed, identity_id, MODALITIES.index(modality), index])
    )


def render_indexed(spec: DatasetSpec, identity_id: int, modality: str, index: int) -> ImageTensor:
    """The index-th image of an identity/modality; fully determined by the spec."""
    ident = make_identity(spec, identity_id)
    return render(ident, modality, spec, _image_rng(spec, identity_id, modality, index))


def make_splits(spec: DatasetSpec, seed: int) -> Splits:
    """Identity-disjoint pools: unlabeled pre-training images from the train
    identities, labeled fine-tuning images from the same identities, and a
    modality-B query / modality-A gallery pool over the test identities.

    Single-shot gallery draws (one image per identity) happen at evaluation
    time, so the gallery pool here holds every candidate image.
    """
    spec.validate()
    if spec.num_identities < 4:
        raise SplitError(f"need at least 4 identities, got {spec.num_identities}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E17]))
    ids = rng.permutation(spec.num_identities)
    n_train = int(round(spec.num_identities * spec.split_ratio))
    n_train = min(max(n_train, 2), spec.num_identities - 2)
    train_ids = sorted(int(i) for i in ids[:n_train])
    test_ids = sorted(int(i) for i in ids[n_train:])

    pool: dict[str, list[ImageTensor]] = {m: [] for m in MODALITIES}
    finetune: list[LabeledImage] = []
    for ident in train_ids:
        for m in MODALITIES:
            for k in range(spec.images_per_identity_per_modality):
                img = render_indexed(spec, ident, m, k)
                pool[m].append(img)
                finetune.append(LabeledImage(image=img, identity=ident))

    query: list[LabeledImage] = []
    gallery: list[LabeledImage] = []
    for ident in test_ids:
        for k in range(spec.images_per_identity_per_modality):
            query.append(LabeledImage(image=render_indexed(spec, ident, "B", k), identity=ident))
            gallery.append(LabeledImage(image=render_indexed(spec, ident, "A", k), identity=ident))

    return Splits(
        pretrain_pool=pool,
        finetune_train=finetune,
        query=query,
        gallery=gallery,
        train_identities=train_ids,
        test_identities=test_ids,
    )


# -- PGM/PPM ingestion ---------------------------------------------------

_NAME_RE = re.compile(r"^(\d+)_([^_]+)_(\d+)\.(pgm|ppm)$")


def _read_header_tokens(blob: bytes, path: Path) -> tuple[list[bytes], int]:
    """First four whitespace-separated tokens, skipping '#' comments."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4:
        if i >= len(blob):
            raise ImageFormatError(f"{path.name}: truncated header")
        c = blob[i : i + 1]
        if c == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j : j + 1].isspace() and blob[j : j + 1] != b"#":
                j += 1
            tokens.append(blob[i:j])
            i = j
    return tokens, i + 1  # payload starts after the single whitespace byte


def load_pnm(path: Path) -> np.ndarray:
    """Parse a binary PGM (P5) or PPM (P6) file into [C, H, W] floats in [0, 1]."""
    path = Path(path)
    blob = path.read_bytes()
    tokens, offset = _read_header_tokens(blob, path)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path.name}: unsupported magic {magic!r} (want P5 or P6)")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ImageFormatError(f"{path.name}: malformed header fields {tokens[1:]}") from exc
    if maxval != 255:
        raise ImageFormatError(f"{path.name}: only maxval 255 is supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = blob[offset : offset + need]
    if len(payload) != need:
        raise ImageFormatError(
            f"{path.name}: truncated pixel payload ({len(payload)} of {need} bytes)"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / 255.0
    arr = arr.reshape(height, width, channels)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _resize_nearest(img: np.ndarray, height: int, width: int) -> np.ndarray:
    c, h, w = img.shape
    yi = np.minimum((np.arange(height) * h) // height, h - 1)
    xi = np.minimum((np.arange(width) * w) // width, w - 1)
    return np.ascontiguousarray(img[:, yi[:, None], xi[None, :]])


def load_image_dir(
    path, size: tuple[int, int] | None = None
) -> tuple[list[LabeledImage], int]:
    """Load labeled images named ``<identity>_<modality>_<index>.(pgm|ppm)``.

    Files with an unknown modality token are skipped; the second return
    value counts them. ``size`` resizes by nearest neighbor when given.
    """
    root = Path(path)
    items: list[LabeledImage] = []
    skipped = 0
    for entry in sorted(root.iterdir()):
        m = _NAME_RE.match(entry.name)
        if not m:
            continue
        identity, modality = int(m.group(1)), m.group(2)
        if modality not in MODALITIES:
            skipped += 1
            continue
        img = load_pnm(entry)
        if size is not None:
            img = _resize_nearest(img, size[0], size[1])
        items.append(LabeledImage(image=ImageTensor(img, modality), identity=identity))
    return items, skipped
