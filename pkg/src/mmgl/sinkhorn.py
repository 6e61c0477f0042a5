"""Sinkhorn normalization, Gumbel perturbation, and hard decoding.

The Sinkhorn operator turns a square logit matrix into a near doubly
stochastic one by exponentiating and then alternating row and column
normalization. Adding Gumbel noise to the logits before normalizing at a
low temperature yields differentiable samples of near-permutations; a hard
permutation is recovered by maximizing the linear assignment score
trace(Q^T S) over permutation matrices Q.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

# Row/column sums below this are treated as numerical underflow rather than
# silently turning into inf/NaN downstream.
UNDERFLOW_GUARD = 1e-30

EXHAUSTIVE_MAX_N = 10
EXHAUSTIVE_DEFAULT_CUTOFF = 8


class UnderflowError(FloatingPointError):
    """A normalization denominator collapsed below the underflow guard."""


@dataclass
class SoftAssignment:
    """Relaxed assignment matrix produced by Sinkhorn normalization.

    ``matrix`` is nonnegative with columns summing to 1 exactly (the last
    normalization pass) and rows converging toward 1 with iteration count.
    ``temperature`` records the tau used, None when no temperature scaling
    was applied.
    """

    matrix: Tensor
    iterations_run: int
    temperature: float | None = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class HardPermutation:
    """A bijection on {0..N-1}; ``mapping[i]`` is the column assigned to row i."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        n = len(self.mapping)
        if sorted(self.mapping) != list(range(n)):
            raise ValueError(f"mapping is not a bijection: {self.mapping}")

    @property
    def n(self) -> int:
        return len(self.mapping)

    def matrix(self, dtype=np.float32) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=dtype)
        m[np.arange(self.n), list(self.mapping)] = 1.0
        return m


def _stable_exp(logits: Tensor) -> Tensor:
    """exp(logits - rowmax) with a detached shift.

    Row normalization divides any per-row scale factor straight back out,
    so the first Sinkhorn pass makes this exactly equivalent to exp(logits)
    while keeping exp in range at low temperatures. The gradient is exact
    for the same reason.
    """
    shift = Tensor(logits.data.max(axis=-1, keepdims=True), dtype=logits.dtype)
    return T.exp(logits - shift)


def _sinkhorn_iterate(s: Tensor, iterations: int) -> Tensor:
    """Alternate row then column normalization on [..., N, N] (differentiable)."""
    for _ in range(iterations):
        row_sums = s.sum(axis=-1, keepdims=True)
        if (row_sums.data < UNDERFLOW_GUARD).any():
            raise UnderflowError(
                "sinkhorn row sum underflowed; logits too spread (use a larger tau)"
            )
        s = s / row_sums
        col_sums = s.sum(axis=-2, keepdims=True)
        if (col_sums.data < UNDERFLOW_GUARD).any():
            raise UnderflowError(
                "sinkhorn column sum underflowed; logits too spread (use a larger tau)"
            )
        s = s / col_sums
    return s


def sinkhorn_normalize(logits: Tensor, iterations: int) -> SoftAssignment:
    """Apply the Sinkhorn operator: exp, then ``iterations`` row/column passes.

    Differentiable end to end through every iteration.
    """
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise ShapeError(f"sinkhorn_normalize needs a square matrix, got {logits.shape}")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    s = _sinkhorn_iterate(_stable_exp(logits), iterations)
    return SoftAssignment(matrix=s, iterations_run=iterations)


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    """Standard Gumbel values -log(-log(u)) with u clamped off {0, 1}."""
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_sample(shape, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """IID standard Gumbel noise of the given shape."""
    return Tensor(gumbel_from_uniform(rng.random(shape)), dtype=dtype)


def gumbel_sinkhorn(
    logits: Tensor,
    tau: float,
    iterations: int,
    n_samples: int,
    rng: np.random.Generator | None = None,
    zero_noise: bool = False,
) -> list[SoftAssignment]:
    """Sinkhorn-normalize ``(logits + gumbel) / tau`` for ``n_samples`` draws.

    With ``zero_noise`` the result is exactly ``sinkhorn_normalize(logits/tau)``
    repeated, which is the deterministic evaluation mode.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    if not zero_noise and rng is None:
        raise ValueError("rng is required unless zero_noise is set")
    out = []
    for _ in range(n_samples):
        if zero_noise:
            perturbed = logits / tau
        else:
            noise = gumbel_sample(logits.shape, rng, dtype=logits.dtype)
            perturbed = (logits + noise) / tau
        sa = sinkhorn_normalize(perturbed, iterations)
        sa.temperature = tau
        out.append(sa)
    return out


def gumbel_sinkhorn_stack(
    logits: Tensor,
    tau: float,
    iterations: int,
    n_samples: int,
    rng: np.random.Generator | None = None,
    zero_noise: bool = False,
) -> Tensor:
    """Batched twin of :func:`gumbel_sinkhorn` over stacked logits.

    ``logits`` is [M, N, N]; the result is [n_samples, M, N, N] where sample
    s of image m uses noise drawn in (m, s) order, matching a per-image loop
    of :func:`gumbel_sinkhorn` draw for draw.
    """
    if logits.ndim != 3 or logits.shape[-1] != logits.shape[-2]:
        raise ShapeError(f"gumbel_sinkhorn_stack needs [M, N, N] logits, got {logits.shape}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    m, n, _ = logits.shape
    if zero_noise:
        tiled = T.reshape(logits, (1, m, n, n))
        perturbed = tiled / tau
        stacked = T.concatenate([perturbed] * n_samples, axis=0) if n_samples > 1 else perturbed
        return _sinkhorn_iterate(_stable_exp(stacked), iterations)
    if rng is None:
        raise ValueError("rng is required unless zero_noise is set")
    # One draw in (image, sample) order: C-order filling makes this consume
    # the stream exactly like a per-image loop of gumbel_sinkhorn draws.
    u = rng.random((m, n_samples, n, n))
    noise = gumbel_from_uniform(u).transpose(1, 0, 2, 3)
    perturbed = (T.reshape(logits, (1, m, n, n)) + Tensor(noise, dtype=logits.dtype)) / tau
    return _sinkhorn_iterate(_stable_exp(perturbed), iterations)


def standardize_logits(logits: Tensor, scale: float) -> Tensor:
    """Per-matrix standardization of [..., N, N] logits to mean 0, spread
    ``scale``.

    The reconstruction loss otherwise keeps rewarding ever-larger logits
    (a sharper relaxation) without bound until the direct-domain Sinkhorn
    underflows; fixing the scale removes that degenerate direction while
    leaving the decoded permutation unchanged (the map is monotone).
    """
    if scale <= 0:
        return logits
    mean = logits.mean(axis=(-2, -1), keepdims=True)
    centered = logits - mean
    std = T.sqrt((centered * centered).mean(axis=(-2, -1), keepdims=True) + 1e-8)
    return centered / std * scale


def _assignment_score(matrix: np.ndarray, mapping) -> float:
    return float(matrix[np.arange(len(mapping)), list(mapping)].sum())


def _decode_exhaustive(matrix: np.ndarray) -> HardPermutation:
    n = matrix.shape[0]
    best_score = -np.inf
    best = None
    # Lexicographic enumeration + strict improvement = lexicographically
    # smallest mapping wins ties.
    for perm in itertools.permutations(range(n)):
        score = _assignment_score(matrix, perm)
        if score > best_score:
            best_score = score
            best = perm
    return HardPermutation(mapping=best)


def _decode_greedy(matrix: np.ndarray) -> HardPermutation:
    """Repeatedly take the largest remaining entry; ties go to the smallest
    (row, column) pair, which yields the lexicographically smallest mapping
    on constant matrices."""
    n = matrix.shape[0]
    work = matrix.astype(np.float64, copy=True)
    mapping = [-1] * n
    free_rows = np.ones(n, dtype=bool)
    free_cols = np.ones(n, dtype=bool)
    for _ in range(n):
        sub = np.where(np.outer(free_rows, free_cols), work, -np.inf)
        best = sub.max()
        rows, cols = np.nonzero(sub == best)
        r, c = int(rows[0]), int(cols[0])
        mapping[r] = c
        free_rows[r] = False
        free_cols[c] = False
    return HardPermutation(mapping=tuple(mapping))


def hard_assignment(soft: SoftAssignment | Tensor | np.ndarray, mode: str = "auto") -> HardPermutation:
    """Decode the permutation maximizing trace(Q^T S).

    Exhaustive search (exact, N! candidates) for small N, greedy row-argmax
    with conflict resolution otherwise. Ties break toward the
    lexicographically smallest mapping.
    """
    if isinstance(soft, SoftAssignment):
        matrix = soft.matrix.data
    elif isinstance(soft, Tensor):
        matrix = soft.data
    else:
        matrix = np.asarray(soft)
    n = matrix.shape[0]
    if matrix.ndim != 2 or matrix.shape[1] != n:
        raise ShapeError(f"hard_assignment needs a square matrix, got {matrix.shape}")
    if mode == "auto":
        mode = "exhaustive" if n <= EXHAUSTIVE_DEFAULT_CUTOFF else "greedy"
    if mode == "exhaustive":
        if n > EXHAUSTIVE_MAX_N:
            raise ValueError(f"exhaustive decode permitted only for N <= {EXHAUSTIVE_MAX_N}, got {n}")
        return _decode_exhaustive(matrix)
    if mode == "greedy":
        return _decode_greedy(matrix)
    raise ValueError(f"unknown decode mode {mode!r}")
