"""Finite-difference validation of analytic gradients.

Central differences in float64 are the independent oracle for every
backward formula in this package. ``check_gradients`` perturbs each input
element in turn and compares (f(x+h) - f(x-h)) / 2h against the gradient
produced by ``backward()``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    ok: bool
    detail: str = ""


def numeric_gradient(fn, inputs: list[T.Tensor], index: int, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``fn(*inputs)`` w.r.t. ``inputs[index]``.

    Evaluations run under no_grad; inputs must be float64 for the step size
    to sit above the rounding floor.
    """
    x = inputs[index]
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            fp = fn(*inputs).item()
            flat[i] = orig - step
            fm = fn(*inputs).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def check_gradients(
    fn,
    inputs: list[T.Tensor],
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-7,
    h: float = 1e-6,
) -> GradCheckResult:
    """Compare analytic and numeric gradients for a scalar-valued ``fn``.

    Passes when every element satisfies ``|a - n| <= abs_tol + rel_tol*|n|``.
    Inputs are required to be float64 leaves with requires_grad set.
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise ValueError("gradient checking requires float64 inputs")
        x.zero_grad()
    loss = fn(*inputs)
    loss.backward()

    max_rel = 0.0
    max_abs = 0.0
    detail = ""
    ok = True
    for idx, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        numeric = numeric_gradient(fn, inputs, idx, h=h)
        err = np.abs(analytic - numeric)
        rel = err / np.maximum(np.abs(numeric), abs_tol / max(rel_tol, 1e-300))
        max_abs = max(max_abs, float(err.max(initial=0.0)))
        max_rel = max(max_rel, float(rel.max(initial=0.0)))
        bad = err > (abs_tol + rel_tol * np.abs(numeric))
        if bad.any():
            ok = False
            where = np.unravel_index(int(np.argmax(err * bad)), x.shape) if x.shape else ()
            detail = (
                f"input {idx} at {where}: analytic {analytic[where]:.6e} "
                f"vs numeric {numeric[where]:.6e}"
            )
    return GradCheckResult(max_rel_error=max_rel, max_abs_error=max_abs, ok=ok, detail=detail)


def run_primitive_suite(rel_tol: float = 1e-4, seeds: int = 20, echo=None) -> list[str]:
    """Finite-difference checks for every differentiable primitive.

    Returns a list of failure descriptions (empty when all pass). Used by the
    test suite and the ``gradcheck`` CLI command. ``echo``, when given, is
    called with one line per primitive.
    """
    failures: list[str] = []

    def t(rng, *shape):
        return T.Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)

    def positive(rng, *shape):
        return T.Tensor(
            rng.uniform(0.5, 2.0, size=shape), requires_grad=True, dtype=np.float64
        )

    cases = {
        "add": lambda rng: (lambda a, b: (a + b).sum(), [t(rng, 3, 4), t(rng, 3, 4)]),
        "add_broadcast": lambda rng: (lambda a, b: (a + b).sum(), [t(rng, 3, 4), t(rng, 1, 4)]),
        "sub": lambda rng: (lambda a, b: (a - b).sum(), [t(rng, 2, 5), t(rng, 2, 5)]),
        "mul": lambda rng: (lambda a, b: (a * b).sum(), [t(rng, 4, 3), t(rng, 4, 3)]),
        "div": lambda rng: (lambda a, b: (a / b).sum(), [t(rng, 3, 3), positive(rng, 3, 3)]),
        "div_broadcast": lambda rng: (
            lambda a, b: (a / b).sum(),
            [t(rng, 4, 3), positive(rng, 4, 1)],
        ),
        "neg": lambda rng: (lambda a: (-a).mean(), [t(rng, 6)]),
        "exp": lambda rng: (lambda a: T.exp(a).sum(), [t(rng, 3, 2)]),
        "log": lambda rng: (lambda a: T.log(a).sum(), [positive(rng, 4, 2)]),
        "sqrt": lambda rng: (lambda a: T.sqrt(a).sum(), [positive(rng, 5)]),
        "relu": lambda rng: (lambda a: T.relu(a).mean(), [t(rng, 4, 4)]),
        "matmul": lambda rng: (
            lambda a, b: (a @ b).sum(),
            [t(rng, 3, 4), t(rng, 4, 2)],
        ),
        "matmul_batched": lambda rng: (
            lambda a, b: (a @ b).sum(),
            [t(rng, 2, 3, 4), t(rng, 2, 4, 3)],
        ),
        "trace": lambda rng: (lambda a: T.trace(a), [t(rng, 4, 4)]),
        "softmax": lambda rng: (
            lambda a, w: (T.softmax(a, axis=1) * w).sum(),
            [t(rng, 3, 5), t(rng, 3, 5)],
        ),
        "l2_normalize": lambda rng: (
            lambda a, w: (T.l2_normalize(a, axis=1) * w).sum(),
            [positive(rng, 3, 4), t(rng, 3, 4)],
        ),
        "sum_axis": lambda rng: (
            lambda a: (T.tsum(a, axis=1) * T.tsum(a, axis=1)).sum(),
            [t(rng, 3, 4)],
        ),
        "mean_axis": lambda rng: (
            lambda a: (T.tmean(a, axis=(0, 2)) * T.tmean(a, axis=(0, 2))).sum(),
            [t(rng, 2, 3, 2)],
        ),
        "transpose": lambda rng: (
            lambda a, w: (a.transpose((1, 0)) * w).sum(),
            [t(rng, 3, 4), t(rng, 4, 3)],
        ),
        "reshape": lambda rng: (
            lambda a, w: (a.reshape(6, 2) * w).sum(),
            [t(rng, 3, 4), t(rng, 6, 2)],
        ),
        "concatenate": lambda rng: (
            lambda a, b: T.concatenate([a, b], axis=1).mean(),
            [t(rng, 2, 3), t(rng, 2, 2)],
        ),
        "slice": lambda rng: (
            lambda a: (a[1:3, ::2] * a[1:3, ::2]).sum(),
            [t(rng, 4, 5)],
        ),
        "take_rows": lambda rng: (
            lambda a: (T.take_rows(a, [0, 2, 2, 1]) * T.take_rows(a, [0, 2, 2, 1])).sum(),
            [t(rng, 3, 4)],
        ),
        "im2col": lambda rng: (
            lambda a, w: (T.im2col(a, 3, 2, 1) * w).sum(),
            [t(rng, 2, 2, 6, 4), t(rng, 2, 3, 2, 18)],
        ),
        "cast": lambda rng: (
            lambda a: (T.cast(T.cast(a, np.float64), np.float64) * a).sum(),
            [t(rng, 3, 3)],
        ),
        "log_softmax": lambda rng: (
            lambda a, w: (T.log_softmax(a, axis=1) * w).sum(),
            [t(rng, 3, 5), t(rng, 3, 5)],
        ),
        "fanout": lambda rng: (
            # One input feeding two consumers: contributions must sum.
            lambda a: (a * a).sum() + T.exp(a).sum(),
            [t(rng, 3, 3)],
        ),
    }

    for name, build in cases.items():
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(1000 + seed)
            fn, inputs = build(rng)
            res = check_gradients(fn, inputs, rel_tol=rel_tol)
            worst = max(worst, res.max_rel_error)
            if not res.ok:
                failures.append(f"{name} (seed {seed}): {res.detail}")
                break
        if echo:
            status = "FAIL" if any(f.startswith(name + " ") for f in failures) else "ok"
            echo(f"  {name:<16} max rel err {worst:.3e}  {status}")
    return failures


def run_composite_suite(rel_tol: float = 1e-3, seeds: int = 20, echo=None) -> list[str]:
    """Finite-difference checks through the composed operations: Sinkhorn at
    its working iteration count, soft retrieval, both losses, and a tiny
    end-to-end encoder."""
    from .encoder import EncoderConfig, encode_batch, init_params
    from .objectives import permutation_loss
    from .patches import sample_permutation
    from .pcc import PatchEmbeddingBatch, pcc_loss, soft_nn
    from .sinkhorn import SoftAssignment, sinkhorn_normalize

    failures: list[str] = []

    def sinkhorn_case(rng):
        w = T.Tensor(rng.standard_normal((4, 4)), dtype=np.float64)
        x = T.Tensor(rng.standard_normal((4, 4)), requires_grad=True, dtype=np.float64)
        return lambda a: (sinkhorn_normalize(a, 20).matrix * w).sum(), [x]

    def soft_nn_case(rng):
        q = T.Tensor(rng.standard_normal(5), requires_grad=True, dtype=np.float64)
        u = T.Tensor(rng.standard_normal((4, 5)), requires_grad=True, dtype=np.float64)
        w = T.Tensor(rng.standard_normal(5), dtype=np.float64)
        return lambda qq, uu: (soft_nn(qq, uu, tau=0.3) * w).sum(), [q, u]

    def pcc_case(rng):
        raw = T.Tensor(rng.standard_normal((8, 5)), requires_grad=True, dtype=np.float64)

        def fn(r):
            emb = T.l2_normalize(r, axis=1)
            batch = PatchEmbeddingBatch(
                embeddings=emb,
                modality=np.array(["A", "A", "A", "A", "B", "B", "B", "B"]),
                image_index=np.array([0, 0, 1, 1, 0, 0, 1, 1]),
                patch_index=np.array([0, 1, 0, 1, 0, 1, 0, 1]),
            )
            return pcc_loss(batch, tau=0.3)

        return fn, [raw]

    def perm_loss_case(rng):
        rec = sample_permutation(3, rng)
        logits = T.Tensor(rng.standard_normal((3, 3)), requires_grad=True, dtype=np.float64)

        def fn(x):
            sa = SoftAssignment(matrix=T.softmax(x, axis=1), iterations_run=0)
            return permutation_loss([sa, sa], rec)

        return fn, [logits]

    def encoder_case(rng):
        cfg = EncoderConfig(
            image_shape=(2, 8, 4), n_stripes=2, blocks=((3, 2, 2, 0), (4, 2, 2, 0)), patch_dim=5
        )
        params = init_params(cfg, rng, dtype=np.float64)
        img = rng.random((2, 2, 8, 4))

        def fn(*tensors):
            out = encode_batch(T.Tensor(img, dtype=np.float64), params)
            return out.global_feature.sum() + out.affinity.sum() + out.patch_embeddings.sum()

        return fn, list(params.tensors.values())

    composites = {
        "sinkhorn_l20": sinkhorn_case,
        "soft_nn": soft_nn_case,
        "pcc_loss": pcc_case,
        "permutation_loss": perm_loss_case,
        "encoder_tiny": encoder_case,
    }
    for name, build in composites.items():
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(7000 + seed)
            fn, inputs = build(rng)
            res = check_gradients(fn, inputs, rel_tol=rel_tol)
            worst = max(worst, res.max_rel_error)
            if not res.ok:
                failures.append(f"{name} (seed {seed}): {res.detail}")
                break
        if echo:
            status = "FAIL" if any(f.startswith(name + " ") for f in failures) else "ok"
            echo(f"  {name:<16} max rel err {worst:.3e}  {status}")
    return failures


def run_full_suite(rel_tol: float = 1e-3, seeds: int = 20, echo=None) -> list[str]:
    """Primitive suite (at the tighter primitive tolerance) plus the
    composite suite at ``rel_tol``."""
    if echo:
        echo("primitives:")
    failures = run_primitive_suite(rel_tol=min(rel_tol, 1e-4), seeds=seeds, echo=echo)
    if echo:
        echo("composites:")
    failures += run_composite_suite(rel_tol=rel_tol, seeds=seeds, echo=echo)
    return failures
