"""Central finite-difference checks for every backward pass.

Each check builds a scalar ``L = sum(out * R)`` from a layer output and a
fixed random projection ``R`` so the analytic gradient is ``backward(R)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from repforge import layers
from repforge.layers import ConvSpec

STEP = 1e-3
LAYER_TOL = 1e-4
MODEL_TOL = 1e-3
# entries whose true and estimated gradients are both below this are compared absolutely
DENOM_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.threshold)


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    keep = ~np.isnan(n)  # NaN marks coordinates skipped as non-differentiable
    if not keep.any():
        return 0.0
    a, n = a[keep], n[keep]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), DENOM_FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(
    f: Callable[[], float], x: np.ndarray, h: float = STEP, pattern: Callable[[], bytes] | None = None
) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. ``x``, perturbing ``x`` in place.

    When ``pattern`` is given it must fingerprint the piecewise-linear regime
    (ReLU masks, pooling argmaxes); coordinates whose perturbation changes the
    fingerprint straddle a kink and come back as NaN.
    """
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    base = pattern() if pattern else None
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        crossed = pattern is not None and pattern() != base
        flat[i] = orig - h
        down = f()
        crossed = crossed or (pattern is not None and pattern() != base)
        flat[i] = orig
        gflat[i] = np.nan if crossed else (up - down) / (2 * h)
    return grad


def _gapped_values(rng: np.random.Generator, shape, gap: float = 0.02) -> np.ndarray:
    """Distinct values at least ``gap`` apart (no pooling ties), shuffled."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * gap + rng.uniform(0, gap / 4, n)
    return rng.permutation(vals).reshape(shape)


def check_conv2d(rng, shape=(5, 8, 2), maps=4, window=(3, 3), stride=(1, 1), mode="same") -> float:
    x = rng.standard_normal(shape)
    k = rng.standard_normal((*window, shape[2], maps))
    b = rng.standard_normal(maps)
    spec = ConvSpec(window, stride, shape[2], maps, mode)
    out, cache = layers.conv2d_forward(x, k, b, spec)
    r = rng.standard_normal(out.shape)
    dx, dk, db = layers.conv2d_backward(r, cache)

    def loss():
        return float(np.sum(layers.conv2d_forward(x, k, b, spec)[0] * r))

    return max(
        rel_error(dx, numeric_grad(loss, x)),
        rel_error(dk, numeric_grad(loss, k)),
        rel_error(db, numeric_grad(loss, b)),
    )


def check_maxpool(rng, shape=(6, 8, 3), window=(2, 4), stride=(1, 4)) -> float:
    x = _gapped_values(rng, shape)
    out, cache = layers.maxpool_forward(x, window, stride)
    r = rng.standard_normal(out.shape)
    dx = layers.maxpool_backward(r, cache)
    return rel_error(dx, numeric_grad(lambda: float(np.sum(layers.maxpool_forward(x, window, stride)[0] * r)), x))


def check_dense(rng, n_in=20, n_out=10) -> float:
    x = rng.standard_normal(n_in)
    w = rng.standard_normal((n_in, n_out))
    b = rng.standard_normal(n_out)
    out, cache = layers.dense_forward(x, w, b)
    r = rng.standard_normal(out.shape)
    dx, dw, db = layers.dense_backward(r, cache)

    def loss():
        return float(np.sum(layers.dense_forward(x, w, b)[0] * r))

    return max(
        rel_error(dx, numeric_grad(loss, x)),
        rel_error(dw, numeric_grad(loss, w)),
        rel_error(db, numeric_grad(loss, b)),
    )


def check_relu(rng, n=50) -> float:
    x = rng.standard_normal(n)
    x[np.abs(x) < 10 * STEP] += 20 * STEP  # stay clear of the kink
    _, mask = layers.relu(x)
    r = rng.standard_normal(n)
    dx = layers.relu_backward(r, mask)
    return rel_error(dx, numeric_grad(lambda: float(np.sum(layers.relu(x)[0] * r)), x))


def check_dropout(rng, n=200, keep=0.5) -> float:
    x = rng.standard_normal(n)
    seed = int(rng.integers(1 << 31))
    _, mask = layers.dropout_apply(x, keep, np.random.default_rng(seed), True)
    r = rng.standard_normal(n)
    dx = layers.dropout_backward(r, mask)

    def loss():
        return float(np.sum(layers.dropout_apply(x, keep, np.random.default_rng(seed), True)[0] * r))

    return rel_error(dx, numeric_grad(loss, x))


def check_softmax(rng, k=10) -> float:
    z = rng.standard_normal(k)
    label = int(rng.integers(k))
    _, _, grad = layers.softmax_cross_entropy(z, label)
    return rel_error(grad, numeric_grad(lambda: layers.softmax_cross_entropy(z, label)[0], z))


def tiny_model_config(seed: int = 0):
    from repforge.model import ModelConfig

    return ModelConfig(
        variant="rect",
        depth=2,
        conv_feature_maps=(2, 3),
        fc_widths=(8, 8),
        num_classes=4,
        input_shape=(9, 16, 1),
        seed=seed,
    )


def check_model(rng, seed: int = 0) -> float:
    """Whole-network check on a shrunken rect geometry, dropout masks frozen."""
    from repforge.model import backward, build_model, forward_batch

    model = build_model(tiny_model_config(seed))
    x = rng.standard_normal((2, 9, 16, 1))
    y = np.array([1, 3])
    mask_seed = int(rng.integers(1 << 31))

    def run():
        logits, caches = forward_batch(model, x, training=True, rng=np.random.default_rng(mask_seed))
        return layers.softmax_cross_entropy(logits, y), caches

    def regime() -> bytes:
        caches = run()[1]
        parts = [c[1].tobytes() + c[2].argmax.tobytes() for c in caches[:model.config.depth]]
        parts += [c[1].tobytes() for c in caches[model.config.depth:-1]]
        return b"".join(parts)

    (_, _, grad_logits), caches = run()
    grads = backward(model, caches, grad_logits)
    return max(
        rel_error(g, numeric_grad(lambda: run()[0][0], p, pattern=regime))
        for g, p in zip(grads, model.params)
    )


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [
        CheckResult("conv2d", max(
            check_conv2d(rng),
            check_conv2d(rng, shape=(9, 7, 1), maps=3, stride=(3, 1)),
            check_conv2d(rng, shape=(6, 9, 2), maps=2, window=(2, 3), stride=(2, 2), mode="valid"),
            check_conv2d(rng, shape=(4, 10, 3), maps=2, window=(3, 4), stride=(1, 3)),
        ), LAYER_TOL),
        CheckResult("maxpool", max(
            check_maxpool(rng),
            check_maxpool(rng, shape=(6, 6, 2), window=(3, 3), stride=(3, 3)),
            check_maxpool(rng, shape=(5, 7, 2), window=(3, 3), stride=(1, 2)),
        ), LAYER_TOL),
        CheckResult("dense", check_dense(rng), LAYER_TOL),
        CheckResult("relu", check_relu(rng), LAYER_TOL),
        CheckResult("dropout", check_dropout(rng), LAYER_TOL),
        CheckResult("softmax_cross_entropy", check_softmax(rng), 1e-5),
        CheckResult("model", check_model(rng, seed), MODEL_TOL),
    ]
    return results
