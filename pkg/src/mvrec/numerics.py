"""Dense numeric kernels: activations, losses with analytic gradients,
AdamW, and a finite-difference gradient checker.

Everything is plain numpy, 64-bit unless the caller passes float32. All
gradients are derived by hand; ``check_gradients`` is the oracle that keeps
them honest. Functions are pure (optimizer state goes in and out explicitly)
so they are safe to call from worker threads on disjoint data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import IndexOutOfRange, ShapeMismatch, ZeroVector

Params = dict[str, np.ndarray]

# below this a norm counts as zero; cosine against such a vector is undefined
ZERO_NORM_TOL = 1e-12

# probabilities are clamped here before the log so CE stays finite
PROB_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# activations


def sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    return expit(x)


def silu(x: np.ndarray | float):
    """x * sigmoid(x)."""
    return x * expit(x)


def silu_grad(x: np.ndarray | float):
    """d silu / dx = s(x) * (1 + x * (1 - s(x)))."""
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def psi(x, beta: float):
    """Similarity sharpening exp(-beta * (1 - x)).

    Maps cosine similarity in [-1, 1] to (0, 1]; beta controls how fast
    mass decays away from x = 1.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return np.exp(-beta * (1.0 - np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------------------
# cosine similarity


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 1:
        raise ShapeMismatch(f"cosine_sim needs equal-length vectors, got {a.size} and {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM_TOL or nb < ZERO_NORM_TOL:
        raise ZeroVector(f"cosine_sim against near-zero vector (norms {na:.3e}, {nb:.3e})")
    val = float(np.dot(a, b) / (na * nb))
    # rounding can push |val| a few ulp past 1
    return min(1.0, max(-1.0, val))


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalize each row; returns (x_hat, norms).

    Raises ZeroVector if any row norm falls below ZERO_NORM_TOL.
    """
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms < ZERO_NORM_TOL):
        bad = int(np.argmin(norms))
        raise ZeroVector(f"row {bad} has near-zero norm {norms.flat[bad]:.3e}")
    return x / norms[..., None], norms


def normalize_rows_backward(g_hat: np.ndarray, x_hat: np.ndarray,
                            norms: np.ndarray) -> np.ndarray:
    """Backprop through row normalization.

    For one row x with unit direction x_hat: d x_hat / dx = (I - x_hat x_hat^T) / |x|,
    so dL/dx = (g - (g . x_hat) x_hat) / |x|.
    """
    proj = np.sum(g_hat * x_hat, axis=-1, keepdims=True)
    return (g_hat - proj * x_hat) / norms[..., None]


def pairwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity between all rows of a (M x C) and b (P x C)."""
    a_hat, _ = normalize_rows(a)
    b_hat, _ = normalize_rows(b)
    return a_hat @ b_hat.T


# ---------------------------------------------------------------------------
# cross entropy


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """-log softmax(logits)[label], probability clamped at PROB_CLAMP."""
    logits = np.asarray(logits, dtype=np.float64).ravel()
    n = logits.size
    if n < 2:
        raise ShapeMismatch(f"cross_entropy needs >= 2 classes, got {n}")
    if not 0 <= int(label) < n:
        raise IndexOutOfRange(f"label {label} outside [0, {n})")
    p = softmax(logits)
    return float(-np.log(max(float(p[int(label)]), PROB_CLAMP)))


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE over a batch plus the analytic gradient w.r.t. logits.

    logits: (B, N), labels: (B,) int. Gradient is (softmax - onehot) / B,
    exact for the unclamped loss; the clamp only guards the log and is never
    active in any regime we train in.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"bad batch shapes {logits.shape} / {labels.shape}")
    b, n = logits.shape
    if np.any(labels < 0) or np.any(labels >= n):
        raise IndexOutOfRange("label outside logit range")
    p = softmax(logits, axis=1)
    picked = np.maximum(p[np.arange(b), labels], PROB_CLAMP)
    loss = float(-np.mean(np.log(picked)))
    grad = p.copy()
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad


# ---------------------------------------------------------------------------
# triplet loss


@dataclass(frozen=True)
class TripletResult:
    value: float
    degenerate: bool  # True when no anchor has both a positive and a negative


def pairwise_distances(features: np.ndarray, kind: str = "cosine") -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if kind == "cosine":
        return 1.0 - pairwise_cosine(features, features)
    if kind == "euclidean":
        sq = np.sum(features ** 2, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (features @ features.T)
        return np.sqrt(np.maximum(d2, 0.0))
    raise ValueError(f"unknown distance kind {kind!r}")


def batch_hard_triplet_from_distances(
    dist: np.ndarray, labels: np.ndarray, alpha: float
) -> tuple[float, np.ndarray, bool]:
    """Batch-hard triplet loss on a precomputed distance matrix.

    One triplet per anchor: hardest (farthest) positive, hardest (closest)
    negative. Returns (loss, dL/dD, degenerate). The gradient places
    +-1/num_valid_anchors at the selected (a, p) / (a, n) entries of active
    anchors; a subgradient at ties, exact elsewhere.
    """
    labels = np.asarray(labels)
    b = dist.shape[0]
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same

    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    grad = np.zeros_like(dist)
    if not valid.any():
        return 0.0, grad, True

    neg_inf = np.where(pos_mask, dist, -np.inf)
    pos_idx = np.argmax(neg_inf, axis=1)
    pos_inf = np.where(neg_mask, dist, np.inf)
    neg_idx = np.argmin(pos_inf, axis=1)

    anchors = np.flatnonzero(valid)
    margins = dist[anchors, pos_idx[anchors]] - dist[anchors, neg_idx[anchors]] + alpha
    hinged = np.maximum(margins, 0.0)
    loss = float(np.mean(hinged))

    scale = 1.0 / anchors.size
    for a, m in zip(anchors, margins):
        if m > 0.0:
            grad[a, pos_idx[a]] += scale
            grad[a, neg_idx[a]] -= scale
    return loss, grad, False


def batch_all_triplet_from_distances(
    dist: np.ndarray, labels: np.ndarray, alpha: float
) -> tuple[float, np.ndarray, bool]:
    """Exhaustive variant: mean hinge over every valid (a, p, n) triple."""
    labels = np.asarray(labels)
    b = dist.shape[0]
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same

    grad = np.zeros_like(dist)
    total = 0.0
    count = 0
    active: list[tuple[int, int, int]] = []
    for a in range(b):
        for p in np.flatnonzero(pos_mask[a]):
            for n in np.flatnonzero(neg_mask[a]):
                count += 1
                margin = dist[a, p] - dist[a, n] + alpha
                if margin > 0.0:
                    total += margin
                    active.append((a, p, n))
    if count == 0:
        return 0.0, grad, True
    for a, p, n in active:
        grad[a, p] += 1.0 / count
        grad[a, n] -= 1.0 / count
    return total / count, grad, False


def triplet_loss(
    features: np.ndarray,
    labels: np.ndarray,
    alpha: float = 0.5,
    distance: str = "cosine",
    mining: str = "batch_hard",
) -> TripletResult:
    """Margin loss over a labeled batch; d = 1 - cosine by default.

    Degenerate batches (no anchor with both a positive and a negative)
    yield value 0 with the flag set; that is an inactive loss term, not an
    error.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ShapeMismatch(f"bad triplet shapes {features.shape} / {labels.shape}")
    dist = pairwise_distances(features, distance)
    if mining == "batch_hard":
        value, _, degenerate = batch_hard_triplet_from_distances(dist, labels, alpha)
    elif mining == "batch_all":
        value, _, degenerate = batch_all_triplet_from_distances(dist, labels, alpha)
    else:
        raise ValueError(f"unknown mining strategy {mining!r}")
    return TripletResult(value=value, degenerate=degenerate)


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adamw_init(
    params: Params,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamWState:
    return AdamWState(
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
        step=0,
        m={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
        v={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
    )


def adamw_step(params: Params, grads: Params, state: AdamWState) -> tuple[Params, AdamWState]:
    """One bias-corrected AdamW update with decoupled weight decay.

    Pure: returns fresh params and state, inputs untouched.
    """
    if set(params) != set(grads):
        raise ShapeMismatch(
            f"param/grad key mismatch: {sorted(set(params) ^ set(grads))}")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_p: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.shape} for {name!r}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        out = p - state.lr * update
        if state.weight_decay != 0.0:
            out = out - state.lr * state.weight_decay * p
        new_p[name] = out
        new_m[name] = m
        new_v[name] = v
    return new_p, replace(state, step=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# gradient checking

LossFn = Callable[[Params], tuple[float, Params]]


def check_gradients(loss_fn: LossFn, params: Params, epsilon: float = 1e-5) -> float:
    """Central-difference check of analytic gradients.

    loss_fn(params) must return (loss, grads) with grads keyed like params.
    Per parameter the error is ||g_analytic - g_numeric|| / max(||g_analytic||
    + ||g_numeric||, 1e-12); the worst one is returned.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-6, 1e-3]")
    params = {k: np.asarray(p, dtype=np.float64) for k, p in params.items()}
    _, analytic = loss_fn(params)
    worst = 0.0
    for name, p in params.items():
        numeric = np.zeros_like(p)
        flat = p.ravel()
        num_flat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up, _ = loss_fn(params)
            flat[i] = orig - epsilon
            down, _ = loss_fn(params)
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * epsilon)
        ga = np.asarray(analytic[name], dtype=np.float64)
        denom = max(float(np.linalg.norm(ga)) + float(np.linalg.norm(numeric)), 1e-12)
        err = float(np.linalg.norm(ga - numeric)) / denom
        worst = max(worst, err)
    return worst
