"""Cache-based few-shot classifiers over averaged multi-view features.

The core decision rule is similarity-weighted label voting: a query feature
is compared against every cached support feature by cosine similarity, the
similarities are sharpened with psi(x) = exp(-beta*(1-x)), and the sharpened
weights are summed per class through the one-hot support labels.

Variants:
  zip          residual zero-init adapter (identity at init), training-free
  zip_f        same adapter fine-tuned: CE + weighted triplet loss, AdamW,
               full support-view batch every iteration, analytic gradients
  tip          the same voting rule over the raw cache (no adapter)
  tip_f        cache features made learnable, CE only
  knn          1-nearest-neighbor by cosine (per-class max similarity)
  protonet     cosine to per-class mean feature
  linearprob   linear softmax probe trained by CE
  clip_adapter bottleneck MLP with residual blend, prototype-cosine head

All trained variants share one budget: AdamW lr 1e-4, 500 iterations, batch
= all support view embeddings. No autodiff anywhere; every gradient is
derived by hand and checked against finite differences in the tests.

Caveat for cross-implementation comparisons: the cache votes over visual
features only. Setups built on a text-capable encoder often blend a
zero-shot text-prototype term into the tip-style logits; nothing here does,
so absolute accuracies can differ from such implementations even on
identical embeddings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import Episode
from .embeddings import EmbeddingStore
from .errors import (
    CorruptFile,
    NonFiniteLoss,
    ShapeMismatch,
    UntrainedState,
)
from .numerics import (
    adamw_init,
    adamw_step,
    batch_all_triplet_from_distances,
    batch_hard_triplet_from_distances,
    cross_entropy_batch,
    normalize_rows,
    normalize_rows_backward,
    psi,
    silu,
    silu_grad,
)

CLASSIFIER_NAMES = (
    "zip", "zip_f", "tip", "tip_f", "knn", "protonet", "linearprob", "clip_adapter",
)

# sharpness of the similarity modulation for the training-free voting rule;
# fine-tuned variants train at 1
TRAINING_FREE_BETA = 32.0


# ---------------------------------------------------------------------------
# support cache


@dataclass
class SupportCache:
    features: np.ndarray  # (NK, C) averaged support features
    labels: np.ndarray  # (NK,) int class indices
    onehot: np.ndarray  # (NK, N)
    classes: list[str]  # index -> class name
    n_way: int
    k_shot: int


def build_support_cache(
    episode: Episode, store: EmbeddingStore, classes: list[str]
) -> SupportCache:
    index = {c: i for i, c in enumerate(classes)}
    feats = []
    labels = []
    for instance_id, class_label in episode.support:
        feats.append(store[instance_id].feature)
        labels.append(index[class_label])
    features = np.stack(feats)
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros((len(labels), len(classes)), dtype=np.float64)
    onehot[np.arange(len(labels)), labels] = 1.0
    return SupportCache(
        features=features,
        labels=labels,
        onehot=onehot,
        classes=list(classes),
        n_way=len(classes),
        k_shot=episode.k,
    )


def support_view_batch(
    episode: Episode, store: EmbeddingStore, classes: list[str]
) -> tuple[np.ndarray, np.ndarray]:
    """All support view embeddings stacked (NK*V, C) with their labels;
    this is the training batch used at every fine-tuning iteration."""
    index = {c: i for i, c in enumerate(classes)}
    xs = []
    ys = []
    for instance_id, class_label in episode.support:
        block = store[instance_id].views
        xs.append(block)
        ys.extend([index[class_label]] * block.shape[0])
    return np.concatenate(xs, axis=0), np.asarray(ys, dtype=np.int64)


# ---------------------------------------------------------------------------
# forward ops


@dataclass
class ZipParams:
    w: np.ndarray  # (C, C)
    b: np.ndarray  # (C,)
    cache_features: np.ndarray  # (NK, C)
    train_cache: bool = True
    train_zip: bool = True


def init_zip_params(
    cache: SupportCache, train_cache: bool = True, train_zip: bool = True
) -> ZipParams:
    c = cache.features.shape[1]
    return ZipParams(
        w=np.zeros((c, c), dtype=np.float64),
        b=np.zeros(c, dtype=np.float64),
        cache_features=cache.features.copy(),
        train_cache=train_cache,
        train_zip=train_zip,
    )


def zip_forward(features: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Residual adapter: silu(features @ w.T + b) + features.

    Zero w and b make this the identity exactly (silu(0) = 0). Accepts a
    single vector or a batch of rows.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ShapeMismatch(
            f"feature dim {features.shape[-1]} vs w {w.shape} / b {b.shape}")
    return silu(features @ w.T + b) + features


def sdpa_logits(
    query: np.ndarray,
    support_features: np.ndarray,
    support_onehot: np.ndarray,
    beta: float,
) -> np.ndarray:
    """Similarity-weighted label voting.

    logits[n] = sum_i psi(cos(query, support[i]); beta) * onehot[i, n].
    query may be one vector or a batch; zero-norm rows raise ZeroVector.
    """
    query = np.asarray(query, dtype=np.float64)
    single = query.ndim == 1
    q = query[None, :] if single else query
    q_hat, _ = normalize_rows(q)
    s_hat, _ = normalize_rows(support_features)
    sims = q_hat @ s_hat.T
    logits = psi(sims, beta) @ support_onehot
    return logits[0] if single else logits


def predict_from_logits(logits: np.ndarray) -> np.ndarray | int:
    """Argmax with ties broken to the lowest class index."""
    logits = np.asarray(logits)
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=-1)


# ---------------------------------------------------------------------------
# fine-tuning engine (hand-derived gradients)


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    triplet: float
    total: float  # ce + triplet_weight * triplet


@dataclass(frozen=True)
class TrainConfig:
    """Shared budget for every trained variant.

    beta: similarity sharpness during training/inference of the trained
    model; margin/triplet_weight: hinge margin and the weight of the triplet
    term in the total loss; adapt_cache_through_zip: whether cached support
    features pass through the adapter symmetrically with queries (the
    alternative compares adapted queries against raw cache entries).
    """

    beta: float = 1.0
    margin: float = 0.5
    triplet_weight: float = 4.0
    lr: float = 1e-4
    iterations: int = 500
    seed: int = 0
    adapt_cache_through_zip: bool = True
    triplet_mining: str = "batch_hard"


def zip_loss_and_grads(
    w: np.ndarray,
    b: np.ndarray,
    cache0: np.ndarray,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    onehot: np.ndarray,
    config: TrainConfig,
) -> tuple[LossBreakdown, dict[str, np.ndarray], np.ndarray]:
    """One full forward/backward pass of the fine-tuning objective.

    Forward: adapt queries (and, per config, the cache) through the residual
    adapter, unit-normalize, vote via psi-sharpened cosine, take mean CE;
    add triplet_weight * batch-hard triplet on the adapted query batch
    (distance = 1 - cosine). Returns (breakdown, grads for w/b/cache,
    logits). Gradients cover all three tensors; callers mask out frozen
    ones.
    """
    # query path
    z_q = batch_x @ w.T + b
    q = silu(z_q) + batch_x
    q_hat, q_norm = normalize_rows(q)

    # cache path
    if config.adapt_cache_through_zip:
        z_c = cache0 @ w.T + b
        c_adapted = silu(z_c) + cache0
    else:
        z_c = None
        c_adapted = cache0
    c_hat, c_norm = normalize_rows(c_adapted)

    sims = q_hat @ c_hat.T  # (B, NK)
    weights = psi(sims, config.beta)
    logits = weights @ onehot  # (B, N)
    ce, d_logits = cross_entropy_batch(logits, batch_y)

    # triplet on the adapted query batch
    self_sims = q_hat @ q_hat.T
    dist = 1.0 - self_sims
    if config.triplet_mining == "batch_all":
        trip, d_dist, _ = batch_all_triplet_from_distances(dist, batch_y, config.margin)
    else:
        trip, d_dist, _ = batch_hard_triplet_from_distances(dist, batch_y, config.margin)
    total = ce + config.triplet_weight * trip

    # ----- backward -----
    # CE through the voting rule: d psi = beta * psi
    d_weights = d_logits @ onehot.T
    d_sims = d_weights * (config.beta * weights)
    d_q_hat = d_sims @ c_hat
    d_c_hat = d_sims.T @ q_hat

    # triplet through self-similarity (S symmetric in q_hat: dQ = (G+G^T) Q)
    g_self = -config.triplet_weight * d_dist
    d_q_hat = d_q_hat + (g_self + g_self.T) @ q_hat

    d_q = normalize_rows_backward(d_q_hat, q_hat, q_norm)
    d_c = normalize_rows_backward(d_c_hat, c_hat, c_norm)

    d_z_q = d_q * silu_grad(z_q)
    d_w = d_z_q.T @ batch_x
    d_b = d_z_q.sum(axis=0)
    if config.adapt_cache_through_zip:
        d_z_c = d_c * silu_grad(z_c)
        d_w = d_w + d_z_c.T @ cache0
        d_b = d_b + d_z_c.sum(axis=0)
        d_cache = d_z_c @ w + d_c  # linear path + residual
    else:
        d_cache = d_c

    breakdown = LossBreakdown(ce=ce, triplet=trip, total=total)
    return breakdown, {"w": d_w, "b": d_b, "cache": d_cache}, logits


def train_zip_adapter_f(
    cache: SupportCache,
    view_batch: np.ndarray,
    view_labels: np.ndarray,
    config: TrainConfig,
    train_cache: bool = True,
    train_zip: bool = True,
) -> tuple[ZipParams, list[LossBreakdown], list[float]]:
    """Fine-tune the adapter and/or the cache on the support view batch.

    Every iteration uses the whole batch (all NK*V support view embeddings
    as queries). Only tensors whose flag is set receive updates; with both
    flags off this reduces to a no-op and predictions stay identical to the
    training-free variant at the same beta. Returns (params, loss trace,
    train accuracy trace).
    """
    params = init_zip_params(cache, train_cache=train_cache, train_zip=train_zip)
    trainable: dict[str, np.ndarray] = {}
    if train_zip:
        trainable["w"] = params.w
        trainable["b"] = params.b
    if train_cache:
        trainable["cache"] = params.cache_features
    trace: list[LossBreakdown] = []
    acc_trace: list[float] = []
    if not trainable:
        breakdown, _, logits = zip_loss_and_grads(
            params.w, params.b, params.cache_features,
            view_batch, view_labels, cache.onehot, config)
        trace.append(breakdown)
        acc_trace.append(float(np.mean(np.argmax(logits, axis=1) == view_labels)))
        return params, trace, acc_trace

    state = adamw_init(trainable, lr=config.lr)
    for it in range(config.iterations):
        breakdown, grads, logits = zip_loss_and_grads(
            params.w, params.b, params.cache_features,
            view_batch, view_labels, cache.onehot, config)
        if not np.isfinite(breakdown.total):
            raise NonFiniteLoss(
                f"loss became non-finite (ce={breakdown.ce}, triplet={breakdown.triplet})",
                iteration=it)
        trace.append(breakdown)
        acc_trace.append(float(np.mean(np.argmax(logits, axis=1) == view_labels)))
        step_grads = {k: grads[k] for k in trainable}
        trainable, state = adamw_step(trainable, step_grads, state)
        if train_zip:
            params.w = trainable["w"]
            params.b = trainable["b"]
        if train_cache:
            params.cache_features = trainable["cache"]
    return params, trace, acc_trace


# ---------------------------------------------------------------------------
# classifier front-ends (uniform fit / logits interface)


class BaseClassifier:
    name = "base"
    def __init__(self) -> None:
        self._cache: SupportCache | None = None

    def fit(
        self,
        cache: SupportCache,
        view_batch: np.ndarray,
        view_labels: np.ndarray,
        config: TrainConfig,
    ) -> None:
        raise NotImplementedError

    def logits(self, queries: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, queries: np.ndarray) -> np.ndarray:
        return np.asarray(predict_from_logits(self.logits(queries)))

    def _need_cache(self) -> SupportCache:
        if self._cache is None:
            raise UntrainedState(f"{self.name}: fit() must run before prediction")
        return self._cache


class TipAdapter(BaseClassifier):
    """Training-free voting over the raw cache."""

    name = "tip"

    def __init__(self, beta: float = TRAINING_FREE_BETA) -> None:
        super().__init__()
        self.beta = beta

    def fit(self, cache, view_batch, view_labels, config) -> None:
        self._cache = cache

    def logits(self, queries):
        cache = self._need_cache()
        return sdpa_logits(queries, cache.features, cache.onehot, self.beta)


class ZipAdapter(BaseClassifier):
    """Training-free variant of the residual adapter: parameters stay at
    their zero init, so the adapter is the identity and predictions coincide
    with the raw-cache voting rule."""

    name = "zip"

    def __init__(self, beta: float = TRAINING_FREE_BETA) -> None:
        super().__init__()
        self.beta = beta
        self._params: ZipParams | None = None

    def fit(self, cache, view_batch, view_labels, config) -> None:
        self._cache = cache
        self._params = init_zip_params(cache)

    def logits(self, queries):
        cache = self._need_cache()
        p = self._params
        adapted_q = zip_forward(queries, p.w, p.b)
        adapted_c = zip_forward(p.cache_features, p.w, p.b)
        return sdpa_logits(adapted_q, adapted_c, cache.onehot, self.beta)


class ZipAdapterF(BaseClassifier):
    """Fine-tuned adapter + cache (flags select the Table of trainable
    combinations); CE plus weighted triplet objective."""

    name = "zip_f"

    def __init__(self, train_cache: bool = True, train_zip: bool = True) -> None:
        super().__init__()
        self.train_cache = train_cache
        self.train_zip = train_zip
        self._params: ZipParams | None = None
        self._config: TrainConfig | None = None
        self.trace: list[LossBreakdown] = []
        self.train_accuracy: list[float] = []

    def fit(self, cache, view_batch, view_labels, config) -> None:
        self._cache = cache
        self._config = config
        self._params, self.trace, self.train_accuracy = train_zip_adapter_f(
            cache, view_batch, view_labels, config,
            train_cache=self.train_cache, train_zip=self.train_zip)

    def logits(self, queries):
        cache = self._need_cache()
        p, cfg = self._params, self._config
        adapted_q = zip_forward(queries, p.w, p.b)
        if cfg.adapt_cache_through_zip:
            adapted_c = zip_forward(p.cache_features, p.w, p.b)
        else:
            adapted_c = p.cache_features
        return sdpa_logits(adapted_q, adapted_c, cache.onehot, cfg.beta)


class TipAdapterF(BaseClassifier):
    """Learnable cache, CE only, no adapter: the same engine with the
    adapter frozen at zero and the triplet term switched off."""

    name = "tip_f"

    def __init__(self) -> None:
        super().__init__()
        self._params: ZipParams | None = None
        self._beta: float = 1.0

    def fit(self, cache, view_batch, view_labels, config) -> None:
        self._cache = cache
        cfg = TrainConfig(
            beta=config.beta, margin=config.margin, triplet_weight=0.0,
            lr=config.lr, iterations=config.iterations, seed=config.seed,
            adapt_cache_through_zip=False)
        self._beta = cfg.beta
        self._params, _, _ = train_zip_adapter_f(
            cache, view_batch, view_labels, cfg, train_cache=True, train_zip=False)

    def logits(self, queries):
        cache = self._need_cache()
        return sdpa_logits(queries, self._params.cache_features, cache.onehot, self._beta)


class NearestNeighbor(BaseClassifier):
    """1-NN by cosine; per-class logit = max similarity over that class's
    support features, so the argmax is the nearest neighbor's class."""

    name = "knn"

    def fit(self, cache, view_batch, view_labels, config) -> None:
        self._cache = cache

    def logits(self, queries):
        cache = self._need_cache()
        queries = np.asarray(queries, dtype=np.float64)
        single = queries.ndim == 1
        q = queries[None, :] if single else queries
        q_hat, _ = normalize_rows(q)
        s_hat, _ = normalize_rows(cache.features)
        sims = q_hat @ s_hat.T  # (B, NK)
        out = np.full((sims.shape[0], cache.n_way), -np.inf)
        for n in range(cache.n_way):
            cols = np.flatnonzero(cache.labels == n)
            out[:, n] = sims[:, cols].max(axis=1)
        return out[0] if single else out


class ProtoNet(BaseClassifier):
    """Cosine similarity to per-class mean support feature."""

    name = "protonet"

    def __init__(self) -> None:
        super().__init__()
        self._prototypes: np.ndarray | None = None

    def fit(self, cache, view_batch, view_labels, config) -> None:
        self._cache = cache
        protos = np.stack([
            cache.features[cache.labels == n].mean(axis=0)
            for n in range(cache.n_way)
        ])
        self._prototypes, _ = normalize_rows(protos)

    def logits(self, queries):
        self._need_cache()
        queries = np.asarray(queries, dtype=np.float64)
        single = queries.ndim == 1
        q = queries[None, :] if single else queries
        q_hat, _ = normalize_rows(q)
        sims = q_hat @ self._prototypes.T
        return sims[0] if single else sims


class LinearProbe(BaseClassifier):
    """Plain linear softmax classifier trained by CE on the support view
    batch; weights start at zero (uniform predictions), so training is
    deterministic with no RNG."""

    name = "linearprob"

    def __init__(self) -> None:
        super().__init__()
        self._w: np.ndarray | None = None
        self._b: np.ndarray | None = None

    def fit(self, cache, view_batch, view_labels, config) -> None:
        self._cache = cache
        n, c = cache.n_way, cache.features.shape[1]
        params = {"w": np.zeros((n, c)), "b": np.zeros(n)}
        state = adamw_init(params, lr=config.lr)
        for it in range(config.iterations):
            logits = view_batch @ params["w"].T + params["b"]
            loss, d_logits = cross_entropy_batch(logits, view_labels)
            if not np.isfinite(loss):
                raise NonFiniteLoss("linear probe loss non-finite", iteration=it)
            grads = {"w": d_logits.T @ view_batch, "b": d_logits.sum(axis=0)}
            params, state = adamw_step(params, grads, state)
        self._w, self._b = params["w"], params["b"]

    def logits(self, queries):
        if self._w is None:
            raise UntrainedState("linearprob: fit() must run before prediction")
        return np.asarray(queries, dtype=np.float64) @ self._w.T + self._b


class ClipAdapter(BaseClassifier):
    """Visual-only bottleneck adapter: hidden = relu(x W1^T + b1), out =
    blend * (hidden W2^T + b2) + (1 - blend) * x, classified by scaled
    cosine against per-class prototypes built from the adapted support
    features. Trained by CE with gradients through both the query path and
    the prototype path."""

    name = "clip_adapter"

    def __init__(self, bottleneck_ratio: int = 4, blend: float = 0.2,
                 logit_scale: float = 100.0) -> None:
        super().__init__()
        self.ratio = bottleneck_ratio
        self.blend = blend
        self.logit_scale = logit_scale
        self._params: dict[str, np.ndarray] | None = None

    def _adapt(self, x: np.ndarray, p: dict[str, np.ndarray]) -> np.ndarray:
        hidden = np.maximum(x @ p["w1"].T + p["b1"], 0.0)
        out = hidden @ p["w2"].T + p["b2"]
        return self.blend * out + (1.0 - self.blend) * x

    def _loss_and_grads(
        self,
        p: dict[str, np.ndarray],
        batch_x: np.ndarray,
        batch_y: np.ndarray,
        cache: SupportCache,
    ) -> tuple[float, dict[str, np.ndarray]]:
        mean_mat = cache.onehot.T / cache.k_shot  # (N, NK) class-mean operator
        z_q = batch_x @ p["w1"].T + p["b1"]
        h_q = np.maximum(z_q, 0.0)
        a_q = self.blend * (h_q @ p["w2"].T + p["b2"]) + (1 - self.blend) * batch_x
        z_c = cache.features @ p["w1"].T + p["b1"]
        h_c = np.maximum(z_c, 0.0)
        a_c = self.blend * (h_c @ p["w2"].T + p["b2"]) + (1 - self.blend) * cache.features
        protos = mean_mat @ a_c  # (N, C)

        q_hat, q_norm = normalize_rows(a_q)
        p_hat, p_norm = normalize_rows(protos)
        logits = self.logit_scale * (q_hat @ p_hat.T)
        loss, d_logits = cross_entropy_batch(logits, batch_y)

        d_sims = self.logit_scale * d_logits
        d_q_hat = d_sims @ p_hat
        d_p_hat = d_sims.T @ q_hat
        d_aq = normalize_rows_backward(d_q_hat, q_hat, q_norm)
        d_protos = normalize_rows_backward(d_p_hat, p_hat, p_norm)
        d_ac = mean_mat.T @ d_protos

        grads = {k: np.zeros_like(v) for k, v in p.items()}
        for x, h, z, d_a in ((batch_x, h_q, z_q, d_aq), (cache.features, h_c, z_c, d_ac)):
            d_out = self.blend * d_a
            grads["w2"] += d_out.T @ h
            grads["b2"] += d_out.sum(axis=0)
            d_h = (d_out @ p["w2"]) * (z > 0.0)
            grads["w1"] += d_h.T @ x
            grads["b1"] += d_h.sum(axis=0)
        return loss, grads

    def fit(self, cache, view_batch, view_labels, config) -> None:
        self._cache = cache
        c = cache.features.shape[1]
        hidden = max(1, c // self.ratio)
        rng = np.random.default_rng(config.seed)
        p = {
            "w1": rng.normal(size=(hidden, c)) * np.sqrt(2.0 / c),
            "b1": np.zeros(hidden),
            "w2": rng.normal(size=(c, hidden)) * np.sqrt(1.0 / hidden),
            "b2": np.zeros(c),
        }
        state = adamw_init(p, lr=config.lr)
        for it in range(config.iterations):
            loss, grads = self._loss_and_grads(p, view_batch, view_labels, cache)
            if not np.isfinite(loss):
                raise NonFiniteLoss("clip_adapter loss non-finite", iteration=it)
            p, state = adamw_step(p, grads, state)
        self._params = p

    def logits(self, queries):
        cache = self._need_cache()
        if self._params is None:
            raise UntrainedState("clip_adapter: fit() must run before prediction")
        p = self._params
        queries = np.asarray(queries, dtype=np.float64)
        single = queries.ndim == 1
        q = queries[None, :] if single else queries
        a_q = self._adapt(q, p)
        a_c = self._adapt(cache.features, p)
        protos = (cache.onehot.T / cache.k_shot) @ a_c
        q_hat, _ = normalize_rows(a_q)
        p_hat, _ = normalize_rows(protos)
        out = self.logit_scale * (q_hat @ p_hat.T)
        return out[0] if single else out


_FACTORIES: dict[str, Callable[[], BaseClassifier]] = {
    "zip": ZipAdapter,
    "zip_f": ZipAdapterF,
    "tip": TipAdapter,
    "tip_f": TipAdapterF,
    "knn": NearestNeighbor,
    "protonet": ProtoNet,
    "linearprob": LinearProbe,
    "clip_adapter": ClipAdapter,
}


def make_classifier(kind: str, **kwargs) -> BaseClassifier:
    if kind not in _FACTORIES:
        raise ValueError(
            f"unknown classifier {kind!r}; choose from {', '.join(CLASSIFIER_NAMES)}")
    return _FACTORIES[kind](**kwargs)


# ---------------------------------------------------------------------------
# trained-parameter persistence (MVZ1 binary container)

MVZ_MAGIC = b"MVZ1"
MVZ_VERSION = 1


def save_zip_params(
    path: str | Path, params: ZipParams, cache: SupportCache, config: TrainConfig
) -> None:
    """Binary container: magic, version u32, header-length u32, JSON header,
    then float64 little-endian sections w, b, cache_features."""
    c = params.w.shape[0]
    header = {
        "channels": c,
        "cache_rows": int(params.cache_features.shape[0]),
        "classes": cache.classes,
        "n_way": cache.n_way,
        "k_shot": cache.k_shot,
        "train_cache": params.train_cache,
        "train_zip": params.train_zip,
        "beta": config.beta,
        "margin": config.margin,
        "triplet_weight": config.triplet_weight,
        "lr": config.lr,
        "iterations": config.iterations,
        "seed": config.seed,
        "adapt_cache_through_zip": config.adapt_cache_through_zip,
        "triplet_mining": config.triplet_mining,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MVZ_MAGIC)
        fh.write(struct.pack("<II", MVZ_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(params.w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.b, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.cache_features, dtype="<f8").tobytes())
        onehot_labels = np.argmax(cache.onehot, axis=1).astype("<i8")
        fh.write(onehot_labels.tobytes())


def load_zip_params(path: str | Path) -> tuple[ZipParams, SupportCache, TrainConfig]:
    data = Path(path).read_bytes()
    if data[:4] != MVZ_MAGIC:
        raise CorruptFile("bad magic, not an MVZ1 file", offset=0)
    version, hlen = struct.unpack("<II", data[4:12])
    if version != MVZ_VERSION:
        raise CorruptFile(f"unsupported version {version}", offset=4)
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    c = header["channels"]
    rows = header["cache_rows"]
    pos = 12 + hlen

    def take(count: int) -> np.ndarray:
        nonlocal pos
        nbytes = count * 8
        if pos + nbytes > len(data):
            raise CorruptFile("truncated parameter section", offset=pos)
        arr = np.frombuffer(data[pos:pos + nbytes], dtype="<f8").copy()
        pos += nbytes
        return arr

    w = take(c * c).reshape(c, c)
    b = take(c)
    cache_features = take(rows * c).reshape(rows, c)
    labels = np.frombuffer(data[pos:pos + rows * 8], dtype="<i8").astype(np.int64)
    if labels.size != rows:
        raise CorruptFile("truncated label section", offset=pos)
    params = ZipParams(
        w=w, b=b, cache_features=cache_features,
        train_cache=header["train_cache"], train_zip=header["train_zip"])
    onehot = np.zeros((rows, header["n_way"]), dtype=np.float64)
    onehot[np.arange(rows), labels] = 1.0
    cache = SupportCache(
        features=cache_features.copy(), labels=labels, onehot=onehot,
        classes=list(header["classes"]), n_way=header["n_way"], k_shot=header["k_shot"])
    config = TrainConfig(
        beta=header["beta"], margin=header["margin"],
        triplet_weight=header["triplet_weight"], lr=header["lr"],
        iterations=header["iterations"], seed=header["seed"],
        adapt_cache_through_zip=header["adapt_cache_through_zip"],
        triplet_mining=header["triplet_mining"])
    return params, cache, config
