"""Proxy classification loss with an additive angular margin.

For sample ``i`` with label ``y`` and unit embedding ``z``::

    loss_i = -log( e^{s cos(theta_y + m)} / (e^{s cos(theta_y + m)} + sum_{c != y} e^{s cos theta_c}) )

where ``cos theta_c = w_c . z`` and the sum runs over every category, or, with
KNN pruning enabled, over the K proxies most similar to ``w_y`` (cached and
refreshed every ``refresh_interval`` iterations).

Proxy rows are split into contiguous virtual shards. Sharding never changes
a logit; it only determines which shard is charged for each dot product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


@dataclass
class LossConfig:
    s: float = 64.0
    m: float = 0.5
    knn_fraction: float = 0.1
    refresh_interval: int = 1000
    knn_enabled: bool = True
    shards: int = 4

    def validate(self) -> None:
        if self.s <= 0:
            raise ValueError("loss.s must be positive")
        if not 0 <= self.m < math.pi / 2:
            raise ValueError("loss.m must lie in [0, pi/2)")
        if not 0 < self.knn_fraction <= 1:
            raise ValueError("loss.knn_fraction must lie in (0, 1]")
        if self.refresh_interval < 1:
            raise ValueError("loss.refresh_interval must be >= 1")
        if self.shards < 1:
            raise ValueError("loss.shards must be >= 1")


def shard_layout(num_rows: int, shards: int) -> list[tuple[int, int]]:
    """Contiguous ``[start, stop)`` ranges that partition ``[0, num_rows)``."""
    n = max(1, min(shards, num_rows))
    bounds = np.linspace(0, num_rows, n + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


class ProxyStore:
    """Category centres ``W`` (one unit row per category) and their shard layout."""

    def __init__(self, w: np.ndarray, shards: int = 4):
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1:
            raise ShapeError(f"proxy matrix must be (C, d) with C >= 1, got {w.shape}")
        self.w = Tensor(w, trainable=True, name="proxies.w")
        self.shards = shards
        self.layout = shard_layout(w.shape[0], shards)

    @classmethod
    def random(cls, num_categories: int, dim: int, rng: np.random.Generator, shards: int = 4) -> "ProxyStore":
        store = cls(_random_unit_rows(rng, num_categories, dim), shards)
        return store

    @property
    def num_categories(self) -> int:
        return self.w.shape[0]

    @property
    def dim(self) -> int:
        return self.w.shape[1]

    def renormalize(self) -> None:
        v = self.w.value
        v /= np.sqrt((v * v).sum(axis=1, keepdims=True))

    def grow(self, num_categories: int, rng: np.random.Generator) -> None:
        """Append freshly random unit rows until there are ``num_categories`` proxies."""
        extra = num_categories - self.num_categories
        if extra < 0:
            raise ValueError("proxy store cannot shrink")
        if extra:
            trainable = self.w.trainable
            self.w = Tensor(np.vstack([self.w.value, _random_unit_rows(rng, extra, self.dim)]),
                            trainable=True, name="proxies.w")
            self.w.trainable = self.w.requires_grad = trainable
            self.layout = shard_layout(self.num_categories, self.shards)

    def shard_of(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_categories):
            raise IndexError("candidate id outside all shards")
        starts = np.array([a for a, _ in self.layout])
        return np.searchsorted(starts, ids, side="right") - 1


def _random_unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    w = rng.standard_normal((n, d))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


@dataclass
class ProxySimCache:
    topk: np.ndarray            # (C, K) candidate ids, most similar first, row c starts with c
    built_at_iter: int = 0
    refresh_interval: int = 1000

    @property
    def k(self) -> int:
        return self.topk.shape[1]

    def due(self, iteration: int) -> bool:
        return iteration >= self.built_at_iter + self.refresh_interval


def knn_size(num_categories: int, fraction: float) -> int:
    return min(num_categories, max(1, int(math.floor(fraction * num_categories + 0.5))))


def refresh_cache(store: ProxyStore, cfg: LossConfig, iteration: int = 0) -> ProxySimCache:
    """Rebuild each proxy's top-K most cosine-similar proxies.

    The proxy itself always comes first; the rest are ordered by similarity
    descending with ties going to the lower category id.
    """
    w = store.w.value
    c = w.shape[0]
    k = knn_size(c, cfg.knn_fraction)
    sim = w @ w.T
    ids = np.arange(c)
    topk = np.empty((c, k), dtype=np.int64)
    for row in range(c):
        s = sim[row].copy()
        s[row] = np.inf
        order = np.lexsort((ids, -s))
        topk[row] = order[:k]
    return ProxySimCache(topk=topk, built_at_iter=iteration, refresh_interval=cfg.refresh_interval)


def candidate_ids(labels: np.ndarray, num_categories: int, cfg: LossConfig,
                  cache: ProxySimCache | None) -> np.ndarray:
    """Per-sample candidate id matrix ``(N, K)``, ascending within each row."""
    labels = np.asarray(labels, dtype=np.int64)
    if not cfg.knn_enabled:
        return np.broadcast_to(np.arange(num_categories), (labels.size, num_categories))
    if cache is None:
        raise ValueError("KNN pruning enabled but no similarity cache given")
    if cache.topk.shape[0] != num_categories:
        raise ValueError("similarity cache is stale: built for a different category count")
    return np.sort(cache.topk[labels], axis=1)


@dataclass
class LossStats:
    dot_products: int
    per_shard: list[int] = field(default_factory=list)


def margin_loss(z, labels, store: ProxyStore, cfg: LossConfig, cache: ProxySimCache | None = None,
                norm_tol: float | None = 1e-6) -> tuple[Tensor, LossStats]:
    """Mean margin loss over the batch and the dot-product accounting for it.

    ``norm_tol`` guards the unit-norm preconditions on ``z`` and the proxies;
    pass ``None`` to skip the check (finite-difference probes need that).
    """
    z = nx.as_tensor(z)
    labels = np.asarray(labels, dtype=np.int64)
    w = store.w
    n, d = z.shape
    num_c = store.num_categories
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_c:
        raise IndexError(f"label out of range [0, {num_c})")
    if norm_tol is not None:
        if np.abs(np.linalg.norm(z.value, axis=1) - 1.0).max() > norm_tol:
            raise ValueError("embeddings are not unit-norm")
        if np.abs(np.linalg.norm(w.value, axis=1) - 1.0).max() > norm_tol:
            raise ValueError("proxy rows are not unit-norm")

    cand = candidate_ids(labels, num_c, cfg, cache)
    pos = np.argmax(cand == labels[:, None], axis=1)
    k = cand.shape[1]
    wc = nx.take_rows(w, cand)                                            # (N, K, d)
    cos = nx.reshape(nx.matmul(wc, nx.reshape(z, (n, d, 1))), (n, k))     # (N, K)
    cos_y = nx.pick(cos, pos)
    sin_y = nx.sqrt_clamped(nx.sub(1.0, nx.mul(cos_y, cos_y)))
    cos_margin = nx.sub(nx.mul(cos_y, math.cos(cfg.m)), nx.mul(sin_y, math.sin(cfg.m)))
    target = nx.mul(cos_margin, cfg.s)
    onehot = np.zeros((n, k), dtype=bool)
    onehot[np.arange(n), pos] = True
    logits = nx.where(onehot, nx.reshape(target, (n, 1)), nx.mul(cos, cfg.s))
    loss = nx.mean(nx.sub(nx.logsumexp(logits, axis=-1), target))

    shard_idx = store.shard_of(cand.reshape(-1))
    per_shard = np.bincount(shard_idx, minlength=len(store.layout)).tolist()
    return loss, LossStats(dot_products=int(cand.size), per_shard=per_shard)


def sharded_logits(z, store: ProxyStore, cand) -> tuple[dict[int, float], list[int]]:
    """Cosine logits ``w_c . z`` for ``cand``, each computed by the shard owning ``c``.

    Returns ``({category id: logit}, per-shard dot-product counts)`` with the
    mapping ordered by ascending id. Every dot product is reduced in the same
    order regardless of the layout, so results do not depend on it.
    """
    z = np.asarray(z.value if isinstance(z, Tensor) else z, dtype=np.float64)
    cand = np.unique(np.asarray(cand, dtype=np.int64))
    owner = store.shard_of(cand)
    w = store.w.value
    gathered: dict[int, float] = {}
    counts = []
    for s, (start, stop) in enumerate(store.layout):
        own = cand[owner == s]
        counts.append(int(own.size))
        if own.size:
            vals = (w[own] * z).sum(axis=1)
            gathered.update(zip(own.tolist(), vals.tolist()))
    return {c: gathered[c] for c in sorted(gathered)}, counts


def shard_partition(cand, store: ProxyStore) -> list[list[int]]:
    """Which candidate ids each shard owns (ascending)."""
    cand = np.unique(np.asarray(cand, dtype=np.int64))
    owner = store.shard_of(cand)
    return [cand[owner == s].tolist() for s in range(len(store.layout))]
