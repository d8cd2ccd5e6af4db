"""Weakly-supervised category construction and the synthetic corpus.

Every query image and every doc is a sample that starts in its own category.
Categories are then merged along clicked (query, doc) links and, optionally,
by clustering per-category content representatives. The canonical id of a
merged category is the smallest sample id it contains, so the result is a
deterministic function of the inputs.

The synthetic generator plants latent products inside relevance families,
draws a power-law exposure skew, and emits a noisy click log plus the ground
truth needed for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


@dataclass
class Sample:
    id: int
    kind: str                      # "query" | "doc"
    raw: np.ndarray
    tokens: list[int] = field(default_factory=list)
    category: int = -1

    def __post_init__(self):
        if self.kind not in ("query", "doc"):
            raise ValueError(f"sample kind must be 'query' or 'doc', got {self.kind!r}")
        if self.kind == "query" and self.tokens:
            raise ValueError(f"query sample {self.id} carries tokens")
        if self.kind == "doc" and not self.tokens:
            raise ValueError(f"doc sample {self.id} has no tokens")


@dataclass(frozen=True)
class Click:
    q: int
    d: int
    clicked: bool = True


@dataclass
class GroundTruth:
    product_of: dict[int, int]          # sample id -> latent product
    family_of: dict[int, int]           # product id -> relevance family


class UnionFind:
    """Disjoint sets over arbitrary hashable keys; the root of a set is its smallest key."""

    def __init__(self, keys: Iterable = ()):
        self.parent: dict = {k: k for k in keys}

    def add(self, key) -> None:
        self.parent.setdefault(key, key)

    def find(self, key):
        parent = self.parent
        root = key
        while parent[root] != root:
            root = parent[root]
        while parent[key] != root:
            parent[key], key = root, parent[key]
        return root

    def union(self, a, b) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra

    def components(self) -> dict:
        out: dict = {}
        for k in self.parent:
            out.setdefault(self.find(k), []).append(k)
        return out


# ---------------------------------------------------------------------------
# category assignment
# ---------------------------------------------------------------------------


def assign_initial_ids(samples: Sequence[Sample]) -> dict[int, int]:
    """Singleton category per sample (category id = sample id)."""
    if not samples:
        raise ValueError("no samples")
    return {s.id: s.id for s in samples}


def _merge_categories(assignment: Mapping[int, int], pairs: Iterable[tuple[int, int]]) -> dict[int, int]:
    """Union the categories named in ``pairs`` and relabel by smallest member sample id."""
    uf = UnionFind(set(assignment.values()))
    for a, b in pairs:
        uf.union(a, b)
    smallest: dict[int, int] = {}
    for sid, cat in assignment.items():
        root = uf.find(cat)
        if root not in smallest or sid < smallest[root]:
            smallest[root] = sid
    return {sid: smallest[uf.find(cat)] for sid, cat in assignment.items()}


def merge_by_clicks(assignment: Mapping[int, int], clicks: Iterable[Click]) -> dict[int, int]:
    """Merge the categories of every clicked (query, doc) pair (connected components)."""
    pairs = []
    for c in clicks:
        if c.q not in assignment or c.d not in assignment:
            raise KeyError(f"click ({c.q}, {c.d}) references an unknown sample")
        if c.clicked:
            pairs.append((assignment[c.q], assignment[c.d]))
    return _merge_categories(assignment, pairs)


def id_representatives(samples: Sequence[Sample], assignment: Mapping[int, int],
                       features: Mapping[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
    """Mean feature per category.

    ``features`` maps sample id to a vector (e.g. learned embeddings); raw
    content is used when it is omitted. Doc members are averaged when a
    category has any, since query images carry a capture-domain shift.
    """
    docs: dict[int, list[np.ndarray]] = {}
    queries: dict[int, list[np.ndarray]] = {}
    for s in samples:
        vec = s.raw if features is None else features[s.id]
        (docs if s.kind == "doc" else queries).setdefault(assignment[s.id], []).append(vec)
    cats = sorted(set(docs) | set(queries))
    return {c: np.mean(docs.get(c) or queries[c], axis=0) for c in cats}


def auto_eps(reps: np.ndarray, percentile: float = 0.3) -> float:
    """Density radius from a percentile of pairwise representative distances."""
    from scipy.spatial.distance import pdist

    if len(reps) < 2:
        return 1.0
    dist = pdist(reps)
    eps = float(np.percentile(dist, percentile))
    return eps if eps > 0 else float(dist[dist > 0].min(initial=1.0))


def merge_by_clustering(assignment: Mapping[int, int], reps: Mapping[int, np.ndarray], method: str = "density",
                        *, eps: float | None = None, eps_percentile: float = 0.3, min_points: int = 2,
                        k: int | None = None, max_iter: int = 100, seed: int = 0) -> dict[int, int]:
    """Merge categories whose representatives fall in the same cluster.

    ``density`` runs DBSCAN with radius ``eps`` (or the ``eps_percentile``
    rule) and ``min_points``; noise points stay unmerged. ``kmeans`` runs
    seeded k-means with ``k`` centres and an iteration cap.
    """
    cats = sorted(reps)
    x = np.stack([reps[c] for c in cats])
    if method == "density":
        from sklearn.cluster import DBSCAN

        if eps is None:
            eps = auto_eps(x, eps_percentile)
        if eps <= 0:
            raise ValueError("eps must be positive")
        if min_points < 1:
            raise ValueError("min_points must be >= 1")
        labels = DBSCAN(eps=eps, min_samples=min_points).fit_predict(x)
    elif method == "kmeans":
        from sklearn.cluster import KMeans

        if k is None or not 1 <= k <= len(cats):
            raise ValueError(f"k must lie in [1, {len(cats)}], got {k}")
        labels = KMeans(n_clusters=k, n_init=10, max_iter=max_iter, random_state=seed).fit_predict(x)
    else:
        raise ValueError(f"unknown clustering method {method!r}")

    first: dict[int, int] = {}
    pairs = []
    for cat, lab in zip(cats, labels):
        if lab < 0:
            continue
        if lab in first:
            pairs.append((first[lab], cat))
        else:
            first[lab] = cat
    return _merge_categories(assignment, pairs)


@dataclass
class OrgConfig:
    click_merge: bool = True
    clustering: str | None = "density"    # None | "density" | "kmeans"
    order: str = "clicks_first"           # clicks_first | clustering_first
    eps: float | None = None
    eps_percentile: float = 0.3
    min_points: int = 2
    k: int | None = None
    max_iter: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.clustering not in (None, "density", "kmeans"):
            raise ValueError(f"unknown clustering method {self.clustering!r}")
        if self.order not in ("clicks_first", "clustering_first"):
            raise ValueError(f"unknown organization order {self.order!r}")


def organize(samples: Sequence[Sample], clicks: Sequence[Click], cfg: OrgConfig) -> tuple[dict[int, int], dict]:
    """Full organization pipeline; returns the assignment and an ID-count report."""
    cfg.validate()
    assignment = assign_initial_ids(samples)
    report = {"initial_ids": len(set(assignment.values()))}

    def by_clicks(a):
        a = merge_by_clicks(a, clicks) if cfg.click_merge else a
        report["after_clicks"] = len(set(a.values()))
        return a

    def by_clustering(a):
        if cfg.clustering is not None:
            reps = id_representatives(samples, a)
            a = merge_by_clustering(a, reps, cfg.clustering, eps=cfg.eps, eps_percentile=cfg.eps_percentile,
                                    min_points=cfg.min_points, k=cfg.k, max_iter=cfg.max_iter, seed=cfg.seed)
        report["after_clustering"] = len(set(a.values()))
        return a

    steps = (by_clicks, by_clustering) if cfg.order == "clicks_first" else (by_clustering, by_clicks)
    for step in steps:
        assignment = step(assignment)
    report["final_ids"] = len(set(assignment.values()))
    for s in samples:
        s.category = assignment[s.id]
    return assignment, report


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    num_products: int = 200
    products_per_family: int = 4
    exposure_exponent: float = 0.0
    samples_per_product: tuple[int, int] = (20, 40)
    query_fraction: float = 0.3
    clicks_per_query: int = 3
    unclicked_per_query: int = 2
    click_noise_rate: float = 0.0
    vocab_size: int = 256
    n_raw: int = 64
    grid: int = 4
    family_spread: float = 1.0      # product offset from its family prototype
    sample_noise: float = 0.3       # per-sample feature noise
    query_shift: float = 0.5        # fixed capture-domain offset on query images
    clutter_patches: int = 0        # doc grid patches replaced by an object from another family
    uniform_patches: bool = False   # an object looks the same in every grid patch
    text_len: tuple[int, int] = (4, 8)
    family_tokens: int = 3          # tokens reserved per family
    product_tokens: int = 0         # tokens reserved per product
    family_token_rate: float = 0.6  # chance a doc token comes from its family's reserved set
    product_token_rate: float = 0.0
    holdout_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        for key in ("query_fraction", "click_noise_rate", "family_token_rate", "product_token_rate",
                    "holdout_fraction"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ValueError(f"synthetic.{key} must lie in [0, 1]")
        if self.family_token_rate + self.product_token_rate > 1.0:
            raise ValueError("family_token_rate + product_token_rate must not exceed 1")
        for key in ("num_products", "products_per_family", "vocab_size", "n_raw", "grid"):
            if getattr(self, key) < 1:
                raise ValueError(f"synthetic.{key} must be positive")
        lo, hi = self.samples_per_product
        if not 2 <= lo <= hi:
            raise ValueError("samples_per_product needs 2 <= min <= max")
        tl, th = self.text_len
        if not 1 <= tl <= th:
            raise ValueError("text_len needs 1 <= min <= max")
        if self.n_raw % self.grid:
            raise ValueError("n_raw must be divisible by grid")
        if not 0 <= self.clutter_patches < self.grid:
            raise ValueError("clutter_patches must leave at least one patch for the main object")
        num_families = -(-self.num_products // self.products_per_family)
        if num_families * self.family_tokens + self.num_products * self.product_tokens > self.vocab_size:
            raise ValueError("vocab_size too small for the reserved family/product tokens")

    @property
    def num_families(self) -> int:
        return -(-self.num_products // self.products_per_family)


@dataclass
class SyntheticData:
    samples: list[Sample]             # training samples (held-out queries removed)
    clicks: list[Click]               # clicks among training samples
    truth: GroundTruth                # covers training and held-out samples
    test_queries: list[Sample]


def exposure_counts(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-product sample counts: power-law exposure weights over a random product ranking.

    Without skew every count lies in ``samples_per_product``. With skew the
    same total budget is spread by the power law and only a floor of two
    samples (one query, one doc) is kept, so popular products can dominate.
    """
    lo, hi = spec.samples_per_product
    p = spec.num_products
    rank = rng.permutation(p) + 1
    weights = rank.astype(float) ** (-spec.exposure_exponent)
    weights /= weights.sum()
    if spec.exposure_exponent == 0:
        extra = rng.multinomial(int(round(p * (hi - lo) / 2)), weights)
        return np.minimum(lo + extra, hi)
    floor = 2
    budget = int(round(p * (lo + hi) / 2))
    return floor + rng.multinomial(budget - floor * p, weights)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    p, g = spec.num_products, spec.grid
    patch = spec.n_raw // g
    fam_count = spec.num_families
    family_of = {pid: pid // spec.products_per_family for pid in range(p)}

    rows = 1 if spec.uniform_patches else g
    fam_proto = rng.standard_normal((fam_count, rows, patch))
    prod_proto = np.stack([fam_proto[family_of[i]] + spec.family_spread * rng.standard_normal((rows, patch))
                           for i in range(p)])
    query_offset = spec.query_shift * rng.standard_normal((rows, patch))
    if rows != g:
        prod_proto = np.repeat(prod_proto, g, axis=1)
        query_offset = np.repeat(query_offset, g, axis=0)

    fam_tok = np.arange(fam_count * spec.family_tokens).reshape(fam_count, spec.family_tokens)
    base = fam_tok.size
    prod_tok = base + np.arange(p * spec.product_tokens).reshape(p, spec.product_tokens)

    counts = exposure_counts(spec, rng)
    samples: list[Sample] = []
    product_of: dict[int, int] = {}
    queries_of: dict[int, list[int]] = {}
    docs_of: dict[int, list[int]] = {}

    def doc_tokens(pid: int) -> list[int]:
        n = int(rng.integers(spec.text_len[0], spec.text_len[1] + 1))
        out = []
        for _ in range(n):
            u = rng.random()
            if u < spec.family_token_rate and spec.family_tokens:
                out.append(int(rng.choice(fam_tok[family_of[pid]])))
            elif u < spec.family_token_rate + spec.product_token_rate and spec.product_tokens:
                out.append(int(rng.choice(prod_tok[pid])))
            else:
                out.append(int(rng.integers(spec.vocab_size)))
        return out

    for pid in range(p):
        n = int(counts[pid])
        nq = min(n - 1, max(1, int(round(spec.query_fraction * n))))
        for j in range(n):
            sid = len(samples)
            img = prod_proto[pid] + spec.sample_noise * rng.standard_normal((g, patch))
            if j < nq:
                img = img + query_offset
                samples.append(Sample(sid, "query", img.reshape(-1)))
                queries_of.setdefault(pid, []).append(sid)
            else:
                if spec.clutter_patches:
                    other = _other_family_product(rng, pid, family_of, p)
                    slots = rng.choice(g, size=spec.clutter_patches, replace=False)
                    img[slots] = prod_proto[other][slots] + spec.sample_noise * rng.standard_normal(
                        (spec.clutter_patches, patch))
                samples.append(Sample(sid, "doc", img.reshape(-1), doc_tokens(pid)))
                docs_of.setdefault(pid, []).append(sid)
            product_of[sid] = pid

    all_docs = np.array([s.id for s in samples if s.kind == "doc"])
    clicks: list[Click] = []
    for pid in range(p):
        own = docs_of[pid]
        for q in queries_of[pid]:
            for _ in range(spec.clicks_per_query):
                if rng.random() < spec.click_noise_rate:
                    d = int(rng.choice(all_docs))
                    while product_of[d] == pid and len(own) < len(all_docs):
                        d = int(rng.choice(all_docs))
                else:
                    d = int(rng.choice(own))
                clicks.append(Click(q, d, True))
            for _ in range(spec.unclicked_per_query):
                clicks.append(Click(q, int(rng.choice(all_docs)), False))

    held: set[int] = set()
    for pid in range(p):
        qs = queries_of[pid]
        n_hold = int(round(spec.holdout_fraction * len(qs)))
        if n_hold:
            held.update(int(x) for x in rng.choice(qs, size=n_hold, replace=False))
    train = [s for s in samples if s.id not in held]
    test = [s for s in samples if s.id in held]
    train_clicks = [c for c in clicks if c.q not in held]
    return SyntheticData(train, train_clicks, GroundTruth(product_of, family_of), test)


def _other_family_product(rng: np.random.Generator, pid: int, family_of: Mapping[int, int], p: int) -> int:
    if len(set(family_of.values())) == 1:
        return int(rng.choice([i for i in range(p) if i != pid] or [pid]))
    while True:
        other = int(rng.integers(p))
        if family_of[other] != family_of[pid]:
            return other


def clip_samples_per_category(samples: Sequence[Sample], max_per_category: int, seed: int = 0) -> list[Sample]:
    """Keep at most ``max_per_category`` samples of each category (seeded choice, id order kept)."""
    rng = np.random.default_rng(seed)
    by_cat: dict[int, list[Sample]] = {}
    for s in samples:
        by_cat.setdefault(s.category, []).append(s)
    keep: set[int] = set()
    for cat in sorted(by_cat):
        members = by_cat[cat]
        if len(members) <= max_per_category:
            keep.update(m.id for m in members)
        else:
            idx = rng.choice(len(members), size=max_per_category, replace=False)
            keep.update(members[i].id for i in idx)
    return [s for s in samples if s.id in keep]
