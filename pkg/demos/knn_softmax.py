"""
Pruning the softmax to nearby proxies
=====================================

With many categories, most negatives in the margin loss contribute almost
nothing. Keeping only the K proxies closest to each label's proxy saves most
of the dot products. Here the proxies come from a clustered layout, the way
trained proxies end up, and the pruned loss is compared with the full one.
"""

import numpy as np

from mmretrieval.proxy_loss import LossConfig, ProxyStore, knn_size, margin_loss, refresh_cache

rng = np.random.default_rng(0)
C, d, n = 1000, 32, 64

# 50 families of 20 proxies each: near neighbours are family members
centers = rng.standard_normal((50, d))
w = np.repeat(centers, 20, axis=0) + 0.35 * rng.standard_normal((C, d))
w /= np.linalg.norm(w, axis=1, keepdims=True)
store = ProxyStore(w, shards=4)

labels = rng.integers(0, C, size=n)
z = w[labels] + 0.15 * rng.standard_normal((n, d))
z /= np.linalg.norm(z, axis=1, keepdims=True)

full, full_stats = margin_loss(z, labels, store, LossConfig(knn_enabled=False))
print(f"full loss      {full.item():.5f}   dot products {full_stats.dot_products}")

for frac in (0.01, 0.05, 0.1, 0.3):
    cfg = LossConfig(knn_fraction=frac)
    pruned, stats = margin_loss(z, labels, store, cfg, refresh_cache(store, cfg))
    rel = abs(pruned.item() - full.item()) / full.item()
    print(f"K={knn_size(C, frac):>4}  loss {pruned.item():.5f}  rel dev {rel:.2e}  "
          f"dot products {stats.dot_products:>6}  per shard {stats.per_shard}")
