"""
Organizing raw samples into category IDs
========================================

Every sample starts as its own ID. Clicks from a search log glue query
images to the docs they opened, and a density clustering pass then merges
IDs whose members look alike. The numbers below show how far each stage
shrinks the label space on the default synthetic corpus.
"""

import numpy as np

from mmretrieval.data_org import OrgConfig, SyntheticSpec, generate_synthetic, organize

spec = SyntheticSpec(seed=0)
data = generate_synthetic(spec)
print(f"{len(data.samples)} training samples from {spec.num_products} latent products")
print(f"{sum(c.clicked for c in data.clicks)} clicked pairs in the log")

assignment, report = organize(data.samples, data.clicks, OrgConfig())
for stage in ("initial_ids", "after_clicks", "after_clustering", "final_ids"):
    print(f"  {stage:<17} {report[stage]:>6}")

# how pure are the final IDs? count latent products per ID
product_of = data.truth.product_of
members = {}
for sid, cat in assignment.items():
    members.setdefault(cat, set()).add(product_of[sid])
sizes = np.array([len(v) for v in members.values()])
print(f"IDs holding exactly one product: {np.mean(sizes == 1):.1%}")
print(f"largest number of products under one ID: {sizes.max()}")
