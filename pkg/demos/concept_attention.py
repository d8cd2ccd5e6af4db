"""
Where the doc tower looks
=========================

On the text-disambiguating corpus each doc image shows the product next to
an object from another family. Only the title says which one is for sale.
This script trains the concept-fusion and image-only models on the default
plan (a couple of minutes), then prints for a few docs how much patch
attention lands on the product versus the distractor.
"""

import copy

import numpy as np

from mmretrieval.config import text_disambiguating_config
from mmretrieval.experiments import evaluate_state, prepare, train
from mmretrieval.fusion import attend, extract_concept, image_keys_values
from mmretrieval.encoders import encode_image, encode_text

cfg = text_disambiguating_config()
prepared = prepare(cfg)

state, _ = train(cfg, prepared, seed=0)
print("concept fusion Identical@1:", round(evaluate_state(state, prepared).identical_at_1, 3))

flat = copy.deepcopy(cfg)
flat.model.fusion = "image_only"
flat_state, _ = train(flat, prepared, seed=0)
print("image only     Identical@1:", round(evaluate_state(flat_state, prepared).identical_at_1, 3))

# distractor slots are random; a product patch is one that matches the product's query images
product_of = prepared.data.truth.product_of
grid = cfg.synthetic.grid
query_look = {}
for s in prepared.data.samples:
    if s.kind == "query":
        query_look.setdefault(product_of[s.id], []).append(s.raw.reshape(grid, -1).mean(axis=0))
docs = [d for d in prepared.docs if product_of[d.id] in query_look][:5]
p = state.model.params
fmap = encode_image(state.model, np.stack([d.raw for d in docs]))
k, v = image_keys_values(fmap, p["fusion.fk_w"], p["fusion.fk_b"], p["fusion.fv_w"], p["fusion.fv_b"])
c = extract_concept(encode_text(state.model, [d.tokens for d in docs]), p["fusion.m_k"], p["fusion.m_v"])
_, w = attend(k, v, c)
keep = grid - cfg.synthetic.clutter_patches
np.set_printoptions(precision=3, suppress=True)
for doc, row in zip(docs, w.value):
    look = np.mean(query_look[product_of[doc.id]], axis=0)
    dist = np.linalg.norm(doc.raw.reshape(grid, -1) - look, axis=1)
    product_patches = np.argsort(dist)[:keep]
    print(f"doc {doc.id:>5}: weights {row}  on product patches {row[product_patches].sum():.2f}")
