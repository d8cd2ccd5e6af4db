"""
Train a small model and run a search
====================================

A shortened curriculum on a 60-product corpus: end to end on a quarter of
the categories, proxies alone with the towers frozen, then end to end on
everything. Afterwards one held-out query image is searched against all docs.
"""

import numpy as np

from mmretrieval.config import RunConfig
from mmretrieval.data_org import SyntheticSpec
from mmretrieval.experiments import evaluate_state, prepare, train
from mmretrieval.retrieval_eval import EmbeddingIndex, embed_samples, search_topk
from mmretrieval.training import TOWER_GROUPS, CurriculumPhase

cfg = RunConfig()
cfg.synthetic = SyntheticSpec(num_products=60, seed=3)
cfg.plan = [CurriculumPhase("A", "medium", (), 300),
            CurriculumPhase("B", "large", TOWER_GROUPS, 200, stop_on_plateau=True),
            CurriculumPhase("C", "large", (), 1200)]
prepared = prepare(cfg)

state, report = train(cfg, prepared, seed=0, with_snapshots=True)
for phase in report["phases"]:
    losses = phase["losses"]
    print(f"phase {phase['phase']}: {len(losses):>5} steps, loss {losses[0]:.3f} -> {losses[-1]:.3f}, "
          f"Identical@1 {phase['metrics']['identical_at_1']:.3f}")

final = evaluate_state(state, prepared).to_dict()
print({k: round(v, 3) for k, v in final.items()})

docs = prepared.docs
index = EmbeddingIndex([d.id for d in docs], embed_samples(state.model, docs))
query = prepared.data.test_queries[0]
q_emb = embed_samples(state.model, [query])[0]
product_of = prepared.data.truth.product_of
print(f"query {query.id} shows product {product_of[query.id]}")
for doc_id, score in search_topk(q_emb, index, 5):
    print(f"  doc {doc_id:>5}  cos {score:.3f}  product {product_of[doc_id]}")
