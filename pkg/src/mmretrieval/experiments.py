"""End-to-end runs on synthetic data: organize, train the curriculum, evaluate
held-out queries; plus the fusion ablation and the samples-per-category study.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data_org import SyntheticData, clip_samples_per_category, generate_synthetic, organize
from .encoders import RetrievalModel
from .retrieval_eval import METRIC_KEYS, MetricsReport, build_judgments, evaluate
from .training import TrainingSet, TrainState, run_curriculum, split_medium

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    data: SyntheticData
    org_report: dict

    @property
    def docs(self):
        return [s for s in self.data.samples if s.kind == "doc"]


def prepare(cfg: RunConfig) -> PreparedData:
    data = generate_synthetic(cfg.synthetic)
    _, report = organize(data.samples, data.clicks, cfg.organization)
    return PreparedData(data, report)


def new_state(cfg: RunConfig, seed: int) -> TrainState:
    model = RetrievalModel(copy.deepcopy(cfg.model), seed=seed)
    return TrainState(model=model, store=None, loss_cfg=copy.deepcopy(cfg.loss), lr=cfg.train.lr, seed=seed)


def datasets_for(cfg: RunConfig, samples, seed: int) -> dict[str, TrainingSet]:
    return {"medium": TrainingSet(split_medium(samples, cfg.train.medium_fraction, seed)),
            "large": TrainingSet(samples)}


def train(cfg: RunConfig, prepared: PreparedData, seed: int, samples=None, with_snapshots: bool = False):
    """Train the configured curriculum; returns ``(state, report)``."""
    samples = prepared.data.samples if samples is None else samples
    state = new_state(cfg, seed)
    snapshot = (lambda st: evaluate_state(st, prepared).to_dict()) if with_snapshots else None
    return run_curriculum(state, cfg.plan, datasets_for(cfg, samples, seed), cfg.train, snapshot=snapshot)


def evaluate_state(state: TrainState, prepared: PreparedData) -> MetricsReport:
    """Held-out queries against the whole doc corpus."""
    docs = prepared.docs
    queries = prepared.data.test_queries
    judgments = build_judgments(queries, docs, prepared.data.truth)
    return evaluate(state.model, queries, docs, judgments)


def run_seeds(cfg: RunConfig, seeds: Sequence[int], prepared: PreparedData | None = None,
              samples=None) -> dict:
    prepared = prepared or prepare(cfg)
    per_seed = {}
    for seed in seeds:
        state, _ = train(cfg, prepared, seed, samples=samples)
        per_seed[seed] = evaluate_state(state, prepared).to_dict()
        log.info("seed %d: %s", seed, per_seed[seed])
    return {"per_seed": per_seed, "mean": _mean(per_seed.values())}


def _mean(reports) -> dict[str, float]:
    reports = list(reports)
    return {k: float(np.mean([r[k] for r in reports])) for k in METRIC_KEYS}


VARIANT_LABELS = {"concept": "concept fusion", "image_only": "image only (doc text dropped)",
                  "average": "average fusion"}


def run_ablation(cfg: RunConfig, variants: Sequence[str] | None = None, seeds: Sequence[int] | None = None) -> dict:
    """Same data, seeds and budgets for every doc-tower variant."""
    variants = list(variants or cfg.variants)
    seeds = list(cfg.seeds if seeds is None else seeds)
    prepared = prepare(cfg)
    out = {}
    for v in variants:
        vcfg = copy.deepcopy(cfg)
        vcfg.model.fusion = v
        vcfg.validate()
        out[v] = run_seeds(vcfg, seeds, prepared)
    return out


def sample_count_study(cfg: RunConfig, caps: Sequence[int] | None = None, seeds: Sequence[int] | None = None) -> dict:
    """Clip training samples per category to each cap; held-out evaluation is unchanged."""
    caps = list(cfg.sample_caps if caps is None else caps)
    seeds = list(cfg.seeds if seeds is None else seeds)
    prepared = prepare(cfg)
    out = {}
    for cap in caps:
        clipped = clip_samples_per_category(prepared.data.samples, cap, seed=cfg.synthetic.seed)
        out[cap] = run_seeds(cfg, seeds, prepared, samples=clipped)
    return out
