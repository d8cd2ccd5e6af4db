"""Curriculum training with plain SGD.

Three phases by default: end-to-end on a medium subset of categories (A),
proxies only with every tower frozen on the full set (B, new categories get
fresh random proxies), then end-to-end on the full set (C).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .data_org import Sample
from .encoders import RetrievalModel, query_embed
from .fusion import doc_embed
from .proxy_loss import LossConfig, ProxySimCache, ProxyStore, margin_loss, refresh_cache

log = logging.getLogger(__name__)

TOWER_GROUPS = ("backbone", "text", "fusion", "query_transform", "doc_transform")


@dataclass
class CurriculumPhase:
    name: str
    dataset: str = "large"                 # medium | large
    frozen: tuple[str, ...] = ()
    iterations: int = 1000
    batch_size: int = 32
    stop_on_plateau: bool = False

    @classmethod
    def from_dict(cls, d: Mapping) -> "CurriculumPhase":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown phase keys: {sorted(unknown)}")
        d = dict(d)
        d["frozen"] = tuple(d.get("frozen", ()))
        return cls(**d)


def default_plan() -> list[CurriculumPhase]:
    return [
        CurriculumPhase("A", "medium", (), 1000),
        CurriculumPhase("B", "large", TOWER_GROUPS, 500, stop_on_plateau=True),
        CurriculumPhase("C", "large", (), 4000),
    ]


@dataclass
class TrainConfig:
    lr: float = 0.001
    plateau_window: int = 100
    plateau_tol: float = 1e-3
    medium_fraction: float = 0.25


class TrainingSet:
    """Samples with dense arrays for batching; labels are category ids."""

    def __init__(self, samples: Sequence[Sample]):
        if not samples:
            raise ValueError("empty training set")
        self.samples = list(samples)
        self.raw = np.stack([s.raw for s in self.samples])
        self.is_query = np.array([s.kind == "query" for s in self.samples])
        self.tokens = [s.tokens for s in self.samples]
        self.categories = np.array([s.category for s in self.samples], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.samples)

    def category_ids(self) -> list[int]:
        return sorted(set(self.categories.tolist()))


def split_medium(samples: Sequence[Sample], fraction: float, seed: int) -> list[Sample]:
    """Samples of a seeded ``fraction`` of categories."""
    cats = sorted({s.category for s in samples})
    rng = np.random.default_rng([seed, 7919])
    n = max(1, int(round(fraction * len(cats))))
    keep = set(rng.choice(cats, size=n, replace=False).tolist())
    return [s for s in samples if s.category in keep]


@dataclass
class TrainState:
    model: RetrievalModel
    store: ProxyStore | None
    loss_cfg: LossConfig
    lr: float = 0.001
    seed: int = 0
    iteration: int = 0
    label_of: dict[int, int] = field(default_factory=dict)   # category id -> proxy row
    cache: ProxySimCache | None = None
    log: list[dict] = field(default_factory=list)
    phase_log: list[dict] = field(default_factory=list)

    def ensure_categories(self, categories: Sequence[int], rng: np.random.Generator) -> int:
        """Give unseen categories fresh random unit proxies; returns how many were added."""
        new = [c for c in sorted(categories) if c not in self.label_of]
        for c in new:
            self.label_of[c] = len(self.label_of)
        d = self.model.cfg.d
        if self.store is None:
            self.store = ProxyStore.random(len(self.label_of), d, rng, self.loss_cfg.shards)
        else:
            self.store.grow(len(self.label_of), rng)
        return len(new)

    def all_params(self) -> list[nx.Tensor]:
        params = self.model.trainables()
        if self.store is not None:
            params.append(self.store.w)
        return params

    def param_hash(self) -> str:
        import hashlib

        h = hashlib.sha256(self.model.group_hash(TOWER_GROUPS + ("proxies",)).encode())
        if self.store is not None:
            h.update(np.ascontiguousarray(self.store.w.value).tobytes())
        return h.hexdigest()


def _set_frozen(state: TrainState, frozen: Sequence[str]) -> None:
    state.model.set_frozen([g for g in frozen if g != "proxies"])
    if state.store is not None:
        w = state.store.w
        w.trainable = w.requires_grad = "proxies" not in frozen


def _embed_batch(state: TrainState, data: TrainingSet, idx: np.ndarray,
                 fixed_z: np.ndarray | None) -> tuple[nx.Tensor, np.ndarray]:
    """Embeddings for the batch in (queries, docs) order, and the matching sample indices."""
    q_idx = idx[data.is_query[idx]]
    d_idx = idx[~data.is_query[idx]]
    if fixed_z is not None:
        order = np.concatenate([q_idx, d_idx])
        return nx.Tensor(fixed_z[order]), order
    model = state.model
    parts, order = [], []
    # a lone sample on one side cannot form batch statistics; it is dropped from this step
    if len(q_idx) >= 2:
        train_q = model["query_transform.w1"].trainable
        parts.append(query_embed(model, data.raw[q_idx], training=train_q))
        order.append(q_idx)
    if len(d_idx) >= 2:
        train_d = model["doc_transform.w1"].trainable
        parts.append(doc_embed(model, data.raw[d_idx], [data.tokens[i] for i in d_idx], training=train_d))
        order.append(d_idx)
    if not parts:
        raise ValueError("batch has fewer than two samples on every side")
    return nx.concat(parts, axis=0), np.concatenate(order)


def sgd_step(state: TrainState, data: TrainingSet, idx: np.ndarray, phase: str = "",
             fixed_z: np.ndarray | None = None) -> float:
    """One forward/backward/update on the samples ``idx``. Returns the batch loss.

    On any numeric failure the parameters, batch-norm statistics and counters
    are left as they were and the exception propagates.
    """
    cfg = state.loss_cfg
    old_cache = state.cache
    if cfg.knn_enabled and (state.cache is None or state.cache.due(state.iteration)):
        state.cache = refresh_cache(state.store, cfg, state.iteration)
    params = state.all_params()
    buffers = {k: p.value.copy() for k, p in state.model.params.items() if k.endswith(("running_mean", "running_var"))}
    try:
        nx.zero_grads([p for p in params if p.trainable])
        with nx.Tape() as tape:
            z, order = _embed_batch(state, data, np.asarray(idx), fixed_z)
            labels = np.array([state.label_of[c] for c in data.categories[order]])
            loss, stats = margin_loss(z, labels, state.store, cfg, state.cache)
        nx.backward(tape, loss)
        for p in params:
            if p.trainable and not np.isfinite(p.grad).all():
                raise nx.NonFiniteError(f"non-finite gradient for {p.name}")
    except Exception:
        for k, v in buffers.items():
            state.model.params[k].value[...] = v
        state.cache = old_cache
        raise
    for p in params:
        if p.trainable:
            p.value -= state.lr * p.grad
    if state.store.w.trainable and state.lr != 0:
        state.store.renormalize()
    state.iteration += 1
    value = loss.item()
    state.log.append({"iter": state.iteration, "phase": phase, "loss": value,
                      "dot_products_total": stats.dot_products, "per_shard": stats.per_shard})
    return value


def _fixed_embeddings(state: TrainState, data: TrainingSet, chunk: int = 512) -> np.ndarray:
    from .retrieval_eval import embed_samples

    return embed_samples(state.model, data.samples, chunk)


def run_phase(state: TrainState, phase: CurriculumPhase, data: TrainingSet, cfg: TrainConfig,
              phase_index: int = 0) -> TrainState:
    """Run one curriculum phase in place; frozen groups are left bit-identical."""
    rng = np.random.default_rng([state.seed, phase_index])
    if phase.iterations == 0:
        state.phase_log.append({"phase": phase.name, "dataset": phase.dataset, "start_iter": state.iteration,
                                "iterations": 0, "new_proxies": 0, "stopped_on_plateau": False, "losses": []})
        return state
    added = state.ensure_categories(data.category_ids(), rng)
    _set_frozen(state, phase.frozen)
    if state.loss_cfg.knn_enabled:
        state.cache = refresh_cache(state.store, state.loss_cfg, state.iteration)
    towers_frozen = all(g in phase.frozen for g in TOWER_GROUPS)
    fixed_z = _fixed_embeddings(state, data) if towers_frozen else None

    losses: list[float] = []
    n = len(data)
    bs = min(phase.batch_size, n)
    start_iter = state.iteration
    stopped_early = False
    for it in range(phase.iterations):
        idx = rng.choice(n, size=bs, replace=False)
        losses.append(sgd_step(state, data, idx, phase.name, fixed_z))
        w = cfg.plateau_window
        if phase.stop_on_plateau and len(losses) >= 2 * w and len(losses) % w == 0:
            prev = float(np.mean(losses[-2 * w:-w]))
            cur = float(np.mean(losses[-w:]))
            if prev <= 0 or (prev - cur) / prev < cfg.plateau_tol:
                stopped_early = True
                break
    _set_frozen(state, ())
    entry = {"phase": phase.name, "dataset": phase.dataset, "start_iter": start_iter,
             "iterations": state.iteration - start_iter, "new_proxies": added,
             "stopped_on_plateau": stopped_early, "losses": losses}
    state.phase_log.append(entry)
    log.info("phase %s: %d iterations, final loss %s", phase.name, entry["iterations"],
             f"{losses[-1]:.4f}" if losses else "n/a")
    return state


def run_curriculum(state: TrainState, plan: Sequence[CurriculumPhase], datasets: Mapping[str, TrainingSet],
                   cfg: TrainConfig, start_phase: int = 0,
                   snapshot: Callable[[TrainState], dict] | None = None,
                   on_phase_end: Callable[[TrainState, int], None] | None = None) -> tuple[TrainState, dict]:
    """Run ``plan[start_phase:]`` in order. ``snapshot`` computes per-phase metrics."""
    report: dict = {"phases": []}
    for i, phase in enumerate(plan):
        if i < start_phase:
            continue
        if phase.dataset not in datasets:
            raise KeyError(f"phase {phase.name}: unknown dataset selector {phase.dataset!r}")
        run_phase(state, phase, datasets[phase.dataset], cfg, phase_index=i)
        entry = {"phase": phase.name, "losses": state.phase_log[-1]["losses"]}
        if snapshot is not None:
            entry["metrics"] = snapshot(state)
        report["phases"].append(entry)
        if on_phase_end is not None:
            on_phase_end(state, i)
    return state, report
