"""Finite-difference checks of every analytic gradient in the model.

Each suite builds a small seeded instance, differentiates a scalar probe on
the tape and compares against central differences. ``corrupt`` names a
parameter whose analytic gradient is deliberately perturbed, so callers can
confirm that a wrong gradient is caught.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .encoders import ModelConfig, RetrievalModel, query_embed, transform
from .fusion import doc_embed, extract_concept, fuse
from .proxy_loss import LossConfig, ProxyStore, margin_loss

CORRUPT_ENV = "MMRETRIEVAL_CORRUPT_GRAD"
TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    suite: str
    param: str
    seed: int
    rel_err: float
    passed: bool

    def as_dict(self) -> dict:
        return {"suite": self.suite, "param": self.param, "seed": self.seed, "rel_err": self.rel_err,
                "passed": self.passed}


def _compare(suite: str, seed: int, run: Callable[[], nx.Tensor], params: Sequence[nx.Tensor],
             reset: Callable[[], None] | None, tol: float, corrupt: str | None) -> list[CheckResult]:
    for p in params:
        p.grad[...] = 0.0

    def probe() -> nx.Tensor:
        if reset is not None:
            reset()
        return run()

    with nx.Tape() as tape:
        loss = probe()
    nx.backward(tape, loss)
    out = []
    for p in params:
        analytic = p.grad.copy()
        if corrupt is not None and p.name == corrupt:
            analytic = analytic * 1.01 + 1e-3
        numeric = nx.numeric_grad(lambda: probe().item(), p.value, STEP)
        err = nx.relative_error(analytic, numeric)
        out.append(CheckResult(suite, p.name, seed, err, err <= tol))
    return out


def _param(rng, shape, name, scale=0.7):
    return nx.Tensor(rng.standard_normal(shape) * scale, trainable=True, name=name)


def check_fusion(seed: int, d: int = 8, e: int = 4, grid: int = 4, channels: int = 6, tol: float = TOLERANCE,
                 corrupt: str | None = None) -> list[CheckResult]:
    """probe . fuse(I, extract_concept(t)) with respect to M_k, M_v, F_K, F_V, t and I."""
    rng = np.random.default_rng(seed)
    shapes = {"m_k": (e, d), "m_v": (d, e), "fk_w": (channels, d), "fk_b": (d,), "fv_w": (channels, d),
              "fv_b": (d,), "t": (3, d), "image": (3, grid, channels)}
    ps = {k: _param(rng, s, k) for k, s in shapes.items()}
    probe = rng.standard_normal((3, d))

    def run():
        c = extract_concept(ps["t"], ps["m_k"], ps["m_v"])
        f = fuse(ps["image"], c, ps["fk_w"], ps["fk_b"], ps["fv_w"], ps["fv_b"])
        return nx.sum(nx.mul(f, probe))

    return _compare("fusion", seed, run, list(ps.values()), None, tol, corrupt)


def check_heads(seed: int, d: int = 8, channels: int = 6, hidden: int = 7, tol: float = TOLERANCE,
                corrupt: str | None = None) -> list[CheckResult]:
    """probe . transform(f) for both sides in training mode (batch statistics)."""
    cfg = ModelConfig(d=d, e=4, grid=4, channels=channels, n_raw=16, vocab=16, head_hidden=hidden)
    model = RetrievalModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    out = []
    for side, width in (("query", channels), ("doc", d)):
        f = _param(rng, (5, width), f"{side}_input", 1.0)
        probe = rng.standard_normal((5, d))
        group = model.group(f"{side}_transform")
        buffers = {p.name: p.value.copy() for p in group if not p.trainable}

        def reset(group=group, buffers=buffers):
            for p in group:
                if p.name in buffers:
                    p.value[...] = buffers[p.name]

        def run(side=side, f=f, probe=probe):
            return nx.sum(nx.mul(transform(model, f, side, training=True), probe))

        params = [p for p in group if p.trainable] + [f]
        out += _compare(f"{side}_transform", seed, run, params, reset, tol, corrupt)
    return out


def check_loss(seed: int, c: int = 8, d: int = 8, n: int = 6, s: float = 4.0, m: float = 0.5,
               tol: float = TOLERANCE, corrupt: str | None = None) -> list[CheckResult]:
    """Margin loss with respect to the embeddings and the proxies, away from the sin clamp."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((c, d))
    store = ProxyStore(w / np.linalg.norm(w, axis=1, keepdims=True))
    y = rng.integers(0, c, size=n)
    z0 = rng.standard_normal((n, d)) * 0.6 + store.w.value[y]
    z = nx.Tensor(z0 / np.linalg.norm(z0, axis=1, keepdims=True), trainable=True, name="z")
    cfg = LossConfig(s=s, m=m, knn_enabled=False)

    def run():
        return margin_loss(z, y, store, cfg, norm_tol=None)[0]

    return _compare("margin_loss", seed, run, [z, store.w], None, tol, corrupt)


def check_model(seed: int, tol: float = TOLERANCE, corrupt: str | None = None) -> list[CheckResult]:
    """Margin loss on a mixed query/doc batch with respect to every model parameter."""
    cfg = ModelConfig(d=8, e=4, grid=4, channels=6, n_raw=16, vocab=12, backbone_hidden=8, head_hidden=7)
    model = RetrievalModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    raw_q, raw_d = rng.standard_normal((4, 16)), rng.standard_normal((4, 16))
    tokens = [[int(t) for t in rng.integers(0, 12, size=int(rng.integers(1, 5)))] for _ in range(4)]
    c = 5
    w = rng.standard_normal((c, 8))
    store = ProxyStore(w / np.linalg.norm(w, axis=1, keepdims=True))
    y = rng.integers(0, c, size=8)
    cfg_loss = LossConfig(s=2.0, m=0.3, knn_enabled=False)
    buffers = {k: p.value.copy() for k, p in model.params.items() if not p.trainable}

    def reset():
        for k, v in buffers.items():
            model.params[k].value[...] = v

    def run():
        z = nx.concat([query_embed(model, raw_q, training=True),
                       doc_embed(model, raw_d, tokens, training=True)], axis=0)
        return margin_loss(z, y, store, cfg_loss, norm_tol=None)[0]

    return _compare("model", seed, run, model.trainables() + [store.w], reset, tol, corrupt)


SUITES = {"fusion": check_fusion, "heads": check_heads, "margin_loss": check_loss, "model": check_model}


def run_grad_checks(seeds: Sequence[int] = range(5), suites: Sequence[str] | None = None,
                    tol: float = TOLERANCE, corrupt: str | None = None) -> list[CheckResult]:
    if corrupt is None:
        corrupt = os.environ.get(CORRUPT_ENV) or None
    out = []
    for name in suites or SUITES:
        for seed in seeds:
            out += SUITES[name](seed, tol=tol, corrupt=corrupt)
    return out


def summarize(results: Sequence[CheckResult]) -> dict[str, dict]:
    """Worst relative error and pass flag per (suite, parameter)."""
    out: dict[str, dict] = {}
    for r in results:
        key = f"{r.suite}/{r.param}"
        cur = out.setdefault(key, {"max_rel_err": 0.0, "passed": True})
        cur["max_rel_err"] = max(cur["max_rel_err"], r.rel_err)
        cur["passed"] = cur["passed"] and r.passed
    return out
