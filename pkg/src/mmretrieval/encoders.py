"""Small trainable stand-ins for the image and text encoders, plus the
query / doc transformation heads.

Every tower input is batch-first. A raw "image" is a flat feature vector of
length ``n_raw``; the shared backbone turns it into a ``grid x channels``
feature map. Text is a list of token ids, mean-pooled over an embedding table
and projected to ``d``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import LinearBN, ShapeError, Tensor

GROUPS = ("backbone", "text", "fusion", "query_transform", "doc_transform", "proxies")
FUSION_MODES = ("concept", "image_only", "average")


@dataclass
class ModelConfig:
    d: int = 32
    e: int = 4
    grid: int = 4            # h^2 spatial positions
    channels: int = 16       # n
    n_raw: int = 64
    vocab: int = 256
    max_text_len: int = 20
    backbone_hidden: int = 32
    head_hidden: int = 32
    backbone: str = "patch"  # "patch": per-position MLP over n_raw/grid slices; "dense": one MLP, reshaped
    fusion: str = "concept"  # concept | image_only | average
    fusion_bias: bool = True

    def validate(self) -> None:
        for key in ("d", "e", "grid", "channels", "n_raw", "vocab", "max_text_len",
                    "backbone_hidden", "head_hidden"):
            if getattr(self, key) < 1:
                raise ValueError(f"model.{key} must be positive")
        if self.backbone not in ("patch", "dense"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.backbone == "patch" and self.n_raw % self.grid:
            raise ValueError("patch backbone needs n_raw divisible by grid")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}")


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class RetrievalModel:
    """All tower parameters, keyed by dotted name.

    The query and doc image paths both read ``backbone.*``; the two heads own
    disjoint ``query_transform.*`` / ``doc_transform.*`` entries. Batch-norm
    running statistics live here too as non-trainable tensors so that a
    checkpoint captures the whole state.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        c = cfg
        patch = c.n_raw // c.grid if c.backbone == "patch" else c.n_raw
        out1 = c.channels if c.backbone == "patch" else c.grid * c.channels
        self._add("backbone.w1", _uniform(rng, patch, (patch, c.backbone_hidden)))
        self._add("backbone.b1", _uniform(rng, patch, (c.backbone_hidden,)))
        self._add("backbone.w2", _uniform(rng, c.backbone_hidden, (c.backbone_hidden, out1)))
        self._add("backbone.b2", _uniform(rng, c.backbone_hidden, (out1,)))

        self._add("text.embedding", rng.uniform(-1.0, 1.0, size=(c.vocab, c.d)))
        self._add("text.w", _uniform(rng, c.d, (c.d, c.d)))
        self._add("text.b", _uniform(rng, c.d, (c.d,)))

        self._add("fusion.m_k", _uniform(rng, c.d, (c.e, c.d)))
        self._add("fusion.m_v", _uniform(rng, c.e, (c.d, c.e)))
        self._add("fusion.fk_w", _uniform(rng, c.channels, (c.channels, c.d)))
        self._add("fusion.fv_w", _uniform(rng, c.channels, (c.channels, c.d)))
        self._add("fusion.fk_b", _uniform(rng, c.channels, (c.d,)) if c.fusion_bias else np.zeros(c.d),
                  trainable=c.fusion_bias)
        self._add("fusion.fv_b", _uniform(rng, c.channels, (c.d,)) if c.fusion_bias else np.zeros(c.d),
                  trainable=c.fusion_bias)

        for side, fan in (("query", c.channels), ("doc", c.d)):
            p = f"{side}_transform"
            self._add(f"{p}.w1", _uniform(rng, fan, (fan, c.head_hidden)))
            self._add(f"{p}.b1", _uniform(rng, fan, (c.head_hidden,)))
            self._add(f"{p}.gamma", np.ones(c.head_hidden))
            self._add(f"{p}.beta", np.zeros(c.head_hidden))
            self._add(f"{p}.running_mean", np.zeros(c.head_hidden), trainable=False)
            self._add(f"{p}.running_var", np.ones(c.head_hidden), trainable=False)
            self._add(f"{p}.w2", _uniform(rng, c.head_hidden, (c.head_hidden, c.d)))
            self._add(f"{p}.b2", _uniform(rng, c.head_hidden, (c.d,)))

    def _add(self, name: str, value, trainable: bool = True) -> None:
        self.params[name] = Tensor(value, trainable=trainable, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def group(self, name: str) -> list[Tensor]:
        if name not in GROUPS:
            raise KeyError(f"unknown parameter group {name!r}")
        return [p for k, p in self.params.items() if k.split(".", 1)[0] == name]

    def trainables(self) -> list[Tensor]:
        return [p for k, p in self.params.items() if not _is_buffer(k)]

    def set_frozen(self, groups: Iterable[str]) -> None:
        frozen = set(groups)
        for g in frozen:
            if g not in GROUPS:
                raise KeyError(f"unknown parameter group {g!r}")
        for k, p in self.params.items():
            if _is_buffer(k) or (k in ("fusion.fk_b", "fusion.fv_b") and not self.cfg.fusion_bias):
                continue
            p.trainable = p.requires_grad = k.split(".", 1)[0] not in frozen
            if p.trainable and p.grad is None:
                p.grad = np.zeros_like(p.value)

    def head(self, side: str) -> tuple[LinearBN, Tensor, Tensor]:
        if side not in ("query", "doc"):
            raise ValueError(f"side must be 'query' or 'doc', got {side!r}")
        p = f"{side}_transform"
        layer = LinearBN(self[f"{p}.w1"], self[f"{p}.b1"], self[f"{p}.gamma"], self[f"{p}.beta"],
                         self[f"{p}.running_mean"].value, self[f"{p}.running_var"].value)
        return layer, self[f"{p}.w2"], self[f"{p}.b2"]

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} != model shape {p.shape}")
            p.value[...] = v

    def group_hash(self, groups: Sequence[str]) -> str:
        """SHA-256 over the raw bytes of every tensor in ``groups`` (name order)."""
        h = hashlib.sha256()
        for k in sorted(self.params):
            if k.split(".", 1)[0] in groups:
                h.update(k.encode())
                h.update(np.ascontiguousarray(self.params[k].value).tobytes())
        return h.hexdigest()

    def config_dict(self) -> dict:
        return asdict(self.cfg)


def _is_buffer(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


def _as_batch(raw, n_raw: int) -> tuple[np.ndarray, bool]:
    raw = np.asarray(raw.value if isinstance(raw, Tensor) else raw, dtype=np.float64)
    single = raw.ndim == 1
    raw = raw[None, :] if single else raw
    if raw.ndim != 2 or raw.shape[1] != n_raw:
        raise ShapeError(f"raw image must have length {n_raw}, got shape {raw.shape}")
    return raw, single


def encode_image(model: RetrievalModel, raw) -> Tensor:
    """Shared backbone: raw ``(B, n_raw)`` -> feature map ``(B, grid, channels)``."""
    c = model.cfg
    raw, _ = _as_batch(raw, c.n_raw)
    b = raw.shape[0]
    if c.backbone == "patch":
        x = Tensor(raw.reshape(b, c.grid, c.n_raw // c.grid))
        h = nx.relu(nx.add(nx.matmul(x, model["backbone.w1"]), model["backbone.b1"]))
        return nx.add(nx.matmul(h, model["backbone.w2"]), model["backbone.b2"])
    h = nx.relu(nx.add(nx.matmul(Tensor(raw), model["backbone.w1"]), model["backbone.b1"]))
    out = nx.add(nx.matmul(h, model["backbone.w2"]), model["backbone.b2"])
    return nx.reshape(out, (b, c.grid, c.channels))


def token_weights(token_lists: Sequence[Sequence[int]], vocab: int, max_len: int) -> np.ndarray:
    """Row-stochastic ``(B, vocab)`` matrix whose product with the table is the per-doc mean embedding."""
    a = np.zeros((len(token_lists), vocab))
    for i, toks in enumerate(token_lists):
        if len(toks) == 0:
            raise ValueError("token list is empty")
        if len(toks) > max_len:
            raise ValueError(f"token list longer than max_text_len={max_len}")
        for t in toks:
            if not 0 <= t < vocab:
                raise ValueError(f"token id {t} outside vocabulary of size {vocab}")
            a[i, t] += 1.0
        a[i] /= len(toks)
    return a


def encode_text(model: RetrievalModel, token_lists: Sequence[Sequence[int]]) -> Tensor:
    """Mean of embedding rows per doc, then a linear projection: ``(B, d)``."""
    c = model.cfg
    if token_lists and isinstance(token_lists[0], (int, np.integer)):
        token_lists = [token_lists]
    a = Tensor(token_weights(token_lists, c.vocab, c.max_text_len))
    pooled = nx.matmul(a, model["text.embedding"])
    return nx.add(nx.matmul(pooled, model["text.w"]), model["text.b"])


def transform(model: RetrievalModel, f, side: str, training: bool = False) -> Tensor:
    """FC -> BN -> ReLU -> FC head for ``side``; output is not normalised."""
    layer, w2, b2 = model.head(side)
    h = nx.relu(layer(f, training))
    return nx.add(nx.matmul(h, w2), b2)


def pool_grid(fmap: Tensor) -> Tensor:
    """Global average pooling over the grid axis: ``(B, grid, n) -> (B, n)``."""
    return nx.mean(fmap, axis=1)


def query_embed(model: RetrievalModel, raw, training: bool = False) -> Tensor:
    """Query tower: backbone -> global average pool -> query head -> unit norm."""
    pooled = pool_grid(encode_image(model, raw))
    return nx.l2_normalize(transform(model, pooled, "query", training))
