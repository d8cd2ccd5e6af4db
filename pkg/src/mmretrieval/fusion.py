"""Concept-aware modality fusion for the doc tower.

Concept extraction is external attention against two trainable memories::

    w_attn = softmax(M_k t)        # (e,)
    c      = M_v w_attn            # (d,)

and the fusion step uses the concept vector as the attention query over the
image grid::

    K_I, V_I = F_K(I), F_V(I)      # (h^2, d)
    W_f      = softmax(K_I c)      # (h^2,)
    f_d      = V_I^T W_f           # (d,)

No 1/sqrt(d) scaling and a single head, as written. All functions here are
batch-first: ``t`` is ``(B, d)``, ``I`` is ``(B, h^2, n)``.
"""

from __future__ import annotations

from typing import Sequence

from . import numerics as nx
from .encoders import RetrievalModel, encode_image, encode_text, transform
from .numerics import ShapeError, Tensor


def concept_attention(t, m_k) -> Tensor:
    """Attention weights over the ``e`` memory slots, ``(B, e)``."""
    t, m_k = nx.as_tensor(t), nx.as_tensor(m_k)
    if t.shape[-1] != m_k.shape[1]:
        raise ShapeError(f"text feature dim {t.shape[-1]} != memory dim {m_k.shape[1]}")
    return nx.softmax(nx.matmul(t, nx.transpose(m_k)), axis=-1)


def extract_concept(t, m_k, m_v) -> Tensor:
    """Concept vector ``c = M_v softmax(M_k t)`` for each row of ``t``."""
    m_v = nx.as_tensor(m_v)
    if m_v.shape[1] != nx.as_tensor(m_k).shape[0]:
        raise ShapeError(f"M_v has {m_v.shape[1]} columns but M_k has {nx.as_tensor(m_k).shape[0]} rows")
    w = concept_attention(t, m_k)
    return nx.matmul(w, nx.transpose(m_v))


def image_keys_values(fmap, fk_w, fk_b, fv_w, fv_b) -> tuple[Tensor, Tensor]:
    """Position-wise linear maps of the grid: ``K_I, V_I`` of shape ``(B, h^2, d)``."""
    fmap = nx.as_tensor(fmap)
    if fmap.shape[-1] != nx.as_tensor(fk_w).shape[0]:
        raise ShapeError(f"feature map channels {fmap.shape[-1]} != F_K input {nx.as_tensor(fk_w).shape[0]}")
    k = nx.add(nx.matmul(fmap, fk_w), fk_b)
    v = nx.add(nx.matmul(fmap, fv_w), fv_b)
    return k, v


def attend(k_img, v_img, c) -> tuple[Tensor, Tensor]:
    """Text-to-image attention. Returns ``(f_d, W_f)``."""
    k_img, v_img, c = nx.as_tensor(k_img), nx.as_tensor(v_img), nx.as_tensor(c)
    if c.shape[-1] != k_img.shape[-1]:
        raise ShapeError(f"concept dim {c.shape[-1]} != key dim {k_img.shape[-1]}")
    b = c.shape[0]
    logits = nx.reshape(nx.matmul(k_img, nx.reshape(c, (b, -1, 1))), (b, -1))
    w = nx.softmax(logits, axis=-1)
    f = nx.reshape(nx.matmul(nx.reshape(w, (b, 1, -1)), v_img), (b, -1))
    return f, w


def fuse(fmap, c, fk_w, fk_b, fv_w, fv_b) -> Tensor:
    k, v = image_keys_values(fmap, fk_w, fk_b, fv_w, fv_b)
    return attend(k, v, c)[0]


def average_fuse(img_pooled, txt) -> Tensor:
    """Elementwise mean of the pooled image vector and the text vector."""
    img_pooled, txt = nx.as_tensor(img_pooled), nx.as_tensor(txt)
    if img_pooled.shape != txt.shape:
        raise ShapeError(f"average_fuse shapes differ: {img_pooled.shape} vs {txt.shape}")
    return nx.mul(nx.add(img_pooled, txt), 0.5)


def doc_feature(model: RetrievalModel, raw, token_lists: Sequence[Sequence[int]] | None) -> Tensor:
    """Pre-transformation doc vector ``(B, d)`` for the configured fusion mode.

    ``image_only`` and ``average`` pool ``V_I`` over the grid, which is exactly
    what concept fusion degenerates to under uniform attention.
    """
    p = model.params
    fmap = encode_image(model, raw)
    k, v = image_keys_values(fmap, p["fusion.fk_w"], p["fusion.fk_b"], p["fusion.fv_w"], p["fusion.fv_b"])
    mode = model.cfg.fusion
    if mode == "image_only":
        return nx.mean(v, axis=1)
    t = encode_text(model, token_lists)
    if mode == "average":
        return average_fuse(nx.mean(v, axis=1), t)
    c = extract_concept(t, p["fusion.m_k"], p["fusion.m_v"])
    return attend(k, v, c)[0]


def doc_embed(model: RetrievalModel, raw, token_lists, training: bool = False) -> Tensor:
    """Doc tower: fused feature -> doc head -> unit norm."""
    return nx.l2_normalize(transform(model, doc_feature(model, raw, token_lists), "doc", training))
