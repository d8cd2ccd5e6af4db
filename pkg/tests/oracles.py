"""Scalar reference implementations: plain loops over Python floats.

Independent of the package's array code; used only to produce expected values.
"""

import math
from collections import deque
from fractions import Fraction


def vecmat(x, w):
    """Row vector times matrix (list of rows)."""
    return [sum(x[p] * w[p][j] for p in range(len(x))) for j in range(len(w[0]))]


def matvec(m, v):
    return [sum(row[j] * v[j] for j in range(len(v))) for row in m]


def vadd(a, b):
    return [x + y for x, y in zip(a, b)]


def relu(v):
    return [x if x > 0 else 0.0 for x in v]


def softmax(v):
    mx = max(v)
    e = [math.exp(x - mx) for x in v]
    s = sum(e)
    return [x / s for x in e]


def normalize(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def mean_rows(rows):
    n = len(rows)
    return [sum(r[j] for r in rows) / n for j in range(len(rows[0]))]


def tolist(a):
    return a.tolist()


def backbone(params, raw, grid, backbone_kind):
    w1, b1 = tolist(params["backbone.w1"].value), tolist(params["backbone.b1"].value)
    w2, b2 = tolist(params["backbone.w2"].value), tolist(params["backbone.b2"].value)
    raw = list(map(float, raw))
    if backbone_kind == "patch":
        p = len(raw) // grid
        return [vadd(vecmat(relu(vadd(vecmat(raw[i * p:(i + 1) * p], w1), b1)), w2), b2) for i in range(grid)]
    out = vadd(vecmat(relu(vadd(vecmat(raw, w1), b1)), w2), b2)
    n = len(out) // grid
    return [out[i * n:(i + 1) * n] for i in range(grid)]


def text(params, tokens):
    table = tolist(params["text.embedding"].value)
    pooled = mean_rows([table[t] for t in tokens])
    return vadd(vecmat(pooled, tolist(params["text.w"].value)), tolist(params["text.b"].value))


def head_eval(params, side, f, eps=1e-5):
    """Inference-mode head: FC -> BN(running stats) -> ReLU -> FC."""
    p = f"{side}_transform"
    h = vadd(vecmat(f, tolist(params[f"{p}.w1"].value)), tolist(params[f"{p}.b1"].value))
    rm, rv = tolist(params[f"{p}.running_mean"].value), tolist(params[f"{p}.running_var"].value)
    g, b = tolist(params[f"{p}.gamma"].value), tolist(params[f"{p}.beta"].value)
    h = [(h[j] - rm[j]) / math.sqrt(rv[j] + eps) * g[j] + b[j] for j in range(len(h))]
    return vadd(vecmat(relu(h), tolist(params[f"{p}.w2"].value)), tolist(params[f"{p}.b2"].value))


def concept(t, m_k, m_v):
    w = softmax(matvec(m_k, t))
    return [sum(m_v[i][j] * w[j] for j in range(len(w))) for i in range(len(m_v))], w


def fusion(fmap, c, fk_w, fk_b, fv_w, fv_b):
    keys = [vadd(vecmat(row, fk_w), fk_b) for row in fmap]
    vals = [vadd(vecmat(row, fv_w), fv_b) for row in fmap]
    w = softmax([sum(k[j] * c[j] for j in range(len(c))) for k in keys])
    return [sum(w[i] * vals[i][j] for i in range(len(vals))) for j in range(len(c))], w


def doc_embedding(model, raw, tokens):
    p = model.params
    fmap = backbone(p, raw, model.cfg.grid, model.cfg.backbone)
    c, _ = concept(text(p, tokens), tolist(p["fusion.m_k"].value), tolist(p["fusion.m_v"].value))
    f, _ = fusion(fmap, c, tolist(p["fusion.fk_w"].value), tolist(p["fusion.fk_b"].value),
                  tolist(p["fusion.fv_w"].value), tolist(p["fusion.fv_b"].value))
    return normalize(head_eval(p, "doc", f))


def query_embedding(model, raw):
    fmap = backbone(model.params, raw, model.cfg.grid, model.cfg.backbone)
    return normalize(head_eval(model.params, "query", mean_rows(fmap)))


def margin_loss(cos_rows, labels, s, m, candidates=None):
    """Direct transcription of the proxy margin loss via explicit angles."""
    total = 0.0
    for i, row in enumerate(cos_rows):
        y = labels[i]
        theta = math.acos(max(-1.0, min(1.0, row[y])))
        num = math.exp(s * math.cos(theta + m))
        cands = range(len(row)) if candidates is None else candidates[i]
        den = num + sum(math.exp(s * row[c]) for c in cands if c != y)
        total += -math.log(num / den)
    return total / len(cos_rows)


# ranking metrics: exact rational arithmetic, one query at a time


def hit_rate(results, sets, k):
    hits = sum(1 for q, ranked in results.items() if any(d in sets[q] for d in ranked[:k]))
    return Fraction(hits, len(results))


def mrr(results, ident):
    total = Fraction(0)
    for q, ranked in results.items():
        for r in range(1, len(ranked) + 1):
            if ranked[r - 1] in ident[q]:
                total += Fraction(1, r)
                break
    return total / len(results)


def average_precision(ranked, relevant, pool):
    r_total = sum(1 for d in set(pool) if d in relevant)
    if r_total == 0:
        return None
    acc = Fraction(0)
    for k in range(1, len(ranked) + 1):
        if ranked[k - 1] in relevant:
            precision_at_k = Fraction(sum(1 for d in ranked[:k] if d in relevant), k)
            acc += precision_at_k
    return acc / r_total


def bfs_components(nodes, edges):
    """Canonical id (smallest member) per node from breadth-first search."""
    adj = {n: [] for n in nodes}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    out = {}
    for start in sorted(nodes):
        if start in out:
            continue
        comp, queue = [start], deque([start])
        seen = {start}
        while queue:
            for nb in adj[queue.popleft()]:
                if nb not in seen:
                    seen.add(nb)
                    comp.append(nb)
                    queue.append(nb)
        root = min(comp)
        for n in comp:
            out[n] = root
    return out
