"""Independent reference implementations used as test oracles.

These are deliberately naive: explicit Python loops and scalar math, no
reuse of the package's own ops.
"""

import math

import numpy as np


def matmul_loops(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += float(a[i][t]) * float(b[t][j])
            out[i, j] = s
    return out


def silu_scalar(x: float) -> float:
    return x / (1.0 + math.exp(-x))


def softmax_naive(row):
    e = [math.exp(float(v)) for v in row]
    s = sum(e)
    return [v / s for v in e]


def rms_norm_scalar(vec, gain, eps=1e-6):
    ms = sum(float(v) ** 2 for v in vec) / len(vec)
    r = 1.0 / math.sqrt(ms + eps)
    return [float(v) * r * float(g) for v, g in zip(vec, gain)]


def dot(u, v):
    return sum(float(a) * float(b) for a, b in zip(u, v))


def qwen_cl_enumerate(q, d, hard=None, tau=0.05, in_batch=True, same_tower=True, margin=0.0, hard_valid=None):
    """Per-item candidate lists built one score at a time; margin None disables masking."""
    b = len(q)
    total = 0.0
    for i in range(b):
        pos = dot(q[i], d[i])
        cands = []
        if in_batch:
            cands += [dot(q[i], d[j]) for j in range(b) if j != i]
        if hard is not None:
            for h in range(len(hard[i])):
                if hard_valid is None or hard_valid[i][h]:
                    cands.append(dot(q[i], hard[i][h]))
        if same_tower:
            cands += [dot(q[i], q[j]) for j in range(b) if j != i]
            cands += [dot(d[i], d[j]) for j in range(b) if j != i]
        if margin is not None:
            cands = [s for s in cands if not s > pos - margin]
        z = math.exp(pos / tau) + sum(math.exp(s / tau) for s in cands)
        total += -(pos / tau - math.log(z))
    return total / b


def info_nce_enumerate(q, d, tau=0.05):
    b = len(q)
    total = 0.0
    for i in range(b):
        z = sum(math.exp(dot(q[i], d[j]) / tau) for j in range(b))
        total += -(dot(q[i], d[i]) / tau - math.log(z))
    return total / b


def kl_enumerate(student, teacher, docs, tau_t=0.05, tau_s=0.05):
    b = len(student)
    total = 0.0
    for i in range(b):
        t = [math.exp(dot(teacher[i], docs[j]) / tau_t) for j in range(b)]
        s = [math.exp(dot(student[i], docs[j]) / tau_s) for j in range(b)]
        zt, zs = sum(t), sum(s)
        for j in range(b):
            p, qq = t[j] / zt, s[j] / zs
            if p > 0:
                total += p * math.log(p / qq)
    return total / b


def kuea_enumerate(student, teacher, degree=3):
    b = len(student)
    total = 0.0
    for i in range(b):
        for j in range(b):
            if i != j:
                ks = (dot(student[i], student[j]) + 1.0) ** degree
                kt = (dot(teacher[i], teacher[j]) + 1.0) ** degree
                total += (ks - kt) ** 2
    return total / (b * (b - 1))


def l2_align_enumerate(student, teacher):
    return sum(sum((float(a) - float(b)) ** 2 for a, b in zip(s, t)) for s, t in zip(student, teacher))


def top_k_full_sort(matrix, ids, query, k):
    scores = [(dot(query, row), int(i)) for row, i in zip(matrix, ids)]
    scores.sort(key=lambda t: (-t[0], t[1]))
    return [i for _, i in scores[:k]]


def straight_line_encoder(params, cfg, tokens):
    """Token-by-token float64 forward of the block equations for one sequence.

    Returns (list of per-layer (h_in, h_out) arrays [T, H], pooled vector).
    """
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    n = len(tokens)
    hd, nq, nkv = cfg.head_dim, cfg.n_query_heads, cfg.n_kv_heads
    group = nq // nkv
    half = hd // 2
    freqs = [cfg.rope_base ** (-i / half) for i in range(half)]

    def rope(vec, pos):
        out = [0.0] * hd
        for i in range(half):
            c, s = math.cos(pos * freqs[i]), math.sin(pos * freqs[i])
            a, b = vec[i], vec[i + half]
            out[i] = a * c - b * s
            out[i + half] = b * c + a * s
        return out

    def mv(w, x):
        return [dot(row, x) for row in w]

    h = [list(p["tok_emb"][t]) for t in tokens]
    trace = []
    for layer in range(cfg.n_layers):
        pre = f"layers.{layer}."
        h_in = [row[:] for row in h]
        a = [rms_norm_scalar(row, p[pre + "attn_norm"]) for row in h]
        qs = [mv(p[pre + "wq"], x) for x in a]
        ks = [mv(p[pre + "wk"], x) for x in a]
        vs = [mv(p[pre + "wv"], x) for x in a]
        att_out = []
        for t in range(n):
            concat = []
            for head in range(nq):
                kvh = head // group
                qv = rope(qs[t][head * hd:(head + 1) * hd], t)
                logits = []
                for u in range(t + 1):
                    kv = rope(ks[u][kvh * hd:(kvh + 1) * hd], u)
                    logits.append(dot(qv, kv) / math.sqrt(hd))
                m = max(logits)
                w = softmax_naive([x - m for x in logits])
                o = [0.0] * hd
                for u in range(t + 1):
                    vv = vs[u][kvh * hd:(kvh + 1) * hd]
                    for c in range(hd):
                        o[c] += w[u] * vv[c]
                concat += o
            att_out.append(mv(p[pre + "wo"], concat))
        h = [[x + y for x, y in zip(h[t], att_out[t])] for t in range(n)]
        f = [rms_norm_scalar(row, p[pre + "ffn_norm"]) for row in h]
        new = []
        for t in range(n):
            g = mv(p[pre + "w_gate"], f[t])
            u = mv(p[pre + "w_up"], f[t])
            act = [silu_scalar(x) * y for x, y in zip(g, u)]
            new.append([x + y for x, y in zip(h[t], mv(p[pre + "w_down"], act))])
        h = new
        trace.append((np.array(h_in), np.array(h)))
    pooled = rms_norm_scalar(h[-1], p["final_norm"])
    return trace, np.array(pooled)


def project_normalize(params, pooled, truncate=None):
    z = np.asarray(params["out_proj"], dtype=np.float64) @ pooled
    if truncate is not None:
        z = z[:truncate]
    return z / math.sqrt(sum(x * x for x in z))
