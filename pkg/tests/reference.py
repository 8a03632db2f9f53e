"""Plain numpy forward pass used as an independent oracle for the torch model.

Attention is written per query head with an explicit loop, so the grouped
layout of the fused path is never reused here.
"""

import numpy as np


def rms(x, w, eps=1e-6):
    return x / np.sqrt((x * x).mean(-1, keepdims=True) + eps) * w


def rope(x, base=10000.0):
    # x: (T, dh); rotate each pair (j, j + dh/2) by angle t * base^(-2j/dh)
    T, dh = x.shape
    half = dh // 2
    out = np.empty_like(x)
    for t in range(T):
        for j in range(half):
            theta = t * base ** (-2.0 * j / dh)
            c, s = np.cos(theta), np.sin(theta)
            a, b = x[t, j], x[t, j + half]
            out[t, j] = a * c - b * s
            out[t, j + half] = a * s + b * c
    return out


def softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def head_attention(q, k, v):
    """Causal single-head attention for (T, dh) arrays."""
    T, dh = q.shape
    s = q @ k.T / np.sqrt(dh)
    s = np.where(np.tril(np.ones((T, T), bool)), s, -np.inf)
    return softmax(s) @ v


def mha(qs, ks, vs):
    """Standard multi-head attention: head h uses its own K/V."""
    return [head_attention(q, k, v) for q, k, v in zip(qs, ks, vs)]


def mqa(qs, k, v):
    """Multi-query attention: one shared K/V for every head."""
    return [head_attention(q, k, v) for q in qs]


def gqa(qs, ks, vs):
    r = len(qs) // len(ks)
    return [head_attention(q, ks[h // r], vs[h // r]) for h, q in enumerate(qs)]


def silu(x):
    return x / (1 + np.exp(-x))


def forward(weights: dict, profiles, tokens, attention="gqa"):
    """Logits for one sequence ``tokens`` (1-D int array).

    ``weights`` maps parameter names (as in ``model.named_parameters()``) to
    float64 arrays.  ``attention`` picks the reference kernel.
    """
    x = weights["embedding"][tokens]
    for i, p in enumerate(profiles):
        w = {k.split(".", 2)[2]: v for k, v in weights.items() if k.startswith(f"layers.{i}.")}
        H, G, dh = p.n_heads, p.n_kv_heads, p.head_dim
        h = rms(x, w["attn_norm"])
        q, k, v = h @ w["wq"], h @ w["wk"], h @ w["wv"]
        qs = [rope(rms(q[:, j * dh : (j + 1) * dh], w["q_norm"][j * dh : (j + 1) * dh])) for j in range(H)]
        ks = [rope(rms(k[:, j * dh : (j + 1) * dh], w["k_norm"][j * dh : (j + 1) * dh])) for j in range(G)]
        vs = [v[:, j * dh : (j + 1) * dh] for j in range(G)]
        if attention == "mha":
            assert H == G
            heads = mha(qs, ks, vs)
        elif attention == "mqa":
            assert G == 1
            heads = mqa(qs, ks[0], vs[0])
        else:
            heads = gqa(qs, ks, vs)
        x = x + np.concatenate(heads, axis=-1) @ w["wo"]
        h = rms(x, w["ffn_norm"])
        x = x + (silu(h @ w["w_gate"]) * (h @ w["w_up"])) @ w["w_down"]
    x = rms(x, weights["final_norm"])
    head = weights["embedding"].T if "lm_head" not in weights else weights["lm_head"]
    return x @ head


def numpy_weights(model) -> dict:
    return {n: p.detach().double().numpy().copy() for n, p in model.named_parameters()}


def rel_err(a, b) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))
