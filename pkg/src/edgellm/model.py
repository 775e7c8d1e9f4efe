"""Whole-model helpers: packaging, the direct operator chain and a float64 reference."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fp16
from . import operators as op
from .config import ModelConfig, synthetic_weights
from .sparse_codec import WeightPackage, package_model

AUX_SUFFIXES = ("ln1", "ln2", "ln1_b", "ln2_b", "q_bias", "k_bias", "v_bias")


def pack_model(cfg: ModelConfig, weights: dict | None = None, strategy=None, seed: int = 0):
    """Pack a model (synthetic weights when none are given); returns ``(package, report)``."""
    weights = synthetic_weights(cfg, seed) if weights is None else weights
    specs = cfg.model_specs(strategy)
    aux = {k: v for k, v in weights.items() if k.split(".")[-1] in AUX_SUFFIXES
           or k in ("final_ln", "final_ln_b", "embed")}
    pkg, report = package_model(specs, weights, aux)
    pkg.meta.update({"config": cfg.name, "strategy": strategy or cfg.strategy})
    return pkg, report


@dataclass
class ModelWeights:
    """Decoded, ready-to-run view of a package."""

    cfg: ModelConfig
    pkg: WeightPackage
    _vmm: dict = field(default_factory=dict)

    def vmm(self, name: str) -> op.VmmWeights:
        if name not in self._vmm:
            self._vmm[name] = op.VmmWeights.from_packed(self.pkg.layer(name))
        return self._vmm[name]

    def aux(self, name: str):
        t = self.pkg.aux.get(name)
        return None if t is None else t.bits

    def dense(self, name: str) -> np.ndarray:
        return self.pkg.layer(name).dequantize()


def embed(mw: ModelWeights, token_ids) -> np.ndarray:
    table = mw.aux("embed")
    if table is None:
        raise KeyError("package has no embedding table")
    return table[np.asarray(token_ids)]


def _norm(cfg, mw, x, key):
    if cfg.norm == "rmsnorm":
        return op.rmsnorm(x, mw.aux(key), cfg.eps)
    return op.layernorm(x, mw.aux(key), mw.aux(key + "_b"), cfg.eps)


def forward(mw: ModelWeights, x: np.ndarray, cache: op.KvCache, start: int):
    """Run all blocks on rows ``x`` at positions ``start..``; returns ``(logits, argmax)``."""
    cfg = mw.cfg
    t = x.shape[0]
    pos = np.arange(start, start + t)
    for l in range(cfg.layers):
        p = f"l{l}."
        h = _norm(cfg, mw, x, p + "ln1")
        q = op.vmm_bn(h, mw.vmm(p + "q"), bias=mw.aux(p + "q_bias"))
        q = op.rotary_embed(q, pos, cfg.head_dim, cfg.rotary, cfg.rotary_base)
        k = op.vmm_bn(h, mw.vmm(p + "k"), bias=mw.aux(p + "k_bias"))
        k = op.rotary_embed(k, pos, cfg.head_dim, cfg.rotary, cfg.rotary_base)
        op.kv_write(cache, l, "k", k, start)
        L = start + t
        k_t = op.segmented_transpose_view(cache.keys(l, L)).materialize().reshape(cfg.kv_heads, cfg.head_dim, L)
        scale = fp16.from_float(1.0 / np.sqrt(cfg.head_dim))
        scores = op.attention_scores(q, k_t, cfg.heads, scale)
        probs = op.softmax(scores, op.causal_mask(pos, L)[:, None, :])
        v = op.vmm_bn(h, mw.vmm(p + "v"), bias=mw.aux(p + "v_bias"))
        op.kv_write(cache, l, "v", v, start)
        vt = op.segmented_transpose_view(cache.values(l, L)).materialize().reshape(cfg.kv_heads, cfg.head_dim, L)
        ctx = op.attention_context(probs, vt.transpose(2, 0, 1).reshape(L, cfg.kv_dim), cfg.kv_heads, pos)
        x = op.vmm_bn(ctx, mw.vmm(p + "o"), residual=x)
        h2 = _norm(cfg, mw, x, p + "ln2")
        w1 = mw.vmm(p + "h_to_4h")
        gate = op.vmm_bn(h2, w1.rows(0, cfg.ffn))
        act = op.silu(gate)
        up = op.vmm_bn(h2, w1.rows(cfg.ffn, 2 * cfg.ffn), multiply=act)
        x = op.vmm_bn(up, mw.vmm(p + "4h_to_h"), residual=x)
    y = _norm(cfg, mw, x, "final_ln")
    return op.vmm_argmax(y, mw.vmm("lm_head"))


def new_cache(cfg: ModelConfig, max_token: int | None = None) -> op.KvCache:
    return op.KvCache(cfg.layers, cfg.kv_heads, cfg.head_dim, max_token or cfg.max_token, cfg.t_out)


def generate_logits(mw: ModelWeights, token_ids, splits) -> np.ndarray:
    """Feed ``token_ids`` in consecutive chunks of sizes ``splits``; last row's logits."""
    cache = new_cache(mw.cfg)
    x = embed(mw, token_ids)
    start = 0
    logits = None
    for n in splits:
        logits, _ = forward(mw, x[start:start + n], cache, start)
        start += n
    return logits[-1]


# --------------------------------------------------------------------------
# float64 reference


def reference_logits(mw: ModelWeights, token_ids) -> np.ndarray:
    """Same dequantized weights, every operator in float64, full causal attention."""
    cfg = mw.cfg
    f = fp16.bits_to_float
    aux = lambda k: f(mw.aux(k))
    x = f(embed(mw, token_ids))
    t = x.shape[0]
    pos = np.arange(t)

    def norm(v, key):
        if cfg.norm == "rmsnorm":
            return v / np.sqrt(np.mean(v * v, -1, keepdims=True) + cfg.eps) * aux(key)
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + cfg.eps) * aux(key) + aux(key + "_b")

    def rope(v):
        v = v.reshape(t, -1, cfg.head_dim).copy()
        a, b, ang = op.rotary_angles(pos, cfg.head_dim, cfg.rotary, cfg.rotary_base)
        c, s = np.cos(ang)[:, None, :], np.sin(ang)[:, None, :]
        xa, xb = v[..., a].copy(), v[..., b].copy()
        v[..., a] = xa * c - xb * s
        v[..., b] = xa * s + xb * c
        return v.reshape(t, -1)

    def bias(key):
        b = mw.aux(key)
        return 0.0 if b is None else f(b)

    group = cfg.heads // cfg.kv_heads
    for l in range(cfg.layers):
        p = f"l{l}."
        h = norm(x, p + "ln1")
        q = rope(h @ mw.dense(p + "q").T + bias(p + "q_bias")).reshape(t, cfg.heads, cfg.head_dim)
        k = rope(h @ mw.dense(p + "k").T + bias(p + "k_bias")).reshape(t, cfg.kv_heads, cfg.head_dim)
        v = (h @ mw.dense(p + "v").T + bias(p + "v_bias")).reshape(t, cfg.kv_heads, cfg.head_dim)
        k = np.repeat(k, group, axis=1)
        v = np.repeat(v, group, axis=1)
        s = np.einsum("thd,shd->hts", q, k) / np.sqrt(cfg.head_dim)
        s = np.where(np.tril(np.ones((t, t), bool))[None], s, -np.inf)
        s = np.exp(s - s.max(-1, keepdims=True))
        s /= s.sum(-1, keepdims=True)
        ctx = np.einsum("hts,shd->thd", s, v).reshape(t, -1)
        x = x + ctx @ mw.dense(p + "o").T
        h2 = norm(x, p + "ln2")
        w1 = mw.dense(p + "h_to_4h")
        g = h2 @ w1[: cfg.ffn].T
        u = h2 @ w1[cfg.ffn:].T
        x = x + (g / (1 + np.exp(-g)) * u) @ mw.dense(p + "4h_to_h").T
    y = norm(x, "final_ln")
    return (y @ mw.dense("lm_head").T)[-1]
