"""FP16-semantics operators of the transformer block.

Matrix products go through the mixed-precision datapath: ``vmm_bn`` issues
one FFN-mode dot product per 128-channel block and output channel, and the
attention products issue MHA-mode dot products over 32-lane chunks.  Block and
chunk partials are combined with FP16 additions in ascending order.
Nonlinear operators compute in double precision and round to FP16 (RNE).

Every operator accepts either a :class:`~edgellm.layout.UnifiedTensor` or a
flat ``(rows, CH)`` array of half patterns, and returns the same kind.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import fp16
from . import mixed_precision as mp
from .layout import UnifiedTensor, from_unified, segmented_transpose_view, to_unified
from .sparse_codec import BLOCK, GROUP_CHANNELS, PackedLayer, group_slots

MHA_LANES = mp.PeConfig(mode="mha").lanes
_CHUNK_LANES = 1 << 20  # lanes per batched datapath call


class OpKind(Enum):
    LAYERNORM = "layernorm"
    RMSNORM = "rmsnorm"
    VMM_BN = "vmm_bn"
    ROTARY = "rotary"
    KV_WRITE = "kv_write"
    TRANSPOSE = "transpose"
    SOFTMAX = "softmax"
    ACTIVATION = "activation"
    MHA_MATMUL = "mha_matmul"
    OUTLAYER_LN = "outlayer_ln"
    VMM_ARGMAX = "vmm_argmax"

    @property
    def code(self) -> int:
        return list(OpKind).index(self) + 1


# step names as they appear in the latency and power tables
STEP_KINDS = {
    "LayerNorm": OpKind.LAYERNORM,
    "RMS Norm": OpKind.RMSNORM,
    "VMM-BN(Q)": OpKind.VMM_BN,
    "VMM-BN(K)": OpKind.VMM_BN,
    "VMM-BN(V)": OpKind.VMM_BN,
    "VMM-BN": OpKind.VMM_BN,
    "VMM-BN-RES": OpKind.VMM_BN,
    "VMM-BN-Res": OpKind.VMM_BN,
    "VMMBNRES0": OpKind.VMM_BN,
    "VMMBN1": OpKind.VMM_BN,
    "VMMBNRES1": OpKind.VMM_BN,
    "VMMBNRES2": OpKind.VMM_BN,
    "EMB_Q": OpKind.ROTARY,
    "EMB_K": OpKind.ROTARY,
    "PosEmb(Q)": OpKind.ROTARY,
    "PosEmb(K)": OpKind.ROTARY,
    "DAT2HBM": OpKind.KV_WRITE,
    "KcacheHBM": OpKind.KV_WRITE,
    "VcacheHBM": OpKind.KV_WRITE,
    "TRP": OpKind.TRANSPOSE,
    "VMM(Q*K^T)": OpKind.TRANSPOSE,
    "SOFTMAX": OpKind.SOFTMAX,
    "Softmax": OpKind.SOFTMAX,
    "ACT": OpKind.ACTIVATION,
    "Swiglu": OpKind.ACTIVATION,
    "F2W": OpKind.MHA_MATMUL,
    "VMM(SFT*V)": OpKind.MHA_MATMUL,
    "Outlayer_LN": OpKind.OUTLAYER_LN,
    "VMMBN_Arg": OpKind.VMM_ARGMAX,
}


# --------------------------------------------------------------------------
# layout adapters


def _flat(x):
    if isinstance(x, UnifiedTensor):
        return from_unified(x), x.t_out
    return np.asarray(x, dtype=np.uint16), None


def _wrap(bits, t_out):
    bits = np.asarray(bits, dtype=np.uint16)
    return to_unified(bits, t_out) if t_out else bits


def _f(bits) -> np.ndarray:
    return fp16.bits_to_float(bits)


def _h(values) -> np.ndarray:
    return fp16.float_to_bits(values)


def fp16_sum(parts, valid=None) -> np.ndarray:
    """Add partials along the last axis in order, starting from the first.

    ``valid`` (same shape as ``parts``) skips partials where False.
    """
    acc = parts[..., 0].copy()
    for b in range(1, parts.shape[-1]):
        nxt, _ = fp16.fp16_add_bits(acc, parts[..., b])
        acc = nxt if valid is None else np.where(valid[..., b], nxt, acc)
    return acc.astype(np.uint16)


# --------------------------------------------------------------------------
# vector-matrix multiply


@dataclass
class VmmWeights:
    """A layer in slot form: per output channel and 128-channel block, the
    input positions (``-1`` for unused slots) and INT4 weights of every slot."""

    ch_out: int
    ch_in: int
    scales: np.ndarray     # (ch_out, blocks) uint16
    positions: np.ndarray  # (ch_out, blocks, slots) int64
    weights: np.ndarray    # (ch_out, blocks, slots) int64

    @property
    def blocks(self) -> int:
        return self.scales.shape[1]

    @classmethod
    def from_packed(cls, layer: PackedLayer) -> "VmmWeights":
        s = layer.spec
        blocks = -(-s.ch_in // BLOCK)
        scs, poss, wtss = [], [], []
        for row in layer.groups:
            sc, pos, wt = [], [], []
            for p, g in enumerate(row):
                a, b, c = group_slots(g)
                sc.append(a)
                pos.append(np.where(b >= 0, b + p * GROUP_CHANNELS, -1))
                wt.append(c)
            scs.append(np.concatenate(sc))
            poss.append(np.concatenate(pos))
            wtss.append(np.concatenate(wt))
        per_block = len(poss[0]) // (s.portions * GROUP_CHANNELS // BLOCK)
        pos = np.stack(poss).reshape(s.ch_out, -1, per_block)[:, :blocks]
        wts = np.stack(wtss).reshape(s.ch_out, -1, per_block)[:, :blocks]
        return cls(s.ch_out, s.ch_in, np.stack(scs)[:, :blocks], pos.astype(np.int64), wts.astype(np.int64))

    @classmethod
    def from_dense(cls, scales, q, ch_in: int) -> "VmmWeights":
        """All 128 lanes of every block, zeros included."""
        q = np.asarray(q, dtype=np.int64)
        ch_out = q.shape[0]
        blocks = -(-ch_in // BLOCK)
        padded = np.zeros((ch_out, blocks * BLOCK), dtype=np.int64)
        n = min(q.shape[1], blocks * BLOCK)
        padded[:, :n] = q[:, :n]
        pos = np.broadcast_to(np.arange(blocks * BLOCK).reshape(1, blocks, BLOCK), (ch_out, blocks, BLOCK))
        return cls(ch_out, ch_in, np.asarray(scales, np.uint16)[:, :blocks], pos.copy(),
                   padded.reshape(ch_out, blocks, BLOCK))

    def rows(self, lo: int, hi: int) -> "VmmWeights":
        return VmmWeights(hi - lo, self.ch_in, self.scales[lo:hi], self.positions[lo:hi], self.weights[lo:hi])


def _vmm_core(x: np.ndarray, w: VmmWeights, config=None) -> np.ndarray:
    t = x.shape[0]
    width = w.blocks * BLOCK
    xp = np.zeros((t, width), dtype=np.uint16)
    xp[:, : w.ch_in] = x
    slots = w.positions.shape[-1]
    out = np.empty((t, w.ch_out, w.blocks), dtype=np.uint16)
    rows_per = max(1, _CHUNK_LANES // max(1, w.ch_out * w.blocks * slots))
    safe = np.where(w.positions >= 0, w.positions, 0)
    for a in range(0, t, rows_per):
        b = min(t, a + rows_per)
        g = xp[a:b][:, safe]
        g = np.where(w.positions >= 0, g, 0).astype(np.uint16)
        n = (b - a) * w.ch_out * w.blocks
        wt = np.broadcast_to(w.weights, (b - a,) + w.weights.shape).reshape(n, slots)
        sc = np.broadcast_to(w.scales, (b - a,) + w.scales.shape).reshape(n)
        res, _, _ = mp.dot_ffn_batch(g.reshape(n, slots), wt, sc, config)
        out[a:b] = res.reshape(b - a, w.ch_out, w.blocks)
    return fp16_sum(out)


def vmm_bn(x, w, residual=None, bias=None, multiply=None, config=None):
    """``x @ W^T`` through the FFN datapath with optional FP16 epilogues.

    ``w`` is a :class:`VmmWeights` or a :class:`PackedLayer`.  The epilogue
    order is ``+ bias``, ``+ residual``, ``* multiply``.
    """
    xb, t_out = _flat(x)
    if isinstance(w, PackedLayer):
        w = VmmWeights.from_packed(w)
    if xb.shape[1] != w.ch_in:
        raise ValueError(f"input has {xb.shape[1]} channels, layer expects {w.ch_in}")
    y = _vmm_core(xb, w, config)
    if bias is not None:
        y, _ = fp16.fp16_add_bits(y, np.broadcast_to(np.asarray(bias, np.uint16), y.shape))
    if residual is not None:
        r, _ = _flat(residual)
        if r.shape != y.shape:
            raise ValueError("residual shape mismatch")
        y, _ = fp16.fp16_add_bits(y, r)
    if multiply is not None:
        m, _ = _flat(multiply)
        if m.shape != y.shape:
            raise ValueError("multiplier shape mismatch")
        y, _ = fp16.fp16_mul_bits(y, m)
    return _wrap(y, t_out)


def vmm_argmax(x, w, config=None):
    """LM-head product; returns ``(logit bits, argmax index per row)``."""
    y = vmm_bn(x, w, config=config)
    yb, _ = _flat(y)
    return y, np.argmax(_f(yb), axis=-1)


# --------------------------------------------------------------------------
# attention


def attention_scores(q, k_t: np.ndarray, heads: int, scale: int, config=None) -> np.ndarray:
    """Q . K^T per head with the scale on the dot-product scale operand.

    ``q`` is ``(T, heads*d)``; ``k_t`` is ``(kv_heads, d, L)`` (a transpose
    view).  Returns ``(T, heads, L)`` half patterns.
    """
    qb, _ = _flat(q)
    kvh, d, L = k_t.shape
    t = qb.shape[0]
    group = heads // kvh
    qh = qb.reshape(t, heads, d)
    kk = np.repeat(k_t.transpose(0, 2, 1), group, axis=0)  # (heads, L, d)
    n_ch = -(-d // MHA_LANES)
    dp = n_ch * MHA_LANES
    qh = np.pad(qh, ((0, 0), (0, 0), (0, dp - d)))
    kk = np.pad(kk, ((0, 0), (0, 0), (0, dp - d)))
    out = np.empty((t, heads, L), dtype=np.uint16)
    rows_per = max(1, _CHUNK_LANES // max(1, heads * L * dp))
    for a in range(0, t, rows_per):
        b = min(t, a + rows_per)
        qa = np.broadcast_to(qh[a:b, :, None, :], (b - a, heads, L, dp)).reshape(-1, n_ch, MHA_LANES)
        ka = np.broadcast_to(kk[None], (b - a, heads, L, dp)).reshape(-1, n_ch, MHA_LANES)
        n = qa.shape[0] * n_ch
        res, _, _ = mp.dot_mha_batch(qa.reshape(n, MHA_LANES), ka.reshape(n, MHA_LANES),
                                     np.full(n, scale, dtype=np.uint16), config)
        out[a:b] = fp16_sum(res.reshape(-1, n_ch)).reshape(b - a, heads, L)
    return out


def causal_mask(positions, length: int) -> np.ndarray:
    positions = np.asarray(positions)
    return np.arange(length)[None, :] <= positions[:, None]


def softmax(x, valid=None):
    """Row softmax; positions where ``valid`` is False get probability 0."""
    xb, t_out = _flat(x)
    v = _f(xb)
    if valid is None:
        valid = np.ones(v.shape, dtype=bool)
    valid = np.broadcast_to(valid, v.shape)
    m = np.max(np.where(valid, v, -np.inf), axis=-1, keepdims=True)
    e = np.where(valid, np.exp(v - np.where(np.isfinite(m), m, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    p = np.where(s > 0, e / np.where(s > 0, s, 1.0), 0.0)
    return _wrap(_h(p), t_out)


def attention_context(probs: np.ndarray, v: np.ndarray, kv_heads: int, positions=None, config=None):
    """``P . V`` per head: ``probs`` ``(T, heads, L)``, ``v`` ``(L, kv_heads*d)``.

    Token chunks lying entirely past a row's causal limit are not issued, so a
    row's result depends only on the keys it may attend to.
    """
    t, heads, L = probs.shape
    d = v.shape[1] // kv_heads
    group = heads // kv_heads
    n_ch = -(-L // MHA_LANES)
    lp = n_ch * MHA_LANES
    pp = np.pad(probs, ((0, 0), (0, 0), (0, lp - L)))
    vv = np.pad(v.reshape(L, kv_heads, d), ((0, lp - L), (0, 0), (0, 0)))
    vv = np.repeat(vv.transpose(1, 2, 0), group, axis=0)  # (heads, d, lp)
    last = np.full(t, L - 1) if positions is None else np.minimum(np.asarray(positions), L - 1)
    live = np.arange(n_ch)[None, :] <= (last // MHA_LANES)[:, None]  # (t, n_ch)
    out = np.empty((t, heads, d), dtype=np.uint16)
    rows_per = max(1, _CHUNK_LANES // max(1, heads * d * lp))
    for a in range(0, t, rows_per):
        b = min(t, a + rows_per)
        pa = np.broadcast_to(pp[a:b, :, None, :], (b - a, heads, d, lp)).reshape(-1, MHA_LANES)
        va = np.broadcast_to(vv[None], (b - a, heads, d, lp)).reshape(-1, MHA_LANES)
        res, _, _ = mp.dot_mha_batch(pa, va, np.full(pa.shape[0], fp16.ONE, dtype=np.uint16), config)
        res = res.reshape(b - a, heads, d, n_ch)
        mask = np.broadcast_to(live[a:b, None, None, :], res.shape)
        out[a:b] = fp16_sum(res, mask)
    return out.reshape(t, heads * d)


def mha_attention(q, k_cache: UnifiedTensor, v_cache, heads: int, positions=None, config=None):
    """Causal attention of ``q`` rows against a cache.

    ``k_cache`` is the head-split token-form key cache ``[kv_heads, d/t_out,
    1, L, t_out]``; ``v_cache`` the value cache in the same form.
    ``positions`` are the absolute positions of the query rows (default: the
    last rows of the cache).
    """
    qb, t_out = _flat(q)
    if k_cache.rows < 1:
        raise ValueError("empty KV cache")
    L = k_cache.rows
    kvh = k_cache.outer
    d = k_cache.channels
    t = qb.shape[0]
    if positions is None:
        positions = np.arange(L - t, L)
    k_t = segmented_transpose_view(k_cache).materialize()
    if k_t.ndim == 2:
        k_t = k_t[None]
    scale = fp16.from_float(1.0 / math.sqrt(d))
    scores = attention_scores(qb, k_t, heads, scale, config)
    probs = softmax(scores, causal_mask(positions, L)[:, None, :])
    vt = segmented_transpose_view(v_cache).materialize()
    if vt.ndim == 2:
        vt = vt[None]
    v_flat = vt.transpose(2, 0, 1).reshape(L, kvh * d)
    ctx = attention_context(probs, v_flat, kvh, positions, config)
    return _wrap(ctx, t_out)


# --------------------------------------------------------------------------
# nonlinear operators


def rmsnorm(x, gamma, eps: float = 1e-5):
    xb, t_out = _flat(x)
    v = _f(xb)
    y = v / np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + eps) * _f(gamma)
    return _wrap(_h(y), t_out)


def layernorm(x, gamma, beta, eps: float = 1e-5):
    xb, t_out = _flat(x)
    v = _f(xb)
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (v - mu) / np.sqrt(var + eps) * _f(gamma) + _f(beta)
    return _wrap(_h(y), t_out)


def silu(x):
    xb, t_out = _flat(x)
    v = _f(xb)
    return _wrap(_h(v / (1.0 + np.exp(-v))), t_out)


def swiglu(gate, up):
    g, t_out = _flat(gate)
    u, _ = _flat(up)
    v = _f(g)
    return _wrap(_h(v / (1.0 + np.exp(-v)) * _f(u)), t_out)


def rotary_angles(positions, head_dim: int, style: str = "glm", base: float = 10000.0):
    """``(pairs index a, pairs index b, angles (T, pairs))`` for a rotary style.

    ``glm`` rotates interleaved pairs in the first half of each head;
    ``neox`` rotates ``(i, i + d/2)`` pairs over the whole head.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if style == "glm":
        rot = head_dim // 2
        a = np.arange(0, rot, 2)
        b = a + 1
    elif style == "neox":
        rot = head_dim
        a = np.arange(rot // 2)
        b = a + rot // 2
    else:
        raise ValueError(f"unknown rotary style {style!r}")
    inv = base ** (-np.arange(0, rot, 2, dtype=np.float64) / rot)
    return a, b, positions[:, None] * inv[None, :]


def rotary_embed(x, positions, head_dim: int, style: str = "glm", base: float = 10000.0):
    xb, t_out = _flat(x)
    v = _f(xb).reshape(xb.shape[0], -1, head_dim)
    a, b, ang = rotary_angles(positions, head_dim, style, base)
    c, s = np.cos(ang)[:, None, :], np.sin(ang)[:, None, :]
    xa, xb_ = v[..., a].copy(), v[..., b].copy()
    v[..., a] = xa * c - xb_ * s
    v[..., b] = xa * s + xb_ * c
    return _wrap(_h(v.reshape(xb.shape)), t_out)


# --------------------------------------------------------------------------
# KV cache


class CacheFull(RuntimeError):
    pass


class KvCache:
    """Per-layer K and V in head-split token form ``[kv_heads, d/t_out, 1, max_token, t_out]``.

    Buffers may be views into a modelled memory space.
    """

    def __init__(self, layers: int, kv_heads: int, head_dim: int, max_token: int,
                 t_out: int = 16, buffers=None):
        self.kv_heads, self.head_dim, self.max_token, self.t_out = kv_heads, head_dim, max_token, t_out
        self.slabs = -(-head_dim // t_out)
        shape = (kv_heads, self.slabs, 1, max_token, t_out)
        if buffers is None:
            buffers = [(np.zeros(shape, np.uint16), np.zeros(shape, np.uint16)) for _ in range(layers)]
        for k, v in buffers:
            if k.shape != shape or v.shape != shape:
                raise ValueError("cache buffer shape mismatch")
        self.buffers = list(buffers)
        self.k_len = [0] * layers
        self.v_len = [0] * layers

    @property
    def layers(self) -> int:
        return len(self.buffers)

    def length(self, layer: int) -> int:
        return min(self.k_len[layer], self.v_len[layer])

    def _tensor(self, buf, n) -> UnifiedTensor:
        return UnifiedTensor(np.ascontiguousarray(buf[:, :, :, :n]), self.head_dim)

    def keys(self, layer: int, n: int | None = None) -> UnifiedTensor:
        return self._tensor(self.buffers[layer][0], self.k_len[layer] if n is None else n)

    def values(self, layer: int, n: int | None = None) -> UnifiedTensor:
        return self._tensor(self.buffers[layer][1], self.v_len[layer] if n is None else n)


def kv_write(cache: KvCache, layer: int, which: str, rows, start: int | None = None) -> KvCache:
    """Append ``rows`` (``(n, kv_heads*d)`` or unified) to the K or V cache of a layer."""
    rb, _ = _flat(rows)
    n = rb.shape[0]
    lens = cache.k_len if which == "k" else cache.v_len
    if which not in ("k", "v"):
        raise ValueError("which must be 'k' or 'v'")
    start = lens[layer] if start is None else start
    if start + n > cache.max_token:
        raise CacheFull(f"cache capacity {cache.max_token} exceeded")
    buf = cache.buffers[layer][0 if which == "k" else 1]
    d, t = cache.head_dim, cache.t_out
    x = np.zeros((n, cache.kv_heads, cache.slabs * t), dtype=np.uint16)
    x[:, :, :d] = rb.reshape(n, cache.kv_heads, d)
    buf[:, :, 0, start:start + n, :] = x.reshape(n, cache.kv_heads, cache.slabs, t).transpose(1, 2, 0, 3)
    lens[layer] = max(lens[layer], start + n)
    return cache
