"""Emulation of the mixed-precision vector multiplier.

Two operating modes share one datapath:

* ``ffn`` -- ``t_in`` lanes of FP16 activation x INT4 weight,
* ``mha`` -- ``t_in / 4`` lanes of FP16 activation x FP16 cache value (each
  FP16 operand occupies the bandwidth of four INT4 lanes).

The four pipeline stages are modelled literally:

0. split operands into sign / exponent / significand,
1. sign XOR, product exponent, per-lane distance to the maximum exponent,
   full-width significand multiply,
2. alignment shift (truncating) into fixed-width addends and a saturating
   two's-complement adder tree,
3. leading-zero count, normalisation to FP16, FP16 multiply by the block scale.

Lanes whose product is exactly zero are left out of the exponent maximum, so a
zero weight never costs the other lanes precision.  This is also what makes the
packed sparse path bit-identical to the dense path.

The reference adder trees (``fp16tree`` / ``fp20tree``) round every product and
every pairwise sum to the intermediate format.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fp16
from .fp16 import NonFiniteInput

MODES = ("ffn", "mha")
VARIANTS = ("proposed", "fp16tree", "fp20tree")
INT4_MAX = 7

# (exponent bits, mantissa bits) of the reference tree formats
TREE_FORMATS = {"fp16tree": (5, 10), "fp20tree": (6, 13)}

# raw significand-product width and its fractional bits, per mode
_RAW = {"ffn": (14, 10), "mha": (22, 20)}

ERROR_FLOOR = 1e-6


@dataclass(frozen=True)
class PeConfig:
    """Datapath parameters.

    ``adder_width`` is the accumulator width.  ``product_width`` is the width of
    one aligned, truncated addend (sign included); by default it is whatever
    the accumulator leaves after ``ceil(log2(lanes))`` growth bits, i.e. 19 in
    FFN mode and 21 in MHA mode.
    """

    t_in: int = 128
    mode: str = "ffn"
    adder_width: int = 26
    product_width: int | None = None
    rounding: str = "rne"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.t_in < 4 or self.t_in % 4:
            raise ValueError("t_in must be a positive multiple of 4")
        if self.rounding not in fp16.ROUNDING_MODES:
            raise ValueError(f"rounding must be one of {fp16.ROUNDING_MODES}")
        if self.addend_width < 2:
            raise ValueError("addend width too small")
        if self.adder_width < self.addend_width + self.growth_bits:
            raise ValueError(
                f"adder_width {self.adder_width} cannot hold {self.lanes} addends "
                f"of {self.addend_width} bits"
            )
        if self.adder_width > 60:
            raise ValueError("adder_width above 60 bits is not modelled")

    @property
    def lanes(self) -> int:
        return self.t_in if self.mode == "ffn" else self.t_in // 4

    @property
    def growth_bits(self) -> int:
        return math.ceil(math.log2(self.lanes))

    @property
    def addend_width(self) -> int:
        if self.product_width is not None:
            return self.product_width
        return self.adder_width - self.growth_bits

    @property
    def guard_bits(self) -> int:
        """Addend magnitude bits beyond the raw product (negative: bits dropped)."""
        return (self.addend_width - 1) - _RAW[self.mode][0]


@dataclass
class DotTrace:
    """Per-stage intermediates of one dot-product invocation."""

    sign: np.ndarray
    raw_product: np.ndarray
    product_exponent: np.ndarray
    max_exponent: int
    distance: np.ndarray
    aligned: np.ndarray
    accumulator: int
    leading_zeros: int
    pre_scale: int
    result: int
    saturations: int = 0
    overflow: bool = False
    lsb_exponent: int = 0

    def __eq__(self, other):
        if not isinstance(other, DotTrace):
            return NotImplemented
        for name in self.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, np.ndarray):
                if not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True


@dataclass
class ErrorStats:
    mean_rel_pct: float
    max_rel_pct: float
    saturation_count: int
    trials: int
    valid_trials: int
    extra: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# stage helpers


def _check_int4(wt):
    wt = np.asarray(wt)
    if wt.size and (wt.min() < -INT4_MAX or wt.max() > INT4_MAX):
        raise ValueError("INT4 weights must lie in [-7, 7]")
    return wt.astype(np.int64)


def _stage01_ffn(feat, wt):
    sf, ef, gf = fp16.decompose_bits(feat)
    wt = _check_int4(wt)
    sw = (wt < 0).astype(np.int64)
    return sf ^ sw, gf * np.abs(wt), ef


def _stage01_mha(feat, kv):
    sf, ef, gf = fp16.decompose_bits(feat)
    sk, ek, gk = fp16.decompose_bits(kv)
    return sf ^ sk, gf * gk, ef + ek


def _align(prod, pexp, guard):
    nz = prod != 0
    floor = np.iinfo(np.int64).min // 4
    emax = np.max(np.where(nz, pexp, floor), axis=-1)
    emax = np.where(nz.any(axis=-1), emax, 0)
    dist = np.where(nz, emax[..., None] - pexp, 0)
    shift = dist - guard
    right = prod >> np.clip(shift, 0, 62)
    right = np.where(shift >= 63, 0, right)
    left = prod << np.clip(-shift, 0, 62)
    aligned = np.where(shift >= 0, right, left)
    return emax, dist, aligned


def _tree_sum(values, width):
    """Pairwise saturating reduction; returns ``(sum, saturation count)``."""
    lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
    v = values
    n = v.shape[-1]
    size = 1 << max(0, math.ceil(math.log2(max(n, 1))))
    if size != n:
        pad = np.zeros(v.shape[:-1] + (size - n,), dtype=np.int64)
        v = np.concatenate([v, pad], axis=-1)
    sat = np.zeros(v.shape[:-1], dtype=np.int64)
    while v.shape[-1] > 1:
        s = v[..., 0::2] + v[..., 1::2]
        clipped = np.clip(s, lo, hi)
        sat += (clipped != s).sum(axis=-1)
        v = clipped
    return v[..., 0], sat


def _stage3(acc, lsb_exp, scale, rounding):
    sign = (acc < 0).astype(np.int64)
    pre, ovf_pre = fp16.round_to_fp16_bits(sign, np.abs(acc), lsb_exp, rounding)
    pre_inf = (pre & 0x7C00) == 0x7C00
    safe_pre = np.where(pre_inf, 0, pre).astype(np.uint16)
    out, ovf = fp16.fp16_mul_bits(safe_pre, scale, rounding)
    inf_out = ((pre & 0x8000) ^ (np.asarray(scale, np.uint16) & 0x8000)) | 0x7C00
    out = np.where(pre_inf, inf_out, out).astype(np.uint16)
    return pre, out, ovf_pre | ovf | pre_inf


def _run(mode, a, b, scale, config):
    a = np.asarray(a, dtype=np.uint16)
    scale = np.asarray(scale, dtype=np.uint16)
    fp16.require_finite(a, scale)
    if mode == "ffn":
        sign, prod, pexp = _stage01_ffn(a, b)
    else:
        b = np.asarray(b, dtype=np.uint16)
        fp16.require_finite(b)
        sign, prod, pexp = _stage01_mha(a, b)
    if a.shape[-1] > config.lanes:
        raise ValueError(f"{a.shape[-1]} lanes exceed the {config.lanes}-lane {mode} unit")
    guard = config.guard_bits
    emax, dist, aligned = _align(prod, pexp, guard)
    signed = np.where(sign == 1, -aligned, aligned)
    acc, sat = _tree_sum(signed, config.adder_width)
    lsb_exp = emax - _RAW[mode][1] - guard
    pre, out, ovf = _stage3(acc, lsb_exp, scale, config.rounding)
    return dict(sign=sign, prod=prod, pexp=pexp, emax=emax, dist=dist, aligned=signed,
                acc=acc, sat=sat, lsb=lsb_exp, pre=pre, out=out, overflow=ovf)


def _config_for(mode, config):
    if config is None:
        return PeConfig(mode=mode)
    if config.mode != mode:
        raise ValueError(f"config is for {config.mode} mode, not {mode}")
    return config


# --------------------------------------------------------------------------
# public batch API


def dot_ffn_batch(feat, wt, scale, config: PeConfig | None = None):
    """Vectorised FFN-mode dot products over the last axis.

    ``feat`` holds half patterns, ``wt`` INT4 values and ``scale`` one half
    pattern per row (broadcast).  Returns ``(result bits, saturation counts,
    overflow flags)``.
    """
    r = _run("ffn", feat, wt, scale, _config_for("ffn", config))
    return r["out"], r["sat"], r["overflow"]


def dot_mha_batch(feat, kv, scale, config: PeConfig | None = None):
    r = _run("mha", feat, kv, scale, _config_for("mha", config))
    return r["out"], r["sat"], r["overflow"]


def _trace_from(r, adder_width: int) -> DotTrace:
    acc = int(r["acc"])
    return DotTrace(
        sign=r["sign"].copy(), raw_product=r["prod"].copy(), product_exponent=r["pexp"].copy(),
        max_exponent=int(r["emax"]), distance=r["dist"].copy(), aligned=r["aligned"].copy(),
        accumulator=acc, leading_zeros=(adder_width - 1) - abs(acc).bit_length(), pre_scale=int(r["pre"]),
        result=int(r["out"]), saturations=int(r["sat"]), overflow=bool(r["overflow"]),
        lsb_exponent=int(r["lsb"]),
    )


def _single(mode, a, b, scale, config, trace):
    cfg = _config_for(mode, config)
    r = _run(mode, np.asarray(a, dtype=np.uint16)[None, :], np.asarray(b)[None, :],
             np.asarray([scale], dtype=np.uint16), cfg)
    r = {k: (v[0] if isinstance(v, np.ndarray) and v.ndim >= 1 else v) for k, v in r.items()}
    if not trace:
        return int(r["out"])
    return int(r["out"]), _trace_from(r, cfg.adder_width)


def dot_ffn(feat, wt, scale: int = fp16.ONE, config: PeConfig | None = None, trace: bool = False):
    """FP16 x INT4 dot product of one lane vector, scaled by an FP16 block scale.

    Returns the FP16 result pattern, or ``(bits, DotTrace)`` with ``trace=True``.
    """
    return _single("ffn", feat, wt, scale, config, trace)


def dot_mha(feat, kv, scale: int = fp16.ONE, config: PeConfig | None = None, trace: bool = False):
    """FP16 x FP16 dot product (attention mode, ``t_in / 4`` lanes)."""
    return _single("mha", feat, kv, scale, config, trace)


def replay(t: DotTrace, scale: int, config: PeConfig) -> int:
    """Recompute the result of a trace from its aligned addends onward."""
    prod, pexp = t.raw_product, t.product_exponent
    emax, dist, aligned = _align(prod[None, :], pexp[None, :], config.guard_bits)
    signed = np.where(t.sign[None, :] == 1, -aligned, aligned)
    if not np.array_equal(signed[0], t.aligned) or int(emax[0]) != t.max_exponent:
        raise AssertionError("trace alignment does not replay")
    acc, _ = _tree_sum(signed, config.adder_width)
    if int(acc[0]) != t.accumulator:
        raise AssertionError("trace accumulation does not replay")
    lsb = int(emax[0]) - _RAW[config.mode][1] - config.guard_bits
    _, out, _ = _stage3(acc, np.array([lsb]), np.array([scale], dtype=np.uint16), config.rounding)
    return int(out[0])


def dot_baseline_batch(mode: str, variant: str, feat, wt, scale):
    """Reference pairwise adder tree; intermediates rounded to FP16 or FP20.

    Returns ``(result bits, overflow flags)``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if variant not in TREE_FORMATS:
        raise ValueError(f"baseline variant must be one of {tuple(TREE_FORMATS)}")
    eb, mb = TREE_FORMATS[variant]
    feat = np.asarray(feat, dtype=np.uint16)
    scale = np.asarray(scale, dtype=np.uint16)
    fp16.require_finite(feat, scale)
    a = fp16.bits_to_float(feat)
    if mode == "ffn":
        b = _check_int4(wt).astype(np.float64)
    else:
        wt = np.asarray(wt, dtype=np.uint16)
        fp16.require_finite(wt)
        b = fp16.bits_to_float(wt)
    with np.errstate(invalid="ignore", over="ignore"):
        p = fp16.quantize_float(a * b, eb, mb)
        n = p.shape[-1]
        size = 1 << max(0, math.ceil(math.log2(max(n, 1))))
        if size != n:
            p = np.concatenate([p, np.zeros(p.shape[:-1] + (size - n,))], axis=-1)
        while p.shape[-1] > 1:
            p = fp16.quantize_float(p[..., 0::2] + p[..., 1::2], eb, mb)
        s = fp16.quantize_float(p[..., 0] * fp16.bits_to_float(scale), eb, mb)
        s = fp16.quantize_float(s, 5, 10)
    overflow = ~np.isfinite(s)
    finite = np.where(overflow, 0.0, s)
    bits = fp16.float_to_bits(finite)
    inf_bits = np.where(np.signbit(s), fp16.NEG_INF, fp16.POS_INF)
    return np.where(overflow, inf_bits, bits).astype(np.uint16), overflow


def dot_baseline(mode: str, variant: str, feat, wt, scale: int = fp16.ONE) -> int:
    bits, _ = dot_baseline_batch(mode, variant, np.asarray(feat)[None, :], np.asarray(wt)[None, :],
                                 np.asarray([scale], dtype=np.uint16))
    return int(bits[0])


# --------------------------------------------------------------------------
# error statistics


def exact_dot(feat, other, scale, mode: str) -> np.ndarray:
    """Oracle ``scale * sum(feat * other)`` per row.

    Every product of two halves (or a half and an INT4) is exact in float64;
    ``math.fsum`` then returns the correctly rounded exact sum, so the only
    rounding left is the final multiply (relative 2**-53).
    """
    a = fp16.bits_to_float(feat)
    b = np.asarray(other, dtype=np.float64) if mode == "ffn" else fp16.bits_to_float(other)
    prods = np.atleast_2d(a * b)
    sums = np.fromiter((math.fsum(row) for row in prods.tolist()), dtype=np.float64, count=len(prods))
    return sums * fp16.bits_to_float(scale)


def run_variant(mode: str, variant: str, feat, other, scale, config: PeConfig | None = None):
    """Evaluate one implementation; returns ``(bits, saturation counts)``."""
    if variant == "proposed":
        fn = dot_ffn_batch if mode == "ffn" else dot_mha_batch
        out, sat, _ = fn(feat, other, scale, config)
        return out, sat
    out, _ = dot_baseline_batch(mode, variant, feat, other, scale)
    return out, np.zeros(out.shape, dtype=np.int64)


def relative_errors(result_bits, oracle) -> np.ndarray:
    """|emulated - oracle| / |oracle| for rows whose oracle clears the floor."""
    got = fp16.bits_to_float(result_bits)
    keep = np.abs(oracle) > ERROR_FLOOR
    return np.abs(got[keep] - oracle[keep]) / np.abs(oracle[keep])


def measure_error(mode, variant, feat, other, scale, config: PeConfig | None = None) -> ErrorStats:
    feat = np.atleast_2d(np.asarray(feat, dtype=np.uint16))
    other = np.atleast_2d(np.asarray(other))
    scale = np.broadcast_to(np.asarray(scale, dtype=np.uint16), feat.shape[:1])
    out, sat = run_variant(mode, variant, feat, other, scale, config)
    rel = relative_errors(out, exact_dot(feat, other, scale, mode))
    return ErrorStats(
        mean_rel_pct=float(rel.mean() * 100) if rel.size else 0.0,
        max_rel_pct=float(rel.max() * 100) if rel.size else 0.0,
        saturation_count=int(sat.sum()),
        trials=len(feat),
        valid_trials=int(rel.size),
        extra={"sum_rel": float(rel.sum())},
    )


def random_operands(mode: str, trials: int, rng: np.random.Generator, lanes: int | None = None):
    """Draw activations uniform in [-1, 1] (rounded to FP16) and INT4 / FP16 partners."""
    lanes = lanes or PeConfig(mode=mode).lanes
    feat = fp16.float_to_bits(rng.uniform(-1.0, 1.0, (trials, lanes)))
    if mode == "ffn":
        other = rng.integers(-INT4_MAX, INT4_MAX + 1, (trials, lanes))
    else:
        other = fp16.float_to_bits(rng.uniform(-1.0, 1.0, (trials, lanes)))
    return feat, other


SHARD_TRIALS = 25_000
CHUNK_ROWS = 256


def _thread_cap(threads):
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("EDGELLM_THREADS")
    return max(1, int(env)) if env else 1


def error_sweep(mode: str, variant: str, trials: int, seed: int = 0,
                config: PeConfig | None = None, threads: int | None = None) -> ErrorStats:
    """Monte-Carlo relative error of one implementation.

    Trials are generated in fixed-size shards whose seeds are spawned from
    ``seed``, so the statistics do not depend on ``threads``.  Every variant
    sees the same operands for a given ``(mode, trials, seed)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    n_shards = -(-trials // SHARD_TRIALS)
    seqs = np.random.SeedSequence(seed).spawn(n_shards)
    sizes = [min(SHARD_TRIALS, trials - i * SHARD_TRIALS) for i in range(n_shards)]

    def shard(i):
        rng = np.random.default_rng(seqs[i])
        feat, other = random_operands(mode, sizes[i], rng)
        rels, sats = [], 0
        # row-wise work; cache-sized chunks keep temporaries small without changing results
        for a in range(0, sizes[i], CHUNK_ROWS):
            f, o = feat[a:a + CHUNK_ROWS], other[a:a + CHUNK_ROWS]
            scale = np.full(f.shape[0], fp16.ONE, dtype=np.uint16)
            out, sat = run_variant(mode, variant, f, o, scale, config)
            rels.append(relative_errors(out, exact_dot(f, o, scale, mode)))
            sats += int(sat.sum())
        return np.concatenate(rels), sats

    with ThreadPoolExecutor(max_workers=_thread_cap(threads)) as pool:
        parts = list(pool.map(shard, range(n_shards)))
    rel = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0)
    return ErrorStats(
        mean_rel_pct=float(rel.mean() * 100) if rel.size else 0.0,
        max_rel_pct=float(rel.max() * 100) if rel.size else 0.0,
        saturation_count=sum(p[1] for p in parts),
        trials=trials,
        valid_trials=int(rel.size),
    )


__all__ = [
    "PeConfig", "DotTrace", "ErrorStats", "NonFiniteInput",
    "dot_ffn", "dot_mha", "dot_baseline", "dot_ffn_batch", "dot_mha_batch", "dot_baseline_batch",
    "replay", "exact_dot", "measure_error", "error_sweep", "random_operands",
]
