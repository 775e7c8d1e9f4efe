"""Bit-level half precision helpers.

Everything here works on raw 16-bit patterns (``uint16``) and exact integer
significands, so results never depend on the host FPU.  Scalar helpers accept
plain ``int`` patterns; the ``*_bits`` array helpers are vectorised over numpy
arrays and are what the datapath models use internally.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

EXP_BIAS = 15
MAN_BITS = 10
HIDDEN = 1 << MAN_BITS
EMIN = -14
EMAX = 15
SUBNORMAL_EXP = EMIN - MAN_BITS  # weight of the subnormal LSB: 2**-24

POS_INF = 0x7C00
NEG_INF = 0xFC00
MAX_FINITE = 0x7BFF
ONE = 0x3C00
ZERO = 0x0000

ROUNDING_MODES = ("rne", "trunc")


class Fp16Parts(NamedTuple):
    """Decomposed half: ``value = (-1)**sign * significand * 2**(exponent - 10)``.

    ``kind`` is one of ``zero``, ``subnormal``, ``normal``, ``inf``, ``nan``.
    Subnormals report ``exponent == -14`` with the hidden bit clear.  For the
    special patterns ``exponent`` is 16 and the formula above does not apply.
    """

    sign: int
    exponent: int
    significand: int
    kind: str

    @property
    def is_special(self) -> bool:
        return self.kind in ("inf", "nan")


class NonFiniteInput(ValueError):
    """An Inf or NaN reached a datapath that has no special-value handling."""


def decompose(bits: int) -> Fp16Parts:
    bits = int(bits)
    if not 0 <= bits <= 0xFFFF:
        raise ValueError(f"not a 16-bit pattern: {bits:#x}")
    sign = bits >> 15
    field = (bits >> 10) & 0x1F
    man = bits & 0x3FF
    if field == 0x1F:
        return Fp16Parts(sign, EMAX + 1, man | HIDDEN, "nan" if man else "inf")
    if field == 0:
        return Fp16Parts(sign, EMIN, man, "subnormal" if man else "zero")
    return Fp16Parts(sign, field - EXP_BIAS, man | HIDDEN, "normal")


def compose(parts: Fp16Parts | tuple) -> int:
    """Inverse of :func:`decompose` (``kind`` is ignored if present)."""
    sign, exponent, significand = parts[0], parts[1], parts[2]
    if not 0 <= significand < 2 * HIDDEN:
        raise ValueError("significand must fit 11 bits")
    if significand & HIDDEN:
        field = exponent + EXP_BIAS
        if not 1 <= field <= 0x1F:
            raise ValueError(f"exponent {exponent} out of range for a normal half")
    else:
        if exponent != EMIN:
            raise ValueError("hidden bit clear requires the subnormal exponent -14")
        field = 0
    return (sign << 15) | (field << 10) | (significand & 0x3FF)


def is_finite_bits(bits) -> np.ndarray:
    return (np.asarray(bits, dtype=np.uint16) & 0x7C00) != 0x7C00


def require_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(is_finite_bits(a)):
            raise NonFiniteInput("Inf/NaN operand rejected by the datapath")


def decompose_bits(bits) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised decompose: ``(sign, unbiased exponent, significand)`` as int64."""
    b = np.asarray(bits, dtype=np.uint16).astype(np.int64)
    sign = b >> 15
    field = (b >> 10) & 0x1F
    man = b & 0x3FF
    normal = field > 0
    sig = np.where(normal, man | HIDDEN, man)
    exp = np.where(normal, field - EXP_BIAS, EMIN)
    return sign, exp, sig


def _bit_length(mag: np.ndarray) -> np.ndarray:
    # exact for |mag| < 2**53
    _, e = np.frexp(mag.astype(np.float64))
    return np.where(mag > 0, e, 0).astype(np.int64)


def _shift_right_rounded(mag, shift, mode):
    """``mag >> shift`` for non-negative shifts with the chosen rounding."""
    big = shift >= 63
    s = np.minimum(shift, 62)
    q = mag >> s
    if mode == "trunc":
        return np.where(big, 0, q)
    rem = mag - (q << s)
    half = np.where(s > 0, np.int64(1) << np.maximum(s - 1, 0), 0)
    up = (s > 0) & ((rem > half) | ((rem == half) & ((q & 1) == 1)))
    q = q + up.astype(np.int64)
    return np.where(big, 0, q)


def round_to_fp16_bits(sign, mag, exp2, mode: str = "rne"):
    """Round ``(-1)**sign * mag * 2**exp2`` to a half pattern.

    ``mag`` is a non-negative integer array below 2**53.  ``mode`` is ``rne``
    (round to nearest, ties to even) or ``trunc`` (toward zero).  Returns
    ``(bits, overflow)`` where ``overflow`` marks results that left the finite
    range (they become +-Inf under ``rne`` and +-max under ``trunc``).
    """
    if mode not in ROUNDING_MODES:
        raise ValueError(f"unknown rounding mode {mode!r}")
    sign = np.asarray(sign, dtype=np.int64)
    mag = np.asarray(mag, dtype=np.int64)
    exp2 = np.asarray(exp2, dtype=np.int64)
    sign, mag, exp2 = np.broadcast_arrays(sign, mag, exp2)

    bl = _bit_length(mag)
    e = bl - 1 + exp2  # unbiased exponent of the leading one
    normal = e >= EMIN
    # quantum exponent: normals keep 11 bits, subnormals are fixed at 2**-24
    q_exp = np.where(normal, e - MAN_BITS, SUBNORMAL_EXP)
    shift = q_exp - exp2
    right = _shift_right_rounded(mag, np.maximum(shift, 0), mode)
    left = mag << np.clip(-shift, 0, 62)
    sig = np.where(shift >= 0, right, left)

    # rounding carry into the next binade
    carry = sig >= 2 * HIDDEN
    sig = np.where(carry, sig >> 1, sig)
    q_exp = q_exp + carry

    # subnormal that rounded up to 1024 is the smallest normal: same encoding
    field = np.where(sig >= HIDDEN, q_exp + MAN_BITS + EXP_BIAS, 0)
    overflow = (field > 0x1E) & (mag > 0)
    sat = POS_INF if mode == "rne" else MAX_FINITE
    body = np.where(overflow, sat, (field << 10) | (sig & 0x3FF))
    body = np.where(mag == 0, 0, body)
    bits = ((sign & 1) << 15) | body
    bits = np.where(mag == 0, 0, bits)  # exact zero sums are +0
    return bits.astype(np.uint16), overflow


def float_to_bits(x, mode: str = "rne") -> np.ndarray:
    """Round float64 values to half patterns through the integer path."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("non-finite value cannot be encoded")
    m, e = np.frexp(np.abs(x))
    mag = np.ldexp(m, 53).astype(np.int64)
    bits, _ = round_to_fp16_bits(np.signbit(x).astype(np.int64), mag, e - 53, mode)
    # keep the sign of negative zero inputs
    bits = np.where((x == 0) & np.signbit(x), 0x8000, bits)
    return bits.astype(np.uint16)


def bits_to_float(bits) -> np.ndarray:
    """Exact float64 value of half patterns (Inf/NaN map to inf/nan)."""
    sign, exp, sig = decompose_bits(bits)
    val = np.ldexp(sig.astype(np.float64), exp - MAN_BITS)
    b = np.asarray(bits, dtype=np.uint16)
    special = (b & 0x7C00) == 0x7C00
    val = np.where(special, np.where((b & 0x3FF) != 0, np.nan, np.inf), val)
    return np.where(sign == 1, -val, val)


def fp16_mul_bits(a, b, mode: str = "rne"):
    """Correctly rounded half multiply; returns ``(bits, overflow)``."""
    sa, ea, ma = decompose_bits(a)
    sb, eb, mb = decompose_bits(b)
    return round_to_fp16_bits(sa ^ sb, ma * mb, ea + eb - 2 * MAN_BITS, mode)


def fp16_add_bits(a, b, mode: str = "rne"):
    """Correctly rounded half addition; returns ``(bits, overflow)``.

    Operands are aligned on the smaller exponent; the widest possible span
    (2**15 vs 2**-24 with an 11 bit significand) stays below 2**52.
    """
    sa, ea, ma = decompose_bits(a)
    sb, eb, mb = decompose_bits(b)
    lo = np.minimum(ea, eb)
    va = (ma << (ea - lo)) * np.where(sa == 1, -1, 1)
    vb = (mb << (eb - lo)) * np.where(sb == 1, -1, 1)
    total = va + vb
    bits, ovf = round_to_fp16_bits((total < 0).astype(np.int64), np.abs(total), lo - MAN_BITS, mode)
    # (-0) + (-0) keeps its sign under IEEE; everything else that cancels is +0
    both_neg_zero = (np.asarray(a, np.uint16) == 0x8000) & (np.asarray(b, np.uint16) == 0x8000)
    return np.where(both_neg_zero, 0x8000, bits).astype(np.uint16), ovf


def fp16_mul(a: int, b: int, mode: str = "rne") -> int:
    require_finite(a, b)
    return int(fp16_mul_bits(a, b, mode)[0])


def fp16_add(a: int, b: int, mode: str = "rne") -> int:
    require_finite(a, b)
    return int(fp16_add_bits(a, b, mode)[0])


def from_float(x: float, mode: str = "rne") -> int:
    return int(float_to_bits(x, mode))


def to_float(bits: int) -> float:
    return float(bits_to_float(bits))


def quantize_float(x, exp_bits: int, man_bits: int, mode: str = "rne") -> np.ndarray:
    """Round float64 values onto a custom ``S1-E<exp_bits>-M<man_bits>`` grid.

    Results stay float64 (every such grid with ``man_bits < 52`` embeds
    exactly).  Values past the largest finite magnitude become +-inf under
    ``rne`` and clamp under ``trunc``.  Used for the FP16 and FP20 reference
    adder trees.
    """
    x = np.asarray(x, dtype=np.float64)
    bias = (1 << (exp_bits - 1)) - 1
    emin = 1 - bias
    p = man_bits + 1
    ax = np.abs(x)
    _, e = np.frexp(ax)  # ax = m * 2**e, m in [0.5, 1)
    lead = e - 1
    quantum_exp = np.where(lead >= emin, lead - man_bits, emin - man_bits)
    scaled = np.ldexp(ax, -quantum_exp)
    if mode == "rne":
        q = np.rint(scaled)
    elif mode == "trunc":
        q = np.floor(scaled)
    else:
        raise ValueError(f"unknown rounding mode {mode!r}")
    out = np.ldexp(q, quantum_exp)
    max_finite = np.ldexp(2.0 - 2.0 ** (1 - p), bias)
    over = out > max_finite
    out = np.where(over, np.inf if mode == "rne" else max_finite, out)
    return np.copysign(out, x)
