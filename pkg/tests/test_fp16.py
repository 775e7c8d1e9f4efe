from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgellm import fp16

ALL = np.arange(1 << 16, dtype=np.uint32)
FINITE = [int(b) for b in ALL if (b >> 10) & 0x1F != 0x1F]
finite_bits = st.sampled_from(FINITE)


def _exact_value(bits: int) -> Fraction:
    """Arbitrary-precision decode straight from the IEEE field definitions."""
    s, e, m = bits >> 15, (bits >> 10) & 0x1F, bits & 0x3FF
    mag = Fraction(m, 1 << 24) if e == 0 else Fraction(1024 + m, 1024) * Fraction(2) ** (e - 15)
    return -mag if s else mag


def test_decompose_one():
    assert fp16.decompose(0x3C00)[:3] == (0, 0, 0b10000000000)


def test_decompose_zero():
    p = fp16.decompose(0x0000)
    assert (p.sign, p.significand, p.kind) == (0, 0, "zero")


def test_decompose_minus_five():
    assert fp16.decompose(0xC500)[:3] == (1, 2, 0b10100000000)


def test_decompose_matches_exhaustive_oracle():
    for b in FINITE:
        p = fp16.decompose(b)
        val = Fraction(p.significand) * Fraction(2) ** (p.exponent - 10)
        assert (-val if p.sign else val) == _exact_value(b), hex(b)


def test_compose_inverts_decompose_all_patterns():
    for b in range(1 << 16):
        p = fp16.decompose(b)
        if p.is_special:
            continue
        assert fp16.compose(p) == b


def test_specials_are_flagged():
    assert fp16.decompose(0x7C00).kind == "inf"
    assert fp16.decompose(0xFE00).kind == "nan"
    with pytest.raises(fp16.NonFiniteInput):
        fp16.require_finite(np.array([0x3C00, 0x7C00], dtype=np.uint16))


def test_bits_to_float_matches_numpy_half():
    bits = ALL.astype(np.uint16)
    ours = fp16.bits_to_float(bits)
    ref = bits.view(np.float16).astype(np.float64)
    finite = np.isfinite(ref)
    assert np.array_equal(ours[finite], ref[finite])


def test_float_to_bits_round_trips_every_finite_half():
    bits = np.array(FINITE, dtype=np.uint16)
    back = fp16.float_to_bits(fp16.bits_to_float(bits))
    nonneg_zero = bits != 0x8000
    assert np.array_equal(back[nonneg_zero], bits[nonneg_zero])


@given(st.floats(-65000, 65000, allow_nan=False))
def test_float_to_bits_matches_numpy_rounding(x):
    assert float(fp16.bits_to_float(fp16.float_to_bits(np.array([x])))[0]) == float(np.float16(x))


@given(finite_bits, finite_bits)
def test_mul_matches_correctly_rounded_product(a, b):
    with np.errstate(over="ignore"):
        ref = np.float16(np.float64(np.uint16(a).view(np.float16)) * np.float64(np.uint16(b).view(np.float16)))
    got = fp16.fp16_mul(a, b)
    if np.isinf(ref):
        assert got & 0x7FFF == 0x7C00
    else:
        assert fp16.to_float(got) == float(ref)


@given(finite_bits, finite_bits)
def test_add_matches_correctly_rounded_sum(a, b):
    exact = np.float64(np.uint16(a).view(np.float16)) + np.float64(np.uint16(b).view(np.float16))
    with np.errstate(over="ignore"):
        ref = np.float16(exact)
    got = fp16.fp16_add(a, b)
    if np.isinf(ref):
        assert got & 0x7FFF == 0x7C00
    else:
        assert fp16.to_float(got) == float(ref)


def test_truncating_mode_never_rounds_up():
    x = np.array([1.0 + 2 ** -11 + 2 ** -13, -(1.0 + 3 * 2 ** -12)])
    t = fp16.bits_to_float(fp16.float_to_bits(x, mode="trunc"))
    assert np.all(np.abs(t) <= np.abs(x))


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_quantize_float_to_half_format_agrees_with_bits(x):
    q = fp16.quantize_float(np.array([x]), 5, 10)[0]
    assert q == float(np.float16(x))
