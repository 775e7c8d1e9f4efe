import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgellm import fp16
from edgellm import mixed_precision as mp

LANES = 128
MHA_LANES = 32


def h(values):
    return fp16.float_to_bits(np.asarray(values, dtype=np.float64))


def val(bits):
    return fp16.to_float(int(bits))


seeds = st.integers(0, 2 ** 32 - 1)


def operands(seed, mode="ffn", lanes=None):
    rng = np.random.default_rng(seed)
    f, o = mp.random_operands(mode, 1, rng, lanes)
    return f[0], o[0]


# -- worked examples ---------------------------------------------------------

def test_ffn_zero_input():
    wt = np.random.default_rng(0).integers(-7, 8, LANES)
    assert val(mp.dot_ffn(np.zeros(LANES, np.uint16), wt)) == 0.0


def test_ffn_single_lane():
    feat = np.zeros(LANES, np.uint16)
    feat[0] = fp16.ONE
    wt = np.zeros(LANES, int)
    wt[0] = 3
    assert val(mp.dot_ffn(feat, wt)) == 3.0


def test_mha_unit_vector():
    e0 = np.zeros(MHA_LANES, np.uint16)
    e0[0] = fp16.ONE
    assert val(mp.dot_mha(e0, e0)) == 1.0


def test_mha_equal_exponents_exact():
    half = h(np.full(MHA_LANES, 0.5))
    assert val(mp.dot_mha(half, half)) == 8.0


@pytest.mark.parametrize("variant", ["fp16tree", "fp20tree"])
@pytest.mark.parametrize("mode", ["ffn", "mha"])
def test_single_lane_exact_in_all_variants(mode, variant):
    n = LANES if mode == "ffn" else MHA_LANES
    feat = np.zeros(n, np.uint16)
    feat[5] = h([0.7109375])[0]
    if mode == "ffn":
        other = np.zeros(n, int)
        other[5] = -5
        want = -5 * 0.7109375
        proposed = mp.dot_ffn(feat, other)
    else:
        other = np.zeros(n, np.uint16)
        other[5] = h([0.375])[0]
        want = 0.375 * 0.7109375
        proposed = mp.dot_mha(feat, other)
    assert val(mp.dot_baseline(mode, variant, feat, other)) == want
    assert val(proposed) == want


def test_error_sweep_zero_vectors():
    z = np.zeros((1, LANES), np.uint16)
    stats = mp.measure_error("ffn", "proposed", z, np.zeros((1, LANES), int), fp16.ONE)
    assert stats.mean_rel_pct == 0.0


def test_error_sweep_is_deterministic():
    a = mp.error_sweep("ffn", "proposed", 2000, seed=11)
    b = mp.error_sweep("ffn", "proposed", 2000, seed=11)
    assert a == b


def test_error_sweep_independent_of_thread_count():
    a = mp.error_sweep("mha", "proposed", 60_000, seed=3, threads=1)
    b = mp.error_sweep("mha", "proposed", 60_000, seed=3, threads=4)
    assert a == b


# -- datapath widths ----------------------------------------------------------

def test_default_widths():
    ffn, mha = mp.PeConfig(mode="ffn"), mp.PeConfig(mode="mha")
    assert (ffn.adder_width, ffn.addend_width, ffn.lanes) == (26, 19, 128)
    assert (mha.adder_width, mha.addend_width, mha.lanes) == (26, 21, 32)


def test_config_rejects_adder_too_narrow_for_lanes():
    with pytest.raises(ValueError):
        mp.PeConfig(adder_width=19, product_width=19)


def test_int4_range_is_symmetric():
    with pytest.raises(ValueError):
        mp.dot_ffn(np.zeros(LANES, np.uint16), np.full(LANES, -8))


def test_non_finite_inputs_rejected():
    feat = np.zeros(LANES, np.uint16)
    feat[3] = fp16.POS_INF
    with pytest.raises(fp16.NonFiniteInput):
        mp.dot_ffn(feat, np.ones(LANES, int))


def test_overflow_flags_infinity():
    feat = h(np.full(LANES, 60000.0))
    out, _, ovf = mp.dot_ffn_batch(feat[None], np.full((1, LANES), 7), np.array([fp16.ONE], np.uint16))
    assert ovf[0] and (int(out[0]) & 0x7FFF) == 0x7C00


@pytest.mark.parametrize("mode", ["ffn", "mha"])
def test_worst_case_addends_fit_the_adder(mode):
    n = LANES if mode == "ffn" else MHA_LANES
    feat = h(np.full(n, 1.9990234375))
    other = np.full(n, 7) if mode == "ffn" else feat
    fn = mp.dot_ffn if mode == "ffn" else mp.dot_mha
    _, t = fn(feat, other, trace=True)
    assert t.saturations == 0
    assert abs(t.accumulator) < 1 << (mp.PeConfig(mode=mode).adder_width - 1)


def test_adder_tree_clamps_and_counts():
    total, sat = mp._tree_sum(np.full((1, 4), 100, dtype=np.int64), 8)
    assert int(total[0]) == 127 and int(sat[0]) == 3


def test_zero_products_do_not_set_the_alignment_exponent():
    feat = h(np.r_[1024.0, np.full(LANES - 1, 0.0009765625)])
    wt = np.r_[0, np.ones(LANES - 1, int)]
    _, t = mp.dot_ffn(feat, wt, trace=True)
    assert t.max_exponent == fp16.decompose(int(feat[1])).exponent
    assert val(mp.dot_ffn(feat, wt)) == float(np.float16(127 * 0.0009765625))


# -- properties ----------------------------------------------------------------

@given(seeds, st.integers(0, 2 ** 32 - 1))
def test_lane_permutation_invariance(seed, pseed):
    feat, wt = operands(seed)
    perm = np.random.default_rng(pseed).permutation(LANES)
    out, t = mp.dot_ffn(feat, wt, trace=True)
    assert t.saturations == 0
    assert mp.dot_ffn(feat[perm], wt[perm]) == out


@given(seeds, st.floats(2 ** -6, 64.0))
def test_scale_is_a_final_fp16_multiply(seed, s):
    feat, wt = operands(seed)
    scale = int(h([s])[0])
    unscaled = mp.dot_ffn(feat, wt)
    assert mp.dot_ffn(feat, wt, scale) == fp16.fp16_mul(unscaled, scale)


@given(seeds)
def test_negating_weights_negates_result(seed):
    feat, wt = operands(seed)
    a, b = mp.dot_ffn(feat, wt), mp.dot_ffn(feat, -wt)
    assert fp16.to_float(a) == -fp16.to_float(b)


@given(seeds, st.integers(-3, 3))
def test_exactness_window(seed, exp):
    rng = np.random.default_rng(seed)
    sig = rng.integers(1024, 2048, LANES)
    feat = h(sig / 1024.0 * 2.0 ** exp)
    wt = rng.integers(-7, 8, LANES)
    wt[wt == 0] = 1
    exact = mp.exact_dot(feat[None], wt[None], np.array([fp16.ONE], np.uint16), "ffn")[0]
    assert mp.dot_ffn(feat, wt) == int(h([exact])[0])


@given(seeds)
def test_mha_exactness_window(seed):
    rng = np.random.default_rng(seed)
    a = h(rng.integers(1024, 2048, MHA_LANES) / 2048.0)
    b = h(rng.integers(1024, 2048, MHA_LANES) / 2048.0)
    lanes = np.ones(MHA_LANES, bool)
    # equal product exponents: keep pairs whose product stays in [1/4, 1/2)
    prod = fp16.bits_to_float(a) * fp16.bits_to_float(b)
    lanes &= prod < 0.5
    a = np.where(lanes, a, 0).astype(np.uint16)
    exact = mp.exact_dot(a[None], b[None], np.array([fp16.ONE], np.uint16), "mha")[0]
    assert abs(val(mp.dot_mha(a, b)) - float(np.float16(exact))) <= abs(exact) * 2 ** -10


@given(seeds, st.sampled_from(["ffn", "mha"]))
def test_trace_replay_is_deterministic(seed, mode):
    feat, other = operands(seed, mode)
    fn = mp.dot_ffn if mode == "ffn" else mp.dot_mha
    out1, t1 = fn(feat, other, trace=True)
    out2, t2 = fn(feat, other, trace=True)
    assert out1 == out2 and t1 == t2
    assert mp.replay(t1, fp16.ONE, mp.PeConfig(mode=mode)) == out1


@given(seeds, st.sampled_from(["ffn", "mha"]))
def test_batch_matches_single(seed, mode):
    rng = np.random.default_rng(seed)
    f, o = mp.random_operands(mode, 8, rng)
    scale = np.full(8, fp16.ONE, np.uint16)
    fn_b = mp.dot_ffn_batch if mode == "ffn" else mp.dot_mha_batch
    fn = mp.dot_ffn if mode == "ffn" else mp.dot_mha
    out, _, _ = fn_b(f, o, scale)
    assert [int(x) for x in out] == [fn(f[i], o[i]) for i in range(8)]


def test_rounding_switch_truncates():
    feat, wt = operands(5)
    rne = mp.dot_ffn(feat, wt)
    trunc = mp.dot_ffn(feat, wt, config=mp.PeConfig(rounding="trunc"))
    assert abs(val(trunc)) <= abs(val(rne)) + 1e-12


def test_exact_dot_oracle_is_exact():
    feat = h([1.0, 2 ** -24, -1.0])
    got = mp.exact_dot(feat[None], np.array([[1, 1, 1]]), np.array([fp16.ONE], np.uint16), "ffn")[0]
    assert got == 2 ** -24


def test_proposed_mean_error_small_sweep():
    ffn = mp.error_sweep("ffn", "proposed", 5000, seed=1)
    mha = mp.error_sweep("mha", "proposed", 5000, seed=1)
    assert ffn.mean_rel_pct < 0.1 and mha.mean_rel_pct < 0.02
    assert ffn.valid_trials > 4900
