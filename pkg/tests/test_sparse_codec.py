import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgellm import fp16
from edgellm import operators as op
from edgellm import sparse_codec as sc
from edgellm.sparse_codec import MaskEncoding as E, SparsityLevel as L

COLUMNS = [
    (L.DENSE, E.NONE, 8448, 4.125),
    (L.S50, E.ONEHOT, 6400, 3.125),
    (L.S75, E.ADDR, 3840, 1.875),
    (L.S875, E.ONEHOT, 3328, 1.625),
    (L.S875, E.ADDR, 2304, 1.125),
]
seeds = st.integers(0, 2 ** 32 - 1)
column = st.sampled_from([(lv, enc) for lv, enc, *_ in COLUMNS])


def random_group(seed, level, channels=sc.GROUP_CHANNELS):
    rng = np.random.default_rng(seed)
    w = sc.sparsify(rng.integers(-7, 8, channels), level)
    scales = fp16.float_to_bits(rng.uniform(0.001, 1.0, channels // sc.BLOCK))
    return scales, w


# -- quantization -------------------------------------------------------------

def test_quantize_zero_block():
    qb = sc.quantize_block(np.zeros(128))
    assert qb.scale == 0 and not qb.weights.any()


def test_quantize_exact_block():
    w = np.zeros(128)
    w[:2] = [7.0, -7.0]
    qb = sc.quantize_block(w)
    assert fp16.to_float(qb.scale) == 1.0
    assert qb.weights[:3].tolist() == [7, -7, 0]


@given(seeds)
def test_quantization_error_bounded_by_half_step(seed):
    w = np.random.default_rng(seed).normal(size=128)
    qb = sc.quantize_block(w)
    step = fp16.to_float(qb.scale)
    assert np.all(np.abs(qb.dequantize() - w) <= 0.5 * step + np.abs(w).max() * 2 ** -10)
    assert qb.weights.min() >= -7 and qb.weights.max() <= 7


# -- sparsify -------------------------------------------------------------------

def test_sparsify_dense_is_identity():
    w = np.arange(16.0)
    assert np.array_equal(sc.sparsify(w, "dense"), w)


def test_sparsify_s75_window():
    out = sc.sparsify(np.array([8, 7, 6, 5, 4, 3, 2, 1.0]), "s75")
    assert out.tolist() == [8, 7, 0, 0, 0, 0, 0, 0]


def test_sparsify_ties_keep_lower_index():
    out = sc.sparsify(np.array([1, -1, 1, 1, 0, 0, 0, 0.0]), "s75")
    assert out.tolist() == [1, -1, 0, 0, 0, 0, 0, 0]


@given(seeds, st.sampled_from([L.S50, L.S75, L.S875]))
def test_sparsify_satisfies_window_constraint(seed, level):
    w = np.random.default_rng(seed).normal(size=(3, 256))
    out = sc.sparsify(w, level)
    assert sc.window_ok(out, level)
    kept = out != 0
    assert np.all(out[kept] == w[kept])


def test_s875_uses_sixteen_wide_windows():
    assert (L.S875.window, L.S875.keep) == (16, 2)


# -- group codec ------------------------------------------------------------------

@pytest.mark.parametrize("level,enc,bits,ebw", COLUMNS)
def test_group_bit_budget(level, enc, bits, ebw):
    scales, w = random_group(1, level)
    g = sc.encode_group(scales, w, level, enc)
    assert g.total_bits == bits == sc.group_bits(level, enc)
    assert len(g.data) == bits // 8
    assert sc.effective_bitwidth(level, enc) == ebw


def test_field_split():
    assert sc.field_bits(L.DENSE) == (256, 0, 8192)
    assert sc.field_bits(L.S75, E.ADDR) == (256, 1536, 2048)
    assert sc.field_bits(L.S875, E.ADDR) == (256, 1024, 1024)


@pytest.mark.parametrize("level,enc,ratio", [
    (L.S50, E.ONEHOT, 1.32), (L.S75, E.ADDR, 2.2), (L.S875, E.ONEHOT, 2.54), (L.S875, E.ADDR, 3.67)])
def test_enhancement_ratios(level, enc, ratio):
    assert abs(sc.enhancement_ratio(level, enc) - ratio) <= 0.01


def test_unsupported_pairs_rejected():
    with pytest.raises(ValueError):
        sc.resolve("s50", "addr")
    with pytest.raises(ValueError):
        sc.resolve("dense", "onehot")


def test_encode_rejects_window_violation():
    scales = np.zeros(16, np.uint16)
    with pytest.raises(ValueError):
        sc.encode_group(scales, np.ones(2048, int), "s50")


def test_all_zero_s875_round_trip():
    g = sc.encode_group(np.zeros(16, np.uint16), np.zeros(2048, int), "s875")
    scales, w = sc.decode_group(g)
    assert not scales.any() and not w.any()


def test_random_s50_groups_round_trip():
    for seed in range(1000):
        scales, w = random_group(seed, L.S50)
        s2, w2 = sc.decode_group(sc.encode_group(scales, w, L.S50))
        assert np.array_equal(s2, scales) and np.array_equal(w2, w)


@given(seeds, column)
def test_round_trip_every_column(seed, col):
    level, enc = col
    scales, w = random_group(seed, level)
    s2, w2 = sc.decode_group(sc.encode_group(scales, w, level, enc))
    assert np.array_equal(s2, scales) and np.array_equal(w2, w)


def test_hand_built_onehot_group():
    # scale 1.0 | mask bits at 1,3,6,7 | slots 3, -2, 5, 1 (little-endian nibbles)
    data = bytes([0x00, 0x3C, 0xCA, 0xE3, 0x15])
    g = sc.PackedGroup(L.S50, E.ONEHOT, 8, data)
    scales, w = sc.decode_group(g)
    assert scales.tolist() == [0x3C00]
    assert w.tolist() == [0, 3, 0, -2, 0, 0, 5, 1]
    enc = sc.encode_group([0x3C00], [0, 3, 0, -2, 0, 0, 5, 1], L.S50, E.ONEHOT)
    assert enc.data == data


def test_hand_built_address_group():
    # S75: two 3-bit offsets per window (2 and 5), then slots -7 and 4
    bits = [0, 1, 0, 1, 0, 1]
    bits += [1, 0, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0]  # 9 (-7) and 4
    scale = [(0x3800 >> i) & 1 for i in range(16)]
    packed = np.packbits(np.array(scale + bits, np.uint8), bitorder="little").tobytes()
    scales, w = sc.decode_group(sc.PackedGroup(L.S75, E.ADDR, 8, packed))
    assert scales.tolist() == [0x3800]
    assert w.tolist() == [0, 0, -7, 0, 0, 4, 0, 0]


def test_malformed_groups_rejected():
    bad = bytes([0x00, 0x3C, 0xFF, 0x11, 0x11])  # mask marks 8 positions, 4 slots
    with pytest.raises(sc.MalformedGroup):
        sc.decode_group(sc.PackedGroup(L.S50, E.ONEHOT, 8, bad))
    with pytest.raises(sc.MalformedGroup):
        sc.decode_group(sc.PackedGroup(L.S50, E.ONEHOT, 8, bytes(4)))


# -- activation selection -----------------------------------------------------------

def test_select_dense_mask_is_identity():
    f = np.arange(8)
    assert sc.select_activations(np.ones(8, bool), f).tolist() == f.tolist()


def test_select_positions():
    m = np.zeros(8, bool)
    m[[0, 5]] = True
    assert sc.select_activations(m, np.arange(10, 18)).tolist() == [10, 15]


# -- packed compute equals dense compute --------------------------------------------

@given(seeds, column)
def test_packed_vmm_equals_dense_vmm(seed, col):
    level, enc = col
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(4, 256))
    layer = sc.pack_layer("w", w, level, enc)
    scales, q = layer.decode()
    x = fp16.float_to_bits(rng.uniform(-1, 1, (2, 256)))
    packed = op.vmm_bn(x, op.VmmWeights.from_packed(layer))
    dense = op.vmm_bn(x, op.VmmWeights.from_dense(scales, q, 256))
    assert np.array_equal(packed, dense)


# -- layers and packages ----------------------------------------------------------------

def test_q_layer_dense_size():
    spec = sc.LayerSpec("q", 4096, 4096)
    assert spec.payload_bits() / 8 / sc.MIB == 8.25


def test_o_layer_s50_size():
    spec = sc.LayerSpec("o", 4096, 4096, L.S50)
    assert spec.payload_bits() / 8 / sc.MIB == 6.25


def test_toy_dense_size_closed_form():
    spec = sc.LayerSpec("x", 64, 2048)
    assert spec.stored_bytes() == 64 * 2048 * 4.125 / 8


def test_padding_channels_are_zero_and_unmarked():
    layer = sc.pack_layer("w", np.ones((2, 100)), "s50")
    scales, q = layer.decode()
    assert not q[:, 100:].any()
    assert not scales[:, 1:].any()
    assert layer.spec.padded_in == 2048


def test_package_binary_round_trip(toy_package):
    data = sc.dumps(toy_package)
    assert data[:4] == b"ELWP"
    back = sc.loads(data)
    assert sc.dumps(back) == data
    for a, b in zip(toy_package.layers, back.layers):
        assert np.array_equal(a.decode()[1], b.decode()[1])


def test_package_rejects_truncation(toy_package):
    data = sc.dumps(toy_package)
    with pytest.raises(ValueError):
        sc.loads(data[:-3])
    with pytest.raises(ValueError):
        sc.loads(b"XXXX" + data[4:])


def test_port_map_assigns_channel_modulo_ports(toy_package):
    ports = toy_package.port_map()
    for p, entries in ports.items():
        assert all(c % sc.HBM_PORTS == p for _, c in entries)
