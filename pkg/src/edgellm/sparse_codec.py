"""Block quantization, log-scale structured sparsity and the packed weight format.

A *group* covers 2048 input channels of one output channel and serialises as
``scale | mask | wt``:

* ``scale`` -- one FP16 scale per 128-channel block (16 x 16 bits),
* ``mask``  -- absent for dense groups; one presence bit per channel for the
  one-hot encoding; one window offset per kept slot for address-in-block,
* ``wt``    -- 4-bit two's-complement weights, one per kept slot.

Every window holds a fixed number of slots, so a group's size depends only on
its ``(level, encoding)`` pair.  Windows with fewer nonzeros than slots fill
the spare slots with zero weights (one-hot: unmarked trailing slots;
address-in-block: the lowest unused offsets).

All fields are little-endian and LSB-first; nonzeros are packed in ascending
channel order.  The bitstream is packed into bytes LSB-first.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import fp16

BLOCK = 128
GROUP_CHANNELS = 2048
SCALE_BITS = 16
WEIGHT_BITS = 4
HBM_PORTS = 32
INT4_MAX = 7
MIB = float(1 << 20)


class SparsityLevel(Enum):
    """Kept fraction as ``keep`` slots per ``window`` positions."""

    DENSE = ("dense", 8, 8)
    S50 = ("s50", 8, 4)
    S75 = ("s75", 8, 2)
    S875 = ("s875", 16, 2)

    def __init__(self, label, window, keep):
        self.label = label
        self.window = window
        self.keep = keep

    @property
    def kept_fraction(self) -> float:
        return self.keep / self.window

    @property
    def code(self) -> int:
        return list(SparsityLevel).index(self)

    @classmethod
    def parse(cls, value) -> "SparsityLevel":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("%", "").replace(".", "")
        aliases = {"dense": cls.DENSE, "none": cls.DENSE, "0": cls.DENSE,
                   "s50": cls.S50, "50": cls.S50,
                   "s75": cls.S75, "75": cls.S75,
                   "s875": cls.S875, "875": cls.S875}
        if key not in aliases:
            raise ValueError(f"unknown sparsity level {value!r}")
        return aliases[key]


class MaskEncoding(Enum):
    NONE = "none"
    ONEHOT = "onehot"
    ADDR = "addr"

    @property
    def code(self) -> int:
        return list(MaskEncoding).index(self)

    @classmethod
    def parse(cls, value) -> "MaskEncoding":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {"none": cls.NONE, "onehot": cls.ONEHOT, "addr": cls.ADDR,
                   "addrinblock": cls.ADDR}
        if key not in aliases:
            raise ValueError(f"unknown mask encoding {value!r}")
        return aliases[key]


SUPPORTED = {
    (SparsityLevel.DENSE, MaskEncoding.NONE): 8448,
    (SparsityLevel.S50, MaskEncoding.ONEHOT): 6400,
    (SparsityLevel.S75, MaskEncoding.ADDR): 3840,
    (SparsityLevel.S875, MaskEncoding.ONEHOT): 3328,
    (SparsityLevel.S875, MaskEncoding.ADDR): 2304,
}

DEFAULT_ENCODING = {
    SparsityLevel.DENSE: MaskEncoding.NONE,
    SparsityLevel.S50: MaskEncoding.ONEHOT,
    SparsityLevel.S75: MaskEncoding.ADDR,
    SparsityLevel.S875: MaskEncoding.ADDR,
}


class MalformedGroup(ValueError):
    pass


def resolve(level, encoding=None) -> tuple[SparsityLevel, MaskEncoding]:
    level = SparsityLevel.parse(level)
    encoding = DEFAULT_ENCODING[level] if encoding is None else MaskEncoding.parse(encoding)
    if (level, encoding) not in SUPPORTED:
        raise ValueError(f"unsupported (level, encoding) pair: {level.label}/{encoding.value}")
    return level, encoding


def address_bits(level: SparsityLevel) -> int:
    return int(math.log2(level.window))


def field_bits(level, encoding=None, channels: int = GROUP_CHANNELS) -> tuple[int, int, int]:
    """``(scale, mask, wt)`` bit counts of one group."""
    level, encoding = resolve(level, encoding)
    if channels % max(level.window, 8) or channels <= 0:
        raise ValueError(f"channel count {channels} is not a multiple of the window")
    slots = channels // level.window * level.keep
    scale = -(-channels // BLOCK) * SCALE_BITS
    if encoding is MaskEncoding.NONE:
        mask = 0
    elif encoding is MaskEncoding.ONEHOT:
        mask = channels
    else:
        mask = slots * address_bits(level)
    return scale, mask, slots * WEIGHT_BITS


def group_bits(level, encoding=None, channels: int = GROUP_CHANNELS) -> int:
    return sum(field_bits(level, encoding, channels))


def effective_bitwidth(level, encoding=None) -> float:
    """Stored bits per weight position (scales and mask included)."""
    return group_bits(level, encoding) / GROUP_CHANNELS


def enhancement_ratio(level, encoding=None) -> float:
    return group_bits(SparsityLevel.DENSE) / group_bits(level, encoding)


# --------------------------------------------------------------------------
# quantization and sparsification


@dataclass(frozen=True)
class QuantBlock:
    scale: int
    weights: np.ndarray

    def dequantize(self) -> np.ndarray:
        return fp16.to_float(self.scale) * self.weights.astype(np.float64)


def quantize_rows(w) -> tuple[np.ndarray, np.ndarray]:
    """Quantize ``(..., n*128)`` reals blockwise: returns ``(scale bits (..., n), int4 (..., n*128))``."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite weight")
    if w.shape[-1] % BLOCK:
        raise ValueError(f"row length must be a multiple of {BLOCK}")
    blocks = w.reshape(w.shape[:-1] + (-1, BLOCK))
    amax = np.abs(blocks).max(axis=-1)
    scale_bits = fp16.float_to_bits(amax / INT4_MAX)
    scale = fp16.bits_to_float(scale_bits)
    safe = np.where(scale > 0, scale, 1.0)
    q = np.where(scale[..., None] > 0, np.rint(blocks / safe[..., None]), 0.0)
    q = np.clip(q, -INT4_MAX, INT4_MAX).astype(np.int8)
    return scale_bits, q.reshape(w.shape)


def quantize_block(w) -> QuantBlock:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (BLOCK,):
        raise ValueError(f"a block holds exactly {BLOCK} weights")
    s, q = quantize_rows(w[None, :])
    return QuantBlock(int(s[0, 0]), q[0])


def dequantize_rows(scale_bits, q) -> np.ndarray:
    q = np.asarray(q)
    scale = fp16.bits_to_float(scale_bits)
    blocks = q.reshape(q.shape[:-1] + (-1, BLOCK)).astype(np.float64)
    return (blocks * scale[..., None]).reshape(q.shape)


def sparsify(w, level) -> np.ndarray:
    """Keep the largest-magnitude entries of every window (ties: lower index)."""
    level = SparsityLevel.parse(level)
    w = np.asarray(w)
    if level is SparsityLevel.DENSE:
        return w.copy()
    if w.shape[-1] % level.window:
        raise ValueError(f"length must be a multiple of the window ({level.window})")
    win = w.reshape(w.shape[:-1] + (-1, level.window))
    order = np.argsort(-np.abs(win), axis=-1, kind="stable")
    keep = np.zeros(win.shape, dtype=bool)
    np.put_along_axis(keep, order[..., : level.keep], True, axis=-1)
    return np.where(keep, win, 0).reshape(w.shape)


def window_ok(w, level) -> bool:
    level = SparsityLevel.parse(level)
    w = np.asarray(w)
    if w.shape[-1] % level.window:
        return False
    counts = (w.reshape(w.shape[:-1] + (-1, level.window)) != 0).sum(axis=-1)
    return bool(np.all(counts <= level.keep))


# --------------------------------------------------------------------------
# bit-level group codec


def _uint_bits(values, width) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64).reshape(-1, 1)
    return ((v >> np.arange(width)) & 1).astype(np.uint8).reshape(-1)


def _bits_uint(bits, width) -> np.ndarray:
    b = np.asarray(bits, dtype=np.int64).reshape(-1, width)
    return (b << np.arange(width)).sum(axis=1)


@dataclass(frozen=True)
class PackedGroup:
    level: SparsityLevel
    encoding: MaskEncoding
    channels: int
    data: bytes

    @property
    def fields(self) -> tuple[int, int, int]:
        return field_bits(self.level, self.encoding, self.channels)

    @property
    def scale_bits(self) -> int:
        return self.fields[0]

    @property
    def mask_bits(self) -> int:
        return self.fields[1]

    @property
    def weight_bits(self) -> int:
        return self.fields[2]

    @property
    def total_bits(self) -> int:
        return sum(self.fields)

    def bits(self) -> np.ndarray:
        raw = np.unpackbits(np.frombuffer(self.data, dtype=np.uint8), bitorder="little")
        return raw[: self.total_bits]


def _slot_positions(win: np.ndarray, keep: int) -> np.ndarray:
    """Per window: nonzero offsets first (ascending), then unused offsets (ascending)."""
    order = np.argsort(win == 0, axis=-1, kind="stable")
    return order[..., :keep]


def encode_group(scales, weights, level, encoding=None, channels: int | None = None) -> PackedGroup:
    """Serialise one group of sparsified INT4 weights and their block scales."""
    level, encoding = resolve(level, encoding)
    w = np.asarray(weights, dtype=np.int64).reshape(-1)
    channels = channels or len(w)
    if len(w) != channels:
        raise ValueError("weight count does not match channel count")
    if w.size and (w.min() < -INT4_MAX or w.max() > INT4_MAX):
        raise ValueError("INT4 weights must lie in [-7, 7]")
    scales = np.asarray(scales, dtype=np.uint16).reshape(-1)
    n_scale, _, _ = field_bits(level, encoding, channels)
    if len(scales) * SCALE_BITS != n_scale:
        raise ValueError(f"expected {n_scale // SCALE_BITS} scales, got {len(scales)}")
    if not window_ok(w, level):
        raise ValueError(f"weights violate the {level.label} window constraint")

    parts = [_uint_bits(scales, SCALE_BITS)]
    if encoding is MaskEncoding.NONE:
        slot_w = w
    else:
        win = w.reshape(-1, level.window)
        pos = _slot_positions(win, level.keep)
        if encoding is MaskEncoding.ADDR:
            pos = np.sort(pos, axis=-1)
            parts.append(_uint_bits(pos.reshape(-1), address_bits(level)))
        else:
            parts.append((win != 0).astype(np.uint8).reshape(-1))
        slot_w = np.take_along_axis(win, pos, axis=-1).reshape(-1)
    parts.append(_uint_bits(slot_w & 0xF, WEIGHT_BITS))
    bits = np.concatenate(parts)
    return PackedGroup(level, encoding, channels, np.packbits(bits, bitorder="little").tobytes())


def _slots(g: PackedGroup):
    """Decode to ``(scales, slot positions (absolute, -1 if unused), slot weights)``."""
    bits = g.bits()
    if len(bits) < g.total_bits:
        raise MalformedGroup("truncated group")
    ns, nm, _ = g.fields
    scales = _bits_uint(bits[:ns], SCALE_BITS).astype(np.uint16)
    raw = _bits_uint(bits[ns + nm:], WEIGHT_BITS)
    wts = np.where(raw >= 8, raw - 16, raw)
    if np.any(wts == -8):
        raise MalformedGroup("INT4 value -8 is outside the symmetric range")
    level = g.level
    if g.encoding is MaskEncoding.NONE:
        return scales, np.arange(g.channels), wts
    n_win = g.channels // level.window
    base = (np.arange(n_win) * level.window)[:, None]
    slot_w = wts.reshape(n_win, level.keep)
    mask_bits = bits[ns:ns + nm]
    if g.encoding is MaskEncoding.ONEHOT:
        present = mask_bits.reshape(n_win, level.window).astype(bool)
        count = present.sum(axis=1)
        if np.any(count > level.keep):
            raise MalformedGroup("mask marks more positions than the window has slots")
        nz_slots = (slot_w != 0).sum(axis=1)
        filled = np.arange(level.keep)[None, :] < count[:, None]
        if np.any(nz_slots != count) or np.any((slot_w != 0) & ~filled):
            raise MalformedGroup("mask population does not match the nonzero weight count")
        order = np.argsort(~present, axis=1, kind="stable")[:, : level.keep]
        pos = np.where(filled, base + order, -1)
    else:
        offs = _bits_uint(mask_bits, address_bits(level)).reshape(n_win, level.keep)
        if level.keep > 1 and np.any(np.diff(offs, axis=1) <= 0):
            raise MalformedGroup("window offsets must be strictly increasing")
        pos = base + offs
    return scales, pos.reshape(-1), slot_w.reshape(-1)


def decode_group(g: PackedGroup) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`encode_group`: ``(scales, dense int8 weights)``."""
    scales, pos, wts = _slots(g)
    dense = np.zeros(g.channels, dtype=np.int8)
    used = pos >= 0
    dense[pos[used]] = wts[used]
    return scales, dense


def group_slots(g: PackedGroup) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scales, per-slot channel positions (``-1`` when unused) and slot weights."""
    return _slots(g)


def select_activations(mask, feats) -> np.ndarray:
    """Gather the activations a presence mask selects, in ascending channel order."""
    mask = np.asarray(mask, dtype=bool)
    feats = np.asarray(feats)
    if mask.shape[-1] != feats.shape[-1]:
        raise ValueError("mask and activation lengths differ")
    return feats[..., mask]


def gather_slots(positions, feats) -> np.ndarray:
    """Gather activations for slot positions; unused slots read +0."""
    positions = np.asarray(positions)
    feats = np.asarray(feats)
    safe = np.where(positions >= 0, positions, 0)
    out = feats[..., safe]
    return np.where(positions >= 0, out, 0).astype(feats.dtype)


# --------------------------------------------------------------------------
# whole layers and models


@dataclass
class LayerSpec:
    name: str
    ch_out: int
    ch_in: int
    level: SparsityLevel = SparsityLevel.DENSE
    encoding: MaskEncoding | None = None

    def __post_init__(self):
        if self.ch_out <= 0 or self.ch_in <= 0:
            raise ValueError(f"layer {self.name}: dims must be positive")
        self.level, self.encoding = resolve(self.level, self.encoding)

    @property
    def portions(self) -> int:
        return -(-self.ch_in // GROUP_CHANNELS)

    @property
    def padded_in(self) -> int:
        return self.portions * GROUP_CHANNELS

    @property
    def group_bytes(self) -> int:
        return -(-group_bits(self.level, self.encoding) // 8)

    def payload_bits(self) -> float:
        """Weight-format bits for the real channels only."""
        return self.ch_out * self.ch_in * effective_bitwidth(self.level, self.encoding)

    def stored_bytes(self) -> int:
        """Bytes on disk / in HBM, every portion padded to 2048 channels."""
        return self.ch_out * self.portions * self.group_bytes


@dataclass
class PackedLayer:
    spec: LayerSpec
    groups: list  # [ch_out][portion] -> PackedGroup

    def port_of(self, c: int) -> int:
        return c % HBM_PORTS

    def decode(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(scales (ch_out, padded/128), int4 (ch_out, padded_in))``."""
        s = self.spec
        scales = np.zeros((s.ch_out, s.padded_in // BLOCK), dtype=np.uint16)
        q = np.zeros((s.ch_out, s.padded_in), dtype=np.int8)
        for c, row in enumerate(self.groups):
            for p, g in enumerate(row):
                sc, w = decode_group(g)
                scales[c, p * 16:(p + 1) * 16] = sc
                q[c, p * GROUP_CHANNELS:(p + 1) * GROUP_CHANNELS] = w
        return scales, q

    def dequantize(self) -> np.ndarray:
        scales, q = self.decode()
        return dequantize_rows(scales, q)[:, : self.spec.ch_in]


def prepare_layer(w, level, encoding=None) -> tuple[np.ndarray, np.ndarray]:
    """Pad to whole groups, sparsify, then quantize: ``(scales, int4)`` on padded rows."""
    level, encoding = resolve(level, encoding)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("layer weights must be 2-D (ch_out, ch_in)")
    pad = (-w.shape[1]) % GROUP_CHANNELS
    wp = np.pad(w, ((0, 0), (0, pad)))
    return quantize_rows(sparsify(wp, level))


def pack_layer(name: str, w, level, encoding=None) -> PackedLayer:
    w = np.asarray(w, dtype=np.float64)
    spec = LayerSpec(name, w.shape[0], w.shape[1], level, encoding)
    scales, q = prepare_layer(w, spec.level, spec.encoding)
    groups = []
    for c in range(spec.ch_out):
        row = []
        for p in range(spec.portions):
            row.append(encode_group(scales[c, p * 16:(p + 1) * 16],
                                    q[c, p * GROUP_CHANNELS:(p + 1) * GROUP_CHANNELS],
                                    spec.level, spec.encoding))
        groups.append(row)
    return PackedLayer(spec, groups)


@dataclass
class AuxTensor:
    """Non-packed parameters (norm gains, biases, embeddings) stored as FP16."""

    name: str
    bits: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return fp16.bits_to_float(self.bits)


@dataclass
class WeightPackage:
    layers: list = field(default_factory=list)
    aux: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def layer(self, name: str) -> PackedLayer:
        for l in self.layers:
            if l.spec.name == name:
                return l
        raise KeyError(name)

    def port_map(self) -> dict[int, list[tuple[str, int]]]:
        ports = {p: [] for p in range(HBM_PORTS)}
        for l in self.layers:
            for c in range(l.spec.ch_out):
                ports[c % HBM_PORTS].append((l.spec.name, c))
        return ports

    def padding_records(self) -> dict[str, int]:
        return {l.spec.name: l.spec.padded_in - l.spec.ch_in for l in self.layers}


def size_report(specs) -> dict:
    """Per-layer and total sizes in MiB (payload and padded-stored views)."""
    rows = []
    for s in specs:
        rows.append({
            "name": s.name, "ch_out": s.ch_out, "ch_in": s.ch_in,
            "level": s.level.label, "encoding": s.encoding.value,
            "payload_mib": s.payload_bits() / 8 / MIB,
            "stored_mib": s.stored_bytes() / MIB,
        })
    return {
        "layers": rows,
        "total_payload_mib": sum(r["payload_mib"] for r in rows),
        "total_stored_mib": sum(r["stored_mib"] for r in rows),
    }


def package_model(specs, weights: dict | None = None, aux: dict | None = None):
    """Pack every layer in ``specs``; returns ``(WeightPackage | None, size report)``.

    Without ``weights`` only the size report is produced, which is how
    full-scale models are sized without materialising them.
    """
    specs = list(specs)
    report = size_report(specs)
    if weights is None:
        return None, report
    layers = []
    for s in specs:
        w = np.asarray(weights[s.name], dtype=np.float64)
        if w.shape != (s.ch_out, s.ch_in):
            raise ValueError(f"layer {s.name}: expected {(s.ch_out, s.ch_in)}, got {w.shape}")
        layers.append(pack_layer(s.name, w, s.level, s.encoding))
    aux_t = {k: AuxTensor(k, fp16.float_to_bits(v)) for k, v in (aux or {}).items()}
    return WeightPackage(layers, aux_t), report


# --------------------------------------------------------------------------
# ELWP container

MAGIC = b"ELWP"
VERSION = 1
_LEVELS = list(SparsityLevel)
_ENCODINGS = list(MaskEncoding)


def _write_str(buf, s: str):
    b = s.encode()
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def _read_str(buf) -> str:
    (n,) = struct.unpack("<H", _read(buf, 2))
    return _read(buf, n).decode()


def _read(buf, n) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise ValueError("truncated weight package")
    return b


def dumps(pkg: WeightPackage) -> bytes:
    """Serialise: header, layer table, aux tensors, then per-port portion data."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HHH", VERSION, len(pkg.layers), HBM_PORTS))
    for l in pkg.layers:
        s = l.spec
        _write_str(buf, s.name)
        buf.write(struct.pack("<IIBBII", s.ch_out, s.ch_in, s.level.code, s.encoding.code,
                              s.portions, s.group_bytes))
    buf.write(struct.pack("<I", len(pkg.aux)))
    for name, t in pkg.aux.items():
        _write_str(buf, name)
        arr = np.asarray(t.bits, dtype="<u2")
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    for port, entries in pkg.port_map().items():
        for name, c in entries:
            for g in pkg.layer(name).groups[c]:
                buf.write(g.data)
    return buf.getvalue()


def loads(data: bytes) -> WeightPackage:
    buf = io.BytesIO(data)
    if _read(buf, 4) != MAGIC:
        raise ValueError("not an ELWP weight package")
    version, n_layers, n_ports = struct.unpack("<HHH", _read(buf, 6))
    if version != VERSION or n_ports != HBM_PORTS:
        raise ValueError(f"unsupported package version {version} / ports {n_ports}")
    specs = []
    for _ in range(n_layers):
        name = _read_str(buf)
        ch_out, ch_in, lv, enc, portions, gbytes = struct.unpack("<IIBBII", _read(buf, 18))
        spec = LayerSpec(name, ch_out, ch_in, _LEVELS[lv], _ENCODINGS[enc])
        if spec.portions != portions or spec.group_bytes != gbytes:
            raise ValueError(f"layer {name}: inconsistent layer table entry")
        specs.append(spec)
    (n_aux,) = struct.unpack("<I", _read(buf, 4))
    aux = {}
    for _ in range(n_aux):
        name = _read_str(buf)
        (ndim,) = struct.unpack("<B", _read(buf, 1))
        shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        bits = np.frombuffer(_read(buf, 2 * count), dtype="<u2").astype(np.uint16).reshape(shape)
        aux[name] = AuxTensor(name, bits)
    layers = [PackedLayer(s, [[None] * s.portions for _ in range(s.ch_out)]) for s in specs]
    by_name = {l.spec.name: l for l in layers}
    pkg = WeightPackage(layers, aux)
    for port, entries in pkg.port_map().items():
        for name, c in entries:
            l = by_name[name]
            for p in range(l.spec.portions):
                l.groups[c][p] = PackedGroup(l.spec.level, l.spec.encoding, GROUP_CHANNELS,
                                             _read(buf, l.spec.group_bytes))
    if buf.read(1):
        raise ValueError("trailing bytes after weight package")
    return pkg


def save(pkg: WeightPackage, path) -> None:
    with open(path, "wb") as f:
        f.write(dumps(pkg))


def load(path) -> WeightPackage:
    with open(path, "rb") as f:
        return loads(f.read())
