"""Unified activation layout ``[outer, CH/t_out, H, W, t_out]``.

Token activations use ``H = 1`` and ``W = token``, so every channel slab is a
contiguous ``[token, t_out]`` tile.  Storage is a flat FP16 (``uint16``) array
in exactly this nesting order; channels are zero-padded up to a multiple of
``t_out``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

DEFAULT_T_OUT = 16
ELEMENT_BYTES = 2


@dataclass(frozen=True)
class UnifiedTensor:
    data: np.ndarray  # (outer, slabs, H, W, t_out) uint16
    channels: int     # real channels per outer index

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ValueError("unified tensors are 5-D")
        if self.data.dtype != np.uint16:
            raise TypeError("unified tensors hold FP16 bit patterns")
        if not 0 < self.channels <= self.data.shape[1] * self.data.shape[4]:
            raise ValueError("channel count does not fit the slabs")
        self.data.setflags(write=False)

    @property
    def t_out(self) -> int:
        return self.data.shape[4]

    @property
    def outer(self) -> int:
        return self.data.shape[0]

    @property
    def slabs(self) -> int:
        return self.data.shape[1]

    @property
    def rows(self) -> int:
        """Token count in token form (``H == 1``)."""
        return self.data.shape[3]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def offset(self, o, s, h, w, l) -> int:
        _, S, H, W, T = self.data.shape
        return (((o * S + s) * H + h) * W + w) * T + l

    def __eq__(self, other):
        return (isinstance(other, UnifiedTensor) and self.channels == other.channels
                and self.data.shape == other.data.shape and np.array_equal(self.data, other.data))

    __hash__ = None


def _slabs(channels: int, t_out: int) -> int:
    if t_out < 1:
        raise ValueError("t_out must be >= 1")
    return -(-channels // t_out)


def to_unified(flat, t_out: int = DEFAULT_T_OUT) -> UnifiedTensor:
    """``(token, CH)`` half patterns -> token form; element (t, c) lands at [c // t_out][t][c % t_out]."""
    x = np.asarray(flat, dtype=np.uint16)
    if x.ndim != 2:
        raise ValueError("expected a (token, CH) array")
    tokens, ch = x.shape
    s = _slabs(ch, t_out)
    pad = np.zeros((tokens, s * t_out), dtype=np.uint16)
    pad[:, :ch] = x
    data = pad.reshape(tokens, s, t_out).transpose(1, 0, 2)
    return UnifiedTensor(np.ascontiguousarray(data).reshape(1, s, 1, tokens, t_out), ch)


def from_unified(x: UnifiedTensor) -> np.ndarray:
    if x.outer != 1 or x.data.shape[2] != 1:
        raise ValueError("from_unified expects a single token-form tensor")
    d = x.data[0, :, 0]  # (slabs, token, t_out)
    return np.ascontiguousarray(d.transpose(1, 0, 2).reshape(d.shape[1], -1)[:, : x.channels])


def image_to_unified(img, t_out: int = DEFAULT_T_OUT) -> UnifiedTensor:
    """``(CH, H, W)`` or ``(batch, CH, H, W)`` -> ``[batch, CH/t_out, H, W, t_out]``."""
    x = np.asarray(img, dtype=np.uint16)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError("expected (CH, H, W) or (batch, CH, H, W)")
    b, ch, h, w = x.shape
    s = _slabs(ch, t_out)
    pad = np.zeros((b, s * t_out, h, w), dtype=np.uint16)
    pad[:, :ch] = x
    data = pad.reshape(b, s, t_out, h, w).transpose(0, 1, 3, 4, 2)
    return UnifiedTensor(np.ascontiguousarray(data), ch)


def image_from_unified(x: UnifiedTensor) -> np.ndarray:
    d = x.data.transpose(0, 1, 4, 2, 3)
    b, s, t, h, w = d.shape
    return np.ascontiguousarray(d.reshape(b, s * t, h, w)[:, : x.channels])


def head_split(x: UnifiedTensor, heads: int) -> UnifiedTensor:
    """Move heads to the outer dim: head ``h`` owns channels ``[h*CH/heads, (h+1)*CH/heads)``."""
    if heads < 1 or x.channels % heads:
        raise ValueError("channels must divide evenly into heads")
    flat = from_unified(x)
    per = x.channels // heads
    parts = [to_unified(flat[:, h * per:(h + 1) * per], x.t_out).data for h in range(heads)]
    return UnifiedTensor(np.concatenate(parts, axis=0), per)


def head_merge(x: UnifiedTensor) -> UnifiedTensor:
    heads = x.outer
    per = x.channels
    cols = []
    for h in range(heads):
        cols.append(from_unified(UnifiedTensor(x.data[h:h + 1].copy(), per)))
    return to_unified(np.concatenate(cols, axis=1), x.t_out)


# --------------------------------------------------------------------------
# segmented transpose


@dataclass(frozen=True)
class Segment:
    start: int
    length: int


@dataclass(frozen=True)
class TransposeView:
    """Tiles of a token-form tensor read in slab order.

    Slab ``s`` is the contiguous ``[token, t_out]`` tile holding channels
    ``s*t_out ..``; read column-wise it is the ``[t_out, token]`` band of the
    transpose, so the consumer walks tiles without moving any element.
    """

    source: UnifiedTensor
    segments: tuple

    def tiles(self):
        flat = self.source.flat()
        t_out, rows = self.source.t_out, self.source.rows
        for seg in self.segments:
            yield flat[seg.start: seg.start + seg.length].reshape(rows, t_out)

    def materialize(self) -> np.ndarray:
        """The ``(CH, token)`` transpose, assembled band by band."""
        bands = [tile.T for tile in self.tiles()]
        out = np.concatenate(bands, axis=0) if bands else np.zeros((0, self.source.rows), np.uint16)
        per = self.source.channels
        if self.source.outer == 1:
            return out[:per]
        s = self.source.slabs * self.source.t_out
        return out.reshape(self.source.outer, s, -1)[:, :per]


def segmented_transpose_view(k: UnifiedTensor) -> TransposeView:
    if k.data.shape[2] != 1:
        raise ValueError("transpose view needs a token-form tensor")
    tile = k.rows * k.t_out
    segs = tuple(Segment((o * k.slabs + s) * tile, tile)
                 for o in range(k.outer) for s in range(k.slabs))
    return TransposeView(k, segs)


def naive_transpose(flat) -> np.ndarray:
    x = np.asarray(flat)
    out = np.empty((x.shape[1], x.shape[0]), dtype=x.dtype)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            out[j, i] = x[i, j]
    return out


# --------------------------------------------------------------------------
# burst planning


def _runs(offsets: np.ndarray) -> list[Segment]:
    if offsets.size == 0:
        return []
    offsets = np.sort(offsets)
    breaks = np.flatnonzero(np.diff(offsets) != 1) + 1
    starts = np.concatenate([[0], breaks])
    ends = np.concatenate([breaks, [offsets.size]])
    return [Segment(int(offsets[a]), int(b - a)) for a, b in zip(starts, ends)]


def burst_plan(x: UnifiedTensor, outer=None, slabs=None, rows=None, split_outer: bool = False):
    """Maximal contiguous segments covering a selection of the tensor.

    ``outer``, ``slabs`` and ``rows`` are index sequences (default: all).
    With ``split_outer`` each outer index (e.g. head) is planned separately.
    Segments are whole multiples of ``t_out`` elements.
    """
    o_idx = np.arange(x.outer) if outer is None else np.asarray(outer)
    s_idx = np.arange(x.slabs) if slabs is None else np.asarray(slabs)
    h, w = x.data.shape[2], x.data.shape[3]
    rows_all = np.arange(h * w) if rows is None else np.asarray(rows)
    T = x.t_out
    groups = [[o] for o in o_idx] if split_outer else [list(o_idx)]
    plan = []
    for g in groups:
        base = ((np.asarray(g)[:, None, None] * x.slabs + s_idx[None, :, None]) * (h * w)
                + rows_all[None, None, :]) * T
        rowstarts = base.reshape(-1)
        elems = (rowstarts[:, None] + np.arange(T)[None, :]).reshape(-1)
        plan.extend(_runs(elems))
    return plan


def replay_plan(x: UnifiedTensor, plan) -> np.ndarray:
    """Touch counts per element after executing the plan."""
    hits = np.zeros(x.size, dtype=np.int64)
    for seg in plan:
        hits[seg.start: seg.start + seg.length] += 1
    return hits


# --------------------------------------------------------------------------
# activation dump

DUMP_MAGIC = b"ELAT"
DUMP_VERSION = 1


def dumps(x: UnifiedTensor) -> bytes:
    buf = io.BytesIO()
    buf.write(DUMP_MAGIC)
    buf.write(struct.pack("<HH", DUMP_VERSION, 0))
    buf.write(struct.pack("<5I", *x.shape))
    buf.write(struct.pack("<I", x.channels))
    buf.write(x.data.astype("<u2").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> UnifiedTensor:
    if data[:4] != DUMP_MAGIC:
        raise ValueError("not an activation dump")
    version, _ = struct.unpack_from("<HH", data, 4)
    if version != DUMP_VERSION:
        raise ValueError(f"unsupported dump version {version}")
    shape = struct.unpack_from("<5I", data, 8)
    (channels,) = struct.unpack_from("<I", data, 28)
    n = int(np.prod(shape))
    body = data[32:]
    if len(body) != 2 * n:
        raise ValueError("activation dump size mismatch")
    arr = np.frombuffer(body, dtype="<u2").astype(np.uint16).reshape(shape)
    return UnifiedTensor(arr, channels)
