"""Lowering to token-parametric instructions and the ELPG program container.

Instruction word layout (little endian, version 1)::

    u32 header   = opcode | step << 8 | n_fields << 16
    u32 field[n] in the order of FIELDS
    zero padding to a multiple of 16 bytes

Every field is an unsigned 32-bit slot.  Fields whose folded expression
depends on ``token`` are emitted as 0 and listed in the residual table as
reverse-Polish streams; ``patch_for_token`` evaluates them in place.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ..config import ModelConfig, from_dict
from ..operators import OpKind
from .graph import OpGraph, build_block_graph, validate
from .memory import MemoryMap, allocate_memory
from .symexpr import (TOKEN, Expr, as_expr, const, depends_on_token, eval_rpn, evaluate, fold, from_rpn,
                      pack_rpn, substitute, to_rpn, unpack_rpn, value_range, RPN_ITEM_BYTES)

FIELDS = (
    "layer", "src0", "src0_row", "src1", "src1_row", "dst", "dst_row", "rows", "ch_in", "ch_out",
    "cap", "weight", "w_row0", "level", "encoding", "kv_start", "kv_len", "pos0", "heads",
    "kv_heads", "head_dim", "param0", "param1", "flags",
)
FIELD_INDEX = {n: i for i, n in enumerate(FIELDS)}
FIELD_BITS = 32
HEADER = struct.Struct("<I")
INSTR_BYTES = -(-(4 * (1 + len(FIELDS))) // 16) * 16

F_RESIDUAL = 1 << 0
F_MULTIPLY = 1 << 1
F_BIAS = 1 << 2
F_LAYERNORM = 1 << 3
F_ROT_NEOX = 1 << 4
F_LAST_TOKEN = 1 << 5
F_SRC1_HBM = 1 << 6
F_DST_HBM = 1 << 7

PHASES = ("prefill", "decode")
_OPS = list(OpKind)


class FieldOverflow(ValueError):
    pass


class TokenOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class Instruction:
    opcode: OpKind
    step: int
    fields: tuple           # Expr per FIELDS entry
    inputs: tuple = ()
    outputs: tuple = ()

    def get(self, name: str) -> Expr:
        return self.fields[FIELD_INDEX[name]]

    def with_fields(self, **kw) -> "Instruction":
        f = list(self.fields)
        for k, v in kw.items():
            f[FIELD_INDEX[k]] = as_expr(v)
        return replace(self, fields=tuple(f))

    def value(self, name: str, token: int) -> int:
        return evaluate(self.get(name), token)


@dataclass(frozen=True)
class Residual:
    instr: int
    field: int
    rpn: tuple

    @property
    def name(self) -> str:
        return FIELDS[self.field]


@dataclass
class CompiledProgram:
    """One phase's instruction stream against a static memory map.

    ``token`` is ``None`` for the parametric program and an integer for a
    program compiled with the token fixed.
    """

    cfg: ModelConfig
    phase: str
    memory: MemoryMap
    instructions: list
    token: int | None = None
    last_token: bool = False
    residuals: list = field(default_factory=list)
    words: bytes = b""
    specs: list | None = None

    @property
    def max_token(self) -> int:
        return self.memory.max_token

    def __len__(self) -> int:
        return len(self.instructions)

    def field_count(self) -> int:
        return len(self.instructions) * len(FIELDS)

    def residual_fraction(self) -> float:
        return len(self.residuals) / max(1, self.field_count())

    def steps(self) -> list[int]:
        return [i.step for i in self.instructions]


# --------------------------------------------------------------------------
# lowering


def lower(graph: OpGraph, mm: MemoryMap, specs=None) -> list[Instruction]:
    """One instruction per node; fields are unfolded expressions."""
    cfg = graph.cfg
    specs = {s.name: s for s in (specs if specs is not None else cfg.model_specs())}
    addr = lambda name: mm.region(name).offset
    out = []
    for n in graph.nodes:
        a = n.attrs
        f = dict.fromkeys(FIELDS, const(0))
        flags = 0
        f["layer"] = const(cfg.layers if n.layer is None else n.layer)
        f["src0"] = const(addr(n.inputs[0]))
        if len(n.inputs) > 1:
            f["src1"] = const(addr(n.inputs[1]))
            if mm.region(n.inputs[1]).space == "hbm":
                flags |= F_SRC1_HBM
        f["dst"] = const(addr(n.outputs[0]))
        if mm.region(n.outputs[0]).space == "hbm":
            flags |= F_DST_HBM
        f["rows"] = as_expr(a["rows"])
        f["ch_in"] = const(a["ch_in"])
        f["ch_out"] = const(a["ch_out"])
        f["cap"] = const(mm.max_token)
        if a.get("weight"):
            s = specs[a["weight"]]
            f["weight"] = const(addr(a["weight"]))
            f["w_row0"] = const(a["w_row0"])
            f["level"] = const(s.level.code)
            f["encoding"] = const(s.encoding.code)
        kind = n.kind
        if kind in (OpKind.ROTARY, OpKind.TRANSPOSE, OpKind.SOFTMAX, OpKind.MHA_MATMUL):
            f["pos0"] = as_expr(a["pos0"])
        if kind == OpKind.KV_WRITE:
            f["kv_start"] = as_expr(a["pos0"])
        if kind in (OpKind.TRANSPOSE, OpKind.SOFTMAX, OpKind.MHA_MATMUL):
            f["kv_len"] = TOKEN
        if kind in (OpKind.ROTARY, OpKind.KV_WRITE, OpKind.TRANSPOSE, OpKind.SOFTMAX, OpKind.MHA_MATMUL):
            f["heads"] = const(cfg.heads)
            f["kv_heads"] = const(cfg.kv_heads)
            f["head_dim"] = const(cfg.head_dim)
        if kind == OpKind.ROTARY and cfg.rotary == "neox":
            flags |= F_ROT_NEOX
        if a.get("param"):
            f["param0"] = const(addr(a["param"]))
            if cfg.norm == "layernorm":
                f["param1"] = const(addr(a["param"] + "_b"))
                flags |= F_LAYERNORM
        if a.get("bias"):
            f["param0"] = const(addr(a["bias"]))
            flags |= F_BIAS
        if a.get("residual"):
            flags |= F_RESIDUAL
        if a.get("multiply"):
            flags |= F_MULTIPLY
        f["flags"] = const(flags)
        out.append(Instruction(n.kind, n.step, tuple(f[k] for k in FIELDS), n.inputs, n.outputs))
    return out


def last_token_optimize(instrs: list[Instruction], phase: str, layers: int) -> list[Instruction]:
    """Restrict everything after the final attention to the last token row.

    Prefill only; decode streams are returned unchanged.  Sources produced
    before the rewrite point are read at row ``token - 1``; rewritten steps
    write and read row 0.
    """
    if phase != "prefill":
        return list(instrs)
    first = next(i for i, x in enumerate(instrs) if x.step == 12 and x.get("layer") == const(layers - 1))
    shrunk = set()
    out = list(instrs[:first])
    for x in instrs[first:]:
        kw = {"rows": 1, "dst_row": 0}
        for slot, name in (("src0_row", x.inputs[0]), ("src1_row", x.inputs[1] if len(x.inputs) > 1 else None)):
            if name is not None:
                kw[slot] = const(0) if name in shrunk else TOKEN - 1
        flags = x.get("flags").value | F_LAST_TOKEN
        kw["flags"] = flags
        out.append(x.with_fields(**kw))
        shrunk.update(x.outputs)
    return out


def _concrete(e: Expr, token: int | None, max_token: int, where: str) -> tuple[int, Expr]:
    """Folded field and its emitted word value (0 for residual fields)."""
    if token is not None:
        e = substitute(e, token)
    e = fold(e)
    if depends_on_token(e):
        lo, hi = value_range(e, 1, max_token)
        if lo < 0 or hi >= 1 << FIELD_BITS:
            raise FieldOverflow(f"{where}: range [{lo}, {hi}] does not fit {FIELD_BITS} bits")
        return 0, e
    if not 0 <= e.value < 1 << FIELD_BITS:
        raise FieldOverflow(f"{where}: value {e.value} does not fit {FIELD_BITS} bits")
    return e.value, e


def encode(instrs: list[Instruction], token: int | None, max_token: int) -> tuple[bytes, list[Residual]]:
    buf = bytearray()
    residuals = []
    for k, x in enumerate(instrs):
        words = [x.opcode.code | x.step << 8 | len(FIELDS) << 16]
        for j, e in enumerate(x.fields):
            v, folded = _concrete(e, token, max_token, f"instruction {k} field {FIELDS[j]}")
            if depends_on_token(folded):
                residuals.append(Residual(k, j, tuple(to_rpn(folded))))
            words.append(v)
        rec = struct.pack(f"<{len(words)}I", *words)
        buf += rec + bytes(INSTR_BYTES - len(rec))
    return bytes(buf), residuals


def compile_program(cfg: ModelConfig, phase: str = "prefill", token: int | None = None,
                    last_token: bool = True, specs=None, max_token: int | None = None) -> CompiledProgram:
    """Graph -> allocation -> lowering -> (last-token rewrite) -> encoding.

    The memory map is always allocated from the prefill graph so both phases
    share one address space.
    """
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    max_token = max_token or cfg.max_token
    specs = list(specs) if specs is not None else cfg.model_specs()
    if token is not None and not 1 <= token <= max_token:
        raise TokenOutOfRange(f"token {token} outside [1, {max_token}]")
    base = build_block_graph(cfg, "prefill", max_token)
    graph = base if phase == "prefill" else build_block_graph(cfg, phase, max_token)
    problems = validate(graph)
    if problems:
        raise ValueError("invalid graph: " + "; ".join(problems[:5]))
    mm = allocate_memory(base, max_token, specs)
    instrs = lower(graph, mm, specs)
    if last_token:
        instrs = last_token_optimize(instrs, phase, cfg.layers)
    words, residuals = encode(instrs, token, max_token)
    return CompiledProgram(cfg, phase, mm, instrs, token, last_token and phase == "prefill", residuals, words,
                           specs)


def patch_for_token(p: CompiledProgram, token: int) -> bytes:
    """Concrete instruction words: residual fields evaluated at ``token``."""
    if not 1 <= token <= p.max_token:
        raise TokenOutOfRange(f"token {token} outside [1, {p.max_token}]")
    buf = bytearray(p.words)
    for r in p.residuals:
        struct.pack_into("<I", buf, r.instr * INSTR_BYTES + 4 * (1 + r.field), eval_rpn(r.rpn, token))
    return bytes(buf)


def verify_patch(p: CompiledProgram, tokens) -> list[int]:
    """Tokens at which patching differs from a from-scratch compile (empty when equivalent)."""
    bad = []
    for t in tokens:
        ref = compile_program(p.cfg, p.phase, t, p.last_token, p.specs, p.max_token)
        if patch_for_token(p, t) != ref.words:
            bad.append(int(t))
    return bad


def decode_words(words: bytes) -> list[tuple[OpKind, int, dict]]:
    """Parse an instruction stream into ``(opcode, step, fields)``."""
    if len(words) % INSTR_BYTES:
        raise ValueError("instruction stream is not a whole number of records")
    out = []
    for off in range(0, len(words), INSTR_BYTES):
        (hdr,) = HEADER.unpack_from(words, off)
        op, step, n = hdr & 0xFF, (hdr >> 8) & 0xFF, (hdr >> 16) & 0xFF
        if not 1 <= op <= len(_OPS) or n != len(FIELDS):
            raise ValueError(f"bad instruction header at byte {off}")
        vals = struct.unpack_from(f"<{n}I", words, off + 4)
        out.append((_OPS[op - 1], step, dict(zip(FIELDS, vals))))
    return out


# --------------------------------------------------------------------------
# latency hiding


@dataclass(frozen=True)
class Timeline:
    """Host updates ``u_i`` overlapped with accelerator compute ``c_i``."""

    update: tuple
    compute: tuple
    starts: tuple       # compute start per iteration
    total: float

    @property
    def period(self) -> float:
        """Steady-state spacing between the last two compute starts."""
        if len(self.starts) < 2:
            return self.total
        return self.starts[-1] - self.starts[-2]


def schedule_latency_hiding(compute, update) -> Timeline:
    """Update for iteration ``i+1`` runs during compute of iteration ``i``.

    ``compute`` and ``update`` are per-iteration durations (scalars are
    broadcast to the length of the other).  Total time is
    ``u_1 + sum(max(c_i, u_{i+1})) + c_n``.
    """
    c = np.atleast_1d(np.asarray(compute, dtype=float))
    u = np.atleast_1d(np.asarray(update, dtype=float))
    n = max(len(c), len(u))
    c = np.broadcast_to(c, (n,)) if len(c) == 1 else c
    u = np.broadcast_to(u, (n,)) if len(u) == 1 else u
    if len(c) != len(u) or n < 1:
        raise ValueError("compute and update must have one entry per iteration")
    if np.any(c < 0) or np.any(u < 0):
        raise ValueError("durations must be non-negative")
    starts = [float(u[0])]
    for i in range(1, n):
        starts.append(starts[-1] + max(float(c[i - 1]), float(u[i])))
    return Timeline(tuple(u.tolist()), tuple(c.tolist()), tuple(starts), starts[-1] + float(c[-1]))


def update_cost(p: CompiledProgram, per_field_s: float = 50e-9, full: bool = False) -> float:
    """Host time to refresh instructions: every field on the first run, residuals after."""
    n = p.field_count() if full else len(p.residuals)
    return n * per_field_s


# --------------------------------------------------------------------------
# ELPG container

MAGIC = b"ELPG"
VERSION = 1


@dataclass
class ProgramImage:
    """Both phase streams, the shared memory map and an optional weight image."""

    cfg: ModelConfig
    memory: MemoryMap
    streams: dict            # phase -> CompiledProgram
    weights: bytes = b""
    meta: dict = field(default_factory=dict)
    stream_offsets: dict = field(default_factory=dict)  # phase -> byte offset of words in the file

    @property
    def max_token(self) -> int:
        return self.memory.max_token

    def stream(self, phase: str) -> CompiledProgram:
        try:
            return self.streams[phase]
        except KeyError:
            raise ValueError(f"program has no {phase} stream") from None


def build_image(cfg: ModelConfig, specs=None, weights: bytes = b"", last_token: bool = True,
                max_token: int | None = None) -> ProgramImage:
    streams = {ph: compile_program(cfg, ph, None, last_token, specs, max_token) for ph in PHASES}
    mm = streams["prefill"].memory
    meta = {ph: {"instructions": len(p), "residual_fields": len(p.residuals),
                 "residual_fraction": p.residual_fraction(),
                 "update_s_first": update_cost(p, full=True), "update_s": update_cost(p)}
            for ph, p in streams.items()}
    return ProgramImage(cfg, mm, streams, weights, meta)


def _blob(buf, data: bytes):
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def _read(buf, n):
    b = buf.read(n)
    if len(b) != n:
        raise ValueError("truncated program file")
    return b


def _read_blob(buf) -> bytes:
    (n,) = struct.unpack("<I", _read(buf, 4))
    return _read(buf, n)


def dumps(img: ProgramImage) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HHII", VERSION, len(img.streams), img.max_token, INSTR_BYTES))
    _blob(buf, img.cfg.dumps().encode())
    _blob(buf, img.memory.dumps().encode())
    _blob(buf, json.dumps(img.meta, sort_keys=True).encode())
    phases = list(img.streams)
    for ph in phases:
        p = img.streams[ph]
        buf.write(struct.pack("<BBI", PHASES.index(ph), int(p.last_token), len(p)))
        _blob(buf, p.words)
    res = [(phases.index(ph), r) for ph in phases for r in img.streams[ph].residuals]
    buf.write(struct.pack("<I", len(res)))
    for s, r in res:
        data = pack_rpn(r.rpn)
        buf.write(struct.pack("<BIBH", s, r.instr, r.field, len(data) // RPN_ITEM_BYTES))
        buf.write(data)
    _blob(buf, img.weights)
    return buf.getvalue()


def loads(data: bytes) -> ProgramImage:
    """Parse a program file.  Instruction fields are rebuilt from the words
    (constants) and the residual table (expressions)."""
    buf = io.BytesIO(data)
    if _read(buf, 4) != MAGIC:
        raise ValueError("not an ELPG program file")
    version, n_streams, max_token, rec = struct.unpack("<HHII", _read(buf, 12))
    if version != VERSION or rec != INSTR_BYTES:
        raise ValueError(f"unsupported program version {version}")
    cfg = from_dict(json.loads(_read_blob(buf)))
    mm = MemoryMap.from_dict(json.loads(_read_blob(buf)))
    meta = json.loads(_read_blob(buf))
    raw, offsets = [], {}
    for _ in range(n_streams):
        ph, lt, count = struct.unpack("<BBI", _read(buf, 6))
        if ph >= len(PHASES):
            raise ValueError("unknown phase in program file")
        offsets[PHASES[ph]] = buf.tell() + 4
        words = _read_blob(buf)
        if len(words) != count * INSTR_BYTES:
            raise ValueError("instruction count does not match stream size")
        raw.append((PHASES[ph], bool(lt), words))
    (n_res,) = struct.unpack("<I", _read(buf, 4))
    res = {i: [] for i in range(n_streams)}
    for _ in range(n_res):
        s, instr, fld, items = struct.unpack("<BIBH", _read(buf, 8))
        rpn = tuple(unpack_rpn(_read(buf, items * RPN_ITEM_BYTES)))
        if s >= n_streams or fld >= len(FIELDS) or instr >= len(raw[s][2]) // INSTR_BYTES:
            raise ValueError("residual entry out of range")
        res[s].append(Residual(instr, fld, rpn))
    weights = _read_blob(buf)
    if buf.read(1):
        raise ValueError("trailing bytes after program file")
    streams = {}
    for s, (ph, lt, words) in enumerate(raw):
        instrs = []
        sym = {(r.instr, r.field): from_rpn(r.rpn) for r in res[s]}
        for k, (opk, step, vals) in enumerate(decode_words(words)):
            f = tuple(sym.get((k, j), const(vals[n])) for j, n in enumerate(FIELDS))
            instrs.append(Instruction(opk, step, f))
        streams[ph] = CompiledProgram(cfg, ph, mm, instrs, None, lt, res[s], words)
    return ProgramImage(cfg, mm, streams, weights, meta, offsets)


def save(img: ProgramImage, path) -> None:
    with open(path, "wb") as f:
        f.write(dumps(img))


def load(path) -> ProgramImage:
    with open(path, "rb") as f:
        return loads(f.read())
