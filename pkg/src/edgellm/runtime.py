"""Instruction-level simulator over modelled HBM and DDR.

The host loads a program file into DDR, writes the launch registers and
patches the token-dependent fields before each run.  The device fetches
instruction records from DDR, executes them through the operator library and
advances a virtual clock by the calibrated step times.

Register map (64 x 32-bit, modelled)::

    0  CTRL          bit0 start, bit1 reset
    1  STATUS        bit0 busy, bit1 done, bit2 fault
    2  INSTR_BASE    DDR byte address of the active instruction stream
    3  VALID_OPS     number of instructions to execute
    4  TOKEN         sequence length after this pass
    5  PHASE         0 prefill, 1 decode
    6  MAX_TOKEN     static token capacity of the program
    7  PROG_BYTES    size of the resident program file
    8  MEM_MODE      0 weights and cache in HBM, 1 served from DDR
    9  PC            index of the last fetched instruction
    10 CLOCK_LO      virtual clock, ns, low word
    11 CLOCK_HI      virtual clock, ns, high word
    12 FAULT_ADDR    address of the last faulting access
    13 VERSION       program format version
    16 PROG_BASE     DDR byte address of the program file
    17 PREFILL_BASE  instruction buffer of the prefill stream
    18 PREFILL_OPS
    19 DECODE_BASE   instruction buffer of the decode stream
    20 DECODE_OPS
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fp16
from . import operators as op
from .compiler import lowering
from .compiler.lowering import (F_BIAS, F_LAYERNORM, F_MULTIPLY, F_RESIDUAL, F_ROT_NEOX, INSTR_BYTES,
                                PHASES, ProgramImage, decode_words, schedule_latency_hiding, update_cost)
from .compiler.memory import HBM_WORD, MemoryMap
from .compiler.symexpr import eval_rpn
from .layout import UnifiedTensor, segmented_transpose_view
from .perf import STEP_NAMES, HwConfig, step_times
from .sparse_codec import (GROUP_CHANNELS, HBM_PORTS, LayerSpec, MaskEncoding, PackedGroup, PackedLayer,
                           SparsityLevel, WeightPackage)
from .sparse_codec import loads as load_package

REGISTERS = {
    "CTRL": 0, "STATUS": 1, "INSTR_BASE": 2, "VALID_OPS": 3, "TOKEN": 4, "PHASE": 5, "MAX_TOKEN": 6,
    "PROG_BYTES": 7, "MEM_MODE": 8, "PC": 9, "CLOCK_LO": 10, "CLOCK_HI": 11, "FAULT_ADDR": 12,
    "VERSION": 13, "PROG_BASE": 16, "PREFILL_BASE": 17, "PREFILL_OPS": 18, "DECODE_BASE": 19,
    "DECODE_OPS": 20,
}
N_REGISTERS = 64
CTRL_START, CTRL_RESET = 1, 2
ST_BUSY, ST_DONE, ST_FAULT = 1, 2, 4
_LEVELS = list(SparsityLevel)
_ENCODINGS = list(MaskEncoding)


class MemoryFault(RuntimeError):
    pass


class RegisterError(ValueError):
    pass


def _align(n: int, a: int = 4096) -> int:
    return -(-n // a) * a


class MemorySpace:
    """32 HBM port windows and one DDR array, with region-checked access.

    ``allowed`` lists ``(space, start, end)`` ranges; any access not inside a
    single range is a hard fault.
    """

    def __init__(self, hbm_port_bytes: int, ddr_bytes: int, hw: HwConfig = HwConfig()):
        if hbm_port_bytes * HBM_PORTS > hw.hbm_bytes:
            raise MemoryFault(f"HBM demand {hbm_port_bytes * HBM_PORTS} exceeds {hw.hbm_bytes} bytes")
        if ddr_bytes > hw.ddr_bytes:
            raise MemoryFault(f"DDR demand {ddr_bytes} exceeds {hw.ddr_bytes} bytes")
        self.hbm = np.zeros((HBM_PORTS, hbm_port_bytes), dtype=np.uint8)
        self.ddr = np.zeros(ddr_bytes, dtype=np.uint8)
        self.allowed = []

    @property
    def ddr_size(self) -> int:
        return self.ddr.size

    def allow(self, space: str, start: int, end: int):
        self.allowed.append((space, start, end))

    def check(self, space: str, addr: int, n: int):
        limit = self.ddr.size if space == "ddr" else self.hbm.shape[1]
        ok = 0 <= addr and addr + n <= limit and any(
            s == space and a <= addr and addr + n <= b for s, a, b in self.allowed)
        if not ok:
            raise MemoryFault(f"{space} access [{addr}, {addr + n}) outside allocated regions")

    def ddr_view(self, addr: int, n: int) -> np.ndarray:
        self.check("ddr", addr, n)
        return self.ddr[addr:addr + n]

    def hbm_window(self, addr: int, n: int) -> np.ndarray:
        """``(32, n)`` view of one window across all ports."""
        self.check("hbm", addr, n)
        return self.hbm[:, addr:addr + n]

    def read_striped(self, addr: int, n: int) -> np.ndarray:
        """Bytes of a word-striped window (word ``w`` on port ``w % 32``)."""
        w = self.hbm_window(addr, n)
        return w.reshape(HBM_PORTS, n // HBM_WORD, HBM_WORD).transpose(1, 0, 2).reshape(-1).copy()

    def write_striped(self, addr: int, data: np.ndarray):
        n = data.size // HBM_PORTS
        w = self.hbm_window(addr, n)
        w[:] = data.reshape(n // HBM_WORD, HBM_PORTS, HBM_WORD).transpose(1, 0, 2).reshape(HBM_PORTS, n)


@dataclass(frozen=True)
class Event:
    index: int
    step: int
    name: str
    start_ns: float
    end_ns: float
    bytes_hbm: int
    bytes_ddr: int


@dataclass
class RunResult:
    logits: np.ndarray | None      # (rows, vocab) FP16 bits
    argmax: np.ndarray | None
    events: list
    token: int
    phase: str

    @property
    def total_ns(self) -> float:
        return self.events[-1].end_ns - self.events[0].start_ns if self.events else 0.0


@dataclass
class ExecState:
    image: ProgramImage
    mem: MemorySpace
    hw: HwConfig
    regs: np.ndarray = field(default_factory=lambda: np.zeros(N_REGISTERS, dtype=np.uint32))
    clock_ns: float = 0.0
    events: list = field(default_factory=list)
    kv_len: dict = field(default_factory=dict)      # cache region address -> valid rows
    weights_loaded: bool = False
    last_argmax: np.ndarray | None = None
    _wcache: dict = field(default_factory=dict)

    @property
    def cfg(self):
        return self.image.cfg

    @property
    def memory_map(self) -> MemoryMap:
        return self.image.memory

    def reg(self, name: str) -> int:
        return int(self.regs[REGISTERS[name]])

    def cache_region_size(self, addr: int) -> int:
        for r in self.memory_map.of_kind("kv"):
            if r.offset == addr:
                return r.size
        raise MemoryFault(f"no cache region at HBM offset {addr:#x}")


# --------------------------------------------------------------------------
# loading


def load_program(data: bytes, hw: HwConfig | None = None, weights: WeightPackage | bytes | None = None) -> ExecState:
    """Place a program file in DDR, build instruction buffers and set the registers."""
    img = lowering.loads(data)
    hw = hw or HwConfig.from_dict(img.cfg.hw)
    mm = img.memory
    prog_base = _align(mm.ddr_top)
    bufs, top = {}, _align(prog_base + len(data))
    for ph, p in img.streams.items():
        bufs[ph] = top
        top = _align(top + len(p.words))
    mem = MemorySpace(max(mm.hbm_top, HBM_WORD), top, hw)
    for r in mm.regions.values():
        mem.allow(r.space, r.offset, r.end)
    mem.allow("ddr", prog_base, prog_base + len(data))
    for ph, base in bufs.items():
        mem.allow("ddr", base, base + len(img.streams[ph].words))
    mem.ddr_view(prog_base, len(data))[:] = np.frombuffer(data, dtype=np.uint8)
    st = ExecState(img, mem, hw)
    for ph, base in bufs.items():
        off = prog_base + img.stream_offsets[ph]
        n = len(img.streams[ph].words)
        mem.ddr_view(base, n)[:] = mem.ddr_view(off, n)
    write_registers(st, {"PROG_BASE": prog_base, "PROG_BYTES": len(data), "MAX_TOKEN": img.max_token,
                         "VERSION": lowering.VERSION})
    for ph, base in bufs.items():
        write_registers(st, {f"{ph.upper()}_BASE": base, f"{ph.upper()}_OPS": len(img.streams[ph])})
    if weights is None and img.weights:
        weights = img.weights
    if weights is not None:
        load_weights(st, weights)
    return st


def dump_program(st: ExecState) -> bytes:
    base, n = st.reg("PROG_BASE"), st.reg("PROG_BYTES")
    return st.mem.ddr_view(base, n).tobytes()


def write_registers(st: ExecState, values: dict):
    """Write registers by name or index; addresses are checked against DDR."""
    for k, v in values.items():
        idx = REGISTERS.get(k, k) if isinstance(k, str) else k
        if isinstance(idx, str) or not 0 <= int(idx) < N_REGISTERS:
            raise RegisterError(f"register {k!r} out of range")
        v = int(v)
        if not 0 <= v < 1 << 32:
            raise RegisterError(f"register {k!r}: value {v} does not fit 32 bits")
        if idx in (REGISTERS["INSTR_BASE"], REGISTERS["PROG_BASE"], REGISTERS["PREFILL_BASE"],
                   REGISTERS["DECODE_BASE"]) and v >= st.mem.ddr_size:
            raise RegisterError(f"register {k!r}: address {v:#x} outside DDR ({st.mem.ddr_size} bytes)")
        st.regs[int(idx)] = v


def load_weights(st: ExecState, weights):
    """Write packed layers into their HBM windows and parameters into DDR."""
    pkg = load_package(weights) if isinstance(weights, (bytes, bytearray)) else weights
    mm = st.memory_map
    for layer in pkg.layers:
        s = layer.spec
        r = mm.region(s.name)
        per_ch = s.portions * s.group_bytes
        local = -(-s.ch_out // HBM_PORTS) * per_ch
        if local > r.size:
            raise MemoryFault(f"layer {s.name} needs {local} bytes per port, window has {r.size}")
        win = st.mem.hbm_window(r.offset, r.size)
        for c, groups in enumerate(layer.groups):
            off = (c // HBM_PORTS) * per_ch
            win[c % HBM_PORTS, off:off + per_ch] = np.frombuffer(b"".join(g.data for g in groups), np.uint8)
    for name, t in pkg.aux.items():
        if name not in mm.regions:
            continue  # embeddings stay on the host
        r = mm.region(name)
        b = np.asarray(t.bits, dtype="<u2").reshape(-1).view(np.uint8)
        if b.size > r.size:
            raise MemoryFault(f"parameter {name} larger than its region")
        st.mem.ddr_view(r.offset, b.size)[:] = b
    st._wcache.clear()
    st.weights_loaded = True


# --------------------------------------------------------------------------
# data access helpers


class _Access:
    """Typed reads and writes of unified tensors with byte accounting."""

    def __init__(self, st: ExecState, memory: str):
        self.st, self.mem, self.t_out = st, st.mem, st.cfg.t_out
        self.memory = memory

    def _act(self, addr, channels, cap):
        slabs = -(-channels // self.t_out)
        n = slabs * cap * self.t_out * 2
        return self.mem.ddr_view(addr, n).view("<u2").reshape(slabs, cap, self.t_out)

    def read(self, addr, channels, cap, row0, rows) -> np.ndarray:
        a = self._act(addr, channels, cap)
        if row0 + rows > cap:
            raise MemoryFault(f"rows [{row0}, {row0 + rows}) exceed capacity {cap}")
        x = a[:, row0:row0 + rows, :].transpose(1, 0, 2).reshape(rows, -1)
        return np.ascontiguousarray(x[:, :channels]).astype(np.uint16)

    def write(self, addr, channels, cap, row0, bits):
        bits = np.asarray(bits, dtype=np.uint16)
        rows = bits.shape[0]
        a = self._act(addr, channels, cap)
        if row0 + rows > cap:
            raise MemoryFault(f"rows [{row0}, {row0 + rows}) exceed capacity {cap}")
        slabs = a.shape[0]
        x = np.zeros((rows, slabs * self.t_out), dtype=np.uint16)
        x[:, :channels] = bits
        a[:, row0:row0 + rows, :] = x.reshape(rows, slabs, self.t_out).transpose(1, 0, 2)

    def param(self, addr, n) -> np.ndarray:
        return self.mem.ddr_view(addr, 2 * n).view("<u2").astype(np.uint16)

    def cache(self, addr, kv_heads, head_dim, cap) -> np.ndarray:
        slabs = -(-head_dim // self.t_out)
        n = kv_heads * slabs * cap * self.t_out * 2
        size = self.st.cache_region_size(addr)
        raw = self.mem.read_striped(addr, size)[:n]
        return raw.view("<u2").reshape(kv_heads, slabs, 1, cap, self.t_out).copy()

    def store_cache(self, addr, arr: np.ndarray):
        size = self.st.cache_region_size(addr)
        raw = self.mem.read_striped(addr, size)
        b = arr.reshape(-1).view(np.uint8)
        raw[: b.size] = b
        self.mem.write_striped(addr, raw)

    def weights(self, f) -> op.VmmWeights:
        key = (f["weight"], f["w_row0"], f["ch_out"], f["ch_in"], f["level"], f["encoding"])
        spec = LayerSpec("w", f["ch_out"], f["ch_in"], _LEVELS[f["level"]], _ENCODINGS[f["encoding"]])
        per_ch = spec.portions * spec.group_bytes
        hit = self.st._wcache.get(key)
        if hit is not None:
            return hit
        rows0 = f["w_row0"]
        last = rows0 + f["ch_out"] - 1
        win = self.mem.hbm_window(f["weight"], (last // HBM_PORTS + 1) * per_ch)
        groups = []
        for c in range(rows0, last + 1):
            off = (c // HBM_PORTS) * per_ch
            raw = win[c % HBM_PORTS, off:off + per_ch].tobytes()
            groups.append([PackedGroup(spec.level, spec.encoding, GROUP_CHANNELS,
                                       raw[p * spec.group_bytes:(p + 1) * spec.group_bytes])
                           for p in range(spec.portions)])
        w = op.VmmWeights.from_packed(PackedLayer(spec, groups))
        self.st._wcache[key] = w
        return w


# --------------------------------------------------------------------------
# execution


def _positions(f, rows):
    return f["pos0"] + np.arange(rows)


def _execute(st: ExecState, opk: op.OpKind, f: dict, io_: _Access):
    cfg = st.cfg
    cap, rows = f["cap"], f["rows"]
    flags = f["flags"]
    norm_ln = flags & F_LAYERNORM
    if opk in (op.OpKind.RMSNORM, op.OpKind.LAYERNORM, op.OpKind.OUTLAYER_LN):
        x = io_.read(f["src0"], f["ch_in"], cap, f["src0_row"], rows)
        g = io_.param(f["param0"], f["ch_in"])
        if opk == op.OpKind.LAYERNORM or norm_ln:
            y = op.layernorm(x, g, io_.param(f["param1"], f["ch_in"]), cfg.eps)
        else:
            y = op.rmsnorm(x, g, cfg.eps)
        io_.write(f["dst"], f["ch_out"], cap, f["dst_row"], y)
    elif opk in (op.OpKind.VMM_BN, op.OpKind.VMM_ARGMAX):
        x = io_.read(f["src0"], f["ch_in"], cap, f["src0_row"], rows)
        w = io_.weights(f)
        bias = io_.param(f["param0"], f["ch_out"]) if flags & F_BIAS else None
        extra = None
        if flags & (F_RESIDUAL | F_MULTIPLY):
            extra = io_.read(f["src1"], f["ch_out"], cap, f["src1_row"], rows)
        if opk == op.OpKind.VMM_ARGMAX:
            y, idx = op.vmm_argmax(x, w)
            st.last_argmax = idx
        else:
            y = op.vmm_bn(x, w, residual=extra if flags & F_RESIDUAL else None, bias=bias,
                          multiply=extra if flags & F_MULTIPLY else None)
        io_.write(f["dst"], f["ch_out"], cap, f["dst_row"], y)
    elif opk == op.OpKind.ROTARY:
        x = io_.read(f["src0"], f["ch_in"], cap, f["src0_row"], rows)
        style = "neox" if flags & F_ROT_NEOX else "glm"
        y = op.rotary_embed(x, _positions(f, rows), f["head_dim"], style, cfg.rotary_base)
        io_.write(f["dst"], f["ch_out"], cap, f["dst_row"], y)
    elif opk == op.OpKind.KV_WRITE:
        x = io_.read(f["src0"], f["ch_in"], cap, f["src0_row"], rows)
        arr = io_.cache(f["dst"], f["kv_heads"], f["head_dim"], cap)
        c = op.KvCache(1, f["kv_heads"], f["head_dim"], cap, cfg.t_out, [(arr, arr)])
        op.kv_write(c, 0, "k", x, f["kv_start"])
        io_.store_cache(f["dst"], arr)
        st.kv_len[f["dst"]] = max(st.kv_len.get(f["dst"], 0), f["kv_start"] + rows)
    elif opk == op.OpKind.TRANSPOSE:
        L = f["kv_len"]
        q = io_.read(f["src0"], f["ch_in"], cap, f["src0_row"], rows)
        keys = _cache_rows(st, io_, f, f["src1"], L)
        k_t = segmented_transpose_view(keys).materialize().reshape(f["kv_heads"], f["head_dim"], L)
        scale = fp16.from_float(1.0 / math.sqrt(f["head_dim"]))
        s = op.attention_scores(q, k_t, f["heads"], scale)
        io_.write(f["dst"], f["ch_out"], cap, f["dst_row"], _pad_span(s, cap))
    elif opk == op.OpKind.SOFTMAX:
        L = f["kv_len"]
        s = io_.read(f["src0"], f["ch_in"], cap, f["src0_row"], rows).reshape(rows, f["heads"], cap)[:, :, :L]
        p = op.softmax(s, op.causal_mask(_positions(f, rows), L)[:, None, :])
        io_.write(f["dst"], f["ch_out"], cap, f["dst_row"], _pad_span(p, cap))
    elif opk == op.OpKind.MHA_MATMUL:
        L = f["kv_len"]
        p = io_.read(f["src0"], f["ch_in"], cap, f["src0_row"], rows).reshape(rows, f["heads"], cap)[:, :, :L]
        vals = _cache_rows(st, io_, f, f["src1"], L)
        vt = segmented_transpose_view(vals).materialize().reshape(f["kv_heads"], f["head_dim"], L)
        v = vt.transpose(2, 0, 1).reshape(L, f["kv_heads"] * f["head_dim"])
        y = op.attention_context(p, v, f["kv_heads"], _positions(f, rows))
        io_.write(f["dst"], f["ch_out"], cap, f["dst_row"], y)
    elif opk == op.OpKind.ACTIVATION:
        x = io_.read(f["src0"], f["ch_in"], cap, f["src0_row"], rows)
        io_.write(f["dst"], f["ch_out"], cap, f["dst_row"], op.silu(x))
    else:
        raise ValueError(f"unsupported opcode {opk}")


def traffic(opk: op.OpKind, f: dict, t_out: int, memory: str = "hbm") -> tuple[int, int]:
    """Modelled ``(hbm, ddr)`` bytes of one instruction.

    Weights and cache rows go to HBM in ``hbm`` mode and to DDR otherwise;
    activations and parameters always move through DDR.
    """
    act = lambda ch, rows: -(-ch // t_out) * t_out * rows * 2
    rows = f["rows"]
    far = act(f["ch_in"], rows) + act(f["ch_out"], rows)
    near = 0
    kv_row = f["kv_heads"] * act(f["head_dim"], 1)
    if opk in (op.OpKind.VMM_BN, op.OpKind.VMM_ARGMAX):
        spec = LayerSpec("w", f["ch_out"], f["ch_in"], _LEVELS[f["level"]], _ENCODINGS[f["encoding"]])
        near = f["ch_out"] * spec.portions * spec.group_bytes
        if f["flags"] & (F_RESIDUAL | F_MULTIPLY):
            far += act(f["ch_out"], rows)
        if f["flags"] & F_BIAS:
            far += 2 * f["ch_out"]
    elif opk in (op.OpKind.RMSNORM, op.OpKind.LAYERNORM, op.OpKind.OUTLAYER_LN):
        far += 2 * f["ch_in"] * (2 if f["flags"] & F_LAYERNORM or opk == op.OpKind.LAYERNORM else 1)
    elif opk == op.OpKind.KV_WRITE:
        far = act(f["ch_in"], rows)
        near = kv_row * rows
    elif opk in (op.OpKind.TRANSPOSE, op.OpKind.MHA_MATMUL):
        near = kv_row * f["kv_len"]
    return (near, far) if memory == "hbm" else (0, near + far)


def _cache_rows(st, io_, f, addr, L) -> UnifiedTensor:
    if st.kv_len.get(addr, 0) < L:
        raise MemoryFault(f"cache at {addr:#x} holds {st.kv_len.get(addr, 0)} rows, {L} requested")
    arr = io_.cache(addr, f["kv_heads"], f["head_dim"], f["cap"])
    return UnifiedTensor(np.ascontiguousarray(arr[:, :, :, :L]), f["head_dim"])


def _pad_span(x: np.ndarray, cap: int) -> np.ndarray:
    rows, heads, L = x.shape
    out = np.zeros((rows, heads, cap), dtype=np.uint16)
    out[:, :, :L] = x
    return out.reshape(rows, heads * cap)


def host_patch(st: ExecState, phase: str, token: int) -> int:
    """Evaluate the residual fields of a stream into its DDR instruction buffer."""
    p = st.image.stream(phase)
    if not 1 <= token <= p.max_token:
        raise lowering.TokenOutOfRange(f"token {token} outside [1, {p.max_token}]")
    base = st.reg(f"{phase.upper()}_BASE")
    for r in p.residuals:
        v = np.array([eval_rpn(r.rpn, token)], dtype="<u4").view(np.uint8)
        st.mem.ddr_view(base + r.instr * INSTR_BYTES + 4 * (1 + r.field), 4)[:] = v
    return len(p.residuals)


def run(st: ExecState, token: int, phase: str = "decode", inputs=None, memory: str = "hbm",
        timing_only: bool = False, calibration=None) -> RunResult:
    """One pass of ``phase`` at sequence length ``token``.

    ``inputs`` are the FP16 bit rows fed to the first block: ``token`` rows
    for prefill, one row (position ``token - 1``) for decode.
    """
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    if memory not in ("hbm", "ddr"):
        raise ValueError("memory must be 'hbm' or 'ddr'")
    cfg = st.cfg
    host_patch(st, phase, token)
    write_registers(st, {"INSTR_BASE": st.reg(f"{phase.upper()}_BASE"), "VALID_OPS": st.reg(f"{phase.upper()}_OPS"),
                         "TOKEN": token, "PHASE": PHASES.index(phase), "MEM_MODE": int(memory == "ddr")})
    if not timing_only:
        if not st.weights_loaded:
            raise RuntimeError("no weights loaded; load a package or compile with --weights")
        x = np.asarray(inputs, dtype=np.uint16)
        want = token if phase == "prefill" else 1
        if x.shape != (want, cfg.hidden):
            raise ValueError(f"inputs must be ({want}, {cfg.hidden}) FP16 bits, got {x.shape}")
        _Access(st, memory).write(st.memory_map.region("x0").offset, cfg.hidden, st.image.max_token, 0, x)
        if phase == "prefill":
            st.kv_len.clear()
    p = st.image.stream(phase)
    times = step_times(cfg, token, phase, memory, hw=st.hw, calibration=calibration, last_token=p.last_token)
    write_registers(st, {"CTRL": CTRL_START, "STATUS": ST_BUSY})
    base, count = st.reg("INSTR_BASE"), st.reg("VALID_OPS")
    words = st.mem.ddr_view(base, count * INSTR_BYTES).tobytes()
    events = []
    st.last_argmax = None
    last = None
    try:
        for k, (opk, step, f) in enumerate(decode_words(words)):
            st.regs[REGISTERS["PC"]] = k
            if not timing_only:
                _execute(st, opk, f, _Access(st, memory))
            start = st.clock_ns
            st.clock_ns = start + times[step - 1] * 1e3
            hbm, ddr = traffic(opk, f, cfg.t_out, memory)
            events.append(Event(k, step, STEP_NAMES[step - 1], start, st.clock_ns, hbm, ddr))
            last = f
    except MemoryFault:
        st.regs[REGISTERS["STATUS"]] = ST_FAULT
        raise
    clk = int(st.clock_ns)
    write_registers(st, {"STATUS": ST_DONE, "CTRL": 0, "CLOCK_LO": clk & 0xFFFFFFFF, "CLOCK_HI": clk >> 32 & 0xFFFFFFFF})
    st.events.extend(events)
    logits = None
    if not timing_only and last is not None:
        logits = _Access(st, memory).read(last["dst"], last["ch_out"], last["cap"], last["dst_row"], last["rows"])
    return RunResult(logits, st.last_argmax, events, token, phase)


@dataclass(frozen=True)
class PipelineReport:
    timeline: object
    compute_s: tuple
    update_s: tuple


def run_pipelined(st: ExecState, iterations: int, host_update_time=None, token: int = 1,
                  phase: str = "decode", memory: str = "hbm") -> PipelineReport:
    """Timeline of ``iterations`` consecutive passes with overlapped host updates.

    Compute times come from timing-only runs (decode advances ``token`` by
    one per iteration).  ``host_update_time`` is seconds per iteration, a
    list, or ``None`` for the program's own patch cost (full on the first
    iteration, residual fields afterwards).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    compute = []
    for i in range(iterations):
        t = min(token + i, st.image.max_token) if phase == "decode" else token
        res = run(st, t, phase, memory=memory, timing_only=True)
        compute.append(res.total_ns * 1e-9)
    if host_update_time is None:
        p = st.image.stream(phase)
        update = [update_cost(p, full=True)] + [update_cost(p)] * (iterations - 1)
    else:
        update = np.broadcast_to(np.asarray(host_update_time, dtype=float), (iterations,)).tolist()
    tl = schedule_latency_hiding(compute, update)
    return PipelineReport(tl, tuple(compute), tuple(update))


# --------------------------------------------------------------------------
# event log export


EVENT_COLUMNS = ("step", "start_ns", "end_ns", "bytes_hbm", "bytes_ddr")


def events_csv(events) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("index", "name") + EVENT_COLUMNS)
    for e in events:
        w.writerow((e.index, e.name, e.step, f"{e.start_ns:.3f}", f"{e.end_ns:.3f}", e.bytes_hbm, e.bytes_ddr))
    return buf.getvalue()


def read_events_csv(text: str) -> list[Event]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(Event(int(row["index"]), int(row["step"]), row["name"], float(row["start_ns"]),
                         float(row["end_ns"]), int(row["bytes_hbm"]), int(row["bytes_ddr"])))
    return out


def events_summary(events, layers: int | None = None) -> dict:
    """Totals, per-step sums and the implied token rate of one pass."""
    if not events:
        return {"total_ns": 0.0, "steps": {}, "token_per_s": None}
    total = events[-1].end_ns - events[0].start_ns
    steps = {}
    for e in events:
        s = steps.setdefault(e.step, {"name": e.name, "ns": 0.0, "bytes_hbm": 0, "bytes_ddr": 0, "count": 0})
        s["ns"] += e.end_ns - e.start_ns
        s["bytes_hbm"] += e.bytes_hbm
        s["bytes_ddr"] += e.bytes_ddr
        s["count"] += 1
    return {"total_ns": total, "token_per_s": 1e9 / total if total > 0 else None,
            "bytes_hbm": sum(e.bytes_hbm for e in events), "bytes_ddr": sum(e.bytes_ddr for e in events),
            "steps": {str(k): v for k, v in sorted(steps.items())}}


def events_json(events) -> str:
    return json.dumps({"summary": events_summary(events), "events": [asdict(e) for e in events]}, indent=1)
