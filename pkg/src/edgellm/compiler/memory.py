"""Static memory planning against ``MAX_TOKEN``.

HBM is 32 ports; every HBM region is a window at the same offset on all
ports.  Weight windows come first (output channel ``c`` lives on port
``c % 32``), followed by the KV caches, which are word-striped across the
ports.  Activations and norm/bias parameters live in DDR; activation buffers
are placed by a best-fit allocator over liveness intervals from one linear
pass over the step order.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from ..layout import ELEMENT_BYTES
from ..perf import HwConfig
from ..sparse_codec import HBM_PORTS, LayerSpec
from .graph import OpGraph

ALIGN = 64
HBM_WORD = 32  # bytes per port word (256 bits)


class AllocationError(RuntimeError):
    pass


def _align(n: int, a: int = ALIGN) -> int:
    return -(-n // a) * a


@dataclass(frozen=True)
class Region:
    name: str
    space: str          # "hbm" (per-port window) or "ddr"
    offset: int
    size: int           # bytes (per port for HBM windows)
    kind: str           # weight | kv | act | param
    live: tuple = (0, 0)
    rows: int = 0       # row (token) extent of dynamic buffers

    @property
    def end(self) -> int:
        return self.offset + self.size


@dataclass
class MemoryMap:
    max_token: int
    t_out: int
    regions: dict = field(default_factory=dict)
    ddr_top: int = 0
    hbm_top: int = 0   # per port

    def region(self, name: str) -> Region:
        try:
            return self.regions[name]
        except KeyError:
            raise AllocationError(f"no region named {name!r}") from None

    def of_kind(self, kind: str) -> list[Region]:
        return [r for r in self.regions.values() if r.kind == kind]

    def kv_reservation(self) -> int:
        return sum(r.size for r in self.of_kind("kv")) * HBM_PORTS

    def audit(self) -> list[str]:
        """Pairs of simultaneously-live regions that overlap in the same space."""
        bad = []
        regs = sorted(self.regions.values(), key=lambda r: (r.space, r.offset))
        for i, a in enumerate(regs):
            for b in regs[i + 1:]:
                if b.space != a.space or b.offset >= a.end:
                    if b.space != a.space:
                        continue
                    break
                if a.live[0] <= b.live[1] and b.live[0] <= a.live[1]:
                    bad.append(f"{a.name} overlaps {b.name}")
        return bad

    def to_dict(self) -> dict:
        return {"max_token": self.max_token, "t_out": self.t_out, "ddr_top": self.ddr_top,
                "hbm_top": self.hbm_top, "regions": [asdict(r) for r in self.regions.values()]}

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryMap":
        m = cls(d["max_token"], d["t_out"], ddr_top=d["ddr_top"], hbm_top=d["hbm_top"])
        for r in d["regions"]:
            r = dict(r)
            r["live"] = tuple(r["live"])
            m.regions[r["name"]] = Region(**r)
        return m

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def tensor_bytes(channels: int, rows: int, t_out: int, outer: int = 1) -> int:
    slabs = -(-channels // t_out)
    return outer * slabs * rows * t_out * ELEMENT_BYTES


def liveness(graph: OpGraph) -> dict[str, tuple[int, int]]:
    """``[first, last]`` step indices per activation tensor (graph inputs start at -1)."""
    live = {name: (-1, -1) for name in graph.inputs}
    for n in graph.nodes:
        for o in n.outputs:
            if o not in live:
                live[o] = (n.index, n.index)
        for i in n.inputs:
            a, b = live.get(i, (n.index, n.index))
            live[i] = (a, max(b, n.index))
    end = len(graph.nodes)
    for o in graph.outputs:
        live[o] = (live[o][0], end)
    return live


def _best_fit(items):
    """``items``: (name, start, end, size) -> {name: offset}, top."""
    items = sorted(items, key=lambda x: (x[1], x[0]))
    active, free, out, top = [], [], {}, 0
    for name, start, end, size in items:
        still = []
        for a in active:
            if a[0] < start:
                free.append((a[1], a[2]))
            else:
                still.append(a)
        active = still
        free = _coalesce(free)
        fits = [f for f in free if f[1] >= size]
        if fits:
            off, fsz = min(fits, key=lambda f: (f[1], f[0]))
            free.remove((off, fsz))
            if fsz > size:
                free.append((off + size, fsz - size))
        elif free and free[-1][0] + free[-1][1] == top:
            off = free.pop()[0]
            top = off + size
        else:
            off = top
            top += size
        out[name] = off
        active.append((end, off, size))
    return out, top


def _coalesce(blocks):
    blocks = sorted(blocks)
    merged = []
    for off, size in blocks:
        if merged and merged[-1][0] + merged[-1][1] == off:
            merged[-1] = (merged[-1][0], merged[-1][1] + size)
        else:
            merged.append((off, size))
    return merged


def weight_window_bytes(spec: LayerSpec) -> int:
    """Per-port bytes of a layer: ``ceil(ch_out / 32)`` channels of packed portions."""
    return _align(-(-spec.ch_out // HBM_PORTS) * spec.portions * spec.group_bytes)


def allocate_memory(graph: OpGraph, max_token: int | None = None, specs=None, params: dict | None = None,
                    hw: HwConfig | None = None) -> MemoryMap:
    """Place weights, KV caches, parameters and activations.

    ``specs`` are the weight layer specs (default: the config's strategy);
    ``params`` maps parameter names to element counts (default: norm gains and
    QKV biases implied by the config).
    """
    cfg = graph.cfg
    max_token = max_token or cfg.max_token
    if max_token < 1:
        raise AllocationError("MAX_TOKEN must be >= 1")
    hw = hw or HwConfig.from_dict(cfg.hw)
    specs = list(specs) if specs is not None else cfg.model_specs()
    mm = MemoryMap(max_token, cfg.t_out)
    end = len(graph.nodes)

    hbm = 0
    for s in specs:
        size = weight_window_bytes(s)
        mm.regions[s.name] = Region(s.name, "hbm", hbm, size, "weight", (-1, end))
        hbm += size
    for name, t in graph.tensors.items():
        if t.kind != "kv":
            continue
        total = tensor_bytes(t.channels, max_token, cfg.t_out, t.outer)
        size = -(-total // (HBM_WORD * HBM_PORTS)) * HBM_WORD
        mm.regions[name] = Region(name, "hbm", hbm, size, "kv", (-1, end), max_token)
        hbm += size
    mm.hbm_top = hbm
    if hbm > hw.hbm_bytes // HBM_PORTS:
        raise AllocationError(f"HBM per-port demand {hbm} exceeds {hw.hbm_bytes // HBM_PORTS} bytes")

    if params is None:
        params = default_params(cfg)
    ddr = 0
    for name, n in params.items():
        if name in mm.regions:
            raise AllocationError(f"parameter {name} collides with a weight region")
        size = _align(n * ELEMENT_BYTES)
        mm.regions[name] = Region(name, "ddr", ddr, size, "param", (-1, end))
        ddr += size

    live = liveness(graph)
    items = []
    for name, t in graph.tensors.items():
        if t.kind != "act":
            continue
        # activation tensors use the static row extent of the allocation
        cap = max_token if t.capacity == cfg.max_token else t.capacity
        ch = t.channels if "scores" not in name and "probs" not in name else cfg.heads * max_token
        size = _align(tensor_bytes(ch, cap, cfg.t_out, t.outer))
        a, b = live.get(name, (-1, end))
        items.append((name, a, b, size))
    clash = {n for n, *_ in items} & set(mm.regions)
    if clash:
        raise AllocationError(f"tensor names collide with weight or parameter regions: {sorted(clash)}")
    offsets, top = _best_fit(items)
    for name, start, stop, size in items:
        mm.regions[name] = Region(name, "ddr", ddr + offsets[name], size, "act", (start, stop), max_token)
    mm.ddr_top = _align(ddr + top, 4096)
    if mm.ddr_top > hw.ddr_bytes:
        raise AllocationError(f"DDR demand {mm.ddr_top} exceeds {hw.ddr_bytes} bytes")
    problems = mm.audit()
    if problems:
        raise AllocationError("; ".join(problems[:5]))
    return mm


def default_params(cfg) -> dict:
    out = {}
    for l in range(cfg.layers):
        p = f"l{l}."
        out[p + "ln1"] = cfg.hidden
        out[p + "ln2"] = cfg.hidden
        if cfg.norm == "layernorm":
            out[p + "ln1_b"] = cfg.hidden
            out[p + "ln2_b"] = cfg.hidden
        if cfg.qkv_bias:
            out[p + "q_bias"] = cfg.q_dim
            out[p + "k_bias"] = cfg.kv_dim
            out[p + "v_bias"] = cfg.kv_dim
    out["final_ln"] = cfg.hidden
    if cfg.norm == "layernorm":
        out["final_ln_b"] = cfg.hidden
    return out
