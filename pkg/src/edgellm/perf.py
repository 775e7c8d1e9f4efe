"""Analytic performance model: roofline, step latencies, throughput and energy.

Times are in microseconds unless a name says otherwise.

Step times follow ``real = base / efficiency + overhead``.  ``base`` is the
ideal time of the binding resource (weight or cache streaming, MAC
throughput, or activation streaming for nonlinear steps).  The overheads are
fitted against the measured decode and prefill columns of the reference
latency table; decode overheads are fixed per step, prefill overheads scale
with the row count.
"""
from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field

from .config import ModelConfig, STRATEGIES, parse_strategy, preset
from .sparse_codec import (GROUP_CHANNELS, SparsityLevel, effective_bitwidth, group_bits,
                           package_model)

DENSE_BITS = 4.125
PAYLOAD_BITS = 4.0


@dataclass(frozen=True)
class HwConfig:
    compute_clock_hz: float = 140e6
    mem_clock_hz: float = 280e6
    hbm_ports: int = 32
    port_bits: int = 256
    ddr_bandwidth: float = 60e9      # bytes/s
    act_bandwidth: float = 60e9      # activation streaming, bytes/s
    ffn_parallel: int = 4096         # FP16 x INT4 MACs per compute cycle
    mha_parallel: int = 1024         # FP16 x FP16 MACs per compute cycle
    efficiency: float = 0.75
    standby_power: float = 40.36
    hbm_bytes: int = 8 << 30
    ddr_bytes: int = 4 << 30

    @classmethod
    def from_dict(cls, d: dict | None) -> "HwConfig":
        d = dict(d or {})
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown hardware keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def hbm_bits_per_cycle(self) -> int:
        return self.hbm_ports * self.port_bits

    @property
    def mem_period_s(self) -> float:
        return 1.0 / self.mem_clock_hz

    @property
    def hbm_bandwidth(self) -> float:
        """Bytes per second."""
        return self.hbm_bits_per_cycle / 8 * self.mem_clock_hz

    def weight_bandwidth(self, memory: str) -> float:
        if memory == "hbm":
            return self.hbm_bandwidth
        if memory == "ddr":
            return self.ddr_bandwidth
        raise ValueError("memory must be 'hbm' or 'ddr'")

    def balanced(self) -> bool:
        """FFN weight demand per compute cycle equals the MHA cache demand and the HBM supply."""
        ratio = self.mem_clock_hz / self.compute_clock_hz
        ffn = self.ffn_parallel * 4
        mha = self.mha_parallel * 16
        return ffn == mha == self.hbm_bits_per_cycle * ratio


# --------------------------------------------------------------------------
# ideal times, utilization, roofline


def payload_bits(level=SparsityLevel.DENSE, encoding=None) -> float:
    """Weight bits per position charged by the ideal-time model (4 when dense)."""
    return PAYLOAD_BITS * effective_bitwidth(level, encoding) / DENSE_BITS


def ideal_vmm_time(ch_in: int, ch_out: int, level=SparsityLevel.DENSE, hw: HwConfig = HwConfig(),
                   encoding=None, memory: str = "hbm") -> float:
    """Seconds to stream a layer's weights at full bandwidth."""
    if ch_in < 0 or ch_out < 0:
        raise ValueError("dims must be non-negative")
    bits = ch_in * ch_out * payload_bits(level, encoding)
    if memory == "hbm":
        return bits / hw.hbm_bits_per_cycle * hw.mem_period_s
    return bits / 8 / hw.weight_bandwidth(memory)


def utilization(ideal: float, real: float) -> float:
    if real <= 0:
        raise ValueError("real time must be positive")
    u = ideal / real
    if u > 1.0:
        warnings.warn(f"utilization {u:.3f} above 1: ideal time exceeds the measured time", RuntimeWarning)
    return u


@dataclass(frozen=True)
class RooflinePoint:
    intensity: float    # ops per byte
    attainable: float   # ops per second
    bound: str          # "memory" or "compute"
    peak: float
    bandwidth: float


def roofline_point(ops: float, bytes_moved: float, peak: float, bandwidth: float) -> RooflinePoint:
    intensity = ops / bytes_moved if bytes_moved else math.inf
    mem = intensity * bandwidth
    bound = "memory" if mem < peak else "compute"
    return RooflinePoint(intensity, min(peak, mem), bound, peak, bandwidth)


def vmm_roofline(ch_in: int, ch_out: int, tokens: int = 1, level=SparsityLevel.DENSE,
                 hw: HwConfig = HwConfig(), memory: str = "hbm") -> RooflinePoint:
    """Roofline placement of ``tokens`` rows against one layer (2 ops per MAC).

    Weights are read once; activation traffic is not charged.
    """
    ops = 2.0 * tokens * ch_in * ch_out
    nbytes = ch_in * ch_out * effective_bitwidth(level) / 8
    peak = 2.0 * hw.ffn_parallel * hw.compute_clock_hz
    return roofline_point(ops, nbytes, peak, hw.weight_bandwidth(memory))


# --------------------------------------------------------------------------
# reference latency table

STEP_NAMES = (
    "LayerNorm", "VMM-BN(Q)", "EMB_Q", "VMM-BN(K)", "EMB_K", "DAT2HBM", "TRP", "SOFTMAX",
    "VMM-BN(V)", "DAT2HBM", "F2W", "VMMBNRES0", "LayerNorm", "VMMBN1", "ACT", "VMMBNRES1",
    "VMMBNRES2", "Outlayer_LN", "VMMBN_Arg",
)
BLOCK_STEPS = 17

# measured delays (us) for GLM-6B, token = 128
TABLE3 = {
    ("decode", "hbm"): (9.55, 47.12, 7.79, 2.15, 0.44, 0.23, 5.83, 43.38, 1.97, 0.29, 5.73, 48.34,
                        9.52, 137.98, 15.36, 143.98, 191.41, 9.75, 648.81),
    ("decode", "ddr"): (15.84, 181.66, 13.70, 12.61, 1.57, 1.63, 10.06, 48.68, 10.72, 2.23, 9.64,
                        177.30, 14.48, 596.56, 33.83, 594.59, 707.03, 14.40, 2759.7),
    ("prefill", "hbm"): (533.35, 4770.07, 274.29, 476.38, 24.99, 70.42, 672.66, 872.54, 475.36,
                         69.95, 614.95, 4725.42, 533.76, 16063.43, 890.43, 16007.04, 23429.09,
                         19.86, 639.63),
    ("prefill", "ddr"): (694.86, 7840.94, 351.03, 649.70, 33.15, 36.46, 837.16, 1048.91, 650.17,
                         35.44, 837.49, 7845.11, 694.53, 26306.36, 1142.23, 26319.11, 75931.96,
                         23.09, 2762.25),
}
TABLE3_SUMMARY = {
    ("decode", "hbm"): (671.10, 19449.23, 51.42),
    ("decode", "ddr"): (2432.12, 70873.4, 14.11),
    ("prefill", "hbm"): (70504.12, 1974774.7, 0.51),
    ("prefill", "ddr"): (151254.59, 4237913.9, 0.24),
}
TABLE3_TOKEN = 128

# operator power (W) per block step, plus standby
POWER_TABLE = {
    "standby": 40.36,
    1: 41.02, 2: 54.02, 3: 40.81, 4: 42.79, 5: 40.63, 6: 40.62, 7: 41.01, 8: 40.65, 9: 42.84,
    10: 40.62, 11: 40.92, 12: 57.25, 13: 40.97, 14: 55.13, 15: 41.11, 16: 58.13, 17: 53.23,
}
REPORTED_AVG_POWER = 56.86


@dataclass
class LatencyTable:
    """Per-step delays (us) of one column, ordered as :data:`STEP_NAMES`."""

    steps: list
    layers: int = 28
    phase: str = "decode"
    memory: str = "hbm"
    token: int = 128
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.steps) != len(STEP_NAMES):
            raise ValueError(f"expected {len(STEP_NAMES)} step delays")

    @property
    def per_block(self) -> float:
        return float(sum(self.steps[:BLOCK_STEPS]))

    @property
    def total(self) -> float:
        return self.per_block * self.layers + self.steps[17] + self.steps[18]

    @property
    def speed(self) -> float:
        """Token/s (one generated token per full pass)."""
        return 1e6 / self.total

    def rows(self):
        return [(i + 1, STEP_NAMES[i], t) for i, t in enumerate(self.steps)]

    def to_dict(self) -> dict:
        return {"phase": self.phase, "memory": self.memory, "token": self.token, "layers": self.layers,
                "steps": [{"step": i, "name": n, "us": t} for i, n, t in self.rows()],
                "per_block_us": self.per_block, "total_us": self.total, "token_per_s": self.speed,
                **({"meta": self.meta} if self.meta else {})}

    def format(self) -> str:
        lines = [f"{self.phase} token={self.token} memory={self.memory}"]
        for i, n, t in self.rows():
            lines.append(f"STEP {i:<3d} {n:<12s} {t:12.2f}")
        lines.append(f"{'single block delay (us)':<29s}{self.per_block:12.2f}")
        lines.append(f"{'total delay (us)':<29s}{self.total:12.2f}")
        lines.append(f"{'speed (token/s)':<29s}{self.speed:12.2f}")
        return "\n".join(lines)


def reference_table(phase: str = "decode", memory: str = "hbm") -> LatencyTable:
    return LatencyTable(list(TABLE3[(phase, memory)]), 28, phase, memory, TABLE3_TOKEN)


# --------------------------------------------------------------------------
# step model


@dataclass(frozen=True)
class StepWork:
    """Resource demand of one step."""

    name: str
    kind: str            # vmm | mha | kv | stream
    weight_bits: float = 0.0     # ideal-model weight payload bits
    cache_bytes: float = 0.0     # KV bytes read or written
    macs: float = 0.0
    parallel: int = 1
    act_bytes: float = 0.0       # DDR activation traffic
    rows: int = 1


def _layer_dims(cfg: ModelConfig):
    return {s.name: s for s in cfg.layer_specs()}


def step_work(cfg: ModelConfig, token: int, phase: str, strategy=None, hw: HwConfig = HwConfig(),
              last_token: bool = True) -> list[StepWork]:
    """Work of every step for a pass over ``rows`` new rows with ``token`` cached positions.

    Decode processes one row against a cache of ``token`` positions; prefill
    processes ``token`` rows.  With ``last_token`` the outlayer steps of
    prefill work on a single row.
    """
    if phase not in ("decode", "prefill"):
        raise ValueError("phase must be 'decode' or 'prefill'")
    token = max(int(token), 1)
    rows = 1 if phase == "decode" else token
    L = token
    lv = STRATEGIES[parse_strategy(strategy or cfg.strategy)]
    H, d = cfg.hidden, cfg.head_dim

    def vmm(name, ch_out, ch_in, layer, r=rows):
        level = lv.get(layer, SparsityLevel.DENSE)
        kept = level.kept_fraction
        return StepWork(name, "vmm", weight_bits=ch_out * ch_in * payload_bits(level),
                        macs=r * ch_out * ch_in * kept, parallel=hw.ffn_parallel,
                        act_bytes=2 * r * (ch_in + ch_out), rows=r)

    def stream(name, ch, r=rows, passes=2):
        return StepWork(name, "stream", act_bytes=passes * 2 * r * ch, rows=r)

    kv_bytes = 2 * L * cfg.kv_dim
    out_rows = 1 if last_token else rows
    return [
        stream("LayerNorm", H),
        vmm("VMM-BN(Q)", cfg.q_dim, H, "q"),
        stream("EMB_Q", cfg.q_dim),
        vmm("VMM-BN(K)", cfg.kv_dim, H, "k"),
        stream("EMB_K", cfg.kv_dim),
        StepWork("DAT2HBM", "kv", cache_bytes=2 * rows * cfg.kv_dim, act_bytes=2 * rows * cfg.kv_dim, rows=rows),
        StepWork("TRP", "mha", cache_bytes=kv_bytes, macs=rows * L * cfg.heads * d,
                 parallel=hw.mha_parallel, act_bytes=2 * rows * (cfg.q_dim + cfg.heads * L), rows=rows),
        stream("SOFTMAX", cfg.heads * L),
        vmm("VMM-BN(V)", cfg.kv_dim, H, "v"),
        StepWork("DAT2HBM", "kv", cache_bytes=2 * rows * cfg.kv_dim, act_bytes=2 * rows * cfg.kv_dim, rows=rows),
        StepWork("F2W", "mha", cache_bytes=kv_bytes, macs=rows * L * cfg.heads * d,
                 parallel=hw.mha_parallel, act_bytes=2 * rows * (cfg.q_dim + cfg.heads * L), rows=rows),
        vmm("VMMBNRES0", H, cfg.q_dim, "o"),
        stream("LayerNorm", H),
        vmm("VMMBN1", cfg.ffn, H, "h_to_4h"),
        stream("ACT", cfg.ffn),
        vmm("VMMBNRES1", cfg.ffn, H, "h_to_4h"),
        vmm("VMMBNRES2", H, cfg.ffn, "4h_to_h"),
        stream("Outlayer_LN", H, r=out_rows),
        StepWork("VMMBN_Arg", "vmm", weight_bits=cfg.vocab * H * PAYLOAD_BITS,
                 macs=out_rows * cfg.vocab * H, parallel=hw.ffn_parallel,
                 act_bytes=2 * out_rows * (H + cfg.vocab), rows=out_rows),
    ]


def base_time_us(w: StepWork, hw: HwConfig, memory: str) -> float:
    """Ideal time of the binding resource."""
    compute = w.macs / w.parallel / hw.compute_clock_hz if w.macs else 0.0
    if w.kind == "vmm":
        if memory == "hbm":
            mem = w.weight_bits / hw.hbm_bits_per_cycle * hw.mem_period_s
        else:
            mem = w.weight_bits / 8 / hw.ddr_bandwidth
        t = max(mem, compute)
    elif w.kind in ("mha", "kv"):
        t = max(w.cache_bytes / hw.weight_bandwidth(memory), compute)
    else:
        t = w.act_bytes / hw.act_bandwidth
    return t * 1e6


@dataclass
class Calibration:
    efficiency: float = 0.75
    decode_overhead: list = field(default_factory=lambda: [0.0] * len(STEP_NAMES))
    prefill_overhead: list = field(default_factory=lambda: [0.0] * len(STEP_NAMES))  # per row
    decode_efficiency: list = field(default_factory=lambda: [None] * len(STEP_NAMES))
    prefill_efficiency: list = field(default_factory=lambda: [None] * len(STEP_NAMES))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def calibrate(cfg: ModelConfig | None = None, hw: HwConfig = HwConfig(), efficiency: float = 0.75,
              token: int = TABLE3_TOKEN) -> Calibration:
    """Fit per-step overheads to the measured HBM columns.

    A step whose measured time is below ``base / efficiency`` gets zero
    overhead and its own efficiency ``base / measured`` instead.
    """
    cfg = cfg or preset("glm6b")
    cal = Calibration(efficiency)
    for phase in ("decode", "prefill"):
        meas = TABLE3[(phase, "hbm")]
        work = step_work(cfg, token, phase, "dense", hw)
        over = getattr(cal, f"{phase}_overhead")
        effs = getattr(cal, f"{phase}_efficiency")
        for i, (w, m) in enumerate(zip(work, meas)):
            base = base_time_us(w, hw, "hbm")
            extra = m - base / efficiency
            if extra >= 0:
                over[i] = extra / (w.rows if phase == "prefill" else 1)
            else:
                over[i] = 0.0
                effs[i] = base / m
    return cal


_DEFAULT_CAL = None


def default_calibration() -> Calibration:
    global _DEFAULT_CAL
    if _DEFAULT_CAL is None:
        _DEFAULT_CAL = calibrate()
    return _DEFAULT_CAL


def step_times(cfg: ModelConfig, token: int, phase: str, memory: str = "hbm", strategy=None,
               hw: HwConfig | None = None, calibration: Calibration | None = None,
               last_token: bool = True) -> list[float]:
    hw = hw or HwConfig.from_dict(cfg.hw)
    cal = calibration or default_calibration()
    out = []
    for i, w in enumerate(step_work(cfg, token, phase, strategy, hw, last_token)):
        eff = getattr(cal, f"{phase}_efficiency")[i] or cal.efficiency
        over = getattr(cal, f"{phase}_overhead")[i]
        if phase == "prefill":
            over *= w.rows
        out.append(base_time_us(w, hw, memory) / eff + over)
    return out


def block_latency(cfg: ModelConfig, token: int = TABLE3_TOKEN, phase: str = "decode", memory: str = "hbm",
                  strategy=None, hw: HwConfig | None = None, calibration: Calibration | None = None,
                  last_token: bool = True) -> LatencyTable:
    times = step_times(cfg, token, phase, memory, strategy, hw, calibration, last_token)
    return LatencyTable(times, cfg.layers, phase, memory, token,
                        {"model": cfg.name, "strategy": parse_strategy(strategy or cfg.strategy)})


def decode_sweep(cfg: ModelConfig, tokens, memory: str = "hbm", strategy=None, **kw) -> list[tuple[int, float]]:
    return [(int(t), block_latency(cfg, t, "decode", memory, strategy, **kw).speed) for t in tokens]


def mha_component(table: LatencyTable) -> float:
    """Attention share of a block: cache writes, score, softmax and context steps."""
    return sum(table.steps[i] for i in (5, 6, 7, 9, 10))


# --------------------------------------------------------------------------
# sparsity and energy


def block_weight_mib(cfg: ModelConfig, strategy) -> float:
    _, rep = package_model(cfg.layer_specs(strategy))
    return rep["total_payload_mib"]


def sparsity_speedup(strategy, cfg: ModelConfig | None = None) -> float:
    cfg = cfg or preset("glm6b")
    return block_weight_mib(cfg, "dense") / block_weight_mib(cfg, strategy)


@dataclass(frozen=True)
class EnergyEstimate:
    avg_power: float
    token_per_joule: float
    energy_j: float


def energy_estimate(durations: dict, power: dict, throughput: float | None = None) -> EnergyEstimate:
    """Time-weighted average power over the steps in ``durations``.

    ``durations`` maps step keys to microseconds; every key must have a power
    entry.  ``throughput`` (token/s) yields token/J; otherwise one token per
    pass over the given steps is assumed.
    """
    missing = [k for k in durations if k not in power]
    if missing:
        raise KeyError(f"no power entry for steps {missing}")
    total_t = sum(durations.values())
    if total_t <= 0:
        raise ValueError("durations must sum to a positive time")
    energy = sum(power[k] * t for k, t in durations.items()) * 1e-6
    avg = energy / (total_t * 1e-6)
    tput = throughput if throughput is not None else 1e6 / total_t
    return EnergyEstimate(avg, tput / avg, energy)


def block_durations(table: LatencyTable) -> dict:
    return {i + 1: t for i, t in enumerate(table.steps[:BLOCK_STEPS])}


def glm_block_bits(strategy) -> float:
    """Weight-format bits of one GLM-6B block (portion padding excluded)."""
    return block_weight_mib(preset("glm6b"), strategy) * 8 * (1 << 20)


__all__ = [
    "HwConfig", "ideal_vmm_time", "utilization", "roofline_point", "vmm_roofline", "LatencyTable",
    "TABLE3", "TABLE3_SUMMARY", "POWER_TABLE", "STEP_NAMES", "reference_table", "step_work",
    "calibrate", "Calibration", "step_times", "block_latency", "decode_sweep", "sparsity_speedup",
    "energy_estimate", "EnergyEstimate", "group_bits", "GROUP_CHANNELS",
]
