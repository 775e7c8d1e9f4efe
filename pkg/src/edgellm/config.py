"""Model configuration, sparse strategies and synthetic weights.

Config files are JSON objects with the keys of :class:`ModelConfig`.  Unknown
keys are rejected.  ``hw`` holds optional hardware overrides (see
``perf.HwConfig``).  Presets ship as ``glm6b``, ``qwen7b`` and ``toy``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import fp16
from .sparse_codec import LayerSpec, SparsityLevel

BLOCK_LAYERS = ("q", "k", "v", "o", "h_to_4h", "4h_to_h")

# per-layer levels; the LM head is always dense
STRATEGIES = {
    "dense": {},
    "1": {"o": SparsityLevel.S50, "h_to_4h": SparsityLevel.S50, "4h_to_h": SparsityLevel.S50},
    "2": {"o": SparsityLevel.S50, "h_to_4h": SparsityLevel.S75, "4h_to_h": SparsityLevel.S50},
    "3": {"o": SparsityLevel.S50, "h_to_4h": SparsityLevel.S75, "4h_to_h": SparsityLevel.S75},
}


def parse_strategy(s) -> str:
    key = str(s).strip().lower()
    key = key.replace("strategy-", "").replace("strategy", "").replace("s", "") if key != "dense" else key
    if key not in STRATEGIES:
        raise ValueError(f"unknown strategy {s!r}; expected one of {sorted(STRATEGIES)}")
    return key


@dataclass(frozen=True)
class ModelConfig:
    name: str
    hidden: int
    heads: int
    kv_heads: int
    ffn: int
    layers: int
    vocab: int
    max_token: int
    head_dim: int = 0
    strategy: str = "dense"
    rotary: str = "glm"
    norm: str = "rmsnorm"
    qkv_bias: bool = True
    t_out: int = 16
    rotary_base: float = 10000.0
    eps: float = 1e-5
    hw: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.head_dim:
            object.__setattr__(self, "head_dim", self.hidden // max(self.heads, 1))
        object.__setattr__(self, "strategy", parse_strategy(self.strategy))
        for k in ("hidden", "heads", "kv_heads", "ffn", "layers", "vocab", "max_token", "head_dim", "t_out"):
            if int(getattr(self, k)) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.heads % self.kv_heads:
            raise ValueError("heads must be a multiple of kv_heads")
        if self.rotary not in ("glm", "neox"):
            raise ValueError("rotary must be 'glm' or 'neox'")
        if self.norm not in ("rmsnorm", "layernorm"):
            raise ValueError("norm must be 'rmsnorm' or 'layernorm'")
        if self.head_dim % 4:
            raise ValueError("head_dim must be a multiple of 4")

    @property
    def q_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def kv_dim(self) -> int:
        return self.kv_heads * self.head_dim

    def with_(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def levels(self, strategy=None) -> dict:
        return STRATEGIES[parse_strategy(strategy or self.strategy)]

    def layer_specs(self, strategy=None) -> list[LayerSpec]:
        """Weight layers of one block (``h_to_4h`` carries gate and up halves)."""
        lv = self.levels(strategy)
        dims = {
            "q": (self.q_dim, self.hidden),
            "k": (self.kv_dim, self.hidden),
            "v": (self.kv_dim, self.hidden),
            "o": (self.hidden, self.q_dim),
            "h_to_4h": (2 * self.ffn, self.hidden),
            "4h_to_h": (self.hidden, self.ffn),
        }
        return [LayerSpec(n, *dims[n], lv.get(n, SparsityLevel.DENSE)) for n in BLOCK_LAYERS]

    def lm_head_spec(self) -> LayerSpec:
        return LayerSpec("lm_head", self.vocab, self.hidden)

    def model_specs(self, strategy=None) -> list[LayerSpec]:
        out = []
        for i in range(self.layers):
            for s in self.layer_specs(strategy):
                out.append(LayerSpec(f"l{i}.{s.name}", s.ch_out, s.ch_in, s.level, s.encoding))
        out.append(self.lm_head_spec())
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def from_dict(d: dict) -> ModelConfig:
    names = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ModelConfig(**d)


def preset(name: str) -> ModelConfig:
    res = resources.files("edgellm") / "presets" / f"{name}.json"
    if not res.is_file():
        raise FileNotFoundError(f"no preset named {name!r}")
    return from_dict(json.loads(res.read_text()))


def load(path_or_name) -> ModelConfig:
    """Load a config file, or a shipped preset by bare name."""
    p = Path(path_or_name)
    if p.is_file():
        return from_dict(json.loads(p.read_text()))
    if p.suffix == "" and "/" not in str(path_or_name):
        return preset(str(path_or_name))
    raise FileNotFoundError(f"config file not found: {path_or_name}")


# --------------------------------------------------------------------------
# synthetic parameters


def synthetic_weights(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded Gaussian parameters, scaled by ``1/sqrt(fan_in)``.

    Keys: ``l{i}.{layer}`` matrices ``(ch_out, ch_in)``, per-layer norm gains
    ``l{i}.ln1`` / ``l{i}.ln2`` (plus ``_b`` biases for layernorm), QKV biases
    ``l{i}.{q,k,v}_bias``, ``final_ln``, ``lm_head`` and ``embed``.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for i in range(cfg.layers):
        for s in cfg.layer_specs():
            out[f"l{i}.{s.name}"] = rng.normal(0.0, 1.0 / np.sqrt(s.ch_in), (s.ch_out, s.ch_in))
        for ln in ("ln1", "ln2"):
            out[f"l{i}.{ln}"] = 1.0 + 0.1 * rng.normal(size=cfg.hidden)
            if cfg.norm == "layernorm":
                out[f"l{i}.{ln}_b"] = 0.1 * rng.normal(size=cfg.hidden)
        if cfg.qkv_bias:
            out[f"l{i}.q_bias"] = 0.1 * rng.normal(size=cfg.q_dim)
            out[f"l{i}.k_bias"] = 0.1 * rng.normal(size=cfg.kv_dim)
            out[f"l{i}.v_bias"] = 0.1 * rng.normal(size=cfg.kv_dim)
    out["final_ln"] = 1.0 + 0.1 * rng.normal(size=cfg.hidden)
    if cfg.norm == "layernorm":
        out["final_ln_b"] = 0.1 * rng.normal(size=cfg.hidden)
    out["lm_head"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.hidden), (cfg.vocab, cfg.hidden))
    out["embed"] = rng.normal(0.0, 1.0, (cfg.vocab, cfg.hidden))
    return out


def is_matrix_key(key: str) -> bool:
    return key == "lm_head" or key.split(".")[-1] in BLOCK_LAYERS


def to_fp16(values) -> np.ndarray:
    return fp16.float_to_bits(np.asarray(values, dtype=np.float64))
