"""Operator graph of a decoder stack: 17 fused steps per block plus two outlayer steps."""
from __future__ import annotations

from dataclasses import dataclass, field

from ..config import ModelConfig
from ..operators import OpKind
from ..perf import STEP_NAMES
from .symexpr import TOKEN, Expr, const


@dataclass(frozen=True)
class TensorDesc:
    """An edge of the graph.

    ``rows`` is the live row count (token-dependent in prefill); ``capacity``
    the static row extent used for layout strides and allocation.  ``space``
    is ``ddr`` for activations and ``hbm`` for cache tensors.  ``layout`` is
    the layout tag every producer and consumer must agree on.
    """

    name: str
    channels: int
    rows: Expr
    capacity: int
    space: str = "ddr"
    kind: str = "act"
    outer: int = 1
    layout: str = "unified"


@dataclass
class OpNode:
    index: int
    step: int
    name: str
    kind: OpKind
    layer: int | None
    inputs: tuple
    outputs: tuple
    attrs: dict = field(default_factory=dict)


@dataclass
class OpGraph:
    cfg: ModelConfig
    phase: str
    nodes: list
    tensors: dict
    inputs: tuple
    outputs: tuple

    def producer(self, tensor: str) -> OpNode | None:
        for n in self.nodes:
            if tensor in n.outputs:
                return n
        return None

    def steps_per_block(self) -> int:
        return sum(1 for n in self.nodes if n.layer == 0)


NORM_KIND = {"rmsnorm": OpKind.RMSNORM, "layernorm": OpKind.LAYERNORM}


def build_block_graph(cfg: ModelConfig, phase: str = "prefill", max_token: int | None = None) -> OpGraph:
    """Graph for ``phase`` (``prefill`` handles ``token`` rows, ``decode`` one row).

    In both phases ``token`` is the sequence length after the step, i.e. the
    attention span.
    """
    if phase not in ("prefill", "decode"):
        raise ValueError("phase must be 'prefill' or 'decode'")
    cap = max_token or cfg.max_token
    rows = TOKEN if phase == "prefill" else const(1)
    pos0 = const(0) if phase == "prefill" else TOKEN - 1
    H, F = cfg.hidden, cfg.ffn
    tensors = {}

    def t(name, ch, space="ddr", kind="act", r=rows, outer=1, capacity=cap):
        tensors[name] = TensorDesc(name, ch, r, capacity, space, kind, outer)
        return name

    nodes = []

    def node(step, kind, layer, ins, outs, **attrs):
        nodes.append(OpNode(len(nodes), step, STEP_NAMES[step - 1], kind, layer, tuple(ins), tuple(outs), attrs))

    norm = NORM_KIND[cfg.norm]
    x = t("x0", H)
    for l in range(cfg.layers):
        p = f"l{l}."
        kc = t(p + "kcache", cfg.head_dim, "hbm", "kv", TOKEN, cfg.kv_heads)
        vc = t(p + "vcache", cfg.head_dim, "hbm", "kv", TOKEN, cfg.kv_heads)
        ln1 = t(p + "norm1", H)
        q = t(p + "q_proj", cfg.q_dim)
        qr = t(p + "q_rot", cfg.q_dim)
        k = t(p + "k_proj", cfg.kv_dim)
        kr = t(p + "k_rot", cfg.kv_dim)
        sc = t(p + "scores", cfg.heads * cap)
        pr = t(p + "probs", cfg.heads * cap)
        v = t(p + "v_proj", cfg.kv_dim)
        ctx = t(p + "ctx", cfg.q_dim)
        xa = t(p + "x_attn", H)
        ln2 = t(p + "norm2", H)
        gate = t(p + "gate", F)
        act = t(p + "act", F)
        up = t(p + "up", F)
        xn = t(f"x{l + 1}", H)
        common = dict(pos0=pos0, rows=rows)
        node(1, norm, l, [x], [ln1], param=p + "ln1", ch_in=H, ch_out=H, **common)
        node(2, OpKind.VMM_BN, l, [ln1], [q], weight=p + "q", w_row0=0, ch_in=H, ch_out=cfg.q_dim,
             bias=p + "q_bias" if cfg.qkv_bias else None, **common)
        node(3, OpKind.ROTARY, l, [q], [qr], ch_in=cfg.q_dim, ch_out=cfg.q_dim, **common)
        node(4, OpKind.VMM_BN, l, [ln1], [k], weight=p + "k", w_row0=0, ch_in=H, ch_out=cfg.kv_dim,
             bias=p + "k_bias" if cfg.qkv_bias else None, **common)
        node(5, OpKind.ROTARY, l, [k], [kr], ch_in=cfg.kv_dim, ch_out=cfg.kv_dim, **common)
        node(6, OpKind.KV_WRITE, l, [kr], [kc], ch_in=cfg.kv_dim, ch_out=cfg.kv_dim, **common)
        node(7, OpKind.TRANSPOSE, l, [qr, kc], [sc], ch_in=cfg.q_dim, ch_out=cfg.heads * cap, **common)
        node(8, OpKind.SOFTMAX, l, [sc], [pr], ch_in=cfg.heads * cap, ch_out=cfg.heads * cap, **common)
        node(9, OpKind.VMM_BN, l, [ln1], [v], weight=p + "v", w_row0=0, ch_in=H, ch_out=cfg.kv_dim,
             bias=p + "v_bias" if cfg.qkv_bias else None, **common)
        node(10, OpKind.KV_WRITE, l, [v], [vc], ch_in=cfg.kv_dim, ch_out=cfg.kv_dim, **common)
        node(11, OpKind.MHA_MATMUL, l, [pr, vc], [ctx], ch_in=cfg.heads * cap, ch_out=cfg.q_dim, **common)
        node(12, OpKind.VMM_BN, l, [ctx, x], [xa], weight=p + "o", w_row0=0, ch_in=cfg.q_dim, ch_out=H,
             residual=True, **common)
        node(13, norm, l, [xa], [ln2], param=p + "ln2", ch_in=H, ch_out=H, **common)
        node(14, OpKind.VMM_BN, l, [ln2], [gate], weight=p + "h_to_4h", w_row0=0, ch_in=H, ch_out=F, **common)
        node(15, OpKind.ACTIVATION, l, [gate], [act], ch_in=F, ch_out=F, **common)
        node(16, OpKind.VMM_BN, l, [ln2, act], [up], weight=p + "h_to_4h", w_row0=F, ch_in=H, ch_out=F,
             multiply=True, **common)
        node(17, OpKind.VMM_BN, l, [up, xa], [xn], weight=p + "4h_to_h", w_row0=0, ch_in=F, ch_out=H,
             residual=True, **common)
        x = xn
    lnf = t("final_norm", H)
    logits = t("logits", cfg.vocab)
    node(18, OpKind.OUTLAYER_LN, None, [x], [lnf], param="final_ln", ch_in=H, ch_out=H, norm=cfg.norm,
         rows=rows, pos0=pos0)
    node(19, OpKind.VMM_ARGMAX, None, [lnf], [logits], weight="lm_head", w_row0=0, ch_in=H, ch_out=cfg.vocab,
         rows=rows, pos0=pos0)
    return OpGraph(cfg, phase, nodes, tensors, ("x0",), ("logits",))


# tensors whose channel count a consumer checks against ``ch_in``
_FIRST_INPUT_CHECKED = {OpKind.VMM_BN, OpKind.VMM_ARGMAX, OpKind.RMSNORM, OpKind.LAYERNORM,
                        OpKind.OUTLAYER_LN, OpKind.ROTARY, OpKind.KV_WRITE, OpKind.SOFTMAX,
                        OpKind.ACTIVATION, OpKind.TRANSPOSE, OpKind.MHA_MATMUL}


def validate(graph: OpGraph) -> list[str]:
    """Structural checks; returns a list of problems (empty when valid)."""
    problems = []
    produced = set(graph.inputs)
    for n in graph.nodes:
        for i in n.inputs:
            if i not in graph.tensors:
                problems.append(f"node {n.index} reads unknown tensor {i}")
            elif i not in produced and graph.tensors[i].kind != "kv":
                problems.append(f"node {n.index} reads {i} before it is produced")
        for o in n.outputs:
            if o in produced and graph.tensors[o].kind != "kv":
                problems.append(f"tensor {o} produced twice")
            produced.add(o)
        if n.kind in _FIRST_INPUT_CHECKED and n.inputs:
            src = graph.tensors.get(n.inputs[0])
            if src is not None and src.channels != n.attrs.get("ch_in") and src.kind != "kv":
                problems.append(f"node {n.index} ({n.name}): input has {src.channels} channels, expects {n.attrs.get('ch_in')}")
        dst = graph.tensors.get(n.outputs[0])
        if dst is not None and dst.kind == "act" and dst.channels != n.attrs.get("ch_out"):
            problems.append(f"node {n.index} ({n.name}): output has {dst.channels} channels, declares {n.attrs.get('ch_out')}")
        layouts = {graph.tensors[x].layout for x in n.inputs + n.outputs if x in graph.tensors}
        if len(layouts) > 1:
            problems.append(f"node {n.index} ({n.name}) mixes layouts {sorted(layouts)}")
    return problems


def conversion_steps(graph: OpGraph) -> int:
    """Layout conversions needed: edges whose tensor layout differs from the operator's native one."""
    return sum(1 for n in graph.nodes for x in n.inputs + n.outputs
               if graph.tensors[x].layout != n.attrs.get("layout", "unified"))
