"""``edgellm`` command line: pack, compile, run, perf, arith-sweep, report."""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import mixed_precision as mp
from . import model as mdl
from . import perf
from . import runtime as rt
from . import sparse_codec as sc
from .compiler import build_block_graph, conversion_steps, lowering, validate, verify_patch


class CliError(Exception):
    pass


def parse_range(text: str) -> list[int]:
    """``a..b`` (inclusive), ``a..b:step`` or a single integer."""
    body, _, step = text.partition(":")
    if ".." in body:
        a, b = (int(x) for x in body.split("..", 1))
    else:
        a = b = int(body)
    step = int(step) if step else 1
    if a < 1 or b < a or step < 1:
        raise CliError(f"bad range {text!r}")
    vals = list(range(a, b + 1, step))
    if vals[-1] != b:
        vals.append(b)
    return vals


def _load_config(name, strategy=None):
    try:
        cfg = cfgmod.load(name)
    except (FileNotFoundError, ValueError, json.JSONDecodeError) as e:
        raise CliError(f"cannot load config {name!r}: {e}") from e
    return cfg.with_(strategy=strategy) if strategy else cfg


def _write(path, data, binary=True):
    Path(path).write_bytes(data) if binary else Path(path).write_text(data)


# --------------------------------------------------------------------------
# pack


def size_table(cfg, strategy=None) -> str:
    strategy = strategy or cfg.strategy
    _, rep = sc.package_model(cfg.layer_specs(strategy))
    _, dense = sc.package_model(cfg.layer_specs("dense"))
    lines = [f"{cfg.name} block weights, strategy {strategy}",
             f"{'layer':<10s}{'shape':>14s}{'level':>7s}{'MiB':>10s}{'stored MiB':>12s}"]
    for r in rep["layers"]:
        lines.append(f"{r['name']:<10s}{r['ch_out']:>7d}x{r['ch_in']:<6d}{r['level']:>7s}"
                     f"{r['payload_mib']:>10.3f}{r['stored_mib']:>12.3f}")
    lines.append(f"{'total':<31s}{rep['total_payload_mib']:>10.3f}{rep['total_stored_mib']:>12.3f}")
    lines.append(f"{'speedup vs dense':<31s}{dense['total_payload_mib'] / rep['total_payload_mib']:>10.3f}")
    return "\n".join(lines)


def cmd_pack(a) -> int:
    cfg = _load_config(a.config, a.strategy)
    print(size_table(cfg))
    if not a.output:
        return 0
    pkg, rep = mdl.pack_model(cfg, strategy=cfg.strategy, seed=a.random_seed)
    data = sc.dumps(pkg)
    if sc.dumps(sc.loads(data)) != data:
        raise CliError("package round trip mismatch")
    _write(a.output, data)
    print(f"wrote {a.output}: {len(pkg.layers)} layers, {len(data)} bytes")
    return 0


# --------------------------------------------------------------------------
# compile


def cmd_compile(a) -> int:
    cfg = _load_config(a.config, a.strategy)
    if a.max_token:
        cfg = cfg.with_(max_token=a.max_token)
    weights, specs = b"", None
    if a.weights:
        weights = Path(a.weights).read_bytes()
        pkg = sc.loads(weights)
        specs = [l.spec for l in pkg.layers]
        want = {(s.name, s.ch_out, s.ch_in) for s in cfg.model_specs()}
        if {(s.name, s.ch_out, s.ch_in) for s in specs} != want:
            raise CliError("weight package does not match the config's layer shapes")
    graph = build_block_graph(cfg)
    problems = validate(graph)
    if problems:
        raise CliError("graph validation failed: " + "; ".join(problems[:3]))
    img = lowering.build_image(cfg, specs, weights, last_token=not a.no_last_token)
    ok = True
    print(f"graph: {len(graph.nodes)} steps ({graph.steps_per_block()} per block), "
          f"{conversion_steps(graph)} layout conversions")
    print(f"memory: DDR {img.memory.ddr_top} bytes, HBM {img.memory.hbm_top} bytes/port, "
          f"KV {img.memory.kv_reservation()} bytes, audit {'clean' if not img.memory.audit() else 'FAILED'}")
    ok &= not img.memory.audit()
    for ph, p in img.streams.items():
        print(f"{ph}: {len(p)} instructions, {len(p.residuals)} residual fields "
              f"({100 * p.residual_fraction():.2f}% of {p.field_count()})")
    if a.verify_patch:
        tokens = [t for t in parse_range(a.verify_patch) if t <= img.max_token]
        for ph, p in img.streams.items():
            bad = verify_patch(p, tokens)
            ok &= not bad
            print(f"verify-patch {ph}: {len(tokens) - len(bad)}/{len(tokens)} tokens match recompile"
                  + (f", mismatches at {bad[:10]}" if bad else ""))
    if a.output:
        _write(a.output, lowering.dumps(img))
        print(f"wrote {a.output}")
    return 0 if ok else 1


# --------------------------------------------------------------------------
# run


def _prompt(cfg, n, seed):
    return np.random.default_rng(seed).integers(0, cfg.vocab, size=n)


def cmd_run(a) -> int:
    data = Path(a.prog).read_bytes()
    weights = Path(a.weights).read_bytes() if a.weights else None
    st = rt.load_program(data, weights=weights)
    cfg = st.cfg
    if a.sweep_token:
        rows = []
        for t in parse_range(a.sweep_token):
            if t > st.image.max_token:
                break
            r = rt.run(st, t, "decode", memory=a.memory, timing_only=True)
            rows.append((t, 1e9 / r.total_ns))
        print(f"{'token':>7s} {'token/s':>10s}")
        for t, s in rows:
            print(f"{t:>7d} {s:>10.2f}")
        return 0
    if a.compare_memory:
        speeds = {}
        for m in ("hbm", "ddr"):
            r = rt.run(st, a.token, a.phase, memory=m, timing_only=True)
            speeds[m] = 1e9 / r.total_ns
        print(f"{a.phase} token={a.token}: hbm {speeds['hbm']:.2f} token/s, ddr {speeds['ddr']:.2f} token/s, "
              f"ratio {speeds['hbm'] / speeds['ddr']:.3f}")
        return 0
    if a.timing_only:
        res = rt.run(st, a.token, a.phase, memory=a.memory, timing_only=True)
    else:
        if not st.weights_loaded:
            raise CliError("program has no weight image; pass --weights or compile with --weights")
        pkg = sc.loads(weights or st.image.weights)
        mw = mdl.ModelWeights(cfg, pkg)
        ids = _prompt(cfg, a.token, a.seed)
        x = mdl.embed(mw, ids)
        if a.phase == "prefill":
            res = rt.run(st, a.token, "prefill", x, a.memory)
        else:
            if a.token > 1:
                rt.run(st, a.token - 1, "prefill", x[:-1], a.memory)
            res = rt.run(st, a.token, "decode", x[-1:], a.memory)
        if a.check:
            ref = mdl.generate_logits(mw, ids, [a.token - 1, 1] if a.phase == "decode" and a.token > 1 else [a.token])
            same = np.array_equal(res.logits[-1], ref)
            print(f"direct operator chain: {'bit-identical' if same else 'MISMATCH'}")
            if not same:
                return 1
        if a.logits:
            np.save(a.logits, res.logits)
            print(f"wrote {a.logits}")
        print(f"argmax: {res.argmax.tolist()}")
    summary = rt.events_summary(res.events)
    print(f"{a.phase} token={a.token} memory={a.memory}: {len(res.events)} steps, "
          f"{summary['total_ns'] / 1e3:.2f} us, {summary['token_per_s']:.2f} token/s")
    if a.events:
        _write(a.events, rt.events_csv(res.events), binary=False)
        print(f"wrote {a.events}")
    return 0


# --------------------------------------------------------------------------
# perf


def cmd_perf(a) -> int:
    if a.reference:
        table = perf.reference_table(a.phase, a.memory)
    else:
        if a.prog:
            cfg = lowering.loads(Path(a.prog).read_bytes()).cfg
        else:
            cfg = _load_config(a.config or "glm6b")
        table = perf.block_latency(cfg, a.token, a.phase, a.memory, a.strategy)
    if a.json:
        print(json.dumps(table.to_dict(), indent=2))
        return 0
    print(table.format())
    e = perf.energy_estimate(perf.block_durations(table), perf.POWER_TABLE, table.speed)
    print(f"{'average power (W)':<29s}{e.avg_power:12.2f}")
    print(f"{'token/J':<29s}{e.token_per_joule:12.3f}")
    return 0


# --------------------------------------------------------------------------
# arith-sweep


def cmd_arith_sweep(a) -> int:
    modes = mp.MODES if a.mode == "all" else (a.mode,)
    variants = mp.VARIANTS if a.variant == "all" else (a.variant,)
    threads = a.threads
    rows = []
    for m in modes:
        for v in variants:
            t0 = time.perf_counter()
            s = mp.error_sweep(m, v, a.trials, a.seed, threads=threads)
            rows.append({"mode": m, "variant": v, "mean_rel_pct": s.mean_rel_pct, "max_rel_pct": s.max_rel_pct,
                         "saturations": s.saturation_count, "trials": s.trials, "valid": s.valid_trials,
                         "seconds": time.perf_counter() - t0})
    if a.json:
        print(json.dumps([{k: v for k, v in r.items() if k != "seconds"} for r in rows], indent=2))
        return 0
    print(f"{'mode':<6s}{'variant':<10s}{'mean err %':>12s}{'max err %':>12s}{'sat':>6s}{'trials':>9s}")
    for r in rows:
        print(f"{r['mode']:<6s}{r['variant']:<10s}{r['mean_rel_pct']:>12.5f}{r['max_rel_pct']:>12.5f}"
              f"{r['saturations']:>6d}{r['trials']:>9d}")
    return 0


# --------------------------------------------------------------------------
# report


def cmd_report(a) -> int:
    events = rt.read_events_csv(Path(a.events).read_text())
    s = rt.events_summary(events)
    if a.json:
        print(json.dumps(s, indent=2))
        return 0
    print(f"{'step':>4s} {'name':<12s}{'count':>6s}{'time (us)':>12s}{'HBM bytes':>12s}{'DDR bytes':>12s}")
    for k, v in s["steps"].items():
        print(f"{int(k):>4d} {v['name']:<12s}{v['count']:>6d}{v['ns'] / 1e3:>12.2f}{v['bytes_hbm']:>12d}{v['bytes_ddr']:>12d}")
    print(f"total {s['total_ns'] / 1e3:.2f} us, {s['token_per_s']:.2f} token/s")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgellm", description="Mixed-precision LLM accelerator toolchain model.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pack", help="size report and weight packing")
    s.add_argument("--config", required=True, help="config file or preset name")
    s.add_argument("--strategy", help="dense, 1, 2 or 3")
    s.add_argument("--random-seed", type=int, default=0, help="seed of the synthetic weights")
    s.add_argument("-o", "--output", help="write an ELWP package (omit for the size report only)")
    s.set_defaults(func=cmd_pack)

    s = sub.add_parser("compile", help="compile prefill and decode programs")
    s.add_argument("--config", required=True)
    s.add_argument("--strategy")
    s.add_argument("--weights", help="ELWP package to embed")
    s.add_argument("--max-token", type=int)
    s.add_argument("--no-last-token", action="store_true", help="disable the last-token rewrite")
    s.add_argument("--verify-patch", metavar="A..B", help="check patching against recompiles")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_compile)

    s = sub.add_parser("run", help="simulate a program")
    s.add_argument("--prog", required=True)
    s.add_argument("--weights")
    s.add_argument("--phase", choices=("prefill", "decode"), default="decode")
    s.add_argument("--token", type=int, default=1)
    s.add_argument("--memory", choices=("hbm", "ddr"), default="hbm")
    s.add_argument("--seed", type=int, default=0, help="seed of the synthetic prompt")
    s.add_argument("--timing-only", action="store_true")
    s.add_argument("--sweep-token", metavar="A..B[:STEP]")
    s.add_argument("--compare-memory", action="store_true", help="report the HBM/DDR speed ratio")
    s.add_argument("--check", action="store_true", help="compare logits with the direct operator chain")
    s.add_argument("--events", help="event log CSV path")
    s.add_argument("--logits", help="logits .npy path (FP16 bit patterns)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("perf", help="per-step latency table")
    s.add_argument("--prog")
    s.add_argument("--config")
    s.add_argument("--strategy")
    s.add_argument("--phase", choices=("prefill", "decode"), default="decode")
    s.add_argument("--memory", choices=("hbm", "ddr"), default="hbm")
    s.add_argument("--token", type=int, default=perf.TABLE3_TOKEN)
    s.add_argument("--reference", action="store_true", help="print the measured reference column")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_perf)

    s = sub.add_parser("arith-sweep", help="dot-product error comparison")
    s.add_argument("--mode", choices=mp.MODES + ("all",), default="all")
    s.add_argument("--variant", choices=mp.VARIANTS + ("all",), default="all")
    s.add_argument("--trials", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=None, help="worker threads (EDGELLM_THREADS caps)")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_arith_sweep)

    s = sub.add_parser("report", help="summarise an event log")
    s.add_argument("events")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, OSError, ValueError, RuntimeError) as e:
        print(f"edgellm {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
