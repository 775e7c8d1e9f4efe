import json

import numpy as np
import pytest

from edgellm import fp16
from edgellm import model as mdl
from edgellm import runtime as rt
from edgellm import sparse_codec as sc
from edgellm.compiler import lowering
from edgellm.config import preset
from edgellm.perf import STEP_NAMES, step_times


@pytest.fixture
def state(toy_image_bytes):
    return rt.load_program(toy_image_bytes)


def decode_through(st, mw, ids, n):
    """Prefill ``ids[:n]`` then decode the rest one token at a time."""
    x = mdl.embed(mw, ids)
    res = rt.run(st, n, "prefill", x[:n])
    for t in range(n + 1, len(ids) + 1):
        res = rt.run(st, t, "decode", x[t - 1:t])
    return res


# -- loading ------------------------------------------------------------------------------

def test_program_dump_is_byte_identical(state, toy_image_bytes):
    assert rt.dump_program(state) == toy_image_bytes


def test_launch_registers(state, toy_cfg):
    img = lowering.loads(rt.dump_program(state))
    assert state.reg("MAX_TOKEN") == toy_cfg.max_token
    assert state.reg("DECODE_OPS") == len(img.stream("decode")) == toy_cfg.layers * 17 + 2
    assert state.reg("PREFILL_OPS") == len(img.stream("prefill"))
    assert state.weights_loaded


def test_one_layer_program_has_nineteen_decode_ops():
    cfg = preset("toy").with_(layers=1)
    st = rt.load_program(lowering.dumps(lowering.build_image(cfg)))
    assert st.reg("DECODE_OPS") == 19


def test_register_writes_are_bounds_checked(state):
    with pytest.raises(rt.RegisterError):
        rt.write_registers(state, {64: 1})
    with pytest.raises(rt.RegisterError):
        rt.write_registers(state, {"NO_SUCH": 1})
    with pytest.raises(rt.RegisterError):
        rt.write_registers(state, {"TOKEN": 1 << 32})
    with pytest.raises(rt.RegisterError):
        rt.write_registers(state, {"INSTR_BASE": state.mem.ddr_size})


def test_weights_reside_in_hbm_windows(state, toy_package):
    mm = state.memory_map
    layer = toy_package.layers[0]
    s = layer.spec
    per_ch = s.portions * s.group_bytes
    win = state.mem.hbm_window(mm.region(s.name).offset, mm.region(s.name).size)
    for c in (0, 1, s.ch_out - 1):
        want = b"".join(g.data for g in layer.groups[c])
        off = (c // sc.HBM_PORTS) * per_ch
        assert win[c % sc.HBM_PORTS, off:off + per_ch].tobytes() == want


def test_weight_traffic_hits_hbm_and_activations_ddr(state, toy_weights, toy_prompt):
    res = rt.run(state, 4, "prefill", mdl.embed(toy_weights, toy_prompt[:4]))
    for e in res.events:
        assert e.bytes_ddr > 0
        if e.name.startswith("VMM"):
            assert e.bytes_hbm > 0
        if e.step in (1, 3, 5, 8, 13, 15, 18):
            assert e.bytes_hbm == 0


def test_out_of_region_access_faults(state):
    with pytest.raises(rt.MemoryFault):
        state.mem.ddr_view(state.mem.ddr_size - 2, 4)
    with pytest.raises(rt.MemoryFault):
        state.mem.hbm_window(state.memory_map.hbm_top, 32)


def test_corrupt_instruction_faults(state, toy_weights, toy_prompt):
    base = state.reg("PREFILL_BASE")
    # first instruction, field 2 (src0): point it past the DDR top
    state.mem.ddr_view(base + 4 * 3, 4)[:] = np.array([state.mem.ddr_size], "<u4").view(np.uint8)
    before = state.mem.ddr_view(base + 4 * 3, 4).copy()
    x = mdl.embed(toy_weights, toy_prompt[:2])
    state.image.stream("prefill").residuals = [r for r in state.image.stream("prefill").residuals
                                               if not (r.instr == 0 and r.field == 2)]
    with pytest.raises(rt.MemoryFault):
        rt.run(state, 2, "prefill", x)
    assert np.array_equal(state.mem.ddr_view(base + 4 * 3, 4), before)
    assert state.reg("STATUS") & 4


def test_run_requires_matching_inputs(state, toy_weights, toy_prompt):
    with pytest.raises(ValueError):
        rt.run(state, 3, "prefill", mdl.embed(toy_weights, toy_prompt[:2]))
    with pytest.raises(lowering.TokenOutOfRange):
        rt.run(state, 0, "decode", timing_only=True)


# -- functional equivalence ----------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 7, 16])
def test_prefill_logits_match_operator_reference(state, toy_weights, toy_prompt, n):
    ids = toy_prompt[:n]
    res = rt.run(state, n, "prefill", mdl.embed(toy_weights, ids))
    assert res.logits.shape == (1, state.cfg.vocab)
    assert np.array_equal(res.logits[-1], mdl.generate_logits(toy_weights, ids, [n]))


@pytest.mark.parametrize("n", [1, 8, 15])
def test_prefill_then_decode_equals_longer_prefill(state, toy_weights, toy_prompt, n):
    ids = toy_prompt[:n + 1]
    dec = decode_through(state, toy_weights, ids, n)
    full = rt.run(state, n + 1, "prefill", mdl.embed(toy_weights, ids))
    assert np.array_equal(dec.logits[-1], full.logits[-1])
    assert np.array_equal(dec.argmax, full.argmax)


def test_last_token_rewrite_preserves_final_logits(toy_cfg, toy_package, toy_weights, toy_prompt):
    pkg = sc.dumps(toy_package)
    a = rt.load_program(lowering.dumps(lowering.build_image(toy_cfg, weights=pkg, last_token=True)))
    b = rt.load_program(lowering.dumps(lowering.build_image(toy_cfg, weights=pkg, last_token=False)))
    x = mdl.embed(toy_weights, toy_prompt)
    ra, rb = rt.run(a, 16, "prefill", x), rt.run(b, 16, "prefill", x)
    assert rb.logits.shape[0] == 16
    assert np.array_equal(ra.logits[-1], rb.logits[-1])


def test_argmax_matches_logits(state, toy_weights, toy_prompt):
    res = rt.run(state, 5, "prefill", mdl.embed(toy_weights, toy_prompt[:5]))
    assert res.argmax[-1] == np.argmax(fp16.bits_to_float(res.logits[-1]))


# -- timing and events ---------------------------------------------------------------------------

def test_event_order_follows_steps(state, toy_cfg):
    res = rt.run(state, 4, "decode", timing_only=True)
    want = [s for _ in range(toy_cfg.layers) for s in range(1, 18)] + [18, 19]
    assert [e.step for e in res.events] == want
    assert [e.name for e in res.events] == [STEP_NAMES[s - 1] for s in want]


def test_clock_is_sum_of_step_times(state, toy_cfg):
    res = rt.run(state, 9, "decode", timing_only=True)
    times = step_times(toy_cfg, 9, "decode", "hbm", hw=state.hw)
    want = sum(times[e.step - 1] for e in res.events) * 1e3
    assert abs(res.total_ns - want) <= 1.0
    assert abs(sum(e.end_ns - e.start_ns for e in res.events) - res.total_ns) <= 1.0
    assert all(a.end_ns == b.start_ns for a, b in zip(res.events, res.events[1:]))


def test_clock_registers_track_virtual_time(state):
    rt.run(state, 3, "decode", timing_only=True)
    clk = state.reg("CLOCK_LO") | state.reg("CLOCK_HI") << 32
    assert clk == int(state.clock_ns)


def test_timing_is_deterministic_and_value_independent(toy_image_bytes, toy_weights, toy_prompt):
    a, b = rt.load_program(toy_image_bytes), rt.load_program(toy_image_bytes)
    x = mdl.embed(toy_weights, toy_prompt[:6])
    ra = rt.run(a, 6, "prefill", x)
    rb = rt.run(b, 6, "prefill", np.zeros_like(x))
    rc = rt.run(rt.load_program(toy_image_bytes), 6, "prefill", timing_only=True)
    ends = lambda r: [(e.start_ns, e.end_ns, e.bytes_hbm, e.bytes_ddr) for e in r.events]
    assert ends(ra) == ends(rb) == ends(rc)


def test_ddr_mode_is_slower(state):
    h = rt.run(state, 8, "decode", memory="hbm", timing_only=True).total_ns
    d = rt.run(state, 8, "decode", memory="ddr", timing_only=True).total_ns
    assert d > h


def test_ddr_mode_keeps_results(toy_image_bytes, toy_weights, toy_prompt):
    x = mdl.embed(toy_weights, toy_prompt[:5])
    h = rt.run(rt.load_program(toy_image_bytes), 5, "prefill", x, memory="hbm")
    d = rt.run(rt.load_program(toy_image_bytes), 5, "prefill", x, memory="ddr")
    assert np.array_equal(h.logits, d.logits)
    assert sum(e.bytes_hbm for e in d.events) == 0


@pytest.mark.parametrize("token", [1, 17, 64])
def test_events_csv_round_trip(state, token):
    res = rt.run(state, token, "decode", timing_only=True)
    back = rt.read_events_csv(rt.events_csv(res.events))
    assert [(e.index, e.step, e.name, e.bytes_hbm, e.bytes_ddr) for e in back] == \
        [(e.index, e.step, e.name, e.bytes_hbm, e.bytes_ddr) for e in res.events]
    assert all(abs(a.end_ns - b.end_ns) <= 1e-3 for a, b in zip(back, res.events))


def test_events_summary_and_json(state):
    res = rt.run(state, 5, "decode", timing_only=True)
    s = rt.events_summary(res.events)
    assert s["total_ns"] == pytest.approx(res.total_ns)
    assert s["token_per_s"] == pytest.approx(1e9 / res.total_ns)
    assert sum(v["count"] for v in s["steps"].values()) == len(res.events)
    d = json.loads(rt.events_json(res.events))
    assert len(d["events"]) == len(res.events)


# -- pipelined host updates -------------------------------------------------------------------------

def test_pipeline_with_free_updates_is_back_to_back(state):
    rep = rt.run_pipelined(state, 5, host_update_time=0.0, token=3)
    assert rep.timeline.total == pytest.approx(sum(rep.compute_s))


def test_pipeline_hides_short_updates(state):
    rep = rt.run_pipelined(state, 5, token=3)
    c = rep.compute_s
    assert max(rep.update_s[1:]) <= min(c)
    assert rep.timeline.total == pytest.approx(rep.update_s[0] + sum(c))


def test_pipeline_exposes_long_updates(state):
    probe = rt.run_pipelined(state, 1, host_update_time=0.0, token=3).compute_s[0]
    rep = rt.run_pipelined(state, 6, host_update_time=4 * probe, token=3, phase="prefill")
    assert rep.timeline.period == pytest.approx(4 * probe)


def test_pipeline_rejects_zero_iterations(state):
    with pytest.raises(ValueError):
        rt.run_pipelined(state, 0)
