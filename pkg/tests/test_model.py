import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgellm import config as cfgmod
from edgellm import fp16
from edgellm import model as mdl
from edgellm.config import preset


def rel_err(bits, ref):
    got = fp16.bits_to_float(bits)
    return np.linalg.norm(got - ref) / np.linalg.norm(ref)


def test_toy_preset_shape(toy_cfg):
    assert (toy_cfg.layers, toy_cfg.hidden, toy_cfg.heads, toy_cfg.max_token) == (2, 64, 2, 64)


def test_glm_preset_block_dims(glm_cfg):
    dims = {s.name: (s.ch_out, s.ch_in) for s in glm_cfg.layer_specs()}
    assert dims["q"] == (4096, 4096)
    assert dims["h_to_4h"][1] == 4096 and dims["4h_to_h"][0] == 4096


def test_strategy_levels(glm_cfg):
    lv = {s.name: s.level.label for s in glm_cfg.layer_specs("2")}
    assert lv == {"q": "dense", "k": "dense", "v": "dense", "o": "s50", "h_to_4h": "s75", "4h_to_h": "s50"}


def test_unknown_config_keys_rejected(toy_cfg):
    d = toy_cfg.to_dict()
    d["bogus"] = 1
    with pytest.raises(ValueError):
        cfgmod.from_dict(d)


def test_config_round_trip(toy_cfg, tmp_path):
    p = tmp_path / "c.json"
    p.write_text(toy_cfg.dumps())
    assert cfgmod.load(p) == toy_cfg


def test_missing_config_file():
    with pytest.raises(FileNotFoundError):
        cfgmod.load("/nonexistent/dir/model.json")


def test_synthetic_weights_are_seeded(toy_cfg):
    a, b = cfgmod.synthetic_weights(toy_cfg, 3), cfgmod.synthetic_weights(toy_cfg, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_single_shot_matches_float64_reference(toy_weights, toy_prompt):
    logits = mdl.generate_logits(toy_weights, toy_prompt, [16])
    assert rel_err(logits, mdl.reference_logits(toy_weights, toy_prompt)) < 0.01


@pytest.mark.parametrize("n", [1, 5, 15])
def test_prefill_then_one_decode_equals_full_prefill(toy_weights, toy_prompt, n):
    ids = toy_prompt[:n + 1]
    assert np.array_equal(mdl.generate_logits(toy_weights, ids, [n, 1]),
                          mdl.generate_logits(toy_weights, ids, [n + 1]))


@settings(max_examples=8)
@given(st.lists(st.integers(1, 4), min_size=2, max_size=6))
def test_any_chunking_matches_single_shot(toy_weights, toy_prompt, chunks):
    n = min(sum(chunks), 16)
    splits, left = [], n
    for c in chunks:
        if left <= 0:
            break
        splits.append(min(c, left))
        left -= splits[-1]
    ids = toy_prompt[:n]
    assert np.array_equal(mdl.generate_logits(toy_weights, ids, splits),
                          mdl.generate_logits(toy_weights, ids, [n]))


def test_cache_length_after_generation(toy_cfg, toy_weights, toy_prompt):
    cache = mdl.new_cache(toy_cfg)
    x = mdl.embed(toy_weights, toy_prompt[:6])
    mdl.forward(toy_weights, x[:4], cache, 0)
    mdl.forward(toy_weights, x[4:5], cache, 4)
    mdl.forward(toy_weights, x[5:6], cache, 5)
    assert [cache.length(l) for l in range(toy_cfg.layers)] == [6, 6]


def test_layernorm_neox_variant_matches_reference():
    cfg = preset("toy").with_(norm="layernorm", rotary="neox", kv_heads=2, qkv_bias=False)
    pkg, _ = mdl.pack_model(cfg, seed=1)
    mw = mdl.ModelWeights(cfg, pkg)
    ids = np.arange(8)
    logits = mdl.generate_logits(mw, ids, [5, 3])
    assert np.array_equal(logits, mdl.generate_logits(mw, ids, [8]))
    assert rel_err(logits, mdl.reference_logits(mw, ids)) < 0.01


def test_sparse_strategy_model_runs(toy_cfg):
    pkg, _ = mdl.pack_model(toy_cfg, strategy="3", seed=2)
    mw = mdl.ModelWeights(toy_cfg, pkg)
    ids = np.arange(6)
    assert rel_err(mdl.generate_logits(mw, ids, [6]), mdl.reference_logits(mw, ids)) < 0.01
