import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from edgellm import estimators as est
from edgellm import layout as lay
from edgellm import perf
from edgellm import sparse_codec as sc


@pytest.fixture
def W():
    return np.random.default_rng(0).normal(size=(8, 256))


def test_block_quantizer_matches_codec(W):
    out = est.BlockQuantizer().fit_transform(W)
    s, q = sc.quantize_rows(W)
    assert np.array_equal(out, sc.dequantize_rows(s, q))


def test_block_quantizer_pads_and_checks_width():
    W = np.random.default_rng(1).normal(size=(3, 100))
    bq = est.BlockQuantizer().fit(W)
    assert bq.transform(W).shape == (3, 100)
    with pytest.raises(ValueError):
        bq.transform(W[:, :64])


def test_sparsifier_output_satisfies_windows(W):
    sp = est.LogScaleSparsifier("s875").fit(W)
    out = sp.transform(W)
    assert sp.is_valid(out) and not sp.is_valid(W)


def test_pipeline_sparsify_then_quantize(W):
    pipe = make_pipeline(est.LogScaleSparsifier("s75"), est.BlockQuantizer())
    out = pipe.fit_transform(W)
    assert sc.window_ok(out, "s75")


def test_packer_reports_budget(W):
    wp = est.WeightPacker("s875", "addr").fit(W)
    assert wp.effective_bits_ == 1.125
    assert wp.stored_bytes_ == wp.layer_.spec.stored_bytes()
    assert np.array_equal(wp.transform(W), wp.layer_.dequantize())


def test_packer_rejects_unsupported_pair(W):
    with pytest.raises(ValueError):
        est.WeightPacker("s50", "addr").fit(W)


def test_unified_layout_round_trip():
    X = np.arange(5 * 40, dtype=np.uint16).reshape(5, 40)
    ul = est.UnifiedLayout(16).fit(X)
    U = ul.transform(X)
    assert U.shape == (1, 3, 1, 5, 16)
    assert np.array_equal(ul.inverse_transform(U), X)
    assert np.array_equal(U, lay.to_unified(X, 16).data)


def test_step_latency_model_matches_table():
    m = est.StepLatencyModel().fit()
    assert np.allclose(m.table().steps, perf.TABLE3[("decode", "hbm")], rtol=1e-9)
    got = m.predict([1, 128, 1024])
    assert got.shape == (3,) and np.all(np.diff(got) > 0)
    assert m.speed([128])[0] == pytest.approx(1e6 / got[1])


def test_unfitted_estimators_raise(W):
    for e in (est.BlockQuantizer(), est.LogScaleSparsifier(), est.WeightPacker(), est.UnifiedLayout(),
              est.StepLatencyModel()):
        with pytest.raises(NotFittedError):
            e.transform(W) if hasattr(e, "transform") else e.predict([1])


def test_params_round_trip_through_clone():
    wp = est.WeightPacker("s50", "onehot", name="o")
    assert clone(wp).get_params() == {"level": "s50", "encoding": "onehot", "name": "o"}
