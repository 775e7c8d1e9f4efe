"""scikit-learn style wrappers around the packing, layout and latency models.

Weight matrices are ``(ch_out, ch_in)`` arrays; ``fit`` learns per-matrix
state (scales, masks, calibration) and ``transform`` returns the
reconstruction the hardware would compute with.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import layout as lay
from .config import ModelConfig, preset
from .perf import HwConfig, block_latency, calibrate, TABLE3_TOKEN
from .sparse_codec import (SparsityLevel, dequantize_rows, effective_bitwidth, pack_layer,
                           quantize_rows, resolve, sparsify, window_ok)


def _matrix(W) -> np.ndarray:
    return check_array(W, dtype=np.float64, ensure_2d=True)


class BlockQuantizer(TransformerMixin, BaseEstimator):
    """INT4 weights with one FP16 scale per 128-channel block of a row."""

    def fit(self, W, y=None):
        W = _matrix(W)
        pad = (-W.shape[1]) % 128
        self.scales_, self.codes_ = quantize_rows(np.pad(W, ((0, 0), (0, pad))))
        self.n_features_in_ = W.shape[1]
        return self

    def transform(self, W):
        check_is_fitted(self, "scales_")
        W = _matrix(W)
        if W.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} input channels, got {W.shape[1]}")
        pad = (-W.shape[1]) % 128
        s, q = quantize_rows(np.pad(W, ((0, 0), (0, pad))))
        return dequantize_rows(s, q)[:, : W.shape[1]]


class LogScaleSparsifier(TransformerMixin, BaseEstimator):
    """Keep the largest-magnitude weights of every window (``level`` as s50/s75/s875)."""

    def __init__(self, level="s50"):
        self.level = level

    def fit(self, W, y=None):
        W = _matrix(W)
        self.level_ = SparsityLevel.parse(self.level)
        if W.shape[1] % self.level_.window:
            raise ValueError(f"input channels must be a multiple of {self.level_.window}")
        self.n_features_in_ = W.shape[1]
        return self

    def transform(self, W):
        check_is_fitted(self, "level_")
        return sparsify(_matrix(W), self.level_)

    def is_valid(self, W) -> bool:
        check_is_fitted(self, "level_")
        return window_ok(_matrix(W), self.level_)


class WeightPacker(TransformerMixin, BaseEstimator):
    """Sparsify, quantize and pack a layer; ``transform`` returns the dequantized weights."""

    def __init__(self, level="dense", encoding=None, name="layer"):
        self.level = level
        self.encoding = encoding
        self.name = name

    def fit(self, W, y=None):
        W = _matrix(W)
        self.level_, self.encoding_ = resolve(self.level, self.encoding)
        self.layer_ = pack_layer(self.name, W, self.level_, self.encoding_)
        self.n_features_in_ = W.shape[1]
        return self

    def transform(self, W):
        check_is_fitted(self, "layer_")
        return self.layer_.dequantize()

    @property
    def effective_bits_(self) -> float:
        check_is_fitted(self, "layer_")
        return effective_bitwidth(self.level_, self.encoding_)

    @property
    def stored_bytes_(self) -> int:
        check_is_fitted(self, "layer_")
        return self.layer_.spec.stored_bytes()


class UnifiedLayout(TransformerMixin, BaseEstimator):
    """Flat ``(rows, channels)`` FP16 bits to the 5-D unified layout and back."""

    def __init__(self, t_out=lay.DEFAULT_T_OUT):
        self.t_out = t_out

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim != 2:
            raise ValueError("expected a (rows, channels) array")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_features_in_")
        return lay.to_unified(np.asarray(X, dtype=np.uint16), self.t_out).data

    def inverse_transform(self, U) -> np.ndarray:
        check_is_fitted(self, "n_features_in_")
        return lay.from_unified(lay.UnifiedTensor(np.asarray(U, dtype=np.uint16), self.n_features_in_))


class StepLatencyModel(RegressorMixin, BaseEstimator):
    """Calibrated per-step latency model.

    ``fit`` fits the per-step overheads on the measured GLM-6B columns;
    ``predict`` maps token counts to whole-pass latency in microseconds.
    """

    def __init__(self, model="glm6b", phase="decode", memory="hbm", strategy=None, efficiency=0.75):
        self.model = model
        self.phase = phase
        self.memory = memory
        self.strategy = strategy
        self.efficiency = efficiency

    def _cfg(self) -> ModelConfig:
        return self.model if isinstance(self.model, ModelConfig) else preset(self.model)

    def fit(self, X=None, y=None):
        self.calibration_ = calibrate(preset("glm6b"), HwConfig(), self.efficiency)
        self.cfg_ = self._cfg()
        return self

    def table(self, token: int = TABLE3_TOKEN):
        check_is_fitted(self, "calibration_")
        return block_latency(self.cfg_, token, self.phase, self.memory, self.strategy,
                             calibration=self.calibration_)

    def predict(self, X) -> np.ndarray:
        tokens = np.asarray(X).reshape(-1)
        return np.array([self.table(int(t)).total for t in tokens])

    def speed(self, X) -> np.ndarray:
        return 1e6 / self.predict(X)
