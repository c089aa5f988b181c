"""Per-channel discrete histogram equalization."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..mesh_io import TextureMap


def quantize(values: np.ndarray, n_bins: int = 256) -> np.ndarray:
    return np.clip(np.round(np.asarray(values) * (n_bins - 1)), 0, n_bins - 1).astype(np.int64)


def equalization_lut(bins: np.ndarray, n_bins: int = 256) -> tuple[np.ndarray, bool]:
    """Lookup table bin -> (cdf - cdf_min) / (N - cdf_min).

    Returns ``(lut, identity)``; ``identity`` is True when only one bin is
    populated, in which case the mapping is undefined and values pass
    through unchanged.
    """
    hist = np.bincount(bins.ravel(), minlength=n_bins)
    cdf = np.cumsum(hist)
    n = int(cdf[-1])
    cdf_min = int(cdf[np.flatnonzero(hist)[0]]) if n else 0
    if n <= cdf_min:
        return np.arange(n_bins) / (n_bins - 1), True
    lut = np.clip((cdf - cdf_min) / (n - cdf_min), 0.0, 1.0)
    return lut, False


class HistogramEqualizer(TransformerMixin, BaseEstimator):
    """Equalize each channel independently over ``n_bins`` quantization levels.

    ``X`` is (n_samples, n_channels) with values in [0, 1]. After ``fit``,
    ``luts_`` holds one table per channel.
    """

    def __init__(self, n_bins: int = 256):
        self.n_bins = n_bins

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        bins = quantize(X, self.n_bins)
        tables = [equalization_lut(bins[:, c], self.n_bins) for c in range(X.shape[1])]
        self.luts_ = np.stack([t for t, _ in tables])
        self.identity_ = np.array([i for _, i in tables])
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "luts_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError("channel count differs from fit")
        bins = quantize(X, self.n_bins)
        out = np.empty_like(X)
        for c in range(X.shape[1]):
            out[:, c] = X[:, c] if self.identity_[c] else self.luts_[c][bins[:, c]]
        return out


def hist_equalize(img: TextureMap, n_bins: int = 256) -> tuple[TextureMap, np.ndarray]:
    """Equalize ``img`` channel-wise; returns the new map and the (C, n_bins) tables."""
    flat = img.data.reshape(-1, img.channels)
    eq = HistogramEqualizer(n_bins).fit(flat)
    out = eq.transform(flat).reshape(img.data.shape)
    return TextureMap(out, role=img.role), eq.luts_
