"""Feature scaling for log-power spectra."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dsp import DEFAULT_FLOOR, StftConfig, Waveform, log_power, stft


def as_feature_array(X, name="X"):
    """Validate a finite float array of any rank >= 1 (spectra, chunk stacks)."""
    arr = check_array(X, ensure_2d=False, allow_nd=True, dtype=[np.float64, np.float32], input_name=name)
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    return arr


class FeatureStandardizer(TransformerMixin, BaseEstimator):
    """Global (scalar) mean/std standardization of log-power features.

    Unlike per-feature scalers, a single mean and standard deviation are
    pooled over every element so the time-frequency structure is kept.
    """

    def __init__(self, min_std=1e-8):
        self.min_std = min_std

    def fit(self, X, y=None):
        X = as_feature_array(X)
        self.mean_ = float(np.mean(X, dtype=np.float64))
        self.std_ = max(float(np.std(X, dtype=np.float64)), self.min_std)
        return self

    def partial_fit(self, X, y=None):
        """Accumulate running sums; useful when spectra arrive one file at a time."""
        X = as_feature_array(X)
        n = getattr(self, "n_seen_", 0)
        s = getattr(self, "sum_", 0.0) + float(np.sum(X, dtype=np.float64))
        sq = getattr(self, "sumsq_", 0.0) + float(np.sum(np.square(X, dtype=np.float64)))
        self.n_seen_, self.sum_, self.sumsq_ = n + X.size, s, sq
        self.mean_ = s / self.n_seen_
        self.std_ = max(float(np.sqrt(max(sq / self.n_seen_ - self.mean_ ** 2, 0.0))), self.min_std)
        return self

    def transform(self, X):
        check_is_fitted(self, ["mean_", "std_"])
        X = as_feature_array(X)
        return ((X - self.mean_) / self.std_).astype(X.dtype, copy=False)

    def inverse_transform(self, X):
        check_is_fitted(self, ["mean_", "std_"])
        X = as_feature_array(X)
        return (X * self.std_ + self.mean_).astype(X.dtype, copy=False)

    def to_dict(self):
        check_is_fitted(self, ["mean_", "std_"])
        return {"mean": self.mean_, "std": self.std_}

    @classmethod
    def from_dict(cls, d):
        obj = cls()
        obj.mean_, obj.std_ = float(d["mean"]), float(d["std"])
        return obj


class LogPowerTransformer(TransformerMixin, BaseEstimator):
    """Waveform samples (1-D) -> (frames, bins) log-power spectrogram."""

    def __init__(self, fft_size=1024, win_length=400, hop_length=100, floor_eps=DEFAULT_FLOOR):
        self.fft_size = fft_size
        self.win_length = win_length
        self.hop_length = hop_length
        self.floor_eps = floor_eps

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        cfg = StftConfig(self.fft_size, self.win_length, self.hop_length)
        x = X.samples if isinstance(X, Waveform) else check_array(X, ensure_2d=False, input_name="X")
        if np.ndim(x) != 1:
            raise ValueError("expected a 1-D waveform")
        return log_power(stft(Waveform(x), cfg), self.floor_eps).values
