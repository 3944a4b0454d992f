"""scikit-learn style front end: fit on spectrogram pairs, predict enhanced spectra."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .dsp import chunk_spectrogram
from .metrics import spectral_si_sdr
from .modelzoo import VARIANTS, ModelConfig, build_model, count_params
from .preprocessing import FeatureStandardizer, as_feature_array
from .trainer import Checkpoint, Enhancer, TrainConfig, fit_chunks


def check_spectrogram_list(X, name="X", n_bins=None):
    """Accept one (frames, bins) array, a stack, or a list of them; return a list of 2-D float arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        items = [X]
    elif isinstance(X, np.ndarray) and X.ndim == 3:
        items = list(X)
    else:
        items = list(X)
    if not items:
        raise ValueError(f"{name} is empty")
    out = []
    for k, item in enumerate(items):
        arr = as_feature_array(item, name=f"{name}[{k}]")
        if arr.ndim != 2:
            raise ValueError(f"{name}[{k}] must be a (frames, bins) spectrogram, got shape {arr.shape}")
        if n_bins is not None and arr.shape[1] < n_bins:
            raise ValueError(f"{name}[{k}] has {arr.shape[1]} bins, need at least {n_bins}")
        out.append(arr)
    return out


def check_pairs(X, y, n_bins=None):
    xs = check_spectrogram_list(X, "X", n_bins)
    ys = check_spectrogram_list(y, "y", n_bins)
    if len(xs) != len(ys):
        raise ValueError(f"X has {len(xs)} spectrograms but y has {len(ys)}")
    for k, (a, b) in enumerate(zip(xs, ys)):
        if a.shape != b.shape:
            raise ValueError(f"pair {k}: X shape {a.shape} differs from y shape {b.shape}")
    return xs, ys


class SpectralDenoiser(RegressorMixin, BaseEstimator):
    """Noisy log-power spectrogram -> enhanced log-power spectrogram.

    ``X`` and ``y`` are (frames, bins) log-power arrays (or lists of them).
    Spectrograms are standardized with one global mean/std, cut into
    ``chunk_frames x chunk_bins`` chunks and fed to the selected network.
    ``score`` is the mean spectral SI-SDR in dB, so higher is better.
    """

    def __init__(self, model="dvunet", depth=5, base_channels=16, chunk_frames=512, chunk_bins=512,
                 kl_weight=1e-3, max_epochs=200, patience=10, warmup_batches=500, learning_rate=1e-3,
                 batch_size=8, validations_per_epoch=2, max_steps=None, random_state=0):
        self.model = model
        self.depth = depth
        self.base_channels = base_channels
        self.chunk_frames = chunk_frames
        self.chunk_bins = chunk_bins
        self.kl_weight = kl_weight
        self.max_epochs = max_epochs
        self.patience = patience
        self.warmup_batches = warmup_batches
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.validations_per_epoch = validations_per_epoch
        self.max_steps = max_steps
        self.random_state = random_state

    def _configs(self):
        if self.model not in VARIANTS:
            raise ValueError(f"model must be one of {list(VARIANTS)}, got {self.model!r}")
        seed = 0 if self.random_state is None else int(self.random_state)
        mcfg = ModelConfig.from_variant(self.model, depth_N=self.depth, base_channels=self.base_channels,
                                        kl_weight=self.kl_weight,
                                        input_shape=(1, self.chunk_frames, self.chunk_bins))
        tcfg = TrainConfig(max_epochs=self.max_epochs, patience_validations=self.patience,
                           warmup_batches=self.warmup_batches, peak_lr=self.learning_rate,
                           batch_size=self.batch_size, validations_per_epoch=self.validations_per_epoch,
                           seed=seed, kl_weight=self.kl_weight, max_steps=self.max_steps)
        return mcfg, tcfg

    def _stack(self, specs):
        return np.concatenate([chunk_spectrogram(self.standardizer_.transform(s), self.chunk_frames,
                                                 self.chunk_bins).chunks for s in specs])[:, None].astype(np.float32)

    def fit(self, X, y, X_val=None, y_val=None):
        mcfg, tcfg = self._configs()
        xs, ys = check_pairs(X, y, self.chunk_bins)
        self.standardizer_ = FeatureStandardizer()
        for s in xs:
            self.standardizer_.partial_fit(s)
        xv = yv = None
        if X_val is not None:
            vx, vy = check_pairs(X_val, y_val, self.chunk_bins)
            xv, yv = self._stack(vx), self._stack(vy)
        self.model_ = build_model(mcfg, init_seed=tcfg.seed)
        result = fit_chunks(self.model_, self._stack(xs), self._stack(ys), tcfg, xv, yv)
        if result.best_state is not None:
            self.model_.load_state_dict(result.best_state)
        self.history_ = result.history
        self.n_steps_ = result.steps
        self.n_params_ = count_params(self.model_)
        self.n_features_in_ = xs[0].shape[1]
        return self

    def _enhancer(self):
        check_is_fitted(self, ["model_", "standardizer_"])
        return Enhancer(self.model_, self.standardizer_)

    def predict(self, X):
        single = isinstance(X, np.ndarray) and X.ndim == 2
        specs = check_spectrogram_list(X, "X", self.chunk_bins)
        enh = self._enhancer()
        out = [enh.enhance_log_power(s)[0] for s in specs]
        return out[0] if single else out

    def score(self, X, y, sample_weight=None):
        """Mean spectral SI-SDR (dB) of the enhanced spectra against ``y``."""
        xs, ys = check_pairs(X, y, self.chunk_bins)
        scores = []
        enh = self._enhancer()
        for s, t in zip(xs, ys):
            _, parts, chunks = enh.enhance_log_power(s)
            ref = chunk_spectrogram(t, self.chunk_frames, self.chunk_bins)
            scores.append(spectral_si_sdr(ref.chunks, chunks, parts.valid_lengths))
        return float(np.average(scores, weights=sample_weight))

    def to_checkpoint(self):
        check_is_fitted(self, ["model_", "standardizer_"])
        _, tcfg = self._configs()
        return Checkpoint(self.model_.config, self.model_.state_dict(), self.standardizer_.to_dict(),
                          tcfg.to_dict(), {}, list(self.history_))

    def save(self, path):
        self.to_checkpoint().save(path)

    @classmethod
    def from_checkpoint(cls, ckpt):
        if not isinstance(ckpt, Checkpoint):
            ckpt = Checkpoint.load(ckpt)
        cfg = ckpt.model_config
        tc = ckpt.train_config or {}
        est = cls(model=cfg.variant, depth=cfg.depth_N, base_channels=cfg.base_channels,
                  chunk_frames=cfg.input_shape[1], chunk_bins=cfg.input_shape[2], kl_weight=cfg.kl_weight,
                  **{k: tc[v] for k, v in (("max_epochs", "max_epochs"), ("patience", "patience_validations"),
                                           ("warmup_batches", "warmup_batches"), ("learning_rate", "peak_lr"),
                                           ("batch_size", "batch_size"),
                                           ("validations_per_epoch", "validations_per_epoch"),
                                           ("max_steps", "max_steps"), ("random_state", "seed")) if v in tc})
        est.model_ = ckpt.build_model()
        est.standardizer_ = ckpt.standardizer()
        est.history_ = list(ckpt.history)
        est.n_params_ = count_params(est.model_)
        est.n_features_in_ = cfg.input_shape[2]
        return est
