"""Loss, optimizer, training loop, checkpoints and file-level enhancement."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import atomic_write, read_wav, write_wav
from .datagen import audio_paths, read_manifest
from .difftensor import kl_standard_normal, mse
from .dsp import (
    SAMPLE_RATE,
    LogPowerSpectrogram,
    StftConfig,
    assemble_chunks,
    chunk_spectrogram,
    istft_with_phase,
    log_power,
    phase_of,
    stft,
)
from .modelzoo import ModelConfig, build_model
from .preprocessing import FeatureStandardizer

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SPCK"
CHECKPOINT_VERSION = 1
OUTPUT_PEAK = 0.999
HISTORY_COLUMNS = ["step", "train_loss", "mse", "kl", "val_loss", "lr"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 200
    patience_validations: int = 10
    warmup_batches: int = 500
    peak_lr: float = 1e-3
    batch_size: int = 8
    validations_per_epoch: int = 2
    seed: int = 0
    kl_weight: float = 1e-3
    max_steps: int | None = None

    def __post_init__(self):
        for name in ("max_epochs", "patience_validations", "warmup_batches", "batch_size",
                     "validations_per_epoch"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be > 0")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------ loss

@dataclass
class LossBreakdown:
    total: float
    mse: float
    kl: float
    kl_weighted: float


def total_loss(y, target, latent=None, kl_weight=0.0, variational=False):
    """Reconstruction MSE plus the weighted KL term.

    Returns ``(loss_tensor, breakdown)``; the tensor is differentiable.
    """
    if variational and latent is None and kl_weight > 0:
        raise ValueError("variational model produced no latent statistics")
    rec = mse(y, target)
    if latent is None:
        return rec, LossBreakdown(float(rec.data), float(rec.data), 0.0, 0.0)
    kl = kl_standard_normal(latent)
    kl_w = kl * float(kl_weight)
    loss = rec + kl_w
    return loss, LossBreakdown(float(loss.data), float(rec.data), float(kl.data), float(kl_w.data))


# ------------------------------------------------------------- optimizer

def lr_schedule(batch_index, cfg):
    if batch_index < 0:
        raise ValueError("batch_index must be >= 0")
    if batch_index < cfg.warmup_batches:
        return cfg.peak_lr * (batch_index + 1) / cfg.warmup_batches
    return cfg.peak_lr


@dataclass
class AdamMoments:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, moments, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` and ``moments``.

    ``params`` and ``grads`` are parallel lists of arrays; a missing gradient
    counts as zero.  Raises :class:`TrainingDiverged` on non-finite input.
    """
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDiverged("diverged: non-finite gradient")
    moments.t += 1
    t = moments.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, moments.m, moments.v):
        if g is None:
            g = np.zeros_like(p)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, moments


class EarlyStopping:
    """Counts validations without improvement of the best validation loss."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.bad = 0
        self.count = 0

    def update(self, value):
        """Record one validation; returns True when it is a new best."""
        self.count += 1
        if value < self.best:
            self.best = value
            self.bad = 0
            return True
        self.bad += 1
        return False

    @property
    def should_stop(self):
        return self.bad >= self.patience


# ------------------------------------------------------------ checkpoint

@dataclass
class Checkpoint:
    model_config: ModelConfig
    state: OrderedDict
    normalizer: dict
    train_config: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)  # {"t": int, "m": {name: arr}, "v": {name: arr}}
    history: list = field(default_factory=list)
    format_version: int = CHECKPOINT_VERSION

    def build_model(self):
        m = build_model(self.model_config)
        m.load_state_dict(self.state)
        return m

    def standardizer(self):
        return FeatureStandardizer.from_dict(self.normalizer)

    def save(self, path):
        blobs = list(self.state.items())
        for kind in ("m", "v"):
            blobs += [(f"adam.{kind}.{k}", a) for k, a in self.optimizer.get(kind, {}).items()]
        header = {
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config,
            "normalizer": self.normalizer,
            "history_length": len(self.history),
            "history": self.history,
            "adam_t": int(self.optimizer.get("t", 0)),
            "tensors": [{"name": k, "shape": list(np.shape(a))} for k, a in blobs],
        }
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        with atomic_write(path) as fh:
            fh.write(CHECKPOINT_MAGIC + struct.pack("<HI", self.format_version, len(raw)))
            fh.write(raw)
            for _, a in blobs:
                fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, n = struct.unpack_from("<HI", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(raw[10:10 + n].decode("utf-8"))
        offset = 10 + n
        state, opt = OrderedDict(), {"t": header.get("adam_t", 0), "m": OrderedDict(), "v": OrderedDict()}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            if offset + 4 * count > len(raw):
                raise ValueError(f"{path}: truncated tensor data")
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
            offset += 4 * count
            name = entry["name"]
            if name.startswith("adam.m."):
                opt["m"][name[7:]] = arr
            elif name.startswith("adam.v."):
                opt["v"][name[7:]] = arr
            else:
                state[name] = arr
        if offset != len(raw):
            raise ValueError(f"{path}: trailing bytes after tensor data")
        return cls(ModelConfig.from_dict(header["model_config"]), state, header["normalizer"],
                   header.get("train_config", {}), opt, header.get("history", []), version)


def write_history_csv(path, history):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in HISTORY_COLUMNS})
    with atomic_write(path, "w") as fh:
        fh.write(buf.getvalue())


# --------------------------------------------------------------- features

def chunk_shape(model_config):
    """(frames per chunk, frequency bins kept) for a model's input."""
    return tuple(model_config.input_shape[1:])


@dataclass
class FeaturePair:
    noisy: LogPowerSpectrogram
    clean: LogPowerSpectrogram


def load_pair(record, audio_dir, stft_config=None):
    noisy_path, clean_path = audio_paths(audio_dir, record)
    cfg = stft_config or StftConfig()
    noisy = log_power(stft(read_wav(noisy_path), cfg))
    clean = log_power(stft(read_wav(clean_path), cfg))
    if noisy.shape != clean.shape:
        raise ValueError(f"{record.mixture_id}: noisy and clean lengths differ")
    return FeaturePair(noisy, clean)


def load_features(manifest_path, stft_config=None):
    """Log-power pairs for every readable record; unreadable ones are skipped with a warning."""
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    if not records:
        raise ValueError(f"{manifest_path}: empty manifest")
    pairs = []
    for r in records:
        try:
            pairs.append((r, load_pair(r, manifest_path.parent, stft_config)))
        except (OSError, ValueError, EOFError) as exc:
            log.warning("event=skip_record mixture_id=%s reason=%r", r.mixture_id, str(exc))
    return pairs


def make_chunks(pairs, standardizer, shape):
    """Normalize each pair and split into (n, 1, frames, bins) float32 stacks."""
    frames, bins = shape
    noisy, clean = [], []
    for _, p in pairs:
        noisy.append(chunk_spectrogram(standardizer.transform(p.noisy.values), frames, bins).chunks)
        clean.append(chunk_spectrogram(standardizer.transform(p.clean.values), frames, bins).chunks)
    if not noisy:
        raise ValueError("no usable training chunks")
    stack = lambda parts: np.concatenate(parts)[:, None].astype(np.float32)  # noqa: E731
    return stack(noisy), stack(clean)


def fit_standardizer(pairs):
    st = FeatureStandardizer()
    for _, p in pairs:
        st.partial_fit(p.noisy.values)
    return st


# ---------------------------------------------------------------- loop

def _step_seed(seed, step):
    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1)[0])


def evaluate_loss(model, noisy, clean, cfg):
    """Mean total loss over chunks in eval mode, batched like training."""
    if len(noisy) == 0:
        return math.nan
    totals = []
    for start in range(0, len(noisy), cfg.batch_size):
        xb, yb = noisy[start:start + cfg.batch_size], clean[start:start + cfg.batch_size]
        y, latent = model.forward(xb, mode="eval")
        _, parts = total_loss(y, yb, latent, cfg.kl_weight, model.config.variational)
        totals.append((parts.total, len(xb)))
    return float(sum(t * n for t, n in totals) / sum(n for _, n in totals))


@dataclass
class FitResult:
    history: list
    best_state: OrderedDict | None
    best_val: float
    steps: int
    moments: AdamMoments
    stopped_early: bool


def fit_chunks(model, train_noisy, train_clean, cfg, val_noisy=None, val_clean=None,
               on_step=None, on_validation=None):
    """Train ``model`` in place on stacked chunks.

    ``on_step(step, breakdown)`` may return True to stop.  ``on_validation``
    receives ``(step, val_loss, is_best, history)`` after every validation.
    """
    n = len(train_noisy)
    if n == 0 or len(train_clean) != n:
        raise ValueError("training inputs and targets must be non-empty and aligned")
    names = [k for k, _ in model.named_parameters()]
    params = model.parameters()
    moments = AdamMoments.zeros_like([p.data for p in params])
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    val_every = max(1, steps_per_epoch // cfg.validations_per_epoch)
    has_val = val_noisy is not None and len(val_noisy) > 0
    stopper = EarlyStopping(cfg.patience_validations)
    history, best_state, step, stop = [], None, 0, False

    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng([int(cfg.seed), epoch]).permutation(n)
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            lr = lr_schedule(step, cfg)
            model.zero_grad()
            y, latent = model.forward(train_noisy[idx], mode="train", rng_seed=_step_seed(cfg.seed, step))
            loss, parts = total_loss(y, train_clean[idx], latent, cfg.kl_weight, model.config.variational)
            if not math.isfinite(parts.total):
                raise TrainingDiverged(f"diverged: loss {parts.total} at step {step}")
            loss.backward()
            adam_step([p.data for p in params], [p.grad for p in params], moments, lr)
            step += 1
            row = {"step": step, "train_loss": parts.total, "mse": parts.mse, "kl": parts.kl,
                   "val_loss": None, "lr": lr}
            history.append(row)
            if on_step is not None and on_step(step, parts):
                stop = True
            if has_val and (step % val_every == 0 or stop):
                row["val_loss"] = evaluate_loss(model, val_noisy, val_clean, cfg)
                is_best = stopper.update(row["val_loss"])
                if is_best:
                    best_state = OrderedDict((k, np.array(v, copy=True)) for k, v in model.state_dict().items())
                log.info("event=validation step=%d val_loss=%.6g best=%s", step, row["val_loss"], is_best)
                if on_validation is not None:
                    on_validation(step, row["val_loss"], is_best, history)
                stop = stop or stopper.should_stop
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
            if stop:
                break
        if stop:
            break

    moments_named = AdamMoments(OrderedDict(zip(names, moments.m)), OrderedDict(zip(names, moments.v)), moments.t)
    return FitResult(history, best_state, stopper.best, step, moments_named, stopper.should_stop)


def train(manifest_train, manifest_val, model_cfg, train_cfg, out_dir, init_seed=None):
    """Train from rendered manifests and write ``best.spck``, ``last.spck`` and ``history.csv``.

    Returns the best-validation :class:`Checkpoint` (the last one when there
    is no validation data).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_pairs = load_features(manifest_train)
    if not train_pairs:
        raise ValueError("all training records were skipped")
    val_pairs = load_features(manifest_val) if manifest_val else []
    standardizer = fit_standardizer(train_pairs)
    shape = chunk_shape(model_cfg)
    xs, ys = make_chunks(train_pairs, standardizer, shape)
    xv, yv = make_chunks(val_pairs, standardizer, shape) if val_pairs else (None, None)
    log.info("event=data train_chunks=%d val_chunks=%d mean=%.4f std=%.4f",
             len(xs), 0 if xv is None else len(xv), standardizer.mean_, standardizer.std_)

    model = build_model(model_cfg, init_seed=train_cfg.seed if init_seed is None else init_seed)
    norm = standardizer.to_dict()

    def snapshot(state, result_history, moments=None):
        opt = {} if moments is None else {"t": moments.t, "m": moments.m, "v": moments.v}
        return Checkpoint(model_cfg, state, norm, train_cfg.to_dict(), opt, result_history)

    def on_validation(step, val_loss, is_best, history):
        # "last" is refreshed at every validation so an interrupted run leaves a loadable file
        state = OrderedDict((k, v.copy()) for k, v in model.state_dict().items())
        snapshot(state, history).save(out_dir / "last.spck")
        if is_best:
            snapshot(state, history).save(out_dir / "best.spck")

    def on_step(step, parts):
        if step % 50 == 0:
            log.info("event=train step=%d loss=%.6g mse=%.6g kl=%.6g", step, parts.total, parts.mse, parts.kl)
        return False

    result = fit_chunks(model, xs, ys, train_cfg, xv, yv, on_step=on_step, on_validation=on_validation)
    history = result.history
    write_history_csv(out_dir / "history.csv", history)
    last = snapshot(model.state_dict(), history, result.moments)
    last.save(out_dir / "last.spck")
    if result.best_state is None:
        last.save(out_dir / "best.spck")
        return last
    best = snapshot(result.best_state, history, result.moments)
    best.save(out_dir / "best.spck")
    return best


# ------------------------------------------------------------ inference

class Enhancer:
    """Model plus feature normalizer: maps log-power spectra to enhanced ones."""

    def __init__(self, model, standardizer, stft_config=None):
        self.model = model
        self.standardizer = standardizer
        self.stft_config = stft_config or StftConfig()

    @classmethod
    def from_checkpoint(cls, ckpt):
        if not isinstance(ckpt, Checkpoint):
            ckpt = Checkpoint.load(ckpt)
        return cls(ckpt.build_model(), ckpt.standardizer())

    def enhance_log_power(self, values, batch_size=4):
        """Return ``(enhanced full spectrogram, SpectrogramChunks of the noisy input, enhanced chunks)``."""
        frames, bins = chunk_shape(self.model.config)
        parts = chunk_spectrogram(np.asarray(values), frames, bins)
        x = self.standardizer.transform(parts.chunks).astype(self.model.dtype)[:, None]
        out = np.empty_like(x)
        for s in range(0, len(x), batch_size):
            out[s:s + batch_size] = self.model.forward(x[s:s + batch_size], mode="eval")[0].data
        enhanced_chunks = self.standardizer.inverse_transform(out[:, 0].astype(np.float64))
        return assemble_chunks(parts, enhanced_chunks), parts, enhanced_chunks

    def enhance_waveform(self, noisy):
        spec = stft(noisy, self.stft_config)
        lp = log_power(spec)
        full, parts, enhanced_chunks = self.enhance_log_power(lp.values)
        enhanced = LogPowerSpectrogram(full, self.stft_config, lp.floor_eps)
        wave = istft_with_phase(enhanced, phase_of(spec), self.stft_config, out_len=len(noisy))
        return EnhanceReport(lp.values, full, parts, enhanced_chunks, wave)


@dataclass
class EnhanceReport:
    noisy_log_power: np.ndarray
    enhanced_log_power: np.ndarray
    noisy_chunks: object          # SpectrogramChunks
    enhanced_chunks: np.ndarray   # n_chunks x frames x bins, de-normalized
    waveform: object              # Waveform


def enhance_file(ckpt, noisy_wav_path, out_wav_path):
    enhancer = ckpt if isinstance(ckpt, Enhancer) else Enhancer.from_checkpoint(ckpt)
    noisy = read_wav(noisy_wav_path, expected_rate=SAMPLE_RATE)
    report = enhancer.enhance_waveform(noisy)
    write_wav(out_wav_path, report.waveform, peak_limit=OUTPUT_PEAK)
    return report
