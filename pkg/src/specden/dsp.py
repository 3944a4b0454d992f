"""Short-time spectral analysis, log-power features and noisy-phase resynthesis.

All reference paths run in double precision.  The analysis uses a periodic
Hann window with reflect padding centred on each frame; the synthesis
overlap-adds windowed inverse frames and divides by the summed squared
window, which makes the pair an exact inverse whenever the hop keeps that
envelope away from zero (hop = win_length / 4 by default).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE = 16_000
DEFAULT_FLOOR = 1e-10
WINDOWS = ("hann_periodic", "rectangular")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains NaN or Inf")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Defaults: 1024-point FFT, 25 ms Hann window and 6.25 ms hop at 16 kHz."""

    fft_size: int = 1024
    win_length: int = 400
    hop_length: int = 100
    window: str = "hann_periodic"

    def __post_init__(self):
        if min(self.fft_size, self.win_length, self.hop_length) <= 0:
            raise ValueError("fft_size, win_length and hop_length must be positive")
        if self.win_length > self.fft_size:
            raise ValueError("win_length must not exceed fft_size")
        if self.window not in WINDOWS:
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples):
        return 1 + n_samples // self.hop_length


@dataclass
class ComplexSpectrogram:
    values: np.ndarray  # frames x bins
    config: StftConfig = field(default_factory=StftConfig)

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def bins(self):
        return self.values.shape[1]


@dataclass
class LogPowerSpectrogram:
    values: np.ndarray  # frames x bins, natural log of power
    config: StftConfig = field(default_factory=StftConfig)
    floor_eps: float = DEFAULT_FLOOR

    @property
    def shape(self):
        return self.values.shape

    def magnitude(self):
        """Invert to linear magnitude: sqrt(exp(v) - floor), clipped at zero."""
        return np.sqrt(np.maximum(np.exp(self.values) - self.floor_eps, 0.0))


@dataclass
class PhaseMatrix:
    values: np.ndarray  # frames x bins, radians in (-pi, pi]


def make_window(config):
    n = config.win_length
    if config.window == "rectangular":
        return np.ones(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def _frame_starts(n_frames, hop):
    return np.arange(n_frames) * hop


def stft(w, config=None):
    """Centre-padded STFT, ``1 + len // hop`` frames by ``fft_size // 2 + 1`` bins.

    Frame ``t`` is centred on sample ``t * hop``; each frame is windowed and
    zero-padded to ``fft_size`` before the real FFT.
    """
    config = config or StftConfig()
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty input")
    pad = config.win_length // 2
    mode = "reflect" if x.size > 1 else "edge"
    padded = np.pad(x, pad, mode=mode)
    n_frames = config.n_frames(x.size)
    idx = _frame_starts(n_frames, config.hop_length)[:, None] + np.arange(config.win_length)[None, :]
    frames = padded[idx] * make_window(config)[None, :]
    values = np.fft.rfft(frames, n=config.fft_size, axis=1)
    return ComplexSpectrogram(values, config)


def log_power(c, floor_eps=DEFAULT_FLOOR):
    if floor_eps <= 0:
        raise ValueError("floor_eps must be positive")
    values = np.log(np.abs(c.values) ** 2 + floor_eps)
    return LogPowerSpectrogram(values, c.config, floor_eps)


def phase_of(c):
    values = np.angle(c.values)
    values[c.values == 0] = 0.0
    # np.angle returns -pi for negative reals with a -0.0 imaginary part
    values[values <= -np.pi] = np.pi
    return PhaseMatrix(values)


def istft_with_phase(s, p, config=None, out_len=None):
    """Resynthesize a waveform from a log-power magnitude and a phase matrix.

    Overlap-adds windowed inverse frames, normalizes by the squared-window
    envelope, strips the centre padding and returns ``out_len`` samples.
    """
    config = config or s.config
    mag = s.magnitude() if isinstance(s, LogPowerSpectrogram) else np.asarray(s)
    phase = p.values if isinstance(p, PhaseMatrix) else np.asarray(p)
    if mag.shape != phase.shape:
        raise ValueError(f"dimension mismatch: magnitude {mag.shape} vs phase {phase.shape}")
    if mag.shape[1] != config.n_bins:
        raise ValueError(f"expected {config.n_bins} bins, got {mag.shape[1]}")
    n_frames = mag.shape[0]
    if out_len is None:
        out_len = (n_frames - 1) * config.hop_length
    if out_len > n_frames * config.hop_length:
        raise ValueError("out_len exceeds frames * hop_length")

    window = make_window(config)
    frames = np.fft.irfft(mag * np.exp(1j * phase), n=config.fft_size, axis=1)[:, :config.win_length]
    frames *= window[None, :]

    total = (n_frames - 1) * config.hop_length + config.win_length
    signal = np.zeros(total)
    envelope = np.zeros(total)
    wsq = window ** 2
    for t, start in enumerate(_frame_starts(n_frames, config.hop_length)):
        signal[start:start + config.win_length] += frames[t]
        envelope[start:start + config.win_length] += wsq
    nonzero = envelope > 1e-11
    signal[nonzero] /= envelope[nonzero]

    pad = config.win_length // 2
    out = signal[pad:pad + out_len]
    if out.size < out_len:
        out = np.pad(out, (0, out_len - out.size))
    return Waveform(out, SAMPLE_RATE)


@dataclass
class SpectrogramChunks:
    """Fixed-size time chunks of a spectrogram plus what is needed to undo the split."""

    chunks: np.ndarray           # n_chunks x frames_per_chunk x bins_kept
    offsets: np.ndarray          # first frame of each chunk
    valid_lengths: np.ndarray    # frames of real data in each chunk
    dropped: np.ndarray          # frames x (bins - bins_kept), e.g. the Nyquist column
    n_frames: int

    def __len__(self):
        return self.chunks.shape[0]


def chunk_spectrogram(s, frames_per_chunk=512, bins_kept=512):
    """Split into non-overlapping time chunks; the last chunk is zero-padded."""
    values = s.values if isinstance(s, LogPowerSpectrogram) else np.asarray(s)
    n_frames, n_bins = values.shape
    if n_bins < bins_kept:
        raise ValueError(f"spectrogram has {n_bins} bins, fewer than bins_kept={bins_kept}")
    n_chunks = max(1, -(-n_frames // frames_per_chunk))
    chunks = np.zeros((n_chunks, frames_per_chunk, bins_kept), dtype=values.dtype)
    offsets = np.arange(n_chunks) * frames_per_chunk
    valid = np.minimum(frames_per_chunk, n_frames - offsets)
    for k, (off, n) in enumerate(zip(offsets, valid)):
        chunks[k, :n] = values[off:off + n, :bins_kept]
    return SpectrogramChunks(chunks, offsets, valid, values[:, bins_kept:].copy(), n_frames)


def assemble_chunks(parts, chunks=None):
    """Inverse of :func:`chunk_spectrogram`.

    ``chunks`` optionally replaces ``parts.chunks`` (e.g. enhanced chunks);
    the dropped columns are always restored from ``parts``.
    """
    data = parts.chunks if chunks is None else np.asarray(chunks)
    bins_kept = data.shape[2]
    out = np.empty((parts.n_frames, bins_kept + parts.dropped.shape[1]), dtype=np.result_type(data, parts.dropped))
    for k, (off, n) in enumerate(zip(parts.offsets, parts.valid_lengths)):
        out[off:off + n, :bins_kept] = data[k, :n]
    out[:, bins_kept:] = parts.dropped
    return out
