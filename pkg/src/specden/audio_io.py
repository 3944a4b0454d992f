"""WAV reading/writing and the binary spectrogram container."""

from __future__ import annotations

import os
import struct
import tempfile
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import SAMPLE_RATE, Waveform

SPDN_MAGIC = b"SPDN"
SPDN_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@contextmanager
def atomic_write(path, mode="wb"):
    """Write to a temporary sibling file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_wav(path, expected_rate=SAMPLE_RATE):
    """Load a mono 16-bit PCM or 32-bit float WAV as a float64 :class:`Waveform`."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", wavfile.WavFileWarning)
        rate, data = wavfile.read(path)
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path, w, peak_limit=None):
    """Write 16-bit PCM.  ``peak_limit`` rescales the signal if its peak exceeds it."""
    x = np.asarray(w.samples, dtype=np.float64)
    if peak_limit is not None:
        peak = np.max(np.abs(x)) if x.size else 0.0
        if peak > peak_limit:
            x = x * (peak_limit / peak)
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)
    with atomic_write(path) as fh:
        wavfile.write(fh, w.sample_rate, pcm)


def save_spectrogram(path, values):
    """Container: magic, u16 version, u8 dtype code, u8 ndim, u32 dims, row-major LE values."""
    values = np.asarray(values)
    code = 2 if values.dtype == np.float64 else 1
    dtype = _DTYPE_CODES[code]
    header = SPDN_MAGIC + struct.pack("<HBB", SPDN_VERSION, code, values.ndim)
    header += struct.pack(f"<{values.ndim}I", *values.shape)
    with atomic_write(path) as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(values, dtype=dtype).tobytes())


def load_spectrogram(path):
    raw = Path(path).read_bytes()
    if raw[:4] != SPDN_MAGIC:
        raise ValueError(f"{path}: not a spectrogram container")
    version, code, ndim = struct.unpack_from("<HBB", raw, 4)
    if version != SPDN_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    if code not in _DTYPE_CODES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    offset = 8 + 4 * ndim
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - offset != count * dtype.itemsize:
        raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims).copy()
