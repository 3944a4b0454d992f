"""Synthetic speech-like and noise signals for smoke tests and demos.

The "speech" is a harmonic tone complex with a wandering pitch, a few fixed
formant resonances and a syllable-rate on/off envelope, which is enough for
the energy-based activity detection in STOI and for a spectrogram with
speech-like structure.
"""

from pathlib import Path

import numpy as np

from .audio_io import write_wav
from .dsp import SAMPLE_RATE, Waveform


def speech_like(duration, sample_rate=SAMPLE_RATE, seed=0, n_harmonics=30, floor_db=-70.0):
    """Voiced tone complex plus breathy broadband noise over a recording-noise floor.

    ``floor_db`` sets the level of the stationary background relative to the
    peak; real close-talk recordings are never digitally silent.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0_base = rng.uniform(100.0, 220.0)
    f0 = f0_base * (1.0 + 0.15 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    formants = rng.uniform([400, 1000, 2200], [900, 1800, 3200])
    x = np.zeros(n)
    for h in range(1, n_harmonics + 1):
        fh = h * f0_base
        if fh >= sample_rate / 2 - 500:
            break
        weight = sum(np.exp(-0.5 * ((fh - f) / 150.0) ** 2) for f in formants) + 0.05 / h
        x += weight * np.sin(h * phase)
    syllable_rate = rng.uniform(3.0, 5.0)
    envelope = np.clip(np.sin(2 * np.pi * syllable_rate * t + rng.uniform(0, 2 * np.pi)), 0.0, None) ** 0.7
    x *= envelope
    x /= np.max(np.abs(x))
    breath = np.diff(rng.standard_normal(n + 1))  # first difference tilts the noise upward in frequency
    x += 0.02 * envelope * breath
    x += 10.0 ** (floor_db / 20.0) * rng.standard_normal(n)
    return Waveform(0.9 * x / np.max(np.abs(x)), sample_rate)


def noise_like(duration, sample_rate=SAMPLE_RATE, seed=0, color=1.0):
    """Power-law coloured Gaussian noise (1/f^color power) with a slow amplitude wobble."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    freqs[0] = freqs[1]
    x = np.fft.irfft(spectrum / freqs ** (color / 2.0), n=n)
    t = np.arange(n) / sample_rate
    x *= 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.1, 1.0) * t)
    return Waveform(0.5 * x / np.max(np.abs(x)), sample_rate)


def impulse_response(seconds=0.2, sample_rate=SAMPLE_RATE, seed=0, rt60=0.3):
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    decay = np.exp(-6.9 * np.arange(n) / (rt60 * sample_rate))
    h = rng.standard_normal(n) * decay
    h[0] = 1.0
    return Waveform(h / np.max(np.abs(h)), sample_rate)


def write_toy_corpus(root, n_speech=3, n_noise=2, speech_seconds=12.0, noise_seconds=7.0, n_rir=0, seed=0):
    """Write ``speech/``, ``noise/`` (and optionally ``rir/``) WAV pools under ``root``."""
    root = Path(root)
    seq = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in seq.spawn(n_speech + n_noise + n_rir)]
    for i in range(n_speech):
        write_wav(root / "speech" / f"speech_{i:03d}.wav", speech_like(speech_seconds, seed=seeds[i]))
    for i in range(n_noise):
        w = noise_like(noise_seconds, seed=seeds[n_speech + i], color=[0.0, 1.0, 2.0][i % 3])
        write_wav(root / "noise" / f"noise_{i:03d}.wav", w)
    for i in range(n_rir):
        write_wav(root / "rir" / f"rir_{i:03d}.wav", impulse_response(seed=seeds[n_speech + n_noise + i]))
    return root

