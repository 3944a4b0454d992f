"""Noisy-speech mixture synthesis and JSON Lines manifests.

Clean utterances are peak-normalized, optionally convolved with a room
impulse response, and mixed with a fitted noise excerpt scaled to a target
SNR measured over the whole excerpt.  Reverberation is applied to the speech
only, so the training target is the reverberant clean signal.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import signal

from .audio_io import atomic_write, read_wav, write_wav
from .dsp import SAMPLE_RATE, Waveform

logger = logging.getLogger(__name__)

PEAK_LEVEL = 0.95
CLIP_LEVEL = 1.0
MIX_SECONDS = 30.0
CROSSFADE_SECONDS = 0.010
_DIRECT_CONV_MAX_TAPS = 256
SPLITS = ("train", "val", "test")


@dataclass
class MixtureRecord:
    mixture_id: str
    speech_path: str
    noise_path: str
    snr_db: float
    applied_gain: float | None
    rir_path: str | None
    split: str
    seed: int
    duration_s: float = MIX_SECONDS

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=False, ensure_ascii=False)

    @classmethod
    def from_json(cls, line):
        data = json.loads(line)
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**data)


def default_snr_grid():
    return [float(v) for v in range(0, 21)]


@dataclass
class ManifestSpec:
    speech_dir: str
    noise_dir: str
    rir_dir: str | None = None
    target_hours: float = 1.0
    snr_grid: list = field(default_factory=default_snr_grid)
    seed: int = 0
    split: str = "train"
    duration_s: float = MIX_SECONDS

    def __post_init__(self):
        if self.target_hours <= 0:
            raise ValueError("target_hours must be positive")
        if not self.snr_grid:
            raise ValueError("snr_grid must not be empty")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        self.snr_grid = [float(v) for v in self.snr_grid]


def _power(x):
    return float(np.mean(np.square(x)))


def measured_snr_db(clean, noise_component):
    return 10.0 * math.log10(_power(clean) / _power(noise_component))


def normalize_utterance(w):
    """Scale so the peak absolute amplitude is 0.95."""
    peak = float(np.max(np.abs(w.samples))) if len(w) else 0.0
    if peak == 0.0:
        raise ValueError("silent utterance")
    if peak == PEAK_LEVEL:
        return Waveform(w.samples.copy(), w.sample_rate)
    return Waveform(w.samples * (PEAK_LEVEL / peak), w.sample_rate)


def snr_gain(speech, noise, snr_db):
    """Linear noise gain g such that speech + g * noise has the requested SNR."""
    s = speech.samples if isinstance(speech, Waveform) else np.asarray(speech)
    n = noise.samples if isinstance(noise, Waveform) else np.asarray(noise)
    if s.shape != n.shape:
        raise ValueError("speech and noise must have equal lengths")
    ps, pn = _power(s), _power(n)
    if ps == 0.0:
        raise ValueError("silent speech")
    if pn == 0.0:
        raise ValueError("silent noise")
    return math.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0)))


def _crossfade_tile(x, target_len, fade):
    fade = min(fade, x.size // 2)
    if fade == 0:
        reps = -(-target_len // x.size)
        return np.tile(x, reps)[:target_len]
    ramp_in = np.linspace(0.0, 1.0, fade + 2)[1:-1]
    ramp_out = ramp_in[::-1]
    out = x.copy()
    while out.size < target_len:
        joined = np.empty(out.size + x.size - fade)
        joined[:out.size - fade] = out[:-fade]
        joined[out.size - fade:out.size] = out[-fade:] * ramp_out + x[:fade] * ramp_in
        joined[out.size:] = x[fade:]
        out = joined
    return out[:target_len]


def fit_noise(noise, target_len, seed):
    """Crop (seeded random offset) or crossfade-tile the noise to ``target_len`` samples."""
    x = noise.samples
    if x.size == 0:
        raise ValueError("empty noise")
    rng = np.random.default_rng(seed)
    if x.size == target_len:
        return Waveform(x.copy(), noise.sample_rate)
    if x.size > target_len:
        start = int(rng.integers(0, x.size - target_len + 1))
        return Waveform(x[start:start + target_len].copy(), noise.sample_rate)
    start = int(rng.integers(0, x.size))
    rolled = np.roll(x, -start)
    fade = int(round(CROSSFADE_SECONDS * noise.sample_rate))
    return Waveform(_crossfade_tile(rolled, target_len, fade), noise.sample_rate)


def fit_speech(speech, target_len, seed):
    """Crop long utterances at a seeded offset; zero-pad short ones at the end."""
    x = speech.samples
    if x.size >= target_len:
        start = int(np.random.default_rng(seed).integers(0, x.size - target_len + 1))
        return Waveform(x[start:start + target_len].copy(), speech.sample_rate)
    return Waveform(np.pad(x, (0, target_len - x.size)), speech.sample_rate)


def apply_reverb(w, rir):
    """Convolve with an impulse response, keep ``len(w)`` samples, restore the dry peak."""
    if w.sample_rate != rir.sample_rate:
        raise ValueError(f"sample rate mismatch: {w.sample_rate} vs {rir.sample_rate}")
    h = rir.samples
    nz = np.flatnonzero(h)
    if nz.size == 0:
        raise ValueError("impulse response is all zeros")
    h = h[:nz[-1] + 1]
    method = "direct" if h.size <= _DIRECT_CONV_MAX_TAPS else "fft"
    wet = signal.convolve(w.samples, h, mode="full", method=method)[:len(w)]
    dry_peak = float(np.max(np.abs(w.samples)))
    wet_peak = float(np.max(np.abs(wet)))
    if wet_peak > 0.0 and dry_peak > 0.0:
        wet = wet * (dry_peak / wet_peak)
    return Waveform(wet, w.sample_rate)


@dataclass
class Mixture:
    noisy: Waveform
    clean: Waveform
    record: MixtureRecord
    noise: Waveform  # gain-scaled noise component, so noisy == clean + noise


def mix(speech, noise, snr_db, rir=None, record=None):
    """Mix prepared speech and noise at ``snr_db``; returns noisy, clean and the record.

    If the mixture would exceed full scale, noisy, clean and the noise
    component are rescaled together to a 0.95 peak, which leaves the SNR and
    the sample alignment untouched.
    """
    if len(speech) != len(noise):
        raise ValueError("speech and noise must have equal lengths")
    if speech.sample_rate != noise.sample_rate:
        raise ValueError("speech and noise sample rates differ")
    clean = apply_reverb(speech, rir) if rir is not None else speech
    gain = snr_gain(clean, noise, snr_db)
    noise_part = gain * noise.samples
    noisy = clean.samples + noise_part
    clean_samples = clean.samples
    peak = float(np.max(np.abs(noisy)))
    if peak > CLIP_LEVEL:
        factor = PEAK_LEVEL / peak
        noisy, clean_samples, noise_part = noisy * factor, clean_samples * factor, noise_part * factor
    if record is None:
        record = MixtureRecord("mixture", "", "", float(snr_db), gain, None, "test", 0, len(speech) / speech.sample_rate)
    else:
        record.applied_gain = gain
    rate = speech.sample_rate
    return Mixture(Waveform(noisy, rate), Waveform(clean_samples, rate), record, Waveform(noise_part, rate))


def list_wavs(directory):
    if directory is None:
        return []
    return sorted(str(p) for p in Path(directory).glob("*.wav"))


def draw_snrs(rng, grid, count):
    """Uniform draws from ``grid`` with every value present at least once when possible."""
    grid = list(grid)
    if count < len(grid):
        logger.warning("only %d records for %d SNR values; using %d distinct values", count, len(grid), count)
        return [grid[i] for i in rng.choice(len(grid), size=count, replace=False)]
    picks = list(range(len(grid))) + list(rng.integers(0, len(grid), size=count - len(grid)))
    picks = [picks[i] for i in rng.permutation(count)]
    return [grid[i] for i in picks]


def build_manifest(spec, speech_pool=None, noise_pool=None, rir_pool=None):
    """Plan ``ceil(target_hours * 3600 / duration)`` mixtures; gains are filled in at render time."""
    speech_pool = speech_pool if speech_pool is not None else list_wavs(spec.speech_dir)
    noise_pool = noise_pool if noise_pool is not None else list_wavs(spec.noise_dir)
    rir_pool = rir_pool if rir_pool is not None else list_wavs(spec.rir_dir)
    if not speech_pool:
        raise ValueError(f"no speech WAV files in {spec.speech_dir}")
    if not noise_pool:
        raise ValueError(f"no noise WAV files in {spec.noise_dir}")
    count = math.ceil(round(spec.target_hours * 3600.0 / spec.duration_s, 9))
    rng = np.random.default_rng(spec.seed)
    snrs = draw_snrs(rng, spec.snr_grid, count)
    speech_idx = rng.integers(0, len(speech_pool), size=count)
    noise_idx = rng.integers(0, len(noise_pool), size=count)
    rir_idx = rng.integers(0, len(rir_pool), size=count) if rir_pool else [None] * count
    seeds = rng.integers(0, 2**63, size=count, dtype=np.uint64)
    records = []
    for k in range(count):
        records.append(MixtureRecord(
            mixture_id=f"{spec.split}_{k:06d}",
            speech_path=speech_pool[speech_idx[k]],
            noise_path=noise_pool[noise_idx[k]],
            snr_db=float(snrs[k]),
            applied_gain=None,
            rir_path=rir_pool[rir_idx[k]] if rir_idx[k] is not None else None,
            split=spec.split,
            seed=int(seeds[k]),
            duration_s=float(spec.duration_s),
        ))
    return records


def render_record(record, sample_rate=SAMPLE_RATE):
    """Load the sources named in ``record`` and produce its mixture."""
    target_len = int(round(record.duration_s * sample_rate))
    seed_seq = np.random.SeedSequence(record.seed)
    speech_seed, noise_seed = (int(s.generate_state(1)[0]) for s in seed_seq.spawn(2))
    speech = normalize_utterance(fit_speech(read_wav(record.speech_path, sample_rate), target_len, speech_seed))
    noise = fit_noise(read_wav(record.noise_path, sample_rate), target_len, noise_seed)
    rir = read_wav(record.rir_path, sample_rate) if record.rir_path else None
    return mix(speech, noise, record.snr_db, rir, record)


def write_manifest(path, records):
    with atomic_write(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return [MixtureRecord.from_json(line) for line in fh if line.strip()]


def audio_paths(out_dir, record):
    out_dir = Path(out_dir)
    return out_dir / f"{record.mixture_id}_noisy.wav", out_dir / f"{record.mixture_id}_clean.wav"


def render_manifest(spec, out_dir):
    """Build, render and write a manifest plus ``<id>_{noisy,clean}.wav`` files under ``out_dir``."""
    out_dir = Path(out_dir)
    records = build_manifest(spec)
    for record in records:
        mixture = render_record(record)
        noisy_path, clean_path = audio_paths(out_dir, record)
        write_wav(noisy_path, mixture.noisy)
        write_wav(clean_path, mixture.clean)
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, records)
    return manifest_path, records
