"""Objective evaluation: spectral SI-SDR, STOI, report tables and spectrogram images."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .audio_io import atomic_write

logger = logging.getLogger(__name__)

SI_SDR_CLAMP = 100.0

# STOI constants (Taal et al. reference definition)
STOI_FS = 10_000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


def si_sdr(reference, estimate, zero_mean=True):
    """Scale-invariant SDR in dB, clamped to +/-100 dB.

    Both vectors are flattened and (by default) mean-removed; the estimate is
    projected onto the reference and the energy of that projection is
    compared with the energy of the residual.
    """
    s = np.asarray(reference, dtype=np.float64).ravel()
    e = np.asarray(estimate, dtype=np.float64).ravel()
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: {s.size} vs {e.size}")
    if s.size < 2:
        raise ValueError("si_sdr needs at least two samples")
    if zero_mean:
        s = s - s.mean()
        e = e - e.mean()
    ref_energy = float(np.dot(s, s))
    if ref_energy == 0.0:
        raise ValueError("reference is zero after mean removal")
    target = (np.dot(e, s) / ref_energy) * s
    residual = e - target
    t_energy, r_energy = float(np.dot(target, target)), float(np.dot(residual, residual))
    if t_energy == 0.0:
        return -SI_SDR_CLAMP
    if r_energy <= 1e-20 * t_energy:
        return SI_SDR_CLAMP
    return float(np.clip(10.0 * math.log10(t_energy / r_energy), -SI_SDR_CLAMP, SI_SDR_CLAMP))


def spectral_si_sdr(reference_chunks, estimate_chunks, valid_lengths=None):
    """Mean SI-SDR over matching log-power chunks (only valid frames of padded chunks)."""
    ref = np.asarray(reference_chunks)
    est = np.asarray(estimate_chunks)
    if ref.shape != est.shape:
        raise ValueError(f"chunk shape mismatch: {ref.shape} vs {est.shape}")
    if valid_lengths is None:
        valid_lengths = [ref.shape[1]] * ref.shape[0]
    return float(np.mean([si_sdr(r[:n], e[:n]) for r, e, n in zip(ref, est, valid_lengths)]))


# ---------------------------------------------------------------- STOI

def third_octave_bands(fs=STOI_FS, nfft=STOI_NFFT, num_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    f = np.linspace(0, fs, nfft + 1)[:nfft // 2 + 1]
    k = np.arange(num_bands, dtype=float)
    low = min_freq * 2.0 ** ((2 * k - 1) / 6)
    high = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((num_bands, f.size))
    for i in range(num_bands):
        lo = int(np.argmin(np.square(f - low[i])))
        hi = int(np.argmin(np.square(f - high[i])))
        obm[i, lo:hi] = 1.0
    return obm


def _stoi_window():
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _frames(x, hop):
    w = _stoi_window()
    return np.array([w * x[i:i + STOI_FRAME] for i in range(0, len(x) - STOI_FRAME, hop)])


def _overlap_add(frames, hop):
    n_frames, frame_len = frames.shape
    out = np.zeros((n_frames - 1) * hop + frame_len)
    for i, frame in enumerate(frames):
        out[i * hop:i * hop + frame_len] += frame
    return out


def remove_silent_frames(x, y, dyn_range=STOI_DYN_RANGE, hop=STOI_FRAME // 2):
    """Drop frames whose clean energy is more than ``dyn_range`` dB below the loudest frame."""
    xf, yf = _frames(x, hop), _frames(y, hop)
    if xf.size == 0:
        raise ValueError("no active frames")
    energies = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    mask = energies > np.max(energies) - dyn_range
    if not mask.any():
        raise ValueError("no active frames")
    return _overlap_add(xf[mask], hop), _overlap_add(yf[mask], hop)


def _band_envelopes(x, obm):
    frames = _frames(x, STOI_FRAME // 2)
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1).T
    return np.sqrt(obm @ np.abs(spec) ** 2)


def stoi(clean, degraded, sample_rate=16_000):
    """Short-time objective intelligibility of ``degraded`` against ``clean`` (0..1)."""
    x = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    y = np.asarray(getattr(degraded, "samples", degraded), dtype=np.float64)
    sample_rate = getattr(clean, "sample_rate", sample_rate)
    if x.shape != y.shape:
        raise ValueError("clean and degraded must have equal lengths")
    if not np.any(x):
        raise ValueError("no active frames")
    if sample_rate != STOI_FS:
        g = math.gcd(int(sample_rate), STOI_FS)
        x = signal.resample_poly(x, STOI_FS // g, int(sample_rate) // g)
        y = signal.resample_poly(y, STOI_FS // g, int(sample_rate) // g)
    x, y = remove_silent_frames(x, y)
    obm = third_octave_bands()
    x_tob, y_tob = _band_envelopes(x, obm), _band_envelopes(y, obm)
    n_frames = x_tob.shape[1]
    if n_frames < STOI_SEGMENT:
        raise ValueError(f"only {n_frames} active frames; at least {STOI_SEGMENT} are needed")
    idx = np.arange(STOI_SEGMENT)[None, :] + np.arange(n_frames - STOI_SEGMENT + 1)[:, None]
    x_seg = x_tob[:, idx].transpose(1, 0, 2)  # segments x bands x frames
    y_seg = y_tob[:, idx].transpose(1, 0, 2)
    norm = np.linalg.norm(x_seg, axis=2, keepdims=True) / (np.linalg.norm(y_seg, axis=2, keepdims=True) + _EPS)
    y_norm = y_seg * norm
    clip = 10 ** (-STOI_BETA / 20)
    y_prime = np.minimum(y_norm, x_seg * (1 + clip))
    y_prime = y_prime - y_prime.mean(axis=2, keepdims=True)
    x_c = x_seg - x_seg.mean(axis=2, keepdims=True)
    y_prime /= np.linalg.norm(y_prime, axis=2, keepdims=True) + _EPS
    x_c /= np.linalg.norm(x_c, axis=2, keepdims=True) + _EPS
    return float(np.sum(y_prime * x_c) / (x_c.shape[0] * x_c.shape[1]))


# ------------------------------------------------------------ reporting

REPORT_COLUMNS = ["mixture_id", "snr_db", "si_sdr_in", "si_sdr_out", "stoi_in", "stoi_out"]
METRICS = ["si_sdr_in", "si_sdr_out", "stoi_in", "stoi_out"]


@dataclass
class MetricReport:
    model_tag: str
    test_set: str
    rows: list = field(default_factory=list)
    n_params: int | None = None
    structure: str = ""

    def aggregate(self):
        if not self.rows:
            return {m: float("nan") for m in METRICS}
        return {m: float(np.mean([r[m] for r in self.rows])) for m in METRICS}

    def to_csv(self, path):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: row[k] for k in REPORT_COLUMNS})
        with atomic_write(path, "w") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def from_csv(cls, path, model_tag, test_set, **kwargs):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = []
            for row in csv.DictReader(fh):
                rows.append({k: (row[k] if k == "mixture_id" else float(row[k])) for k in REPORT_COLUMNS})
        return cls(model_tag, test_set, rows, **kwargs)


TABLE_COLUMNS = ["model", "struct", "n_params", "test_set", "si_sdr_db", "stoi"]


def table_rows(reports):
    """Rows ordered as models in input order, then one "Input data" row per test set."""
    if not reports:
        raise ValueError("no reports")
    rows, inputs = [], {}
    for rep in reports:
        agg = rep.aggregate()
        rows.append({"model": rep.model_tag, "struct": rep.structure,
                     "n_params": "" if rep.n_params is None else rep.n_params,
                     "test_set": rep.test_set, "si_sdr_db": agg["si_sdr_out"], "stoi": agg["stoi_out"]})
        inputs.setdefault(rep.test_set, agg)
    for test_set, agg in inputs.items():
        rows.append({"model": "Input data", "struct": "", "n_params": "", "test_set": test_set,
                     "si_sdr_db": agg["si_sdr_in"], "stoi": agg["stoi_in"]})
    return rows


def format_table(rows):
    header = ["Model", "Struct.", "#Param.", "Test set", "SI-SDR [dB]", "STOI [%]"]
    body = [[r["model"], r["struct"], str(r["n_params"]), r["test_set"],
             f"{r['si_sdr_db']:.2f}", f"{100 * r['stoi']:.2f}"] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(v.rjust(w) if i >= 2 else v.ljust(w) for i, (v, w) in enumerate(zip(b, widths))))
    return "\n".join(lines) + "\n"


def emit_tables(reports, out_path):
    """Write ``<out>.csv`` (full precision) and ``<out>.txt`` (aligned text)."""
    rows = table_rows(reports)
    out_path = Path(out_path)
    csv_path, txt_path = out_path.with_suffix(".csv"), out_path.with_suffix(".txt")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({**r, "si_sdr_db": repr(float(r["si_sdr_db"])), "stoi": repr(float(r["stoi"]))})
    with atomic_write(csv_path, "w") as fh:
        fh.write(buf.getvalue())
    with atomic_write(txt_path, "w") as fh:
        fh.write(format_table(rows))
    return csv_path, txt_path


# --------------------------------------------------------------- images

def render_spectrogram_image(s, out_path, hop_seconds=0.00625, bin_hz=16000 / 1024, dpi=100,
                             margins=(70, 20, 20, 50)):
    """Save a PNG with one pixel per (frame, bin); time on x, frequency up.

    ``margins`` are (left, right, top, bottom) pixels around the data area.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = np.asarray(getattr(s, "values", s), dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty spectrogram")
    frames, bins = values.shape
    left, right, top, bottom = margins
    width, height = frames + left + right, bins + top + bottom
    fig = plt.figure(figsize=(width / dpi, height / dpi), dpi=dpi)
    ax = fig.add_axes((left / width, bottom / height, frames / width, bins / height))
    vmin, vmax = float(values.min()), float(values.max())
    if vmin == vmax:
        vmax = vmin + 1.0
    ax.imshow(values.T, origin="lower", aspect="auto", cmap="viridis", vmin=vmin, vmax=vmax,
              interpolation="nearest", extent=(0, frames * hop_seconds, 0, bins * bin_hz / 1000))
    ax.set_xlabel("Time [s]")
    ax.set_ylabel("Frequency [kHz]")
    with atomic_write(out_path) as fh:
        fig.savefig(fh, format="png", dpi=dpi, metadata={"Software": None})
    plt.close(fig)
    return Path(out_path)


# ------------------------------------------------------------ evaluation

def evaluate(enhancer, manifest_test, model_tag=None, test_set=None):
    """Score every record of a rendered test manifest.

    ``enhancer`` is a checkpoint path, a ``Checkpoint`` or an ``Enhancer``.
    Records whose audio cannot be read are skipped with a warning and left
    out of the report.
    """
    from .audio_io import read_wav
    from .datagen import audio_paths, read_manifest
    from .dsp import chunk_spectrogram, log_power, stft
    from .modelzoo import count_params
    from .trainer import Enhancer, chunk_shape

    if not isinstance(enhancer, Enhancer):
        enhancer = Enhancer.from_checkpoint(enhancer)
    manifest_test = Path(manifest_test)
    records = read_manifest(manifest_test)
    frames, bins = chunk_shape(enhancer.model.config)
    rows = []
    for rec in records:
        noisy_path, clean_path = audio_paths(manifest_test.parent, rec)
        try:
            noisy, clean = read_wav(noisy_path), read_wav(clean_path)
        except (OSError, ValueError, EOFError) as exc:
            logger.warning("event=skip_record mixture_id=%s reason=%r", rec.mixture_id, str(exc))
            continue
        clean_parts = chunk_spectrogram(log_power(stft(clean, enhancer.stft_config)).values, frames, bins)
        out = enhancer.enhance_waveform(noisy)
        valid = out.noisy_chunks.valid_lengths
        rows.append({
            "mixture_id": rec.mixture_id,
            "snr_db": float(rec.snr_db),
            "si_sdr_in": spectral_si_sdr(clean_parts.chunks, out.noisy_chunks.chunks, valid),
            "si_sdr_out": spectral_si_sdr(clean_parts.chunks, out.enhanced_chunks, valid),
            "stoi_in": stoi(clean, noisy),
            "stoi_out": stoi(clean, out.waveform),
        })
    cfg = enhancer.model.config
    n_params = count_params(enhancer.model) if hasattr(enhancer.model, "parameters") else None
    return MetricReport(model_tag or getattr(cfg, "variant", "model").upper(),
                        test_set or manifest_test.parent.name, rows, n_params, getattr(cfg, "structure", ""))
