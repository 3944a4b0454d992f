"""Acceptance criteria; each test prints one PASS/FAIL line (collected in the terminal summary)."""

import csv
import math
import time

import numpy as np
import pytest

from specden.audio_io import read_wav, write_wav
from specden.cli import main
from specden.datagen import default_snr_grid, measured_snr_db, mix, normalize_utterance
from specden.difftensor import (
    LatentStats,
    Tensor,
    batchnorm2d,
    check_gradients,
    clamp,
    concat_channels,
    conv2d,
    conv2d_transposed,
    depthwise_conv2d,
    depthwise_separable_conv,
    kl_standard_normal,
    maxpool2,
    mse,
    prelu,
    reparameterize,
)
from specden.dsp import Waveform, chunk_spectrogram, istft_with_phase, log_power, phase_of, stft
from specden.metrics import TABLE_COLUMNS, si_sdr, spectral_si_sdr, stoi
from specden.modelzoo import VARIANTS, ModelConfig, build_model
from specden.preprocessing import FeatureStandardizer
from specden.toy import impulse_response, noise_like, speech_like, write_toy_corpus
from specden.trainer import Checkpoint, Enhancer, TrainConfig, enhance_file, evaluate_loss, fit_chunks

SR = 16_000


# ------------------------------------------------------------------ 1

def test_c01_dsp_round_trip(acceptance):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(SR) * rng.uniform(0.01, 1.0)
        c = stft(Waveform(x))
        y = istft_with_phase(log_power(c), phase_of(c), out_len=len(x)).samples
        worst = max(worst, float(np.sqrt(np.mean((y - x) ** 2) / np.mean(x ** 2))))
    elapsed = time.perf_counter() - start
    acceptance("C1 STFT round trip", worst <= 1e-6 and elapsed < 10,
               f"max rel RMS {worst:.2e} (<= 1e-6), {elapsed:.1f}s (< 10s)")


# ------------------------------------------------------------------ 2

def _shape(rng, channels=None):
    b, c, h, w = rng.integers(1, 3), rng.integers(1, 4), 2 * rng.integers(2, 5), 2 * rng.integers(2, 5)
    return (int(b), int(c if channels is None else channels), int(h), int(w))


def _projected(fn, out_shape, rng):
    r = rng.standard_normal(out_shape)
    return lambda *ts: (fn(*ts) * Tensor(r)).sum()


def _away_from_zero(rng, shape, low=0.05):
    return rng.uniform(low, 1.0, shape) * rng.choice([-1.0, 1.0], shape)


def _op_cases(rng):
    """(name, scalar build function, input arrays, tolerance) for one random draw."""
    cases = []
    b, c, h, w = _shape(rng)
    o = int(rng.integers(1, 4))
    d = int(rng.integers(1, 3))
    x = rng.standard_normal((b, c, h, w))
    cases.append(("conv2d", _projected(lambda x, k, bias: conv2d(x, k, bias, dilation=d), (b, o, h, w), rng),
                  [x, rng.standard_normal((o, c, 3, 3)), rng.standard_normal(o)], 1e-4))
    cases.append(("conv2d stride 2 valid",
                  _projected(lambda x, k: conv2d(x, k, stride=2, padding="valid"), (b, o, h // 2, w // 2), rng),
                  [x, rng.standard_normal((o, c, 2, 2))], 1e-4))
    cases.append(("depthwise_conv2d", _projected(lambda x, k, bias: depthwise_conv2d(x, k, bias, dilation=d),
                                                 (b, c, h, w), rng),
                  [x, rng.standard_normal((c, 1, 3, 3)), rng.standard_normal(c)], 1e-4))
    cases.append(("depthwise_separable_conv",
                  _projected(lambda *t: depthwise_separable_conv(*t, dilation=d), (b, o, h, w), rng),
                  [x, rng.standard_normal((c, 1, 3, 3)), rng.standard_normal((o, c, 1, 1)),
                   rng.standard_normal(c), rng.standard_normal(o)], 1e-4))
    xs = rng.standard_normal((b, c, h // 2, w // 2))
    cases.append(("conv2d_transposed", _projected(conv2d_transposed, (b, o, h, w), rng),
                  [xs, rng.standard_normal((c, o, 2, 2)), rng.standard_normal(o)], 1e-4))
    cases.append(("maxpool2", _projected(maxpool2, (b, c, h // 2, w // 2), rng), [x], 1e-4))
    bn_in = rng.standard_normal((max(b, 2), c, h, w))
    cases.append(("batchnorm2d train",
                  _projected(lambda x, g, beta: batchnorm2d(x, g, beta, None, mode="train"), bn_in.shape, rng),
                  [bn_in, rng.uniform(0.5, 1.5, c), rng.standard_normal(c)], 1e-3))
    cases.append(("prelu", _projected(prelu, (b, c, h, w), rng),
                  [_away_from_zero(rng, (b, c, h, w)), rng.uniform(0.05, 0.5, c)], 1e-4))
    other = rng.standard_normal((b, o, h, w))
    cases.append(("concat_channels", _projected(concat_channels, (b, c + o, h, w), rng), [x, other], 1e-4))
    inner = rng.uniform(-0.9, 0.9, (b, c, h, w))
    outer = rng.uniform(1.1, 2.0, (b, c, h, w)) * rng.choice([-1.0, 1.0], (b, c, h, w))
    mask = rng.random((b, c, h, w)) < 0.5
    cases.append(("clamp", _projected(lambda t: clamp(t, -1.0, 1.0), (b, c, h, w), rng),
                  [np.where(mask, inner, outer)], 1e-4))
    eps = rng.standard_normal((b, c, h, w))
    cases.append(("reparameterize",
                  _projected(lambda m, v: reparameterize(LatentStats(m, v), noise=eps), eps.shape, rng),
                  [rng.standard_normal(eps.shape), rng.standard_normal(eps.shape)], 1e-4))
    cases.append(("kl_standard_normal", lambda m, v: kl_standard_normal(LatentStats(m, v)),
                  [rng.standard_normal(eps.shape), rng.standard_normal(eps.shape)], 1e-4))
    target = rng.standard_normal((b, c, h, w))
    cases.append(("mse", lambda p: mse(p, target), [x], 1e-4))
    cases.append(("add/multiply", _projected(lambda p, q: p * q + p, (b, c, h, w), rng),
                  [x, rng.standard_normal((b, c, h, w))], 1e-4))
    return cases


def test_c02_gradient_suite(acceptance):
    start = time.perf_counter()
    worst, failures = {}, []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for name, build, arrays, tol in _op_cases(rng):
            err = max(check_gradients(build, arrays))
            worst[name] = max(worst.get(name, 0.0), err)
            if not err < tol:
                failures.append(f"{name} seed {seed}: {err:.2e}")
    elapsed = time.perf_counter() - start
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    acceptance("C2 gradient suite", not failures and elapsed < 120,
               f"{len(worst)} ops x 20 seeds, {elapsed:.1f}s (< 120s); worst rel err: {summary}"
               + (f"; failures: {failures}" if failures else ""))


# ------------------------------------------------------------------ 3

def test_c03_closed_form_kl(acceptance):
    cases = [((0.0, 0.0), 0.0), ((1.0, 0.0), 0.5), ((0.0, 1.0), (math.e - 2) / 2)]
    errs = []
    for (mu, log_var), expected in cases:
        stats = LatentStats(np.full((1, 1, 1, 1), mu), np.full((1, 1, 1, 1), log_var))
        errs.append(abs(kl_standard_normal(stats).item() - expected))
    acceptance("C3 closed-form KL", max(errs) <= 1e-9, f"max abs error {max(errs):.1e} (<= 1e-9)")


# ------------------------------------------------------------------ 4

def test_c04_mixer_snr_accuracy(acceptance):
    grid = default_snr_grid()
    rng = np.random.default_rng(7)
    rirs = [impulse_response(seed=s) for s in range(3)]
    worst = 0.0
    for k in range(200):
        snr = grid[k % len(grid)] if k < 2 * len(grid) else float(rng.choice(grid))
        speech = normalize_utterance(speech_like(1.0, seed=int(rng.integers(1 << 31))))
        noise = noise_like(1.0, seed=int(rng.integers(1 << 31)), color=float(rng.choice([0.0, 1.0, 2.0])))
        rir = rirs[k % 3] if k % 4 == 0 else None
        m = mix(speech, noise, snr, rir=rir)
        worst = max(worst, abs(measured_snr_db(m.clean.samples, m.noise.samples) - snr))
    acceptance("C4 mixer SNR accuracy", worst <= 0.01, f"200 mixtures, max |measured - requested| {worst:.1e} dB")


# ------------------------------------------------------------------ 5 and 9

CHUNK_SAMPLES = 511 * 100  # 512 frames at hop 100: one 3.2 s chunk
OVERFIT_STEPS = 500


@pytest.fixture(scope="module")
def overfit_data():
    m = mix(normalize_utterance(speech_like(CHUNK_SAMPLES / SR, seed=1)), noise_like(CHUNK_SAMPLES / SR, seed=2), 5.0)
    noisy_lp, clean_lp = log_power(stft(m.noisy)).values, log_power(stft(m.clean)).values
    standardizer = FeatureStandardizer().fit(noisy_lp)
    noisy_chunks, clean_chunks = chunk_spectrogram(noisy_lp), chunk_spectrogram(clean_lp)
    assert len(noisy_chunks) == 1
    x = standardizer.transform(noisy_chunks.chunks)[:, None].astype(np.float32)
    y = standardizer.transform(clean_chunks.chunks)[:, None].astype(np.float32)
    return {"mixture": m, "standardizer": standardizer, "x": x, "y": y,
            "noisy_chunks": noisy_chunks, "clean_chunks": clean_chunks}


_OVERFIT_CACHE = {}


def overfit(variant, data):
    if variant not in _OVERFIT_CACHE:
        model = build_model(ModelConfig.from_variant(variant, depth_N=3, base_channels=8), init_seed=0)
        cfg = TrainConfig(batch_size=1, warmup_batches=1, max_steps=OVERFIT_STEPS, max_epochs=OVERFIT_STEPS, seed=0)
        trace = {}

        def on_step(step, parts):
            trace[step] = parts.mse
            return step > 10 and parts.mse <= 0.1 * trace[10]

        start = time.perf_counter()
        result = fit_chunks(model, data["x"], data["y"], cfg, on_step=on_step)
        elapsed = time.perf_counter() - start
        eval_mse = evaluate_loss(model, data["x"], data["y"], TrainConfig(batch_size=1, kl_weight=0.0))
        _OVERFIT_CACHE[variant] = {"model": model, "steps": result.steps, "mse10": trace[10],
                                   "mse_final": trace[result.steps], "seconds": elapsed, "eval_mse": eval_mse}
    return _OVERFIT_CACHE[variant]


@pytest.mark.slow
@pytest.mark.parametrize("variant", list(VARIANTS))
def test_c05_overfit_single_chunk(variant, overfit_data, acceptance):
    run = overfit(variant, overfit_data)
    reduction = 1.0 - run["mse_final"] / run["mse10"]
    acceptance(f"C5 overfit {variant.upper()}", reduction >= 0.9 and run["seconds"] < 300,
               f"train MSE {run['mse10']:.3f} (step 10) -> {run['mse_final']:.3f} (step {run['steps']}), "
               f"reduction {100 * reduction:.1f}% (>= 90%), {run['seconds']:.0f}s (< 300s); "
               f"info: eval-mode MSE {run['eval_mse']:.3f}")


@pytest.mark.slow
def test_c09_enhancement_sanity(overfit_data, acceptance, tmp_path):
    run = overfit("dvunet", overfit_data)
    enhancer = Enhancer(run["model"], overfit_data["standardizer"])
    m = overfit_data["mixture"]
    _, parts, enhanced = enhancer.enhance_log_power(log_power(stft(m.noisy)).values)
    clean = overfit_data["clean_chunks"]
    before = spectral_si_sdr(clean.chunks, parts.chunks, clean.valid_lengths)
    after = spectral_si_sdr(clean.chunks, enhanced, clean.valid_lengths)

    long = mix(normalize_utterance(speech_like(30.0, seed=11)), noise_like(30.0, seed=12), 5.0)
    write_wav(tmp_path / "noisy30.wav", long.noisy)
    enhance_file(enhancer, tmp_path / "noisy30.wav", tmp_path / "enhanced30.wav")
    out = read_wav(tmp_path / "enhanced30.wav")
    wav_ok = (out.sample_rate == SR and len(out) == 30 * SR and np.all(np.isfinite(out.samples))
              and np.max(np.abs(out.samples)) <= 0.999 + 1 / 32768)
    acceptance("C9 enhancement sanity", after >= before + 3.0 and wav_ok,
               f"spectral SI-SDR noisy {before:.2f} dB -> enhanced {after:.2f} dB (gain {after - before:+.2f}, "
               f">= +3 dB); 30 s WAV: {len(out)} samples at {out.sample_rate} Hz, valid={wav_ok}")


# ------------------------------------------------------------------ 6

SKIP_FRAMES = SKIP_BINS = 64
SKIP_STEPS = 2000


def _skip_dataset():
    """20 speech-like signals x 10 noise draws, one 64x64 chunk each; speakers 16-19 are held out."""
    n = (SKIP_FRAMES - 1) * 100
    rng = np.random.default_rng(99)
    grid = default_snr_grid()
    noisy, clean = [], []
    for s in range(20):
        speech = normalize_utterance(speech_like(n / SR, seed=1000 + s))
        for k in range(10):
            noise = noise_like(n / SR, seed=5000 + 10 * s + k, color=float(k % 3))
            m = mix(speech, noise, float(rng.choice(grid)))
            noisy.append(log_power(stft(m.noisy)).values[:SKIP_FRAMES, :SKIP_BINS])
            clean.append(log_power(stft(m.clean)).values[:SKIP_FRAMES, :SKIP_BINS])
    noisy, clean = np.stack(noisy), np.stack(clean)
    std = FeatureStandardizer().fit(noisy[:160])
    x = std.transform(noisy)[:, None].astype(np.float32)
    y = std.transform(clean)[:, None].astype(np.float32)
    return x[:160], y[:160], x[160:], y[160:]


@pytest.mark.slow
def test_c06_skip_connections_help(acceptance):
    xt, yt, xv, yv = _skip_dataset()
    cfg_eval = TrainConfig(batch_size=8, kl_weight=0.0)
    results = []
    start = time.perf_counter()
    for seed in range(3):
        val = {}
        for variant in ("unet", "ae"):
            mcfg = ModelConfig.from_variant(variant, depth_N=3, base_channels=8,
                                            input_shape=(1, SKIP_FRAMES, SKIP_BINS))
            model = build_model(mcfg, init_seed=seed)
            cfg = TrainConfig(batch_size=4, warmup_batches=100, max_steps=SKIP_STEPS, max_epochs=SKIP_STEPS,
                              seed=seed)
            fit_chunks(model, xt, yt, cfg)
            val[variant] = evaluate_loss(model, xv, yv, cfg_eval)
        results.append(val)
    elapsed = time.perf_counter() - start
    ok = all(r["unet"] < r["ae"] for r in results)
    detail = "; ".join(f"seed {i}: UNET {r['unet']:.4f} vs AE {r['ae']:.4f}" for i, r in enumerate(results))
    acceptance("C6 skip necessity", ok, f"val MSE after {SKIP_STEPS} steps, {detail} ({elapsed:.0f}s)")


# ------------------------------------------------------------------ 7

def test_c07_si_sdr_properties(acceptance):
    rng = np.random.default_rng(3)
    scale_err = closed_err = 0.0
    for _ in range(200):
        s, e = rng.standard_normal(256), rng.standard_normal(256)
        alpha = 10 ** rng.uniform(-3, 3)
        scale_err = max(scale_err, abs(si_sdr(s, alpha * e) - si_sdr(s, e)))
        s0, n0 = s - s.mean(), e - e.mean()
        n0 -= (n0 @ s0) / (s0 @ s0) * s0
        n0 *= rng.uniform(0.01, 10)
        closed_err = max(closed_err, abs(si_sdr(s0, s0 + n0) - 10 * math.log10((s0 @ s0) / (n0 @ n0))))
    ident = si_sdr(s, s)
    ok = scale_err <= 1e-9 and closed_err <= 1e-9 and ident == 100.0
    acceptance("C7 SI-SDR properties", ok,
               f"scale invariance {scale_err:.1e}, orthogonal closed form {closed_err:.1e} (<= 1e-9), "
               f"identity {ident} dB")


# ------------------------------------------------------------------ 8

def test_c08_stoi_properties(acceptance):
    speech = [normalize_utterance(speech_like(3.0, seed=200 + k)) for k in range(10)]
    ident = max(abs(stoi(x, x) - 1.0) for x in speech[:3])
    monotone = []
    for k, x in enumerate(speech):
        noise = noise_like(3.0, seed=300 + k, color=float(k % 3))
        scores = [stoi(m.clean, m.noisy) for m in (mix(x, noise, snr) for snr in (0, 5, 10, 15, 20))]
        monotone.append(all(b >= a for a, b in zip(scores, scores[1:])))
    detail = f"identity |stoi-1| {ident:.1e} (<= 1e-6), monotone pairs {sum(monotone)}/10"
    ok = ident <= 1e-6 and all(monotone)
    try:
        import pystoi
    except ImportError:
        detail += "; reference implementation not installed (optional check skipped)"
    else:
        diffs = []
        for k in range(20):
            x = speech[k % 10]
            m = mix(x, noise_like(3.0, seed=400 + k, color=float(k % 3)), float(k % 21))
            diffs.append(abs(stoi(m.clean, m.noisy) - pystoi.stoi(m.clean.samples, m.noisy.samples, SR)))
        ok = ok and max(diffs) <= 0.01
        detail += f"; max |ours - pystoi| over 20 mixtures {max(diffs):.1e} (<= 0.01)"
    acceptance("C8 STOI properties", ok, detail)


# ------------------------------------------------------------------ 10 and 11

@pytest.fixture(scope="module")
def toy_sets(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    corpus = write_toy_corpus(root / "corpus", n_speech=6, n_noise=3, speech_seconds=25, noise_seconds=15, n_rir=2)
    common = ["--speech-dir", str(corpus / "speech"), "--noise-dir", str(corpus / "noise"), "--duration", "10"]
    plan = [("train", "train", 2 / 60, 1, []), ("val", "val", 0.5 / 60, 2, []),
            ("clean", "test", 0.5 / 60, 3, []), ("reverb", "test", 0.5 / 60, 4, ["--rir-dir", str(corpus / "rir")])]
    for name, split, hours, seed, extra in plan:
        code = main(["mix", *common, *extra, "--hours", str(hours), "--split", split, "--seed", str(seed),
                     "--out", str(root / name)])
        assert code == 0
    return root


def test_c10_determinism(toy_sets, tmp_path, acceptance):
    args = ["--threads", "1", "train", "--manifest", str(toy_sets / "train" / "manifest.jsonl"),
            "--model", "dvunet", "--depth", "3", "--base-channels", "8", "--batch-size", "2",
            "--warmup", "5", "--max-steps", "10", "--seed", "3"]
    codes = [main([*args, "--out", str(tmp_path / run)]) for run in ("a", "b")]

    def losses(run):
        with open(tmp_path / run / "history.csv", newline="") as fh:
            return [row["train_loss"] for row in csv.DictReader(fh)]

    trace_a, trace_b = losses("a"), losses("b")
    same_trace = codes == [0, 0] and len(trace_a) == 10 and trace_a == trace_b

    ckpt = Checkpoint.load(tmp_path / "a" / "best.spck")
    ckpt.save(tmp_path / "copy.spck")
    again = Checkpoint.load(tmp_path / "copy.spck")
    x = np.random.default_rng(0).standard_normal((1, 1, 512, 512)).astype(np.float32)
    out1 = ckpt.build_model().forward(x, mode="eval")[0].data
    out2 = again.build_model().forward(x, mode="eval")[0].data
    same_forward = out1.tobytes() == out2.tobytes()
    same_bytes = (tmp_path / "a" / "best.spck").read_bytes() == (tmp_path / "copy.spck").read_bytes()
    acceptance("C10 determinism", same_trace and same_forward,
               f"10-step loss traces identical={same_trace}, checkpoint round-trip forward bit-identical="
               f"{same_forward} (file bytes identical={same_bytes})")


@pytest.mark.slow
def test_c11_end_to_end_smoke(toy_sets, tmp_path, acceptance):
    start = time.perf_counter()
    codes = [main(["--threads", "1", "train", "--manifest", str(toy_sets / "train" / "manifest.jsonl"),
                   "--val", str(toy_sets / "val" / "manifest.jsonl"), "--model", "dvunet", "--depth", "3",
                   "--base-channels", "8", "--batch-size", "2", "--warmup", "20", "--max-steps", "200",
                   "--out", str(tmp_path / "run")])]
    ckpt = str(tmp_path / "run" / "best.spck")
    noisy = sorted((toy_sets / "clean").glob("*_noisy.wav"))[0]
    codes.append(main(["enhance", "--ckpt", ckpt, "--in", str(noisy), "--out", str(tmp_path / "enh.wav"),
                       "--image"]))
    for name in ("clean", "reverb"):
        codes.append(main(["evaluate", "--ckpt", ckpt, "--manifest", str(toy_sets / name / "manifest.jsonl"),
                           "--out", str(tmp_path / f"eval_{name}")]))
    codes.append(main(["report", "--in", str(tmp_path / "eval_clean"), str(tmp_path / "eval_reverb"),
                       "--out", str(tmp_path / "table")]))
    elapsed = time.perf_counter() - start
    with open(tmp_path / "table.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    shaped = (list(rows[0]) == TABLE_COLUMNS
              and [(r["model"], r["test_set"]) for r in rows] == [
                  ("DVUNET", "clean"), ("DVUNET", "reverb"), ("Input data", "clean"), ("Input data", "reverb")])
    ok = all(c == 0 for c in codes) and shaped and elapsed < 900
    table = " | ".join(f"{r['model']}/{r['test_set']}: SI-SDR {float(r['si_sdr_db']):.2f} STOI {float(r['stoi']):.3f}"
                       for r in rows)
    acceptance("C11 end-to-end smoke", ok,
               f"exit codes {codes}, table shaped={shaped}, {elapsed:.0f}s (< 900s); {table}")
