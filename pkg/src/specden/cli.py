"""Command line entry point: ``specden {mix,train,enhance,evaluate,report}``."""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .modelzoo import VARIANTS

log = logging.getLogger("specden")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def parse_snr_grid(text):
    """``"0:20:1"`` (inclusive start:stop:step) or ``"0,5,10"``."""
    text = text.strip()
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
                raise ValueError
            start, stop, step = parts
            n = int(round((stop - start) / step))
            values = [start + k * step for k in range(n + 1)]
            if abs(values[-1] - stop) > 1e-9 * max(1.0, abs(stop)):
                raise ValueError
            return [round(v, 10) for v in values]
        values = [float(v) for v in text.split(",") if v.strip()]
        if not values:
            raise ValueError
        return values
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid SNR grid {text!r}; use start:stop:step or a comma list") from None


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {v}")
    return v


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2**64)")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="specden", description="Spectral speech denoising pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", type=Path, help="INI file; keys under [<subcommand>] or [specden] set defaults")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="cap BLAS/OpenMP worker threads (1 = fully deterministic)")
    sub = p.add_subparsers(dest="command", metavar="{mix,train,enhance,evaluate,report}")

    m = sub.add_parser("mix", help="render a noisy/clean mixture set and its manifest")
    m.add_argument("--speech-dir", required=True)
    m.add_argument("--noise-dir", required=True)
    m.add_argument("--rir-dir")
    m.add_argument("--hours", type=float, default=1.0, help="target total duration in hours")
    m.add_argument("--snr-grid", type=parse_snr_grid, default=parse_snr_grid("0:20:1"))
    m.add_argument("--duration", type=float, default=30.0, help="seconds per mixture")
    m.add_argument("--split", choices=["train", "val", "test"], default="train")
    m.add_argument("--seed", type=_seed, default=0)
    m.add_argument("--out", required=True, type=Path)

    t = sub.add_parser("train", help="train a model on rendered manifests")
    t.add_argument("--manifest", required=True, type=Path)
    t.add_argument("--val", type=Path)
    t.add_argument("--model", choices=list(VARIANTS), default="dvunet")
    t.add_argument("--depth", type=_positive_int, default=5)
    t.add_argument("--base-channels", type=_positive_int, default=16)
    t.add_argument("--chunk-frames", type=_positive_int, default=512)
    t.add_argument("--chunk-bins", type=_positive_int, default=512)
    t.add_argument("--kl-weight", type=float, default=1e-3)
    t.add_argument("--epochs", type=_positive_int, default=200)
    t.add_argument("--patience", type=_positive_int, default=10)
    t.add_argument("--warmup", type=_positive_int, default=500)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=_positive_int, default=8)
    t.add_argument("--val-per-epoch", type=_positive_int, default=2)
    t.add_argument("--max-steps", type=_positive_int)
    t.add_argument("--seed", type=_seed, default=0)
    t.add_argument("--out", required=True, type=Path)

    e = sub.add_parser("enhance", help="enhance one WAV file with a checkpoint")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--in", dest="input", required=True, type=Path)
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("--image", action="store_true", help="also write PNGs of the first noisy and enhanced chunk")

    v = sub.add_parser("evaluate", help="score a checkpoint on a rendered test manifest")
    v.add_argument("--ckpt", required=True, type=Path)
    v.add_argument("--manifest", required=True, type=Path)
    v.add_argument("--tag", help="model name in tables (default: variant name)")
    v.add_argument("--test-set", help="test-set name in tables (default: manifest directory name)")
    v.add_argument("--out", required=True, type=Path)

    r = sub.add_parser("report", help="combine evaluate outputs into one table")
    r.add_argument("--in", dest="inputs", nargs="+", required=True, type=Path)
    r.add_argument("--out", required=True, type=Path, help="output path stem; .csv and .txt are written")
    return p


def _apply_config_file(parser, argv):
    """Turn INI keys into parser defaults so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    cp = configparser.ConfigParser()
    if not cp.read(known.config):
        raise UsageError(f"--config: cannot read {known.config}")
    command = next((a for a in argv if a in {"mix", "train", "enhance", "evaluate", "report"}), None)
    sub_actions = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    targets = [("specden", parser)]
    if command:
        targets.append((command, sub_actions.choices[command]))
    for section, target in targets:
        if not cp.has_section(section):
            continue
        by_dest = {a.dest: a for a in target._actions}
        defaults = {}
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            action = by_dest.get(dest) or by_dest.get({"in": "input"}.get(dest, dest))
            if action is None:
                raise UsageError(f"--config: unknown key {key!r} in [{section}]")
            if action.type is not None:
                try:
                    value = action.type(raw)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise UsageError(f"--config: invalid value for {key}: {exc}") from None
            else:
                value = raw
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"--config: {key} must be one of {list(action.choices)}")
            action.required = False
            defaults[action.dest] = value
        target.set_defaults(**defaults)


def parse_args(argv):
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)
    try:
        _apply_config_file(parser, argv)
    except UsageError as exc:
        parser.error(str(exc))
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)
    return args


class _KeyValueFormatter(logging.Formatter):
    converter = time.gmtime

    def __init__(self):
        super().__init__("%(asctime)s level=%(levelname)s %(message)s", "%Y-%m-%dT%H:%M:%SZ")

    def format(self, record):
        if not record.getMessage().startswith("event="):
            record.msg, record.args = "event=message text=%r", (record.getMessage(),)
        return super().format(record)


def setup_logging(level):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KeyValueFormatter())
    root = logging.getLogger("specden")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


# ------------------------------------------------------------- commands

def cmd_mix(args):
    from .datagen import ManifestSpec, render_manifest

    spec = ManifestSpec(args.speech_dir, args.noise_dir, args.rir_dir, target_hours=args.hours,
                        snr_grid=args.snr_grid, seed=args.seed, split=args.split, duration_s=args.duration)
    path, records = render_manifest(spec, args.out)
    log.info("event=mix_done manifest=%s mixtures=%d", path, len(records))


def cmd_train(args):
    from .modelzoo import ModelConfig, count_params
    from .trainer import TrainConfig, train

    mcfg = ModelConfig.from_variant(args.model, depth_N=args.depth, base_channels=args.base_channels,
                                    kl_weight=args.kl_weight, input_shape=(1, args.chunk_frames, args.chunk_bins))
    tcfg = TrainConfig(max_epochs=args.epochs, patience_validations=args.patience, warmup_batches=args.warmup,
                       peak_lr=args.lr, batch_size=args.batch_size, validations_per_epoch=args.val_per_epoch,
                       seed=args.seed, kl_weight=args.kl_weight, max_steps=args.max_steps)
    log.info("event=train_start model=%s struct=%s depth=%d base_channels=%d", mcfg.variant, mcfg.structure,
             mcfg.depth_N, mcfg.base_channels)
    ckpt = train(args.manifest, args.val, mcfg, tcfg, args.out)
    log.info("event=train_done steps=%d params=%d checkpoint=%s", len(ckpt.history),
             count_params(ckpt.build_model()), args.out / "best.spck")


def cmd_enhance(args):
    from .trainer import enhance_file

    report = enhance_file(args.ckpt, args.input, args.out)
    if args.image:
        from .metrics import render_spectrogram_image

        stem = args.out.with_suffix("")
        render_spectrogram_image(report.noisy_chunks.chunks[0], f"{stem}_noisy.png")
        render_spectrogram_image(report.enhanced_chunks[0], f"{stem}_enhanced.png")
    log.info("event=enhance_done out=%s samples=%d chunks=%d", args.out, len(report.waveform),
             len(report.enhanced_chunks))


def cmd_evaluate(args):
    from .audio_io import atomic_write
    from .metrics import evaluate

    report = evaluate(args.ckpt, args.manifest, args.tag, args.test_set)
    args.out.mkdir(parents=True, exist_ok=True)
    report.to_csv(args.out / "report.csv")
    meta = {"model_tag": report.model_tag, "test_set": report.test_set, "n_params": report.n_params,
            "structure": report.structure, "aggregate": report.aggregate(), "rows": len(report.rows)}
    with atomic_write(args.out / "report.json", "w") as fh:
        fh.write(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    agg = report.aggregate()
    log.info("event=evaluate_done rows=%d si_sdr_in=%.3f si_sdr_out=%.3f stoi_in=%.4f stoi_out=%.4f",
             len(report.rows), agg["si_sdr_in"], agg["si_sdr_out"], agg["stoi_in"], agg["stoi_out"])


def load_report_dir(path):
    from .metrics import MetricReport

    path = Path(path)
    meta = json.loads((path / "report.json").read_text(encoding="utf-8"))
    return MetricReport.from_csv(path / "report.csv", meta["model_tag"], meta["test_set"],
                                 n_params=meta.get("n_params"), structure=meta.get("structure", ""))


def cmd_report(args):
    from .metrics import emit_tables

    reports = [load_report_dir(p) for p in args.inputs]
    csv_path, txt_path = emit_tables(reports, args.out)
    log.info("event=report_done csv=%s txt=%s", csv_path, txt_path)


COMMANDS = {"mix": cmd_mix, "train": cmd_train, "enhance": cmd_enhance, "evaluate": cmd_evaluate,
            "report": cmd_report}


def run(args):
    setup_logging(args.log_level)
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                COMMANDS[args.command](args)
        else:
            COMMANDS[args.command](args)
    except Exception as exc:  # surfaced as a runtime failure with the module's message
        log.error("event=failed command=%s error=%r", args.command, str(exc))
        log.debug("event=traceback", exc_info=True)
        return EXIT_FAILURE
    return EXIT_OK


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
