"""Command-line entry point: ``wavedenoise <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import Manifest, build_manifest
from .dsp import read_wav, write_wav
from .metrics import evaluate
from .model import (
    ModelConfig,
    build_model,
    count_parameters,
    denoise,
    input_length,
    load_checkpoint,
    receptive_field,
)
from .training import TrainConfig, train
from .wiener import WienerConfig, wiener_denoise

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _snr_list(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid SNR list {text!r}") from exc


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def load_config_file(path) -> tuple[ModelConfig, dict]:
    """Read a JSON file with optional ``model`` and ``train`` sections.

    A flat object is also accepted; its keys are routed by field name.
    """
    data = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    if not isinstance(data, dict):
        raise ValueError("config file must contain a JSON object")
    if "model" in data or "train" in data:
        model_part, train_part = data.get("model", {}), data.get("train", {})
        extra = set(data) - {"model", "train"}
        if extra:
            raise ValueError(f"unknown config sections: {sorted(extra)}")
    else:
        model_fields = set(ModelConfig.__dataclass_fields__)
        model_part = {k: v for k, v in data.items() if k in model_fields}
        train_part = {k: v for k, v in data.items() if k not in model_fields}
    return ModelConfig.from_dict(model_part), train_part


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wavedenoise", description=__doc__)
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help="worker/BLAS thread cap (default: $WAVEDENOISE_THREADS or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("mix", help="build a mixing manifest from speech and noise folders")
    p.add_argument("--speech-dir", required=True)
    p.add_argument("--noise-dir", required=True)
    p.add_argument("--snrs", type=_snr_list, required=True, help="comma-separated SNRs in dB")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--speaker-map", help="JSON object mapping speaker keys to ids")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="manifest path (.jsonl)")

    p = sub.add_parser("train", help="train a denoising model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON file with model/train settings")
    p.add_argument("--steps", type=_positive_int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="model.wdnz", help="checkpoint path (default: %(default)s)")
    p.add_argument("--trace", help="CSV loss trace path")

    p = sub.add_parser("denoise", help="denoise a WAV file with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("batched", "one-shot"), default="batched")
    p.add_argument("--speaker", type=int, default=0, help="condition code (0 = any speaker)")
    p.add_argument("--float32", action="store_true", help="single-precision inference")

    p = sub.add_parser("wiener", help="denoise a WAV file with the Wiener baseline")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=WienerConfig.alpha)
    p.add_argument("--n-init", type=_positive_int, default=WienerConfig.n_init_frames)
    p.add_argument("--gain-floor-db", type=float, default=-25.0)

    p = sub.add_parser("eval", help="score systems on a test manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--model", help="checkpoint for the 'wavenet' system")
    p.add_argument("--systems", default="noisy,wiener",
                   help="comma-separated subset of noisy,wiener,wavenet (default: %(default)s)")
    p.add_argument("--mode", choices=("batched", "one-shot"), default="batched")

    p = sub.add_parser("inspect", help="print receptive field, input length and parameter count")
    p.add_argument("--config", help="JSON model config (default: the full-size model)")
    p.add_argument("--target-field", type=_positive_int)
    return parser


def _cmd_mix(args) -> None:
    speaker_map = None
    if args.speaker_map:
        speaker_map = json.loads(Path(args.speaker_map).read_text(encoding="utf-8"))
    manifest = build_manifest(args.speech_dir, args.noise_dir, args.snrs, args.split,
                              speaker_map, args.seed)
    manifest.save(args.out)
    print(f"wrote {len(manifest)} rows to {args.out}")


def _cmd_train(args) -> None:
    model_config, train_part = load_config_file(args.config)
    overrides = {"seed": args.seed, "workers": args.threads}
    if args.steps is not None:
        overrides["steps"] = args.steps
    train_config = TrainConfig.from_dict({**train_part, **overrides})
    manifest = Manifest.load(args.manifest)
    model = build_model(model_config, args.seed)
    result = train(model, manifest, train_config, args.out, args.trace)
    print(f"trained {train_config.steps} steps, final loss {result.losses[-1]:.6f}; wrote {args.out}")


def _cmd_denoise(args) -> None:
    model = load_checkpoint(args.model)
    noisy = read_wav(args.input)
    out = denoise(model, noisy, args.speaker, args.mode, dtype=np.float32 if args.float32 else None)
    write_wav(out, args.out)


def _wiener_config(args) -> WienerConfig:
    return WienerConfig(alpha=args.alpha, n_init_frames=args.n_init,
                        gain_floor=10 ** (args.gain_floor_db / 20))


def _cmd_wiener(args) -> None:
    write_wav(wiener_denoise(read_wav(args.input), _wiener_config(args)), args.out)


def _cmd_eval(args) -> None:
    names = [s.strip() for s in args.systems.split(",") if s.strip()]
    unknown = set(names) - {"noisy", "wiener", "wavenet"}
    if unknown:
        raise UsageError(f"unknown systems: {sorted(unknown)}")
    if "wavenet" in names and not args.model:
        raise UsageError("--model is required for the wavenet system")
    systems = {}
    for name in names:
        if name == "noisy":
            systems[name] = lambda x: x
        elif name == "wiener":
            systems[name] = lambda x: wiener_denoise(x, WienerConfig())
        else:
            model = load_checkpoint(args.model)
            systems[name] = lambda x, m=model: denoise(m, x, 0, args.mode)
    report = evaluate(systems, Manifest.load(args.manifest), args.out)
    for (system, snr), values in report.aggregates().items():
        print(f"{system:8s} snr={snr:5.1f}  si_sdr={values['si_sdr_db']:7.2f} dB  "
              f"seg_snr={values['seg_snr_db']:6.2f} dB  "
              f"si_sdr_imp={values['si_sdr_improvement_db']:6.2f} dB")


def _cmd_inspect(args) -> None:
    config, _ = load_config_file(args.config)
    tf = args.target_field or config.target_field
    print(f"receptive_field {receptive_field(config)}")
    print(f"target_field {tf}")
    print(f"input_length {input_length(config, tf)}")
    print(f"param_count {count_parameters(config)}")


COMMANDS = {"mix": _cmd_mix, "train": _cmd_train, "denoise": _cmd_denoise,
            "wiener": _cmd_wiener, "eval": _cmd_eval, "inspect": _cmd_inspect}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is None:
        env = os.environ.get("WAVEDENOISE_THREADS", "1")
        try:
            args.threads = _positive_int(env)
        except (ValueError, argparse.ArgumentTypeError):
            parser.print_usage(sys.stderr)
            print(f"wavedenoise: error: invalid WAVEDENOISE_THREADS={env!r}", file=sys.stderr)
            return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(args.threads):
            COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"wavedenoise: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"wavedenoise: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())
