"""Command-line entry point: ``modkf enhance | train-prior | compare``.

Exit codes: 0 ok, 1 usage, 2 I/O, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from modkf.errors import AudioFormatError, DegenerateError, GeometryError, NumericError
from modkf.pipeline import EnhancerConfig, enhance, load_config_file, metrics
from modkf.priors import load_prior, save_prior, train_global_prior
from modkf.stft import FramingConfig, read_wav, write_wav
from modkf.update import UpdateVariant

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="modkf", description="Modulation-domain Kalman filter speech enhancement.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("enhance", help="enhance a noisy mono WAV file")
    e.add_argument("input", type=Path)
    e.add_argument("output", type=Path)
    e.add_argument("--variant", choices=[v.value for v in UpdateVariant],
                   help="update variant (overrides the config file; default st)")
    e.add_argument("--config", type=Path, help="flat key = value settings file (TOML syntax)")
    e.add_argument("--prior", type=Path, help="global speech prior model (.mkf)")
    e.add_argument("--report", type=Path, help="write a JSON-lines report here")
    e.add_argument("--emit-tracks", type=Path, metavar="DIR",
                   help="write per-bin CSV tracks into DIR")
    e.add_argument("--reference", type=Path, help="clean reference WAV; adds metrics to the report")
    e.add_argument("--format", choices=["int16", "float32"], default="int16",
                   help="output sample format (default int16)")

    t = sub.add_parser("train-prior", help="train a global speech prior from clean WAV files")
    t.add_argument("clean_dir", type=Path)
    t.add_argument("model", type=Path)
    t.add_argument("--frame-ms", type=float, default=32.0)
    t.add_argument("--hop-ms", type=float, default=8.0)

    c = sub.add_parser("compare", help="segmental SNR and log-spectral distance of test vs reference")
    c.add_argument("reference", type=Path)
    c.add_argument("test", type=Path)
    return parser


def _config(args, rate: int) -> EnhancerConfig:
    values = load_config_file(args.config) if args.config else {}
    if args.variant:
        values["variant"] = args.variant
    return EnhancerConfig.from_mapping(values, rate)


def _cmd_enhance(args) -> int:
    noisy, rate = read_wav(args.input)
    cfg = _config(args, rate)
    prior = load_prior(args.prior) if args.prior else None
    reference = None
    if args.reference:
        reference, ref_rate = read_wav(args.reference)
        if ref_rate != rate:
            raise AudioFormatError(f"reference rate {ref_rate} != input rate {rate}")
    out, report = enhance(noisy, cfg, global_prior=prior, reference=reference)
    write_wav(args.output, out, rate, fmt=args.format)
    if args.report:
        report.write_jsonl(args.report)
    if args.emit_tracks:
        report.write_tracks(args.emit_tracks)
    summary = report.summary()
    print(json.dumps({k: summary[k] for k in ("variant", "frames", "bins", "flags")}))
    return EXIT_OK


def _cmd_train(args) -> int:
    if not args.clean_dir.is_dir():
        raise FileNotFoundError(f"{args.clean_dir} is not a directory")
    files = sorted(args.clean_dir.glob("*.wav"))
    if not files:
        raise FileNotFoundError(f"no .wav files in {args.clean_dir}")
    _, rate = read_wav(files[0])
    cfg = FramingConfig.from_rate(rate, frame_ms=args.frame_ms, hop_ms=args.hop_ms)
    prior = train_global_prior(files, cfg)
    save_prior(prior, args.model)
    print(json.dumps({"files": len(files), "bins": prior.n_bins, "sample_rate": rate}))
    return EXIT_OK


def _cmd_compare(args) -> int:
    ref, rate = read_wav(args.reference)
    test, test_rate = read_wav(args.test)
    if rate != test_rate:
        raise AudioFormatError(f"sample rates differ: {rate} vs {test_rate}")
    print(json.dumps(metrics(ref, test, FramingConfig.from_rate(rate))))
    return EXIT_OK


_COMMANDS = {"enhance": _cmd_enhance, "train-prior": _cmd_train, "compare": _cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (NumericError, DegenerateError, GeometryError) as exc:
        print(f"modkf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AudioFormatError, OSError) as exc:
        print(f"modkf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"modkf: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
