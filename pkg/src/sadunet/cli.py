"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 failed check.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .audio import WavFormatError, load_wav, save_wav
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .metrics import evaluate_track
from .model import describe, parameter_count
from .separate import UnsupportedOperationError, dump_attention, separate_track
from .synth import SynthSpec, SynthSpecError, gen_dataset
from .tensor import ContractError, ShapeError
from .train import train_from_manifest

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'window,subnet', got {text!r}") from None
    return a, b


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    spec = SynthSpec(duration_s=args.duration, pattern_period_s=args.period)
    manifest = gen_dataset(args.tracks, spec, args.out, args.seed)
    print(manifest)
    return EXIT_OK


def _run_config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def cmd_train(args) -> int:
    rc = _run_config(args)
    opts = rc.train
    opts.seed = args.seed
    if args.steps is not None:
        opts.steps = args.steps
    result = train_from_manifest(args.manifest, rc.model, opts, out_ckpt=args.out_ckpt,
                                 log_path=args.log, resume_path=args.resume)
    if result.losses:
        print(f"step {result.checkpoint.step} loss {result.losses[-1]:.6g}")
    return EXIT_OK


def cmd_separate(args) -> int:
    clip = load_wav(args.input)
    ckpt = load_checkpoint(args.ckpt)
    window = subnet = None
    if args.dump_attn:
        window, subnet = args.dump_attn
        blocks = ckpt.config.active_attn_blocks
        if not blocks:
            raise UnsupportedOperationError("checkpoint has no attention subnets")
        if not 0 <= subnet < len(blocks):
            raise UsageError(f"subnet index {subnet} out of range 0..{len(blocks) - 1}")
    try:
        result = separate_track(clip, ckpt, dump_window=window)
    except IndexError as exc:
        raise UsageError(str(exc)) from None
    save_wav(args.out_voice, result.voice)
    save_wav(args.out_accomp, result.accompaniment)
    if args.dump_attn:
        out = Path(args.attn_out or f"{Path(args.out_voice).with_suffix('')}_attn.csv")
        beta = result.attention[f"attn{ckpt.config.active_attn_blocks[subnet]}"]
        np.savetxt(out, beta, fmt="%.9g", delimiter=",")
    return EXIT_OK


def cmd_eval(args) -> int:
    clips = [load_wav(p) for p in (args.est_voice, args.est_accomp, args.ref_voice, args.ref_accomp)]
    report = evaluate_track(clips[:2], clips[2:], name=args.name or Path(args.ref_voice).stem)
    csv_text = report.to_csv()
    if args.out:
        Path(args.out).write_text(csv_text)
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    sys.stdout.write(csv_text)
    print(report.table(), file=sys.stderr if args.quiet_table else sys.stdout)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    report = run_suite(tiny=args.tiny)
    for r in report.results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:20s} max_rel_error={r.max_rel_error:.3e} tol={r.tolerance:g} "
              f"zero_grad={r.zero_grad_max:.1e} {r.seconds:.2f}s {status}")
    print(f"max relative error {report.max_rel_error:.3e}")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_dump_attention(args) -> int:
    clip = load_wav(args.input)
    ckpt = load_checkpoint(args.ckpt)
    try:
        beta = dump_attention(clip, ckpt, args.window, args.subnet, args.out)
    except IndexError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {beta.shape[0]}x{beta.shape[1]} attention map to {args.out}")
    return EXIT_OK


def cmd_describe(args) -> int:
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        cfg = ckpt.config
        stored = sum(int(a.size) for a in ckpt.params.values())
        if stored != parameter_count(cfg):
            print(f"checkpoint stores {stored} parameters, config implies {parameter_count(cfg)}", file=sys.stderr)
            return EXIT_DATA
    else:
        cfg = _run_config(args).model
    print(describe(cfg))
    return EXIT_OK


def cmd_dump_config(args) -> int:
    text = _run_config(args).dumps()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sadunet", description="Self-attention Dense-UNet voice/accompaniment separation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic corpus and its manifest")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--tracks", type=int, default=4)
    g.add_argument("--duration", type=float, default=SynthSpec.duration_s, help="seconds per track")
    g.add_argument("--period", type=float, default=SynthSpec.pattern_period_s,
                   help="accompaniment pattern period in seconds")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--config", help="key = value run configuration")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--steps", type=int, help="override the configured step count")
    t.add_argument("--log", help="CSV metrics log (step,loss,val_loss)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", help="separate a mixture WAV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out-voice", required=True)
    s.add_argument("--out-accomp", required=True)
    s.add_argument("--dump-attn", type=_pair, metavar="WINDOW,SUBNET",
                   help="also write one attention map (subnet counted from 0)")
    s.add_argument("--attn-out", help="CSV path for --dump-attn (default: next to the voice output)")
    s.set_defaults(func=cmd_separate)

    e = sub.add_parser("eval", help="SDR/SIR/SAR of estimates against references")
    e.add_argument("--est-voice", required=True)
    e.add_argument("--est-accomp", required=True)
    e.add_argument("--ref-voice", required=True)
    e.add_argument("--ref-accomp", required=True)
    e.add_argument("--name", help="track name in the report")
    e.add_argument("--out", help="also write the CSV here")
    e.add_argument("--json", help="also write a JSON report here")
    e.add_argument("--quiet-table", action="store_true", help="send the table to standard error")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--tiny", action="store_true", help="use the tiny end-to-end model")
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dump-attention", help="write one attention map as CSV")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--window", type=int, required=True)
    d.add_argument("--subnet", type=int, required=True, help="attention subnet, counted from 0")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_attention)

    ds = sub.add_parser("describe", help="print layer shapes and parameter count")
    src = ds.add_mutually_exclusive_group()
    src.add_argument("--config")
    src.add_argument("--ckpt")
    ds.set_defaults(func=cmd_describe)

    dc = sub.add_parser("dump-config", help="print the fully resolved run configuration")
    dc.add_argument("--config")
    dc.add_argument("--out")
    dc.set_defaults(func=cmd_dump_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sadunet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, WavFormatError, CheckpointError, ConfigError,
            SynthSpecError, ShapeError, ContractError, UnsupportedOperationError, ValueError) as exc:
        print(f"sadunet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
