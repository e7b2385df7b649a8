"""``sdcodec {synth-data|train|encode|decode|separate|eval}``.

Exit codes: 0 success, 2 config error, 3 IO or format error, 4 numeric abort.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import dsp, mixing
from .errors import ConfigError, FormatError, NumericError, SDCodecError

log = logging.getLogger("sdcodec")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def parse_sources(text, available):
    """``"all"`` or a comma-separated subset of ``available``, returned in canonical order."""
    if text is None or text == "all":
        return list(available)
    picked = [s.strip() for s in text.split(",") if s.strip()]
    if not picked:
        raise ConfigError("empty source list", "--sources")
    unknown = [s for s in picked if s not in available]
    if unknown:
        raise ConfigError(f"{unknown} not among {list(available)}", "--sources")
    return [s for s in available if s in picked]


def cmd_synth_data(args):
    if args.n_items < 0:
        raise ConfigError("must be >= 0", "--n-items")
    if args.duration < 0.5:
        raise ConfigError("must be >= 0.5 s", "--duration")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.n_items):
        for k, s in enumerate(mixing.SOURCES):
            rng = np.random.default_rng([args.seed, i, k])
            w = mixing.synth_toy_source(s, args.duration, rng)
            name = f"{s}_{i:05d}.wav"
            dsp.write_wav(out / name, w, dsp.SAMPLE_RATE, "int16")
            entries.append(mixing.ManifestEntry(s, Path(name), len(w) / dsp.SAMPLE_RATE))
    manifest = out / "manifest.tsv"
    mixing.write_manifest(manifest, entries)
    print(manifest)
    return manifest


def cmd_train(args):
    from .config import load_config
    from .runner import run_training

    cfg = load_config(args.config)
    if args.steps is not None:
        cfg.train.total_steps = args.steps
        cfg.train.gamma = None
        cfg.validate()
    run_dir = args.run_dir or cfg.run_dir
    if not run_dir:
        raise ConfigError("no run directory given (--run-dir or run_dir in the config)", "run_dir")
    if args.stop_at is not None and args.stop_at < 1:
        raise ConfigError("must be >= 1", "--stop-at")
    state = run_training(cfg, run_dir, resume=args.resume, stop_at=args.stop_at)
    print(f"{run_dir}: step {state.step}")
    return run_dir


def _load(args):
    from .checkpoint import load_model

    return load_model(args.checkpoint)


def cmd_encode(args):
    from .bitstream import grid_from_quantized, pack_bitstream

    model = _load(args)
    sources = parse_sources(args.sources, model.cfg.sources)
    w, _ = dsp.read_wav(args.input, model.cfg.sample_rate)
    with torch.no_grad():
        x = torch.from_numpy(w)[None, None]
        q = model.quantize(model.encode(x), set(sources))
    data = pack_bitstream(grid_from_quantized(q.codes, model.cfg), model.cfg)
    Path(args.output).write_bytes(data)
    print(f"{args.output}: {len(data)} bytes, {len(sources)} source(s)")


def cmd_decode(args):
    from .bitstream import check_header, unpack_bitstream

    model = _load(args)
    grid, info = unpack_bitstream(Path(args.input).read_bytes(), model.cfg.sources)
    check_header(info, model.cfg)
    sources = parse_sources(args.sources, info["sources"])
    with torch.no_grad():
        codes = {s: torch.from_numpy(c)[None] for s, c in grid.codes.items()}
        y = model.decode(model.quantizer.from_codes(codes, sources))[0, 0].numpy()
    dsp.write_wav(args.output, y, model.cfg.sample_rate)
    print(f"{args.output}: {len(y)} samples from {'+'.join(sources)}")


def cmd_separate(args):
    from .evaluate import decode_all, separate_with_mask

    model = _load(args)
    w, _ = dsp.read_wav(args.input, model.cfg.sample_rate)
    decoded = decode_all(model, w)
    out = separate_with_mask(w, {s: decoded[s] for s in model.cfg.sources})
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s, y in out.items():
        dsp.write_wav(out_dir / f"{s}.wav", y, model.cfg.sample_rate)
    print(out_dir)


def cmd_eval(args):
    from .evaluate import EvalOptions, evaluate

    if args.oracle == (args.checkpoint is not None):
        raise ConfigError("give exactly one of --checkpoint or --oracle", "--checkpoint")
    if args.segment_s <= 0:
        raise ConfigError("must be positive", "--segment-s")
    opts = EvalOptions(segment_s=args.segment_s, seed=args.seed, oracle=args.oracle,
                       max_segments=args.max_segments)
    report = evaluate(args.checkpoint, args.manifest, opts)
    report.write(args.report)
    print(report.table())


def build_parser():
    p = argparse.ArgumentParser(prog="sdcodec", description="Source-disentangled neural audio codec.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a toy corpus of WAV stems plus a manifest")
    s.add_argument("out_dir")
    s.add_argument("--n-items", type=int, default=10, help="stems per source")
    s.add_argument("--duration", type=float, default=4.0, help="seconds per stem")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train from a config file")
    s.add_argument("config", help="YAML run config")
    s.add_argument("--run-dir", help="overrides run_dir in the config")
    s.add_argument("--steps", type=int, help="override train.total_steps")
    s.add_argument("--resume", action="store_true", help="continue from the newest checkpoint")
    s.add_argument("--stop-at", type=int, help="stop (and checkpoint) after this step")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("encode", help="WAV -> SDC1 bitstream")
    s.add_argument("checkpoint")
    s.add_argument("input", help="mono WAV at the model's sample rate")
    s.add_argument("output", help="bitstream path")
    s.add_argument("--sources", default="all", help="comma-separated source quantizers to code, or 'all'")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="SDC1 bitstream -> WAV")
    s.add_argument("checkpoint")
    s.add_argument("input", help="bitstream path")
    s.add_argument("output", help="WAV path")
    s.add_argument("--sources", default="all", help="subset of the coded sources to sum and decode, or 'all'")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("separate", help="mask-based separation of a mixture WAV")
    s.add_argument("checkpoint")
    s.add_argument("input", help="mixture WAV")
    s.add_argument("out_dir", help="receives one WAV per source")
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("eval", help="resynthesis and separation report over a manifest")
    s.add_argument("manifest")
    s.add_argument("report", help="output report path (JSON lines)")
    s.add_argument("--checkpoint")
    s.add_argument("--oracle", action="store_true", help="score the true stems instead of a model")
    s.add_argument("--segment-s", type=float, default=2.0)
    s.add_argument("--max-segments", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SDCodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
