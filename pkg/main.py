#!/usr/bin/env python3
"""
main.py - Command-line entry point for the Fast Nystrom Attention toolkit.

  python main.py bench   --lengths 256,512 --impls exact,fna:64 --out b.csv
  python main.py errors  --n 128 --d 16 --heads 2 --s-list 8,16,32 --seeds 20 --out e.csv
  python main.py detect  --weights m.vitw --input x.npy --mode iterative --out r.json
  python main.py forward --weights m.vitw --input x.npy --override 3:fna:32 --out y.npy
  python main.py grid    --weights m.vitw --input x.npy --s 8 --out g.csv
  python main.py synth   --spec s.json --out m.vitw --input-out x.npy

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

import argparse
import logging
import sys

import config
import data_store

logger = logging.getLogger("main")


# =============================================================================
# ARGUMENT TYPES
# =============================================================================

def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("list is empty")
    return values


def _impl_list(text):
    from bench import parse_impl
    try:
        return [parse_impl(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _tokens(text):
    return frozenset(int(t) for t in text.split(",") if t.strip())


def parse_override(text):
    """
    Parse one --override value.

      L:standard | L:skip | L:fna[:s[:strategy]] | L:fna:reuse
      L:type1-mask:T | L:type1-sink:T | L:type2-mask:T | L:type2-sink:T

    T is a comma-separated token list. Returns (layer, kind, params) where
    params is a tuple of the remaining fields; the pattern size is only known
    once the input is loaded, see build_overrides.
    """
    parts = text.split(":")
    try:
        layer = int(parts[0])
    except ValueError:
        raise argparse.ArgumentTypeError(f"override {text!r} must start with a layer index")
    if len(parts) < 2:
        raise argparse.ArgumentTypeError(f"override {text!r} has no kind")
    kind, params = parts[1].lower(), tuple(parts[2:])
    try:
        if kind in ("standard", "skip") and not params:
            return layer, kind, params
        if kind == "fna":
            if params == ("reuse",):
                return layer, kind, params
            if len(params) <= 2:
                from nystrom import Strategy
                s = int(params[0]) if params else config.DEFAULT_SAMPLE_COUNT
                strategy = Strategy(params[1]) if len(params) > 1 else Strategy.FPS
                return layer, kind, (s, strategy)
        if kind in ("type1-mask", "type1-sink", "type2-mask", "type2-sink") and len(params) == 1:
            return layer, kind, (_tokens(params[0]),)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"override {text!r}: {e}")
    raise argparse.ArgumentTypeError(f"cannot parse override {text!r}")


def build_overrides(parsed, size):
    """Turn parse_override results into LayerOverride values for an (size)-token input."""
    from attention import MaskPattern, PatternMode
    from nystrom import SamplerSpec
    from vit_runtime import LayerOverride

    overrides = []
    for layer, kind, params in parsed:
        if kind == "standard":
            overrides.append(LayerOverride.standard(layer))
        elif kind == "skip":
            overrides.append(LayerOverride.skip(layer))
        elif kind == "fna" and params == ("reuse",):
            overrides.append(LayerOverride.fna(layer))
        elif kind == "fna":
            s, strategy = params
            overrides.append(LayerOverride.fna(layer, sampler=SamplerSpec(strategy, s)))
        else:
            kind_name, mode = kind.split("-")
            factory = MaskPattern.type_one if kind_name == "type1" else MaskPattern.type_two
            overrides.append(LayerOverride.masked(layer, factory(params[0], size), PatternMode(mode)))
    return overrides


# =============================================================================
# SUBCOMMANDS
# =============================================================================

def cmd_bench(args):
    from bench import bench_attention
    records = bench_attention(args.lengths, args.batch, args.impls, args.seed,
                              heads=args.heads, head_dim=args.head_dim,
                              trials=args.trials, warmups=args.warmups)
    data_store.write_records(records, args.out)


def cmd_errors(args):
    from bench import error_sweep
    from nystrom import Strategy

    seeds = range(args.seed_start, args.seed_start + args.seeds)
    records = error_sweep(args.n, args.d, args.heads, args.s_list, seeds, Strategy(args.strategy))
    data_store.write_records(records, args.out, columns=config.ERROR_SWEEP_COLUMNS)


def _load_model(args):
    from weights_file import load_weights
    return load_weights(args.weights), data_store.load_matrix(args.input)


def cmd_detect(args):
    from attention import PatternMode
    from sink_analysis import detect_sinks_iterative, detect_sinks_onepass
    from vit_runtime import TraceOptions, forward

    w, x0 = _load_model(args)
    if args.mode == "iterative":
        report = detect_sinks_iterative(x0, w, args.lm, args.ld, args.max_iters,
                                        PatternMode(args.pattern_mode))
        logger.info("Sinks: %s (converged=%s after %d iterations)",
                    report.sinks, report.converged, report.iterations)
        data_store.write_json(report.to_dict(), args.out)
        return
    if not 0 <= args.ld < w.num_layers:
        raise ValueError(f"ld={args.ld} outside [0, {w.num_layers})")
    capture = TraceOptions(block_outputs=False, attention_layers=frozenset({args.ld}))
    _, trace = forward(x0, w, capture=capture, stop_layer=args.ld + 1)
    sinks = sorted(detect_sinks_onepass(trace.attention[args.ld]))
    logger.info("Sinks at layer %d: %s", args.ld, sinks)
    data_store.write_json({"sinks": sinks, "ld": args.ld,
                           "cls_row": trace.attention[args.ld][0].tolist()}, args.out)


def cmd_forward(args):
    from sink_analysis import norm_frame, norm_trace
    from vit_runtime import TraceOptions, forward

    w, x0 = _load_model(args)
    overrides = build_overrides(args.override, x0.shape[0])
    capture = TraceOptions(block_outputs=True, attention_layers=frozenset(args.attention_layers or ()))
    out, trace = forward(x0, w, overrides, capture)
    if args.out:
        data_store.save_matrix(out, args.out)
    if args.trace_out:
        if args.trace_out.lower().endswith(".csv"):
            data_store.write_frame(norm_frame(norm_trace(trace)), args.trace_out)
        else:
            data_store.write_json(trace.to_dict(), args.trace_out)


def cmd_grid(args):
    from bench import grid_sweep
    from nystrom import Strategy

    w, x0 = _load_model(args)
    records = grid_sweep(x0, w, args.s, from_layer=args.from_layer, lm=args.lm, ld=args.ld,
                         strategy=Strategy(args.strategy), seed=args.seed)
    data_store.write_records(records, args.out)


def cmd_synth(args):
    from synthetic_model import SyntheticSpec, make_synthetic_input, make_synthetic_model
    from weights_file import save_weights

    spec = SyntheticSpec.from_dict(data_store.load_json(args.spec)) if args.spec else SyntheticSpec()
    data_store.ensure_output_dir(args.out)
    save_weights(make_synthetic_model(spec), args.out)
    if args.input_out:
        data_store.save_matrix(make_synthetic_input(spec), args.input_out)
    logger.info("Synthetic model: planted %s, lm=%d, ld=%d", list(spec.planted), spec.lm, spec.ld)


# =============================================================================
# PARSER
# =============================================================================

def build_parser():
    parser = argparse.ArgumentParser(prog="fna", description="Fast Nystrom Attention toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="DEBUG logging")
    parser.add_argument("--log-file", help="also append log lines to this file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="time exact / masked / FNA attention over sequence lengths")
    p.add_argument("--lengths", type=_int_list, default=config.BENCH_DEFAULT_LENGTHS)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--impls", type=_impl_list, default=_impl_list("exact,fna:64"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heads", type=int, default=config.BENCH_HEADS)
    p.add_argument("--head-dim", type=int, default=config.BENCH_HEAD_DIM)
    p.add_argument("--trials", type=int, default=config.BENCH_TRIALS)
    p.add_argument("--warmups", type=int, default=config.BENCH_WARMUPS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("errors", help="FNA approximation error across landmark counts")
    p.add_argument("--n", type=int, required=True, help="patch tokens (CLS is added)")
    p.add_argument("--d", type=int, required=True, help="head dimension")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--s-list", type=_int_list, required=True)
    p.add_argument("--seeds", type=int, default=1, help="number of seeds")
    p.add_argument("--seed-start", type=int, default=0)
    p.add_argument("--strategy", choices=["fps", "uniform", "segment-means", "kmeans"], default="fps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_errors)

    p = sub.add_parser("detect", help="find attention sinks")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--lm", type=int, default=config.DETECTION_LM)
    p.add_argument("--ld", type=int, default=config.DETECTION_LD)
    p.add_argument("--mode", choices=["one-pass", "iterative"], default="iterative")
    p.add_argument("--pattern-mode", choices=["mask", "sink"], default="mask")
    p.add_argument("--max-iters", type=int, default=config.DETECTION_MAX_ITERS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("forward", help="run the model with per-layer overrides")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--override", type=parse_override, action="append", default=[],
                   help="layer:kind[:params], repeatable")
    p.add_argument("--attention-layers", type=_int_list)
    p.add_argument("--trace-out")
    p.add_argument("--out")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("grid", help="output drift under all 27 landmark role policies")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--s", type=int, default=config.DEFAULT_SAMPLE_COUNT)
    p.add_argument("--lm", type=int, default=config.DETECTION_LM)
    p.add_argument("--ld", type=int, default=config.DETECTION_LD)
    p.add_argument("--from-layer", type=int)
    p.add_argument("--strategy", choices=["fps", "uniform", "segment-means", "kmeans"], default="fps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("synth", help="write a synthetic VITW model with planted sinks")
    p.add_argument("--spec", help="JSON file of SyntheticSpec fields")
    p.add_argument("--out", required=True)
    p.add_argument("--input-out", help="also write the matching input matrix")
    p.set_defaults(func=cmd_synth)
    return parser


def configure_logging(verbose=False, log_file=None):
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        data_store.ensure_output_dir(log_file)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=config.LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def cli_main(argv=None):
    """Parse argv, run one subcommand, and return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else config.EXIT_USAGE_ERROR

    configure_logging(args.verbose, args.log_file)
    from tensor_core import configure_threads
    configure_threads()

    try:
        args.func(args)
    except Exception as e:
        logger.error("%s failed: %s", args.command, e)
        logger.debug("traceback", exc_info=True)
        return config.EXIT_RUNTIME_ERROR
    return config.EXIT_OK


if __name__ == "__main__":
    sys.exit(cli_main())
